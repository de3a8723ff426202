"""
Layer annotation parsing and receptive field geometry.

Networks are written as ``-`` separated layers::

    Conv(N,K,S)   convolution with N outputs, K x K kernel, stride S
    Pool(T,K,S)   MAX or AVE pooling, K x K window, stride S
    ReLU, Sig     elementwise activations

Keywords are case-insensitive and whitespace is ignored.
"""
import math
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from ._exceptions import ShapeError, SpecError

__all__ = [
    'DEFAULT_SPEC',
    'LayerSpec',
    'NetworkSpec',
    'LayerGeometry',
    'GeometryReport',
    'parse_spec',
    'format_spec',
    'receptive_field',
    'output_shape',
    'check_geometry',
]


DEFAULT_SPEC = (
    "Conv(32,7,1) - ReLU - Pool(MAX,2,2) - "
    "Conv(64,7,1) - ReLU - Pool(MAX,2,2) - "
    "Conv(128,3,1) - ReLU - Conv(128,3,1) - ReLU - "
    "Conv(64,3,1) - ReLU - Conv(16,3,1) - ReLU - "
    "Conv(1,1,1) - Sig"
)

CONV, POOL, RELU, SIG = 'Conv', 'Pool', 'ReLU', 'Sig'
MAX, AVE = 'MAX', 'AVE'

_token_re = re.compile(r'^(?P<kind>[A-Za-z]+)(?:\((?P<args>[^()]*)\))?$')
_keywords = {k.lower(): k for k in (CONV, POOL, RELU, SIG)}
_arity = {CONV: 3, POOL: 3, RELU: 0, SIG: 0}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    pool_type: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in _arity:
            raise SpecError(f"Unknown layer kind {self.kind!r}")
        if self.kind in (CONV, POOL):
            if self.kernel is None or self.kernel < 1:
                raise SpecError(f"{self.kind} kernel must be >= 1")
            if self.stride is None or self.stride < 1:
                raise SpecError(f"{self.kind} stride must be >= 1")
        if self.kind == CONV and (
            self.out_channels is None or self.out_channels < 1
        ):
            raise SpecError("Conv needs at least one output channel")
        if self.kind == POOL and self.pool_type not in (MAX, AVE):
            raise SpecError(
                f"Pool type must be MAX or AVE, got {self.pool_type!r}")

    @property
    def padding(self) -> int:
        # convolutions are padded to keep the spatial shape
        return self.kernel // 2 if self.kind == CONV else 0

    def __str__(self) -> str:
        if self.kind == CONV:
            return f"Conv({self.out_channels},{self.kernel},{self.stride})"
        if self.kind == POOL:
            return f"Pool({self.pool_type},{self.kernel},{self.stride})"
        return self.kind


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    input_channels: int = 1

    def __post_init__(self) -> None:
        if not self.layers:
            raise SpecError("A network needs at least one layer")
        if self.input_channels < 1:
            raise SpecError("input_channels must be >= 1")

    def __str__(self) -> str:
        return format_spec(self)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def conv_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == CONV]

    @property
    def output_channels(self) -> int:
        convs = self.conv_indices
        if not convs:
            return self.input_channels
        return self.layers[convs[-1]].out_channels  # type: ignore

    @property
    def ends_with_sigmoid(self) -> bool:
        return self.layers[-1].kind == SIG

    def channels_into(self, index: int) -> int:
        """Channel count flowing into layer ``index``.
        """
        channels = self.input_channels
        for layer in self.layers[:index]:
            if layer.kind == CONV:
                channels = layer.out_channels  # type: ignore
        return channels

    def with_input_channels(self, channels: int) -> 'NetworkSpec':
        return NetworkSpec(self.layers, channels)


def _parse_int(text: str, what: str, token: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise SpecError(f"Non-integer {what} {text!r} in {token!r}")


def _parse_layer(token: str) -> LayerSpec:
    match = _token_re.match(token)
    if not match:
        raise SpecError(f"Malformed layer {token!r}")
    kind = _keywords.get(match['kind'].lower())
    if kind is None:
        raise SpecError(f"Unknown keyword {match['kind']!r} in {token!r}")

    args = match['args'].split(',') if match['args'] else []
    if len(args) != _arity[kind]:
        raise SpecError(
            f"{kind} takes {_arity[kind]} arguments, got {len(args)} "
            f"in {token!r}")

    if kind == CONV:
        n, k, s = (_parse_int(a, 'field', token) for a in args)
        return LayerSpec(CONV, out_channels=n, kernel=k, stride=s)
    if kind == POOL:
        pool_type = args[0].upper()
        if pool_type not in (MAX, AVE):
            raise SpecError(f"Unknown pool type {args[0]!r} in {token!r}")
        k, s = (_parse_int(a, 'field', token) for a in args[1:])
        return LayerSpec(POOL, kernel=k, stride=s, pool_type=pool_type)
    return LayerSpec(kind)


def parse_spec(text: str, input_channels: int = 1) -> NetworkSpec:
    """Parse a layer annotation string.
    """
    compact = re.sub(r'\s+', '', text or '')
    if not compact:
        raise SpecError("Empty layer annotation")
    layers = tuple(_parse_layer(token) for token in compact.split('-'))
    return NetworkSpec(layers, input_channels)


def format_spec(spec: NetworkSpec) -> str:
    return ' - '.join(str(layer) for layer in spec.layers)


@dataclass(frozen=True)
class LayerGeometry:
    index: int
    layer: LayerSpec
    receptive_field: int
    jump: int
    padding: int
    # input coordinate of the field center of output cell 0
    center: float


@dataclass(frozen=True)
class GeometryReport:
    layers: Tuple[LayerGeometry, ...] = field(default_factory=tuple)

    @property
    def receptive_field(self) -> int:
        return self.layers[-1].receptive_field if self.layers else 1

    @property
    def stride(self) -> int:
        return self.layers[-1].jump if self.layers else 1

    @property
    def center(self) -> float:
        return self.layers[-1].center if self.layers else 0.0

    @property
    def field_offsets(self) -> Tuple[int, int]:
        """First and last input pixel seen by output cell 0.
        """
        half = (self.receptive_field - 1) / 2
        return int(round(self.center - half)), int(round(self.center + half))

    def interior(self, height: int, width: int) -> Tuple[slice, slice]:
        """Output cells whose whole receptive field lies inside an input of
        ``height x width``.
        """
        lo, hi = self.field_offsets
        jump = self.stride

        def span(size: int) -> slice:
            first = max(0, math.ceil(-lo / jump))
            last = (size - 1 - hi) // jump
            return slice(first, max(first, last + 1))

        return span(height), span(width)

    def table(self) -> str:
        rows = [f"{'#':>3}  {'layer':<16}{'R':>6}{'jump':>6}{'pad':>5}"]
        for g in self.layers:
            rows.append(
                f"{g.index:>3}  {str(g.layer):<16}{g.receptive_field:>6}"
                f"{g.jump:>6}{g.padding:>5}")
        rows.append(
            f"receptive field R={self.receptive_field}, "
            f"output stride={self.stride}")
        return '\n'.join(rows)


def check_geometry(spec: NetworkSpec) -> None:
    """Reject layers outside the square kernel, unit conv stride,
    non-overlapping pool geometry.
    """
    for i, layer in enumerate(spec.layers):
        if layer.kind == CONV:
            if layer.stride != 1:
                raise SpecError(
                    f"Layer {i} {layer}: convolution stride must be 1")
            if layer.kernel % 2 == 0:  # type: ignore
                raise SpecError(
                    f"Layer {i} {layer}: same padding needs an odd kernel")
        elif layer.kind == POOL and layer.kernel != layer.stride:
            raise SpecError(
                f"Layer {i} {layer}: pooling must be non-overlapping "
                f"(kernel == stride)")


def receptive_field(spec: NetworkSpec) -> GeometryReport:
    """Per layer cumulative receptive field, jump and field center.

    For every layer ``R <- R + (k - 1) * jump`` then ``jump <- jump * s``.
    """
    check_geometry(spec)
    rf, jump, center = 1, 1, 0.0
    layers = []
    for i, layer in enumerate(spec.layers):
        if layer.kind in (CONV, POOL):
            k, s = layer.kernel, layer.stride
            rf += (k - 1) * jump  # type: ignore
            center += ((k - 1) / 2 - layer.padding) * jump  # type: ignore
            jump *= s  # type: ignore
        layers.append(LayerGeometry(i, layer, rf, jump, layer.padding, center))
    return GeometryReport(tuple(layers))


def pooling_factor(spec: NetworkSpec) -> int:
    factor = 1
    for layer in spec.layers:
        if layer.kind == POOL:
            factor *= layer.stride  # type: ignore
    return factor


def output_shape(
    spec: NetworkSpec,
    input_shape: Tuple[int, int, int],
) -> Tuple[int, int, int]:
    check_geometry(spec)
    c, h, w = input_shape
    if c != spec.input_channels:
        raise ShapeError(
            f"Input has {c} channels, network expects {spec.input_channels}")
    factor = pooling_factor(spec)
    if h % factor or w % factor:
        raise ShapeError(
            f"Input size {h}x{w} must be divisible by the cumulative "
            f"pooling factor {factor}")
    return spec.output_channels, h // factor, w // factor


def scan_geometry(report: GeometryReport) -> Tuple[int, int]:
    """Smallest grid aligned patch that holds the full receptive field of
    one of its output cells, and that cell's index.
    """
    lo, hi = report.field_offsets
    jump = report.stride
    cell = max(0, math.ceil(-lo / jump))
    patch = math.ceil((jump * cell + hi + 1) / jump) * jump
    return patch, cell
