"""
Trainable layer stacks built from a ``NetworkSpec``.
"""
import hashlib
from dataclasses import dataclass, field
from typing import Any, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .log import get_logger
from ._exceptions import FcnnError, ShapeError
from . import _tensor as tc
from ._tensor import ConvParams, Tensor
from .netspec import (
    CONV, MAX, POOL, RELU, SIG,
    NetworkSpec, check_geometry, output_shape, parse_spec,
)


log = get_logger('network')


@dataclass
class ConvGrads:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class Gradients:
    """Parameter gradients per conv layer (``None`` for frozen layers)
    plus the gradient w.r.t. the network input.
    """
    params: List[Optional[ConvGrads]]
    input: Optional[np.ndarray] = None


@dataclass
class Trace:
    """Layer inputs and auxiliaries kept by ``forward`` for ``backward``.
    """
    inputs: List[np.ndarray] = field(default_factory=list)
    # pool index for max pools, the output for sigmoids
    aux: List[Any] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.inputs)


class Network:
    """An ordered stack of layers with learnable conv parameters.
    """
    def __init__(
        self,
        spec: NetworkSpec,
        params: Sequence[ConvParams],
        frozen: Optional[Sequence[bool]] = None,
        seed: int = 0,
    ) -> None:
        check_geometry(spec)
        convs = spec.conv_indices
        if len(params) != len(convs):
            raise ShapeError(
                f"{spec} has {len(convs)} conv layers but {len(params)} "
                f"parameter sets were given")
        for index, p in zip(convs, params):
            layer = spec.layers[index]
            expect = (
                layer.out_channels, spec.channels_into(index),
                layer.kernel, layer.kernel,
            )
            if p.weights.shape != expect:
                raise ShapeError(
                    f"Layer {index} {layer} expects filters {expect}, got "
                    f"{p.weights.shape}")
        self.spec = spec
        self.params: List[ConvParams] = list(params)
        self.frozen: List[bool] = list(frozen) if frozen is not None else [
            False] * len(spec.layers)
        if len(self.frozen) != len(spec.layers):
            raise ShapeError("One freeze flag per layer is required")
        self.seed = seed
        self._param_of = {layer: i for i, layer in enumerate(convs)}

    def __repr__(self) -> str:
        return (
            f"Network('{self.spec}', in={self.spec.input_channels}, "
            f"seed={self.seed})")

    @property
    def input_channels(self) -> int:
        return self.spec.input_channels

    def param_list(self) -> List[ConvParams]:
        return self.params

    def frozen_mask(self) -> List[bool]:
        """Freeze flags aligned with ``param_list()``.
        """
        return [self.frozen[i] for i in self.spec.conv_indices]

    def freeze(
        self,
        layers: Optional[Iterable[int]] = None,
        frozen: bool = True,
    ) -> 'Network':
        for i in range(len(self.spec.layers)) if layers is None else layers:
            self.frozen[i] = frozen
        return self

    def copy(self) -> 'Network':
        return Network(
            self.spec, [p.copy() for p in self.params], self.frozen,
            self.seed)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.params:
            digest.update(p.weights.tobytes())
            digest.update(p.bias.tobytes())
        return digest.hexdigest()

    def forward(
        self,
        x: Tensor,
        keep_activations: bool = False,
        upto: Optional[int] = None,
    ) -> Tuple[Tensor, Optional[Trace]]:
        """Run layers ``[0, upto)`` (all by default) on ``x``.

        The returned trace is ``None`` unless ``keep_activations`` is set.
        """
        x = tc.as_tensor(x)
        output_shape(self.spec, x.shape[-3:])
        layers = self.spec.layers[:upto]
        trace = Trace() if keep_activations else None
        for i, layer in enumerate(layers):
            aux = None
            if layer.kind == CONV:
                out = tc.conv2d_forward(x, self.params[self._param_of[i]])
            elif layer.kind == POOL:
                if layer.pool_type == MAX:
                    out, aux = tc.maxpool_forward(
                        x, layer.kernel, layer.stride)
                else:
                    out = tc.avgpool_forward(x, layer.kernel, layer.stride)
            elif layer.kind == RELU:
                out = tc.relu(x)
            else:
                out = aux = tc.sigmoid(x)
            if trace is not None:
                trace.inputs.append(x)
                trace.aux.append(aux)
            x = out
        return x, trace

    def predict(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]

    def backward(
        self,
        trace: Optional[Trace],
        grad_output: Tensor,
    ) -> Gradients:
        """Reverse-mode pass through the layers recorded in ``trace``.
        """
        if trace is None or not trace.inputs:
            raise FcnnError(
                "backward needs the trace of forward(keep_activations=True)")
        g = np.asarray(grad_output, dtype=np.float64)
        grads: List[Optional[ConvGrads]] = [None] * len(self.params)
        for i in reversed(range(trace.depth)):
            layer = self.spec.layers[i]
            x, aux = trace.inputs[i], trace.aux[i]
            if layer.kind == CONV:
                index = self._param_of[i]
                g, gw, gb = tc.conv2d_backward(x, self.params[index], g)
                if not self.frozen[i]:
                    grads[index] = ConvGrads(gw, gb)
            elif layer.kind == POOL:
                if layer.pool_type == MAX:
                    g = tc.maxpool_backward(aux, g)
                else:
                    g = tc.avgpool_backward(
                        x.shape, layer.kernel, layer.stride, g)
            elif layer.kind == RELU:
                g = tc.relu_backward(x, g)
            elif layer.kind == SIG:
                g = tc.sigmoid_backward(aux, g)
        return Gradients(grads, g)


def init_conv(
    out_channels: int,
    in_channels: int,
    kernel: int,
    rng: np.random.Generator,
) -> ConvParams:
    """Uniform fan-based init in ``[-a, a]``, zero biases.
    """
    fan_in = in_channels * kernel * kernel
    fan_out = out_channels * kernel * kernel
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    weights = rng.uniform(
        -bound, bound, size=(out_channels, in_channels, kernel, kernel))
    return ConvParams.same(weights, np.zeros(out_channels))


def init_network(spec: NetworkSpec, seed: int = 0) -> Network:
    rng = np.random.default_rng(seed)
    params = [
        init_conv(
            spec.layers[i].out_channels,  # type: ignore
            spec.channels_into(i),
            spec.layers[i].kernel,  # type: ignore
            rng,
        )
        for i in spec.conv_indices
    ]
    if not spec.ends_with_sigmoid:
        log.warning(f"'{spec}' does not end with Sig, outputs are unbounded")
    return Network(spec, params, seed=seed)


def build_network(
    text: str,
    input_channels: int = 1,
    seed: int = 0,
) -> Network:
    return init_network(parse_spec(text, input_channels), seed)


def fc_as_conv(
    weights: np.ndarray,
    input_shape: Tuple[int, int, int],
    bias: Optional[np.ndarray] = None,
) -> ConvParams:
    """Express a fully-connected layer as a convolution.

    Each weight row becomes one ``H x W`` filter, so correlating an
    exactly ``H x W`` input yields the matrix-vector product at the
    single output position.
    """
    weights = np.asarray(weights, dtype=np.float64)
    c, h, w = input_shape
    if weights.ndim != 2 or weights.shape[1] != c * h * w:
        raise ShapeError(
            f"Weight matrix {weights.shape} does not match an input of "
            f"{c}x{h}x{w} = {c * h * w} values")
    k = weights.shape[0]
    if bias is None:
        bias = np.zeros(k)
    return ConvParams(weights.reshape(k, c, h, w), bias, stride=1, padding=0)
