"""
Random architectures and the perturbation footprint oracle for
receptive field checks.
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from .._network import Network
from .._tensor import ConvParams
from ..netspec import (
    AVE, CONV, MAX, POOL, RELU, SIG, LayerSpec, NetworkSpec,
)


def random_spec(
    rng: np.random.Generator,
    depth: Optional[int] = None,
    input_channels: int = 1,
    pools: int = 2,
    max_channels: int = 6,
) -> NetworkSpec:
    """A legal spec of ``depth`` conv-relu pairs with ``pools`` 2x2 pools
    spread between them, closed by a 1x1 conv and a sigmoid.
    """
    depth = int(rng.integers(2, 5)) if depth is None else depth
    pool_after = set(rng.choice(depth, size=min(pools, depth), replace=False))
    layers = []
    for i in range(depth):
        layers.append(LayerSpec(
            CONV, out_channels=int(rng.integers(1, max_channels + 1)),
            kernel=int(rng.choice([1, 3, 5])), stride=1))
        layers.append(LayerSpec(RELU))
        if i in pool_after:
            layers.append(LayerSpec(
                POOL, kernel=2, stride=2,
                pool_type=str(rng.choice([MAX, AVE]))))
    layers += [LayerSpec(CONV, out_channels=1, kernel=1, stride=1),
               LayerSpec(SIG)]
    return NetworkSpec(tuple(layers), input_channels)


def slim_spec(spec: NetworkSpec, width: int = 2) -> NetworkSpec:
    """Same geometry with at most ``width`` channels per conv.
    """
    layers = tuple(
        LayerSpec(CONV, out_channels=min(layer.out_channels, width),
                  kernel=layer.kernel, stride=layer.stride)
        if layer.kind == CONV else layer
        for layer in spec.layers
    )
    return NetworkSpec(layers, spec.input_channels)


def positive_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Weights in ``[0.5, 1]`` and zero biases, so every in-field pixel
    raises the output and ReLUs never clip non-negative inputs.
    """
    rng = np.random.default_rng(seed)
    params = []
    for i in spec.conv_indices:
        layer = spec.layers[i]
        shape = (layer.out_channels, spec.channels_into(i),
                 layer.kernel, layer.kernel)
        params.append(ConvParams.same(
            rng.uniform(0.5, 1.0, size=shape), np.zeros(shape[0])))
    return Network(spec, params, seed=seed)


def footprint(
    net: Network,
    shape: Tuple[int, int, int],
    cell: Tuple[int, int],
    rng: np.random.Generator,
    bump: float = 1e8,
    batch: int = 128,
    pixels: Optional[Sequence[Tuple[int, int]]] = None,
) -> np.ndarray:
    """Boolean ``(H, W)`` map of input pixels whose perturbation changes
    the pre-sigmoid value of output ``cell``.

    Only ``pixels`` are probed when given, every pixel otherwise.
    """
    c, h, w = shape
    base = rng.random(shape)
    upto = len(net.spec) - 1 if net.spec.ends_with_sigmoid else None
    sy, sx = cell
    reference = net.forward(base, upto=upto)[0][0, sy, sx]

    if pixels is None:
        pixels = [(r, q) for r in range(h) for q in range(w)]
    hit = np.zeros((h, w), dtype=bool)
    for start in range(0, len(pixels), batch):
        chunk = pixels[start:start + batch]
        images = np.repeat(base[None], len(chunk), axis=0)
        for k, (r, q) in enumerate(chunk):
            images[k, :, r, q] += bump
        values = net.forward(images, upto=upto)[0][:, 0, sy, sx]
        changed = np.abs(values - reference) > 1e-10 * (1 + abs(reference))
        for (r, q), flag in zip(chunk, changed):
            hit[r, q] = flag
    return hit
