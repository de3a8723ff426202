"""
Loss, optimizer, augmentation and the layer-wise training schedule.
"""
import csv
import dataclasses
import zlib
from dataclasses import dataclass
from typing import (
    Any, Iterable, Iterator, List, Optional, Sequence, Tuple,
)

import numpy as np

from .log import get_logger, profiled
from ._exceptions import ConfigError, DataError, ShapeError, SpecError
from ._network import ConvGrads, Network, init_network
from ._state import stage_context
from . import _tensor as tc
from .netspec import CONV, POOL, RELU, SIG, NetworkSpec


log = get_logger('training')

# clamp for log arguments and the loss gradient denominator
EPSILON = 1e-7
# two 2x2 average pools
LABEL_POOLING = 4


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    iterations: int = 200
    seed: int = 0
    crop_size: int = 64
    crops_per_frame: int = 4
    flip_probability: float = 0.5
    # defaults to ``iterations``
    finetune_iterations: Optional[int] = None
    # first cascade stage keeps samples whose earlier branch output lies
    # within this distance of 0.5, all samples when ``None``
    hard_sample_band: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(
                f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(
                f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.iterations < 0 or self.seed < 0:
            raise ConfigError(
                "batch_size must be >= 1, iterations and seed >= 0")
        if self.crop_size < LABEL_POOLING or self.crop_size % LABEL_POOLING:
            raise ConfigError(
                f"crop_size must be a positive multiple of {LABEL_POOLING}, "
                f"got {self.crop_size}")
        if self.crops_per_frame < 1:
            raise ConfigError("crops_per_frame must be >= 1")
        if not 0 <= self.flip_probability <= 1:
            raise ConfigError("flip_probability must lie in [0, 1]")
        if self.finetune_iterations is not None and \
                self.finetune_iterations < 0:
            raise ConfigError("finetune_iterations must be >= 0")
        if self.hard_sample_band is not None and \
                not 0 < self.hard_sample_band <= 0.5:
            raise ConfigError(
                f"hard_sample_band must lie in (0, 0.5], "
                f"got {self.hard_sample_band}")

    @classmethod
    def full_scale(cls, **overrides) -> 'TrainConfig':
        """Full scale augmentation: ten 256 x 256 crops per frame.
        """
        return cls(crop_size=256, crops_per_frame=10).replace(**overrides)

    def replace(self, **overrides) -> 'TrainConfig':
        """Copy with every non-``None`` override applied.
        """
        changes = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **changes)


@dataclass
class Sample:
    inputs: np.ndarray
    label: np.ndarray

    def __post_init__(self) -> None:
        c, h, w = self.inputs.shape
        if h % LABEL_POOLING or w % LABEL_POOLING or self.label.shape != (
            1, h // LABEL_POOLING, w // LABEL_POOLING
        ):
            raise ShapeError(
                f"Label {self.label.shape} is not the pooled size of input "
                f"{self.inputs.shape}")


class LossLog:
    """Per iteration training losses, written as ``iter,stage,loss`` rows.
    """
    def __init__(self) -> None:
        self.rows: List[Tuple[int, str, float]] = []

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def next_iteration(self) -> int:
        return self.rows[-1][0] + 1 if self.rows else 0

    def record(self, stage: str, loss: float) -> None:
        self.rows.append((self.next_iteration, stage, float(loss)))

    def losses(self, stage: Optional[str] = None) -> List[float]:
        return [
            loss for _, name, loss in self.rows
            if stage is None or name == stage
        ]

    def stages(self) -> List[str]:
        seen: List[str] = []
        for _, name, _ in self.rows:
            if name not in seen:
                seen.append(name)
        return seen

    def write_csv(self, path: str, seed: Optional[int] = None) -> None:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            if seed is not None:
                f.write(f"# seed={seed}\n")
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['iter', 'stage', 'loss'])
            for iteration, stage, loss in self.rows:
                writer.writerow([iteration, stage, repr(loss)])


def cross_entropy_loss(
    output: tc.Tensor,
    label: tc.Tensor,
    eps: float = EPSILON,
) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all output neurons and its gradient
    w.r.t. the outputs.

    Composed with ``sigmoid_backward`` the gradient becomes
    ``(o - t) / N`` on the pre-activations.
    """
    o = np.asarray(output, dtype=np.float64)
    t = np.asarray(label, dtype=np.float64)
    if o.shape != t.shape:
        raise ShapeError(
            f"Output shape {o.shape} does not match label shape {t.shape}")
    n = o.size
    loss = -np.sum(
        t * np.log(np.maximum(o, eps))
        + (1.0 - t) * np.log(np.maximum(1.0 - o, eps))
    ) / n
    oc = np.clip(o, eps, 1.0 - eps)
    grad = (oc - t) / (n * oc * (1.0 - oc))
    return float(loss), grad


def pool_labels(mask: tc.Tensor) -> np.ndarray:
    """Average-pool a mask twice with 2x2 windows.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[None]
    h, w = mask.shape[-2:]
    if h % LABEL_POOLING or w % LABEL_POOLING:
        raise ShapeError(
            f"Mask size {h}x{w} must be divisible by {LABEL_POOLING}")
    return tc.avgpool_forward(tc.avgpool_forward(mask, 2, 2), 2, 2)


def flip(x: np.ndarray) -> np.ndarray:
    "Horizontal flip"
    return np.ascontiguousarray(np.asarray(x)[..., ::-1])


def augment(
    channels: tc.Tensor,
    mask: tc.Tensor,
    config: TrainConfig,
    rng: np.random.Generator,
    force_flip: Optional[bool] = None,
) -> List[Sample]:
    """Random grid-aligned crops with horizontal flips.

    Every channel and the mask receive the same window and flip; crop
    origins are multiples of the label pooling factor.
    """
    channels = np.asarray(channels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[None]
    if channels.ndim != 3 or channels.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(
            f"Channels {channels.shape} and mask {mask.shape} disagree")
    h, w = channels.shape[-2:]
    size = config.crop_size
    if h < size or w < size:
        raise ShapeError(f"Frame {h}x{w} is smaller than crop {size}")

    samples = []
    for _ in range(config.crops_per_frame):
        y = int(rng.integers(0, (h - size) // LABEL_POOLING + 1)) * \
            LABEL_POOLING
        x = int(rng.integers(0, (w - size) // LABEL_POOLING + 1)) * \
            LABEL_POOLING
        flipped = rng.random() < config.flip_probability
        if force_flip is not None:
            flipped = force_flip
        crop = channels[:, y:y + size, x:x + size]
        crop_mask = mask[:, y:y + size, x:x + size]
        if flipped:
            crop, crop_mask = flip(crop), flip(crop_mask)
        samples.append(Sample(crop.copy(), pool_labels(crop_mask)))
    return samples


Velocity = List[Optional[Tuple[np.ndarray, np.ndarray]]]


def sgd_step(
    model: Any,
    grads: Sequence[Optional[ConvGrads]],
    velocity: Optional[Velocity],
    config: TrainConfig,
) -> Velocity:
    """Momentum SGD: ``v <- m * v - lr * g`` then ``p <- p + v``.

    Frozen parameter sets and absent gradients are skipped.
    """
    params = model.param_list()
    frozen = model.frozen_mask()
    if len(grads) != len(params):
        raise ShapeError(
            f"{len(grads)} gradients for {len(params)} parameter sets")
    if velocity is None:
        velocity = [None] * len(params)
    lr, m = config.learning_rate, config.momentum
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None or frozen[i]:
            continue
        vw, vb = velocity[i] or (
            np.zeros_like(p.weights), np.zeros_like(p.bias))
        vw = m * vw - lr * g.weights
        vb = m * vb - lr * g.bias
        p.weights += vw
        p.bias += vb
        velocity[i] = (vw, vb)
    return velocity


def stack_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([s.inputs for s in samples]),
        np.stack([s.label for s in samples]),
    )


def _batches(
    count: int,
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[np.ndarray]:
    # reshuffle once per pass over the data
    while True:
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            yield order[start:start + batch_size]


def mean_loss(model: Any, data: Sequence[Sample], batch_size: int = 8) -> float:
    """Average cross-entropy of ``model`` over ``data``.
    """
    if not data:
        raise DataError("No samples to evaluate")
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        x, t = stack_batch(chunk)
        loss, _ = cross_entropy_loss(model.forward(x)[0], t)
        total += loss * len(chunk)
        count += len(chunk)
    return total / count


def train_branch(
    model: Any,
    data: Sequence[Sample],
    config: TrainConfig,
    frozen: Optional[Iterable[int]] = None,
    stage: str = 'train',
    loss_log: Optional[LossLog] = None,
    iterations: Optional[int] = None,
) -> Any:
    """Train ``model`` in place with ``frozen`` layers held fixed.

    ``model`` is a ``Network`` or anything exposing the same
    forward/backward/param_list/frozen_mask surface.
    """
    if not data:
        raise DataError(f"Stage {stage!r} got no training samples")
    iterations = config.iterations if iterations is None else iterations
    loss_log = loss_log if loss_log is not None else LossLog()
    rng = np.random.default_rng(
        [config.seed, zlib.crc32(stage.encode('utf-8'))])

    restore = None
    if frozen is not None:
        restore = list(model.frozen)
        model.freeze(frozen)

    velocity: Optional[Velocity] = None
    batches = _batches(len(data), config.batch_size, rng)
    try:
        with stage_context(stage):
            log.info(f"Training {model} for {iterations} iterations")
            for _ in range(iterations):
                x, t = stack_batch([data[i] for i in next(batches)])
                out, trace = model.forward(x, keep_activations=True)
                loss, grad = cross_entropy_loss(out, t)
                grads = model.backward(trace, grad)
                velocity = sgd_step(model, grads.params, velocity, config)
                loss_log.record(stage, loss)
                log.debug(f"iter {loss_log.next_iteration - 1} loss {loss:.6f}")
            if iterations:
                log.info(f"Stage done, last loss {loss_log.rows[-1][2]:.6f}")
    finally:
        if restore is not None:
            model.frozen[:] = restore
    return model


def pretrain_stages(spec: NetworkSpec) -> List[NetworkSpec]:
    """Networks trained by successive layer-wise stages.

    The first holds the two conv-pool blocks and the last fusion
    layer; each next stage inserts one more conv (and its ReLU) in front
    of the last fusion layer.
    """
    kinds = [layer.kind for layer in spec.layers]
    prefix = [CONV, RELU, POOL, CONV, RELU, POOL]
    if kinds[:6] != prefix or kinds[-2:] != [CONV, SIG]:
        raise SpecError(
            f"Layer-wise pre-training needs two conv-relu-pool blocks "
            f"followed by conv-relu pairs and a final conv-sig, got '{spec}'")
    middle = spec.layers[6:-2]
    if len(middle) % 2 or any(
        (a.kind, b.kind) != (CONV, RELU)
        for a, b in zip(middle[::2], middle[1::2])
    ):
        raise SpecError(
            f"Layers between the pooling blocks and the final conv must be "
            f"conv-relu pairs in '{spec}'")
    head, tail = spec.layers[:6], spec.layers[-2:]
    return [
        NetworkSpec(head + middle[:2 * n] + tail, spec.input_channels)
        for n in range(len(middle) // 2 + 1)
    ]


def _grow(previous: Network, fresh: Network) -> Network:
    # keep every trained layer, the inserted conv starts fresh and the
    # final fusion layer is kept only if its fan-in did not change
    params = list(fresh.params)
    old = previous.params
    params[:len(old) - 1] = [p.copy() for p in old[:-1]]
    if old[-1].weights.shape == params[-1].weights.shape:
        params[-1] = old[-1].copy()
    return Network(fresh.spec, params, seed=fresh.seed)


@profiled
def layerwise_pretrain(
    spec: NetworkSpec,
    data: Sequence[Sample],
    config: TrainConfig,
    loss_log: Optional[LossLog] = None,
    name: str = 'pretrain',
) -> Network:
    """Grow the network one conv at a time, then fine-tune globally.
    """
    if not data:
        raise DataError("Layer-wise pre-training got no samples")
    loss_log = loss_log if loss_log is not None else LossLog()
    net: Optional[Network] = None
    stages = pretrain_stages(spec)
    for n, stage_spec in enumerate(stages, 1):
        fresh = init_network(stage_spec, seed=config.seed + n)
        net = fresh if net is None else _grow(net, fresh)
        log.info(f"{name} stage {n}/{len(stages)}: '{stage_spec}'")
        train_branch(
            net, data, config, stage=f'{name}-{n}', loss_log=loss_log)

    assert net is not None
    net.seed = config.seed
    finetune = config.finetune_iterations
    train_branch(
        net, data, config, stage=f'{name}-finetune', loss_log=loss_log,
        iterations=config.iterations if finetune is None else finetune,
    )
    return net
