"""
Multi-cue fusion: input, feature and decision schemes plus the
cascaded branch-by-branch training schedule.
"""
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .log import get_logger, profiled
from ._exceptions import (
    CheckpointError, ConfigError, DataError, ShapeError, SpecError,
)
from ._checkpoint import load_checkpoint, save_checkpoint
from ._network import (
    ConvGrads, Gradients, Network, Trace, init_conv, init_network,
)
from ._training import (
    LossLog, Sample, TrainConfig, stack_batch, train_branch,
)
from . import _tensor as tc
from ._tensor import ConvParams
from .netspec import (
    DEFAULT_SPEC, RELU, NetworkSpec, parse_spec, pooling_factor,
)


log = get_logger('fusion')

CUES = ('appearance', 'motion', 'structure')
INPUT, FEATURE, DECISION = 'input', 'feature', 'decision'
SCHEMES = (INPUT, FEATURE, DECISION)
GLOBAL_STAGE = 'global'
_manifest_name = 'fusion.json'
_schema = 1


def build_input_fusion(
    channel_counts: Union[Mapping[str, int], Sequence[int]],
    spec: str = DEFAULT_SPEC,
    seed: int = 0,
) -> Network:
    """A single network fed with all cues stacked as channels.
    """
    counts = list(channel_counts.values()) if isinstance(
        channel_counts, Mapping) else list(channel_counts)
    if not counts or any(c < 1 for c in counts):
        raise ConfigError(f"Invalid cue channel counts {counts}")
    return init_network(parse_spec(spec, sum(counts)), seed)


def tap_layer(spec: NetworkSpec) -> int:
    """Number of layers run by a branch to reach its last pre-decision
    fusion features (the conv before the final one, after its ReLU).
    """
    convs = spec.conv_indices
    if len(convs) < 2:
        raise SpecError(f"'{spec}' has no fusion layer before its decision")
    index = convs[-2]
    follows = spec.layers[index + 1].kind if index + 1 < len(spec) else None
    return index + 2 if follows == RELU else index + 1


@dataclass
class FusionTrace:
    branches: Dict[str, Optional[Trace]] = field(default_factory=dict)
    head_input: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None


class MultiBranchNetwork:
    """Cue branches joined by a 1x1 conv head (or an average).
    """
    def __init__(
        self,
        branches: Mapping[str, Network],
        scheme: str,
        head: Optional[ConvParams] = None,
        average: bool = False,
        seed: int = 0,
    ) -> None:
        if scheme not in (FEATURE, DECISION):
            raise ConfigError(
                f"Multi-branch scheme must be {FEATURE!r} or {DECISION!r}, "
                f"got {scheme!r}")
        if not branches:
            raise ConfigError("At least one branch is required")
        factors = {pooling_factor(b.spec) for b in branches.values()}
        if len(factors) != 1:
            raise ShapeError(
                f"Branches disagree on output geometry (pooling {factors})")
        self.branches: Dict[str, Network] = dict(branches)
        self.scheme = scheme
        self.average = average and scheme == DECISION
        self.seed = seed
        self.active: List[str] = list(self.branches)
        self.head_frozen = False
        self.stage_order: List[str] = []

        if self.average:
            self.head = None
        else:
            if head is None:
                head = init_conv(
                    1, self.head_width, 1, np.random.default_rng(seed))
            if head.weights.shape != (1, self.head_width, 1, 1):
                raise ShapeError(
                    f"Head expects {self.head_width} input channels, got "
                    f"filters {head.weights.shape}")
            self.head = head

    def __repr__(self) -> str:
        kind = 'average' if self.average else 'learned'
        return (
            f"MultiBranchNetwork({self.scheme}, {kind}, "
            f"active={self.active})")

    @property
    def names(self) -> List[str]:
        return list(self.branches)

    @property
    def input_channels(self) -> int:
        return sum(b.input_channels for b in self.branches.values())

    def _upto(self, net: Network) -> Optional[int]:
        return tap_layer(net.spec) if self.scheme == FEATURE else None

    def branch_width(self, name: str) -> int:
        net = self.branches[name]
        if self.scheme == FEATURE:
            return net.spec.channels_into(tap_layer(net.spec))
        return net.spec.output_channels

    @property
    def head_width(self) -> int:
        return sum(self.branch_width(name) for name in self.branches)

    @property
    def frozen(self) -> List[bool]:
        return [all(b.frozen_mask()) for b in self.branches.values()]

    def param_list(self) -> List[ConvParams]:
        params = [p for b in self.branches.values() for p in b.param_list()]
        return params + ([self.head] if self.head is not None else [])

    def frozen_mask(self) -> List[bool]:
        mask = [f for b in self.branches.values() for f in b.frozen_mask()]
        return mask + ([self.head_frozen] if self.head is not None else [])

    def freeze_branch(self, name: str, frozen: bool = True) -> None:
        self.branches[name].freeze(None, frozen)

    def set_active(self, names: Sequence[str]) -> None:
        unknown = set(names) - set(self.branches)
        if unknown:
            raise ConfigError(f"Unknown branches {sorted(unknown)}")
        self.active = [n for n in self.branches if n in names]

    def split(self, x: tc.Tensor) -> Dict[str, np.ndarray]:
        parts = tc.slice_channels(
            x, [b.input_channels for b in self.branches.values()])
        return dict(zip(self.branches, parts))

    def checksum(self, name: Optional[str] = None) -> str:
        if name is not None:
            return self.branches[name].checksum()
        digest = hashlib.sha256()
        for b in self.branches.values():
            digest.update(b.checksum().encode())
        if self.head is not None:
            digest.update(self.head.weights.tobytes())
            digest.update(self.head.bias.tobytes())
        return digest.hexdigest()

    def branch_outputs(self, x: tc.Tensor) -> Dict[str, np.ndarray]:
        """Each active branch's own decision map.
        """
        parts = self.split(tc.as_tensor(x))
        return {
            name: self.branches[name].predict(parts[name])
            for name in self.active
        }

    def forward(
        self,
        x: tc.Tensor,
        keep_activations: bool = False,
    ):
        parts = self.split(tc.as_tensor(x))
        trace = FusionTrace() if keep_activations else None
        features, shape = [], None
        for name, net in self.branches.items():
            if name not in self.active:
                features.append(None)
                continue
            out, branch_trace = net.forward(
                parts[name], keep_activations, upto=self._upto(net))
            features.append(out)
            shape = out.shape
            if trace is not None:
                trace.branches[name] = branch_trace
        if shape is None:
            raise ConfigError("No active branch to run")
        # inactive branches contribute zeros
        z = tc.concat_channels([
            f if f is not None else np.zeros(
                shape[:-3] + (self.branch_width(name),) + shape[-2:])
            for name, f in zip(self.branches, features)
        ])
        if self.head is None:
            active = [i for i, n in enumerate(self.branches)
                      if n in self.active]
            out = z[..., active, :, :].mean(axis=-3, keepdims=True)
        else:
            out = tc.sigmoid(tc.conv2d_forward(z, self.head))
        if trace is not None:
            trace.head_input, trace.output = z, out
        return out, trace

    def predict(self, x: tc.Tensor) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, trace: FusionTrace, grad_output: tc.Tensor) -> Gradients:
        if trace is None or trace.head_input is None:
            raise ConfigError(
                "backward needs the trace of forward(keep_activations=True)")
        z, g = trace.head_input, np.asarray(grad_output, dtype=np.float64)
        head_grads: List[Optional[ConvGrads]] = []
        if self.head is None:
            active = [i for i, n in enumerate(self.branches)
                      if n in self.active]
            gz = np.zeros(z.shape)
            gz[..., active, :, :] = g / len(active)
        else:
            gh = tc.sigmoid_backward(trace.output, g)
            gz, gw, gb = tc.conv2d_backward(z, self.head, gh)
            head_grads = [None if self.head_frozen else ConvGrads(gw, gb)]

        widths = [self.branch_width(n) for n in self.branches]
        params: List[Optional[ConvGrads]] = []
        for (name, net), gpart in zip(
            self.branches.items(), tc.slice_channels(gz, widths)
        ):
            count = len(net.param_list())
            if name not in self.active or all(net.frozen_mask()):
                params.extend([None] * count)
                continue
            params.extend(net.backward(trace.branches[name], gpart).params)
        return Gradients(params + head_grads)

    def copy(self) -> 'MultiBranchNetwork':
        other = MultiBranchNetwork(
            {n: b.copy() for n, b in self.branches.items()}, self.scheme,
            self.head.copy() if self.head is not None else None,
            self.average, self.seed)
        other.active = list(self.active)
        other.head_frozen = self.head_frozen
        other.stage_order = list(self.stage_order)
        return other


def _ordered(branches: Mapping[str, Network]) -> Dict[str, Network]:
    known = [n for n in CUES if n in branches]
    return {n: branches[n] for n in known + [
        n for n in branches if n not in CUES]}


def build_feature_fusion(
    branches: Mapping[str, Network],
    seed: int = 0,
) -> MultiBranchNetwork:
    """Join branches at their last pre-decision fusion features.
    """
    return MultiBranchNetwork(_ordered(branches), FEATURE, seed=seed)


def build_decision_fusion(
    branches: Mapping[str, Network],
    seed: int = 0,
    average: bool = False,
) -> MultiBranchNetwork:
    """Join branches at their sigmoid decision maps.
    """
    return MultiBranchNetwork(
        _ordered(branches), DECISION, average=average, seed=seed)


def assemble_fusion_samples(
    datasets: Mapping[str, Sequence[Sample]],
    names: Sequence[str],
) -> List[Sample]:
    """Zip aligned per-cue sample lists into stacked multi-cue samples.
    """
    missing = [n for n in names if n not in datasets or not datasets[n]]
    if missing:
        raise DataError(f"Missing cue datasets: {missing}")
    sizes = {len(datasets[n]) for n in names}
    if len(sizes) != 1:
        raise DataError(f"Cue datasets differ in length: {sizes}")
    samples = []
    for parts in zip(*(datasets[n] for n in names)):
        label = parts[0].label
        if any(not np.array_equal(p.label, label) for p in parts[1:]):
            raise DataError("Cue datasets are not aligned (labels differ)")
        samples.append(Sample(
            tc.concat_channels([p.inputs for p in parts]), label))
    return samples


def hard_samples(
    net: Network,
    samples: Sequence[Sample],
    band: float,
    batch_size: int = 8,
) -> List[int]:
    """Indices of samples whose mean output of ``net`` lies within
    ``band`` of 0.5.
    """
    hard = []
    for start in range(0, len(samples), batch_size):
        x, _ = stack_batch(samples[start:start + batch_size])
        margin = np.abs(net.predict(x) - 0.5).mean(axis=(1, 2, 3))
        hard.extend(start + int(i) for i in np.flatnonzero(margin < band))
    return hard


@profiled
def multistage_train(
    mbn: MultiBranchNetwork,
    datasets: Mapping[str, Sequence[Sample]],
    config: TrainConfig,
    loss_log: Optional[LossLog] = None,
) -> MultiBranchNetwork:
    """Cascade: each new branch trains with earlier branches frozen,
    then everything is fine-tuned together.
    """
    samples = assemble_fusion_samples(datasets, mbn.names)
    loss_log = loss_log if loss_log is not None else LossLog()
    names = mbn.names
    band = config.hard_sample_band
    for k, name in enumerate(names[1:], 1):
        stage_samples = samples
        if k == 1 and band is not None:
            keep = hard_samples(mbn.branches[names[0]], datasets[names[0]],
                                band, config.batch_size)
            if keep:
                log.info(f"Stage {name}: {len(keep)} of {len(samples)} "
                         f"samples within {band} of 0.5 for {names[0]}")
                stage_samples = [samples[i] for i in keep]
            else:
                log.warning(f"No sample within {band} of 0.5 for "
                            f"{names[0]}, training {name} on all samples")
        frozen = names[:k]
        before = {n: mbn.checksum(n) for n in frozen}
        mbn.set_active(names[:k + 1])
        for n in names:
            mbn.freeze_branch(n, n in frozen)
        log.info(f"Stage {name}: training {name} with {frozen} frozen")
        train_branch(mbn, stage_samples, config, stage=f'fusion-{name}',
                     loss_log=loss_log)
        changed = [n for n in frozen if mbn.checksum(n) != before[n]]
        if changed:
            raise RuntimeError(f"Frozen branches {changed} were modified")
        mbn.stage_order.append(name)

    mbn.set_active(names)
    for n in names:
        mbn.freeze_branch(n, False)
    log.info("Stage global: fine-tuning every branch")
    finetune = config.finetune_iterations
    train_branch(
        mbn, samples, config, stage=f'fusion-{GLOBAL_STAGE}',
        loss_log=loss_log,
        iterations=config.iterations if finetune is None else finetune,
    )
    mbn.stage_order.append(GLOBAL_STAGE)
    return mbn


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def save_fusion(
    mbn: MultiBranchNetwork,
    directory: str,
    seed: Optional[int] = None,
) -> str:
    """Write one checkpoint per branch, the head and a manifest tying
    them together; returns the manifest path.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, net in mbn.branches.items():
        path = os.path.join(directory, f'{name}.ckpt')
        save_checkpoint(net, path)
        entries.append({
            'name': name, 'file': f'{name}.ckpt', 'sha256': _sha256(path)})
    head = None
    if mbn.head is not None:
        path = os.path.join(directory, 'head.ckpt')
        holder = Network(
            parse_spec('Conv(1,1,1) - Sig', mbn.head_width), [mbn.head],
            seed=mbn.seed)
        save_checkpoint(holder, path)
        head = {'file': 'head.ckpt', 'sha256': _sha256(path)}
    manifest = {
        'schema': _schema,
        'scheme': mbn.scheme,
        'average': mbn.average,
        'seed': mbn.seed if seed is None else seed,
        'branches': entries,
        'head': head,
        'active': mbn.active,
        'stage_order': mbn.stage_order,
    }
    path = os.path.join(directory, _manifest_name)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    log.info(f"Saved {mbn} to {directory}")
    return path


def load_fusion(path: str) -> MultiBranchNetwork:
    """Load from a fusion directory or its manifest file.
    """
    directory = path if os.path.isdir(path) else os.path.dirname(path)
    manifest_path = os.path.join(directory, _manifest_name)
    try:
        with open(manifest_path, encoding='utf-8') as f:
            manifest = json.load(f)
        if manifest['schema'] != _schema:
            raise CheckpointError(
                f"Fusion manifest schema {manifest['schema']} unsupported")

        def checked(entry) -> Network:
            file = os.path.join(directory, entry['file'])
            if _sha256(file) != entry['sha256']:
                raise CheckpointError(f"Hash mismatch for {file}")
            return load_checkpoint(file)

        branches = {e['name']: checked(e) for e in manifest['branches']}
        head = checked(manifest['head']).params[0] if manifest[
            'head'] else None
        mbn = MultiBranchNetwork(
            branches, manifest['scheme'], head, manifest['average'],
            manifest['seed'])
        mbn.set_active(manifest['active'])
        mbn.stage_order = list(manifest['stage_order'])
    except (KeyError, TypeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"Invalid fusion manifest {manifest_path}: {err}")
    return mbn


def is_fusion_dir(path: str) -> bool:
    return os.path.isfile(os.path.join(
        path if os.path.isdir(path) else os.path.dirname(path),
        _manifest_name))
