"""
``fcnn`` command line entry point.
"""
import argparse
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from . import log as _log
from .log import get_console_log, get_logger
from ._checkpoint import checkpoint_header, load_checkpoint, save_checkpoint
from ._evalbench import (
    OUTPUT, PIXEL, PREDICTORS, benchmark, evaluate, model_predictor,
    overlay_image, write_auc_json, write_benchmark_csv, write_roc_csv,
)
from ._exceptions import ConfigError, DataError, FcnnError, format_error
from ._fusion import (
    CUES, DECISION, FEATURE, INPUT, SCHEMES, assemble_fusion_samples,
    build_decision_fusion, build_feature_fusion, is_fusion_dir, load_fusion,
    multistage_train, save_fusion,
)
from ._network import Network, init_network
from ._scenedata import (
    SPLITS, Clip, SceneConfig, build_dataset, cue_samples, cue_stack,
    cue_width, load_clip, load_manifest, read_frame, write_pgm,
)
from ._state import is_deterministic, set_deterministic, worker_limit
from ._training import LossLog, TrainConfig, layerwise_pretrain
from .netspec import DEFAULT_SPEC, parse_spec, receptive_field


log = get_logger('cli')

COMMANDS = ('gen-data', 'train', 'infer', 'eval', 'bench', 'rf')


@dataclass
class RunConfig:
    """Settings shared by every subcommand.
    """
    command: str
    out: Optional[str] = None
    manifest: Optional[str] = None
    spec: str = DEFAULT_SPEC
    checkpoints: Dict[str, str] = field(default_factory=dict)
    # TrainConfig fields, ``None`` keeps the default
    overrides: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"Unknown command {self.command!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'RunConfig':
        return cls(
            command=args.command,
            out=getattr(args, 'out', None),
            manifest=getattr(args, 'manifest', None),
            spec=getattr(args, 'spec', None) or DEFAULT_SPEC,
            checkpoints=parse_checkpoints(getattr(args, 'checkpoint', None)),
            overrides={
                'learning_rate': getattr(args, 'lr', None),
                'momentum': getattr(args, 'momentum', None),
                'iterations': getattr(args, 'iters', None),
                'crop_size': getattr(args, 'crop', None),
                'crops_per_frame': getattr(args, 'crops_per_frame', None),
                'batch_size': getattr(args, 'batch_size', None),
                'hard_sample_band': getattr(args, 'hard_band', None),
            },
            seed=args.seed,
            deterministic=args.deterministic,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed).replace(**self.overrides)

    def output(self, *parts: str) -> str:
        if not self.out:
            raise ConfigError(f"{self.command} needs --out")
        os.makedirs(self.out, exist_ok=True)
        return os.path.join(self.out, *parts)

    def require_manifest(self):
        if not self.manifest:
            raise ConfigError(f"{self.command} needs --manifest")
        return load_manifest(self.manifest)


def parse_checkpoints(values: Optional[Sequence[str]]) -> Dict[str, str]:
    """``NAME=PATH`` pairs; a bare path is stored under ``model``.
    """
    checkpoints: Dict[str, str] = {}
    for value in values or ():
        name, sep, path = value.partition('=')
        if not sep:
            name, path = 'model', value
        if not name or not path:
            raise ConfigError(f"Malformed --checkpoint {value!r}")
        checkpoints[name] = path
    return checkpoints


def parse_split(text: str) -> Dict[str, float]:
    """``0.8`` means 80% train / 20% test, otherwise ``train=..,test=..``.
    """
    try:
        if '=' not in text:
            ratio = float(text)
            if not 0 < ratio <= 1:
                raise ConfigError(f"Split ratio must lie in (0, 1], got {text}")
            return {'train': ratio, 'test': 1.0 - ratio}
        pairs = (item.split('=') for item in text.split(','))
        return {tag.strip(): float(value) for tag, value in pairs}
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"Malformed --split {text!r}: {err}")


def parse_sizes(text: str) -> List[Tuple[int, int]]:
    sizes = []
    for item in text.split(','):
        h, sep, w = item.strip().lower().partition('x')
        try:
            sizes.append((int(h), int(w or h)))
        except ValueError:
            raise ConfigError(f"Malformed size {item!r}, expected HxW")
    return sizes


def load_model(path: str) -> Tuple[Any, List[str]]:
    """A network or fusion model plus the cues it reads, in order.
    """
    if is_fusion_dir(path):
        mbn = load_fusion(path)
        return mbn, mbn.names
    net = load_checkpoint(path)
    extra = checkpoint_header(path).get('extra', {})
    cues = extra.get('cues') or list(CUES[:net.input_channels])
    widths = extra.get('channels') or [1] * len(cues)
    if len(widths) != len(cues) or sum(widths) != net.input_channels:
        raise DataError(
            f"{path} reads {net.input_channels} channels but lists cues "
            f"{cues} of widths {widths}")
    return net, list(cues)


def _split_clips(cfg: RunConfig, split: str) -> List[Clip]:
    manifest = cfg.require_manifest()
    clips = [load_clip(manifest, e) for e in manifest.split(split)]
    if not clips:
        raise DataError(f"Manifest {cfg.manifest} has no {split!r} clips")
    return clips


def cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> None:
    base = SceneConfig(height=args.height, width=args.width,
                       frames=args.frames, clutter=args.clutter,
                       color=args.color)
    manifest = build_dataset(
        cfg.output(), args.scenes, args.clips_per_scene,
        parse_split(args.split), cfg.seed, base, workers=worker_limit())
    counts = ' '.join(
        f"{tag}={len(manifest.scenes(tag))}" for tag in SPLITS
        if manifest.scenes(tag))
    print(f"scenes: {counts}")
    print(f"clips: {len(manifest.entries)}")
    print(f"manifest: {os.path.join(manifest.root, 'manifest.json')}")


def _report_losses(loss_log: LossLog) -> None:
    losses = loss_log.losses()
    if losses:
        print(f"loss: first {losses[0]:.6f} last {losses[-1]:.6f} "
              f"({len(losses)} iterations)")


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> None:
    config = cfg.train_config()
    scheme = args.scheme
    loss_log = LossLog()

    if scheme in (FEATURE, DECISION):
        # check the branches before loading any data
        missing = [c for c in CUES if c not in cfg.checkpoints]
        if missing:
            raise ConfigError(
                f"{scheme} fusion needs pre-trained branches, missing "
                f"--checkpoint for {', '.join(missing)}")
        branches = {c: load_checkpoint(cfg.checkpoints[c]) for c in CUES}
        build = build_feature_fusion if scheme == FEATURE else \
            build_decision_fusion
        mbn = build(branches, seed=cfg.seed)
        clips = _split_clips(cfg, 'train')
        multistage_train(mbn, cue_samples(clips, config, CUES), config,
                         loss_log)
        target = save_fusion(mbn, cfg.output(scheme), cfg.seed)
        name = scheme
    else:
        cues = list(CUES) if scheme == INPUT else [args.cue]
        name = INPUT if scheme == INPUT else args.cue
        clips = _split_clips(cfg, 'train')
        samples = assemble_fusion_samples(
            cue_samples(clips, config, cues), cues)
        widths = [cue_width(c, clips[0].channels) for c in cues]
        net = layerwise_pretrain(
            parse_spec(cfg.spec, sum(widths)), samples, config, loss_log,
            name=name)
        target = cfg.output(f'{name}.ckpt')
        save_checkpoint(net, target, extra={
            'cues': cues, 'channels': widths, 'seed': cfg.seed})

    loss_log.write_csv(cfg.output(f'{name}-loss.csv'), seed=cfg.seed)
    _report_losses(loss_log)
    print(f"saved: {target}")


def _single_checkpoint(cfg: RunConfig) -> str:
    if len(cfg.checkpoints) != 1:
        raise ConfigError(f"{cfg.command} needs exactly one --checkpoint")
    return next(iter(cfg.checkpoints.values()))


def cmd_infer(cfg: RunConfig, args: argparse.Namespace) -> None:
    model, cues = load_model(_single_checkpoint(cfg))
    inputs: List[Tuple[str, Any, Any]] = []
    if args.image:
        if cues != ['appearance']:
            raise ConfigError(
                f"A single image only feeds appearance models, this one "
                f"reads {cues}")
        for path in args.image:
            frame = read_frame(path)
            name = os.path.splitext(os.path.basename(path))[0]
            inputs.append((name, frame, frame))
    else:
        for clip in _split_clips(cfg, args.split):
            name = f"scene_{clip.scene_id:03d}_{len(inputs):03d}"
            inputs.append((name, clip.label_frame, cue_stack(clip, cues)))

    for name, frame, x in inputs:
        start = time.perf_counter()
        pred = model.predict(x)
        elapsed = time.perf_counter() - start
        write_pgm(cfg.output(f'{name}_prob.pgm'), pred)
        overlay_image(frame, pred, cfg.output(f'{name}_overlay.ppm'))
        h, w = frame.shape[-2:]
        print(f"{name}: {h}x{w} -> {pred.shape[-2]}x{pred.shape[-1]} "
              f"in {elapsed * 1000:.1f} ms")


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> None:
    if args.predictor == 'model':
        model, cues = load_model(_single_checkpoint(cfg))
        predictor = model_predictor(model, cues)
    else:
        predictor = PREDICTORS[args.predictor]
    report = evaluate(
        predictor, _split_clips(cfg, args.split), args.mode,
        workers=worker_limit())
    write_roc_csv(report.pooled, cfg.output('roc.csv'), seed=cfg.seed)
    write_auc_json(report, cfg.output('auc.json'), seed=cfg.seed,
                   predictor=args.predictor)
    print(f"AUC {report.auc:.4f} ({args.predictor}, {args.mode})")
    for scene, curve in report.per_scene.items():
        print(f"  scene {scene}: {curve.auc:.4f}")


def cmd_bench(cfg: RunConfig, args: argparse.Namespace) -> None:
    if cfg.checkpoints:
        net = load_checkpoint(_single_checkpoint(cfg))
    else:
        net = init_network(parse_spec(cfg.spec), cfg.seed)
    if not isinstance(net, Network):
        raise ConfigError("Benchmarks run on a single network checkpoint")
    rows = benchmark(net, parse_sizes(args.sizes), args.reps, args.batch,
                     seed=cfg.seed)
    write_benchmark_csv(rows, cfg.output('benchmark.csv'), seed=cfg.seed)
    for row in rows:
        print(f"{row.height}x{row.width} {row.mode}: {row.median_s:.4f}s "
              f"speedup {row.speedup:.1f}x")


def cmd_rf(cfg: RunConfig, args: argparse.Namespace) -> None:
    print(receptive_field(parse_spec(cfg.spec)).table())


HANDLERS: Dict[str, Callable[[RunConfig, argparse.Namespace], None]] = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'infer': cmd_infer,
    'eval': cmd_eval,
    'bench': cmd_bench,
    'rf': cmd_rf,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=0)
    common.add_argument(
        '--deterministic', action='store_true',
        help='single worker paths only')
    common.add_argument('--loglevel', '-l', default=None)
    common.add_argument('--out', default=None)
    common.add_argument('--spec', default=None,
                        help='layer annotation string')

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument('--manifest', default=None)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument(
        '--checkpoint', action='append', default=[],
        help='PATH, or NAME=PATH for fusion branches (repeatable)')

    parser = argparse.ArgumentParser(
        prog='fcnn', description='Fully convolutional crowd segmentation')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-data', parents=[common],
                         help='generate a synthetic scene dataset')
    gen.add_argument('--scenes', type=int, default=12)
    gen.add_argument('--clips-per-scene', type=int, default=2)
    gen.add_argument('--split', default='0.8')
    gen.add_argument('--height', type=int, default=96)
    gen.add_argument('--width', type=int, default=128)
    gen.add_argument('--frames', type=int, default=10)
    gen.add_argument('--clutter', type=int, default=8,
                     help='static background patches per scene')
    gen.add_argument('--color', action='store_true', help='RGB frames')

    train = sub.add_parser('train', parents=[common, data, model],
                           help='train a branch or a fusion model')
    train.add_argument('--cue', choices=CUES, default='appearance')
    train.add_argument('--scheme', choices=SCHEMES, default=None)
    train.add_argument('--lr', type=float, default=None)
    train.add_argument('--momentum', type=float, default=None)
    train.add_argument('--iters', type=int, default=None)
    train.add_argument('--crop', type=int, default=None)
    train.add_argument('--crops-per-frame', type=int, default=None)
    train.add_argument('--batch-size', type=int, default=None)
    train.add_argument(
        '--hard-band', type=float, default=None,
        help='first cascade stage only sees samples whose earlier branch '
             'output lies this close to 0.5')

    infer = sub.add_parser('infer', parents=[common, data, model],
                           help='segment frames')
    infer.add_argument('--split', default='test')
    infer.add_argument('--image', action='append', default=[],
                       help='PGM or PPM frame for appearance models '
                            '(repeatable)')

    ev = sub.add_parser('eval', parents=[common, data, model],
                        help='pixel level ROC / AUC')
    ev.add_argument('--split', default='test')
    ev.add_argument('--predictor', choices=('model', *PREDICTORS),
                    default='model')
    ev.add_argument('--mode', choices=(PIXEL, OUTPUT), default=PIXEL)

    bench = sub.add_parser('bench', parents=[common, model],
                           help='full frame vs patch scan timing')
    bench.add_argument('--sizes', default='112x112,224x224')
    bench.add_argument('--reps', type=int, default=3)
    bench.add_argument('--batch', type=int, default=1)

    sub.add_parser('rf', parents=[common],
                   help='receptive field table of a spec')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == 'gen-data' and (
        args.scenes < 1 or args.clips_per_scene < 1
    ):
        parser.error("--scenes and --clips-per-scene must be >= 1")

    if args.loglevel:
        _log._default_loglevel = args.loglevel
    get_console_log(args.loglevel)
    previous = is_deterministic()
    set_deterministic(args.deterministic or previous)
    try:
        cfg = RunConfig.from_args(args)
        HANDLERS[args.command](cfg, args)
    except (FcnnError, OSError) as err:
        log.debug(f"{args.command} failed", exc_info=True)
        print(format_error(err), file=sys.stderr)
        return 1
    finally:
        set_deterministic(previous)
    return 0
