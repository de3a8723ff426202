"""
Synthetic crowd scenes, cue channels, polygon labels and dataset
persistence.
"""
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import msgpack
import numpy as np
from PIL import Image

from .log import get_logger, profiled
from ._exceptions import ConfigError, DataError, ShapeError
from ._fusion import CUES
from ._tensor import ConvParams, conv2d_forward
from ._training import Sample, TrainConfig, augment
from ._workers import run_in_workers


log = get_logger('scenedata')

TEXTURES = ('flat', 'stripes', 'blobs')
SPLITS = ('train', 'val', 'test')
# smallest frame side holding the reference receptive field on the label grid
MIN_FRAME = 56
_schema = 1

_sobel_x = np.array([[-1., 0., 1.], [-2., 0., 2.], [-1., 0., 1.]])
_edge_params = ConvParams(
    np.stack([_sobel_x, _sobel_x.T])[:, None], np.zeros(2))


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    height: int = 96
    width: int = 128
    frames: int = 10
    # expected pedestrians per 1000 pixels
    density: float = 1.0
    fraction_stationary: float = 0.3
    # pedestrian size ratio between the bottom and top rows
    perspective: float = 2.5
    texture: str = 'stripes'
    distractors: int = 2
    # uniform per-pixel noise amplitude
    noise: float = 0.02
    # horizontal pedestrian semi-axis at the bottom row, in pixels
    pedestrian_size: float = 5.0
    # static background patches spanning the pedestrian intensity range
    clutter: int = 8
    # RGB frames instead of grey ones
    color: bool = False
    # shared by every clip of one scene, defaults to ``seed``
    background_seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.frames < 2:
            raise ConfigError("A clip needs at least two frames")
        for name in ('height', 'width'):
            size = getattr(self, name)
            if size % 4 or size < MIN_FRAME:
                raise ConfigError(
                    f"{name} must be a multiple of 4 and >= {MIN_FRAME}, "
                    f"got {size}")
        if min(self.density, self.distractors, self.noise, self.clutter) < 0:
            raise ConfigError(
                "density, distractors, clutter and noise must be >= 0")
        if not 0 <= self.fraction_stationary <= 1:
            raise ConfigError("fraction_stationary must lie in [0, 1]")
        if self.perspective < 1:
            raise ConfigError("perspective must be >= 1")
        if self.texture not in TEXTURES:
            raise ConfigError(
                f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.pedestrian_size <= 0:
            raise ConfigError("pedestrian_size must be > 0")


@dataclass
class Agent:
    kind: str
    cy: float
    cx: float
    ry: float
    rx: float
    vy: float
    vx: float
    intensity: float
    # per channel gain of colored frames
    tint: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def center(self, offset: int) -> Tuple[float, float]:
        return self.cy + self.vy * offset, self.cx + self.vx * offset

    def support(
        self,
        yy: np.ndarray,
        xx: np.ndarray,
        offset: int,
    ) -> np.ndarray:
        cy, cx = self.center(offset)
        if self.kind == 'pedestrian':
            return ((yy - cy) / self.ry) ** 2 + ((xx - cx) / self.rx) ** 2 <= 1
        return (np.abs(yy - cy) <= self.ry) & (np.abs(xx - cx) <= self.rx)


@dataclass
class Clip:
    frames: List[np.ndarray]
    label_index: int
    mask: np.ndarray
    polygons: List[List[Tuple[float, float]]] = field(default_factory=list)
    agents: List[Agent] = field(default_factory=list)
    scene_id: int = 0
    edges: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not 0 <= self.label_index < len(self.frames):
            raise DataError(
                f"Label frame {self.label_index} outside {len(self.frames)} "
                f"frames")
        if self.mask.shape != (1,) + self.frames[0].shape[-2:]:
            raise ShapeError(
                f"Mask {self.mask.shape} does not match frames "
                f"{self.frames[0].shape}")

    @property
    def label_frame(self) -> np.ndarray:
        return self.frames[self.label_index]

    @property
    def channels(self) -> int:
        return self.frames[0].shape[0]

    @property
    def region_mask(self) -> np.ndarray:
        """The rough polygon label, falling back to the pixel mask.
        """
        if self.polygons:
            return rasterize_polygons(self.polygons, self.mask.shape[-2:])
        return self.mask


def _pixel_grid(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _gains(rng: np.random.Generator, config: SceneConfig) -> np.ndarray:
    # per channel multipliers, neutral for grey frames
    if config.color:
        return rng.uniform(0.6, 1.4, size=3)
    return np.ones(1)


def _background(
    config: SceneConfig,
    yy: np.ndarray,
    xx: np.ndarray,
) -> np.ndarray:
    seed = config.seed if config.background_seed is None else \
        config.background_seed
    rng = np.random.default_rng([seed, 1])
    base = rng.uniform(0.25, 0.45) + 0.1 * yy / config.height
    if config.texture == 'stripes':
        angle = rng.uniform(0, np.pi)
        period = rng.uniform(6, 16)
        phase = yy * np.sin(angle) + xx * np.cos(angle)
        base = base + 0.12 * np.sin(2 * np.pi * phase / period)
    elif config.texture == 'blobs':
        for _ in range(int(rng.integers(4, 9))):
            cy, cx = rng.uniform(0, config.height), rng.uniform(0, config.width)
            radius = rng.uniform(6, 20)
            base = base + rng.uniform(-0.15, 0.25) * np.exp(
                -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    img = base[None] * _gains(rng, config)[:, None, None]
    # static boxes as dark and as bright as any pedestrian
    for _ in range(config.clutter):
        cy, cx = rng.uniform(0, config.height), rng.uniform(0, config.width)
        ry, rx = rng.uniform(2, 8, size=2)
        value = rng.uniform(0.05, 0.9) * _gains(rng, config)
        inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[:, inside] = value[:, None]
    return img


def _octagon(agent: Agent, slack: float = 1.25) -> List[Tuple[float, float]]:
    # rough label polygon around a pedestrian, in (x, y) pixel coordinates
    angles = np.arange(8) * np.pi / 4
    return [
        (float(agent.cx + slack * agent.rx * np.cos(a)),
         float(agent.cy + slack * agent.ry * np.sin(a)))
        for a in angles
    ]


def _tint(rng: np.random.Generator, config: SceneConfig) -> List[float]:
    return [float(g) for g in _gains(rng, config)] if config.color \
        else [1.0, 1.0, 1.0]


def _spawn_agents(
    config: SceneConfig,
    rng: np.random.Generator,
) -> List[Agent]:
    h, w = config.height, config.width
    count = int(rng.poisson(config.density * h * w / 1000.0))
    stationary = int(round(config.fraction_stationary * count))
    agents = []
    for i in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        # smaller towards the top of the frame
        scale = 1 / config.perspective + (1 - 1 / config.perspective) * cy / h
        rx = config.pedestrian_size * scale
        vy = vx = 0.0
        if i >= stationary:
            speed = rng.uniform(0.6, 1.6) * scale
            heading = rng.uniform(0, 2 * np.pi)
            vy, vx = speed * np.sin(heading), speed * np.cos(heading)
        # darker or brighter than the background, never separable by level
        dark = rng.random() < 0.5
        intensity = rng.uniform(0.05, 0.3) if dark else rng.uniform(0.55, 0.9)
        agents.append(Agent(
            'pedestrian', cy, cx, 2 * rx, rx, vy, vx, float(intensity),
            _tint(rng, config)))
    for _ in range(config.distractors):
        ry, rx = rng.uniform(4, 8), rng.uniform(8, 16)
        agents.append(Agent(
            'distractor', rng.uniform(0, h), rng.uniform(0, w), ry, rx,
            0.0, float(rng.choice([-1, 1]) * rng.uniform(1.5, 3.0)),
            float(rng.uniform(0.05, 0.9)), _tint(rng, config)))
    return agents


def _render(
    config: SceneConfig,
    agents: Sequence[Agent],
    background: np.ndarray,
    offset: int,
    rng: np.random.Generator,
    yy: np.ndarray,
    xx: np.ndarray,
) -> np.ndarray:
    img = background.copy()
    channels = img.shape[0]
    # distractors first so pedestrians stay fully visible
    for agent in sorted(agents, key=lambda a: a.kind != 'distractor'):
        inside = agent.support(yy, xx, offset)
        gains = np.asarray(agent.tint) if channels == 3 else np.ones(1)
        value = agent.intensity * gains
        if agent.kind == 'pedestrian':
            cy, _ = agent.center(offset)
            texture = 0.08 * np.sin(2 * np.pi * (yy - cy) / max(agent.ry, 1))
            img[:, inside] = value[:, None] + texture[inside][None]
        else:
            img[:, inside] = value[:, None]
    if config.noise:
        img += rng.uniform(-config.noise, config.noise, size=img.shape)
    # 8-bit levels so frames survive a PGM/PPM round trip exactly
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255


def generate_clip(config: SceneConfig, scene_id: int = 0) -> Clip:
    """Render one clip of elliptical pedestrians plus moving distractors
    over a cluttered static background.
    """
    rng = np.random.default_rng([config.seed, 0])
    h, w = config.height, config.width
    yy, xx = _pixel_grid(h, w)
    background = _background(config, yy, xx)
    agents = _spawn_agents(config, rng)
    label_index = config.frames // 2

    frames = [
        _render(config, agents, background, f - label_index, rng, yy, xx)
        for f in range(config.frames)
    ]
    mask = np.zeros((h, w))
    pedestrians = [a for a in agents if a.kind == 'pedestrian']
    for agent in pedestrians:
        mask[agent.support(yy, xx, 0)] = 1.0
    return Clip(
        frames, label_index, mask[None],
        polygons=[_octagon(a) for a in pedestrians],
        agents=agents, scene_id=scene_id,
    )


def luminance(frame: np.ndarray) -> np.ndarray:
    "Single channel view of a grey or RGB frame"
    frame = np.asarray(frame, dtype=np.float64)
    return frame if frame.shape[0] == 1 else frame.mean(axis=0, keepdims=True)


def motion_channel(clip: Clip, index: Optional[int] = None) -> np.ndarray:
    """Frame minus the clip's per-pixel mean frame, unthresholded.
    """
    index = clip.label_index if index is None else index
    frames = np.stack([luminance(f) for f in clip.frames])
    # differences from the first frame keep identical frames exactly zero
    delta = frames - frames[0]
    return delta[index] - delta.mean(axis=0)


def edge_channel(frame: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude scaled to [0, 1] by the frame maximum.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3 or frame.shape[0] != 1:
        raise ShapeError(f"Expected a single channel frame, got {frame.shape}")
    padded = np.pad(frame, ((0, 0), (1, 1), (1, 1)), mode='edge')
    gx, gy = conv2d_forward(padded, _edge_params)
    magnitude = np.sqrt(gx ** 2 + gy ** 2)[None]
    # round-off of the kernel sums on flat regions is not an edge
    magnitude[magnitude <= 1e-9 * np.abs(frame).max()] = 0.0
    peak = magnitude.max()
    return magnitude / peak if peak > 0 else np.zeros_like(magnitude)


def rasterize_polygons(
    polygons: Sequence[Sequence[Tuple[float, float]]],
    size: Tuple[int, int],
) -> np.ndarray:
    """Binary mask of pixels whose center lies inside any polygon
    (even-odd rule).
    """
    h, w = size
    yy, xx = _pixel_grid(h, w)
    mask = np.zeros((h, w), dtype=bool)
    for polygon in polygons:
        if len(polygon) < 3:
            raise DataError(
                f"A polygon needs at least 3 vertices, got {len(polygon)}")
        inside = np.zeros((h, w), dtype=bool)
        pts = [(float(x), float(y)) for x, y in polygon]
        for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1]):
            if y1 == y2:
                continue
            crosses = (y1 > yy) != (y2 > yy)
            at = (x2 - x1) * (yy - y1) / (y2 - y1) + x1
            inside ^= crosses & (xx < at)
        mask |= inside
    return mask[None].astype(np.float64)


def cue_width(cue: str, channels: int = 1) -> int:
    "Input channels one cue contributes for frames with ``channels`` planes"
    if cue not in CUES:
        raise ConfigError(f"Unknown cue {cue!r}, expected one of {CUES}")
    return channels if cue == 'appearance' else 1


def cue_stack(
    clip: Clip,
    cues: Sequence[str] = CUES,
) -> np.ndarray:
    """Stack the requested cue channels of the clip's label frame.
    Appearance keeps every frame channel, motion and structure are
    computed on luminance.
    """
    channels = []
    for cue in cues:
        cue_width(cue)
        if cue == 'appearance':
            channels.append(clip.label_frame)
        elif cue == 'motion':
            channels.append(motion_channel(clip))
        else:
            channels.append(
                clip.edges if clip.edges is not None
                else edge_channel(luminance(clip.label_frame)))
    return np.concatenate(channels, axis=0)


def cue_samples(
    clips: Sequence[Clip],
    config: TrainConfig,
    cues: Sequence[str] = CUES,
) -> Dict[str, List[Sample]]:
    """Augmented training samples per cue, aligned crop for crop.
    """
    if not clips:
        raise DataError("No clips to sample from")
    depth = clips[0].channels
    if any(c.channels != depth for c in clips):
        raise DataError("Clips mix grey and colored frames")
    rng = np.random.default_rng([config.seed, 2])
    stacked: List[Sample] = []
    for clip in clips:
        stacked.extend(augment(cue_stack(clip, cues), clip.region_mask,
                               config, rng))
    samples, start = {}, 0
    for cue in cues:
        stop = start + cue_width(cue, depth)
        samples[cue] = [Sample(s.inputs[start:stop], s.label) for s in stacked]
        start = stop
    return samples


@dataclass
class ClipEntry:
    scene: int
    clip: int
    split: str
    frames: List[str]
    label_frame: int
    label_kind: str
    label: str
    agents: str
    edges: Optional[str] = None


@dataclass
class SceneManifest:
    root: str
    seed: int
    frame_size: Tuple[int, int]
    entries: List[ClipEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        tags: Dict[int, str] = {}
        for e in self.entries:
            if tags.setdefault(e.scene, e.split) != e.split:
                raise DataError(f"Scene {e.scene} appears in several splits")

    def scenes(self, split: str) -> List[int]:
        return sorted({e.scene for e in self.entries if e.split == split})

    def split(self, split: str) -> List[ClipEntry]:
        return [e for e in self.entries if e.split == split]

    def to_json(self) -> Dict:
        return {
            'schema': _schema,
            'seed': self.seed,
            'frame_size': list(self.frame_size),
            'clips': [asdict(e) for e in self.entries],
        }

    def save(self, path: Optional[str] = None) -> str:
        path = path or os.path.join(self.root, 'manifest.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write('\n')
        return path


def load_manifest(path: str) -> SceneManifest:
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
        if data['schema'] != _schema:
            raise DataError(f"Manifest schema {data['schema']} unsupported")
        return SceneManifest(
            os.path.dirname(os.path.abspath(path)), data['seed'],
            tuple(data['frame_size']),
            [ClipEntry(**e) for e in data['clips']],
        )
    except (KeyError, TypeError, json.JSONDecodeError) as err:
        raise DataError(f"Invalid manifest {path}: {err}")


def write_pgm(path: str, values: np.ndarray) -> None:
    """Write a [0, 1] single channel map as an 8-bit binary PGM.
    """
    values = np.asarray(values, dtype=np.float64).reshape(
        np.shape(values)[-2:])
    pixels = np.round(np.clip(values, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(pixels, mode='L').save(path)


def read_pgm(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert('L'), dtype=np.float64)[None] / 255


def write_frame(path: str, frame: np.ndarray) -> None:
    """Write a (1, H, W) frame as PGM or a (3, H, W) frame as binary PPM.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3 and frame.shape[0] == 3:
        pixels = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels.transpose(1, 2, 0), mode='RGB').save(path)
    else:
        write_pgm(path, frame)


def read_frame(path: str) -> np.ndarray:
    "A grey image as (1, H, W), anything else as (3, H, W) RGB"
    with Image.open(path) as img:
        if img.mode in ('1', 'L', 'I', 'F'):
            return np.asarray(img.convert('L'), dtype=np.float64)[None] / 255
        pixels = np.asarray(img.convert('RGB'), dtype=np.float64)
    return pixels.transpose(2, 0, 1) / 255


def _agent_records(agents: Sequence[Agent]) -> bytes:
    return msgpack.packb([asdict(a) for a in agents], use_bin_type=True)


def read_agents(path: str) -> List[Agent]:
    with open(path, 'rb') as f:
        return [Agent(**a) for a in msgpack.unpackb(f.read(), raw=False)]


def write_clip(clip: Clip, root: str, scene: int, index: int,
               split: str) -> ClipEntry:
    rel = os.path.join(f'scene_{scene:03d}', f'clip_{index:03d}')
    directory = os.path.join(root, rel)
    os.makedirs(directory, exist_ok=True)
    frames = []
    ext = 'ppm' if clip.channels == 3 else 'pgm'
    for f, frame in enumerate(clip.frames):
        name = os.path.join(rel, f'frame_{f:02d}.{ext}')
        write_frame(os.path.join(root, name), frame)
        frames.append(name)
    if split == 'test':
        kind, label = 'mask', os.path.join(rel, 'mask.pgm')
        write_pgm(os.path.join(root, label), clip.mask)
    else:
        kind, label = 'polygons', os.path.join(rel, 'polygons.json')
        with open(os.path.join(root, label), 'w', encoding='utf-8') as f:
            json.dump(clip.polygons, f)
    agents = os.path.join(rel, 'agents.msgpack')
    with open(os.path.join(root, agents), 'wb') as f:
        f.write(_agent_records(clip.agents))
    return ClipEntry(
        scene, index, split, frames, clip.label_index, kind, label, agents)


def load_clip(manifest: SceneManifest, entry: ClipEntry) -> Clip:
    root = manifest.root
    frames = [read_frame(os.path.join(root, p)) for p in entry.frames]
    polygons: List[List[Tuple[float, float]]] = []
    if entry.label_kind == 'mask':
        mask = (read_pgm(os.path.join(root, entry.label)) > 0.5).astype(
            np.float64)
    elif entry.label_kind == 'polygons':
        with open(os.path.join(root, entry.label), encoding='utf-8') as f:
            polygons = [[tuple(v) for v in poly] for poly in json.load(f)]
        mask = rasterize_polygons(polygons, frames[0].shape[-2:])
    else:
        raise DataError(f"Unknown label kind {entry.label_kind!r}")
    edges = read_pgm(os.path.join(root, entry.edges)) if entry.edges else None
    return Clip(
        frames, entry.label_frame, mask, polygons,
        read_agents(os.path.join(root, entry.agents)), entry.scene, edges,
    )


def _split_counts(n: int, ratios: Mapping[str, float]) -> Dict[str, int]:
    tags = [t for t in SPLITS if t in ratios]
    unknown = set(ratios) - set(SPLITS)
    if unknown or not tags:
        raise ConfigError(f"Split tags must come from {SPLITS}, got {ratios}")
    if any(r < 0 for r in ratios.values()) or sum(ratios.values()) <= 0:
        raise ConfigError(f"Split ratios must be non-negative: {ratios}")
    total = sum(ratios.values())
    counts, used = {}, 0
    for tag in tags[:-1]:
        counts[tag] = min(n - used, int(round(n * ratios[tag] / total)))
        used += counts[tag]
    counts[tags[-1]] = n - used
    return counts


def scene_config(base: SceneConfig, seed: int, scene: int) -> SceneConfig:
    """Per-scene appearance drawn from the dataset seed.
    """
    rng = np.random.default_rng([seed, scene, 3])
    return replace(
        base,
        texture=TEXTURES[int(rng.integers(len(TEXTURES)))],
        perspective=float(rng.uniform(1.5, 3.5)),
        density=float(base.density * rng.uniform(0.5, 1.5)),
        fraction_stationary=float(rng.uniform(0.2, 0.8)),
        background_seed=int(rng.integers(2 ** 31)),
    )


def _make_clip(job) -> ClipEntry:
    root, scene, index, config, split = job
    return write_clip(generate_clip(config, scene), root, scene, index, split)


@profiled
def build_dataset(
    root: str,
    n_scenes: int,
    clips_per_scene: int,
    split: Mapping[str, float],
    seed: int = 0,
    base: SceneConfig = SceneConfig(),
    workers: Optional[int] = None,
) -> SceneManifest:
    """Generate scene-disjoint splits of clips on disk plus a manifest.
    """
    if n_scenes < 1 or clips_per_scene < 1:
        raise ConfigError("Need at least one scene and one clip per scene")
    counts = _split_counts(n_scenes, split)
    order = np.random.default_rng([seed, 4]).permutation(n_scenes)
    tags: Dict[int, str] = {}
    pos = 0
    for tag, count in counts.items():
        for scene in order[pos:pos + count]:
            tags[int(scene)] = tag
        pos += count

    jobs = []
    for scene in range(n_scenes):
        config = scene_config(base, seed, scene)
        for index in range(clips_per_scene):
            clip_seed = int(np.random.default_rng(
                [seed, scene, index]).integers(2 ** 31))
            jobs.append((
                root, scene, index, replace(config, seed=clip_seed),
                tags[scene]))

    os.makedirs(root, exist_ok=True)
    entries = run_in_workers(_make_clip, jobs, limit=workers)
    manifest = SceneManifest(
        os.path.abspath(root), seed, (base.height, base.width), entries)
    manifest.save()
    log.info(
        f"Wrote {len(entries)} clips from {n_scenes} scenes "
        f"({', '.join(f'{t}={c}' for t, c in counts.items())}) to {root}")
    return manifest
