"""
Pixel level ROC / AUC evaluation, patch-by-patch scanning and the
full-frame vs. scan benchmark.
"""
import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .log import get_logger, profiled
from ._exceptions import EvaluationError, ShapeError, SpecError
from ._network import Network
from ._scenedata import Clip, cue_stack, luminance
from ._training import LABEL_POOLING, pool_labels
from . import _tensor as tc
from ._workers import run_in_workers
from .netspec import (
    output_shape, pooling_factor, receptive_field, scan_geometry,
)


log = get_logger('evalbench')

PIXEL, OUTPUT = 'pixel', 'output'
Predictor = Callable[[Clip], np.ndarray]


def upsample_prediction(pred: tc.Tensor, factor: int = LABEL_POOLING
                        ) -> np.ndarray:
    """Nearest neighbour replication of every cell into a
    ``factor x factor`` block.
    """
    if factor < 1:
        raise ShapeError(f"Upsampling factor must be >= 1, got {factor}")
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim < 2:
        raise ShapeError(f"Expected a 2D map or deeper, got {pred.shape}")
    return np.repeat(np.repeat(pred, factor, axis=-2), factor, axis=-1)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def __len__(self) -> int:
        return len(self.fpr)


def roc_auc(scores: Sequence[float], labels: Sequence[Any]) -> RocCurve:
    """ROC curve with one point per distinct score and its trapezoidal
    area; tied scores count half.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise EvaluationError(
            f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise EvaluationError("Labels must be binary")
    y = y.astype(np.int64)
    positives = int(y.sum())
    negatives = y.size - positives
    if positives == 0 or negatives == 0:
        raise EvaluationError(
            f"ROC needs both classes, got {positives} positive and "
            f"{negatives} negative samples")

    order = np.argsort(-s, kind='mergesort')
    s, y = s[order], y[order]
    # last position of every group of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.r_[0, np.cumsum(y)[ends]]
    fps = np.r_[0, ends + 1 - tps[1:]]
    # integer trapezoids, one division keeps the degenerate cases exact
    area = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    return RocCurve(
        fps / negatives, tps / positives,
        np.r_[np.inf, s[ends]],
        area / (2 * positives * negatives),
    )


def _scan_cell(net: Network, patch: Optional[int]) -> Tuple[int, int]:
    report = receptive_field(net.spec)
    jump = report.stride
    minimum, cell = scan_geometry(report)
    if patch is None:
        return minimum, cell
    lo, hi = report.field_offsets
    if patch % jump or jump * cell + hi > patch - 1:
        raise SpecError(
            f"Scan patch {patch} must be a multiple of {jump} holding the "
            f"{report.receptive_field} pixel receptive field; the minimum "
            f"is {minimum}")
    return patch, cell


def patch_scan(
    net: Network,
    image: tc.Tensor,
    patch: Optional[int] = None,
    stride: Optional[int] = None,
    batch: int = 1,
) -> np.ndarray:
    """Segment ``image`` one crop per output cell.

    Every crop comes from the zero padded image and is run through the
    whole network; only the output of the cell whose receptive field the
    crop fully holds is kept.
    """
    image = tc.as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"patch_scan takes one (C, H, W) image, got "
                         f"{image.shape}")
    out_c, out_h, out_w = output_shape(net.spec, image.shape)
    jump = pooling_factor(net.spec)
    stride = jump if stride is None else stride
    if stride < jump or stride % jump:
        raise SpecError(
            f"Scan stride must be a multiple of the output stride {jump}")
    patch, cell = _scan_cell(net, patch)
    step = stride // jump
    origin = jump * cell
    padded = np.pad(image, ((0, 0), (origin, patch), (origin, patch)))

    sites = [
        (sy, sx)
        for sy in range(0, out_h, step)
        for sx in range(0, out_w, step)
    ]
    values = np.empty((out_c, len(sites)))
    for start in range(0, len(sites), batch):
        chunk = sites[start:start + batch]
        crops = np.stack([
            padded[:, jump * sy:jump * sy + patch, jump * sx:jump * sx + patch]
            for sy, sx in chunk
        ])
        out = net.predict(crops)
        values[:, start:start + len(chunk)] = out[:, :, cell, cell].T
    rows = len(range(0, out_h, step))
    return values.reshape(out_c, rows, -1)


def interior_discrepancy(
    net: Network,
    image: tc.Tensor,
    scanned: Optional[np.ndarray] = None,
) -> float:
    """Largest gap between scan and full-frame outputs over the cells
    whose receptive field lies inside the image.
    """
    image = tc.as_tensor(image)
    full = net.predict(image)
    scanned = patch_scan(net, image) if scanned is None else scanned
    rows, cols = receptive_field(net.spec).interior(*image.shape[-2:])
    diff = np.abs(full[:, rows, cols] - scanned[:, rows, cols])
    return float(diff.max()) if diff.size else 0.0


@dataclass
class BenchRow:
    height: int
    width: int
    mode: str
    median_s: float
    speedup: float
    max_interior_discrepancy: float


def _median_time(fn: Callable[[], Any], repetitions: int) -> Tuple[float, Any]:
    times, result = [], None
    for _ in range(repetitions):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times), result


@profiled
def benchmark(
    net: Network,
    sizes: Sequence[Tuple[int, int]],
    repetitions: int = 3,
    batch: int = 1,
    seed: int = 0,
) -> List[BenchRow]:
    """Median full-frame and patch-scan runtimes per image size.

    Runs on the calling thread only.
    """
    if repetitions < 1:
        raise EvaluationError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    rows: List[BenchRow] = []
    for h, w in sizes:
        image = rng.random((net.input_channels, h, w))
        full_s, full = _median_time(lambda: net.predict(image), repetitions)
        scan_s, scanned = _median_time(
            lambda: patch_scan(net, image, batch=batch), repetitions)
        speedup = scan_s / full_s if full_s > 0 else math.inf
        gap = interior_discrepancy(net, image, scanned)
        log.info(
            f"{h}x{w}: full {full_s:.4f}s scan {scan_s:.4f}s "
            f"speedup {speedup:.1f}x discrepancy {gap:.2e}")
        rows.append(BenchRow(h, w, 'full', full_s, speedup, gap))
        rows.append(BenchRow(h, w, 'scan', scan_s, speedup, gap))
    return rows


def write_benchmark_csv(
    rows: Sequence[BenchRow],
    path: str,
    seed: Optional[int] = None,
) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow([
            'height', 'width', 'mode', 'median_s', 'speedup',
            'max_interior_discrepancy'])
        for r in rows:
            writer.writerow([
                r.height, r.width, r.mode, repr(r.median_s),
                repr(r.speedup), repr(r.max_interior_discrepancy)])


def model_predictor(model: Any, cues: Sequence[str]) -> Predictor:
    """Run ``model`` on the stacked ``cues`` of each clip.
    """
    def predict(clip: Clip) -> np.ndarray:
        return model.predict(cue_stack(clip, cues))
    return predict


def intensity_baseline(clip: Clip) -> np.ndarray:
    "Label frame brightness as the pedestrian score"
    return luminance(clip.label_frame)


def ideal_predictor(clip: Clip) -> np.ndarray:
    return clip.mask


PREDICTORS: Dict[str, Predictor] = {
    'intensity': intensity_baseline,
    'ideal': ideal_predictor,
}


def _scores_and_labels(
    prediction: np.ndarray,
    mask: np.ndarray,
    mode: str,
) -> Tuple[np.ndarray, np.ndarray]:
    prediction = np.asarray(prediction, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    full, pooled = mask.shape[-2:], pool_labels(mask).shape[-2:]
    size = prediction.shape[-2:]
    if size not in (full, pooled):
        raise ShapeError(
            f"Prediction {prediction.shape} fits neither the mask "
            f"{mask.shape} nor its output grid")
    if mode == PIXEL:
        if size == pooled:
            prediction = upsample_prediction(prediction)
        return prediction.ravel(), (mask >= 0.5).ravel()
    if mode == OUTPUT:
        if size == full:
            prediction = pool_labels(prediction)
        return prediction.ravel(), (pool_labels(mask) >= 0.5).ravel()
    raise EvaluationError(f"Unknown evaluation mode {mode!r}")


@dataclass
class EvaluationReport:
    mode: str
    pooled: RocCurve
    per_scene: Dict[int, RocCurve] = field(default_factory=dict)

    @property
    def auc(self) -> float:
        return self.pooled.auc


@profiled
def evaluate(
    predictor: Predictor,
    clips: Sequence[Clip],
    mode: str = PIXEL,
    workers: Optional[int] = None,
) -> EvaluationReport:
    """Pooled and per-scene ROC of ``predictor`` against pixel masks.
    """
    if not clips:
        raise EvaluationError("No clips to evaluate")
    if mode not in (PIXEL, OUTPUT):
        raise EvaluationError(f"Unknown evaluation mode {mode!r}")

    def score(clip: Clip) -> Tuple[np.ndarray, np.ndarray]:
        return _scores_and_labels(predictor(clip), clip.mask, mode)

    results = run_in_workers(score, clips, limit=workers)
    by_scene: Dict[int, List[Tuple[np.ndarray, np.ndarray]]] = {}
    for clip, result in zip(clips, results):
        by_scene.setdefault(clip.scene_id, []).append(result)

    per_scene = {}
    for scene, parts in sorted(by_scene.items()):
        s = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        try:
            per_scene[scene] = roc_auc(s, y)
        except EvaluationError as err:
            log.warning(f"Skipping scene {scene}: {err}")
    pooled = roc_auc(
        np.concatenate([r[0] for r in results]),
        np.concatenate([r[1] for r in results]),
    )
    log.info(f"Pooled {mode} AUC {pooled.auc:.4f} over {len(clips)} clips")
    return EvaluationReport(mode, pooled, per_scene)


def write_roc_csv(
    curve: RocCurve,
    path: str,
    seed: Optional[int] = None,
) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['fpr', 'tpr', 'threshold'])
        for row in zip(curve.fpr, curve.tpr, curve.thresholds):
            writer.writerow([repr(float(v)) for v in row])


def write_auc_json(
    report: EvaluationReport,
    path: str,
    seed: Optional[int] = None,
    predictor: str = 'model',
) -> None:
    data = {
        'schema': 1,
        'seed': seed,
        'predictor': predictor,
        'mode': report.mode,
        'pooled_auc': report.auc,
        'per_scene': {str(k): v.auc for k, v in report.per_scene.items()},
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def overlay_image(
    frame: tc.Tensor,
    prediction: tc.Tensor,
    path: Optional[str] = None,
    threshold: float = 0.5,
) -> np.ndarray:
    """Tint pixels predicted as crowd red over the grey or RGB frame;
    saved as a binary PPM when ``path`` is given.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise ShapeError(f"Expected a grey or RGB frame, got {frame.shape}")
    size = frame.shape[-2:]
    pred = np.asarray(prediction, dtype=np.float64)
    pred = pred.reshape(pred.shape[-2:])
    if pred.shape != size:
        pred = upsample_prediction(pred, size[0] // pred.shape[0])
    if pred.shape != size:
        raise ShapeError(
            f"Prediction {np.shape(prediction)} does not tile frame "
            f"{frame.shape}")
    rgb = np.repeat(frame, 3 // frame.shape[0], axis=0).transpose(1, 2, 0)
    hit = pred >= threshold
    rgb[hit] = 0.5 * rgb[hit] + np.array([0.5, 0.0, 0.0])
    pixels = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    if path is not None:
        Image.fromarray(pixels, mode='RGB').save(path, format='PPM')
    return pixels
