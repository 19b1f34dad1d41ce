"""Minimal trainable single-class detector.

One anchor scale and aspect on a fixed grid; each anchor's descriptor is a
bilinearly resampled grayscale patch of its box, pushed through an affine
feature map feeding an objectness head and a box-regression head. Small
enough that every gradient is written by hand and checkable by finite
differences, yet the texture/luminance statistics of the two scene domains
still produce a measurable sim-to-real gap.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses
from .dataset import Dataset, Domain, Sample
from .geometry import BBox
from .losses import IGNORE, NEGATIVE, POSITIVE, LossBreakdown, sigmoid
from .sampling import Strategy, make_sampler
from .scenegen import Image

IOU_POSITIVE = 0.5
IOU_NEGATIVE = 0.3

DEFAULT_STRIDE = 32
DEFAULT_ANCHOR_W = 34.0
DEFAULT_ANCHOR_H = 52.0
DEFAULT_PATCH_SIZE = 16
DEFAULT_FEATURE_DIM = 32
# Decoded log-size offsets are clamped before exp to keep boxes finite.
MAX_LOG_SCALE = 6.0
# Centered gray values are faint (~0.1 contrast); scaling the descriptor
# keeps plain SGD at the stock learning rate from stalling.
PATCH_INPUT_SCALE = 16.0
# The descriptor window extends beyond the anchor box so box regression can
# see where the object ends even when it is larger than the anchor.
PATCH_CONTEXT = 2.0
# Hard-negative mining: each image contributes its positives plus the
# highest-scoring negatives at this ratio (with a floor so unlabeled images
# still train). The two-threshold assignment itself is untouched.
HARD_NEG_RATIO = 3
HARD_NEG_FLOOR = 6


class DetectorError(Exception):
    pass


class DivergedLoss(DetectorError):
    pass


@dataclass(frozen=True)
class AnchorGrid:
    """Single-scale anchor lattice covering the image plane."""

    stride: int
    anchor_w: float
    anchor_h: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if self.anchor_w <= 0 or self.anchor_h <= 0:
            raise ValueError("anchor dimensions must be positive")

    @property
    def nx(self) -> int:
        return math.ceil(self.image_width / self.stride)

    @property
    def ny(self) -> int:
        return math.ceil(self.image_height / self.stride)

    @property
    def count(self) -> int:
        return self.nx * self.ny

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = (np.arange(self.nx) + 0.5) * self.stride
        ys = (np.arange(self.ny) + 0.5) * self.stride
        gx, gy = np.meshgrid(xs, ys)
        return gx.ravel(), gy.ravel()

    def boxes_corners(self) -> np.ndarray:
        """(count, 4) anchor boxes as (xmin, ymin, xmax, ymax)."""
        cx, cy = self.centers()
        hw, hh = self.anchor_w / 2.0, self.anchor_h / 2.0
        return np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)


def default_grid(image_width: int, image_height: int) -> AnchorGrid:
    return AnchorGrid(DEFAULT_STRIDE, DEFAULT_ANCHOR_W, DEFAULT_ANCHOR_H,
                      image_width, image_height)


@dataclass(frozen=True)
class ScoredBox:
    bbox: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of [0, 1]: {self.score}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.002
    iterations: int = 2000
    lambda_: Optional[float] = None    # None resolves to 0.1 for CARE, else 0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.iterations <= 0:
            raise ValueError("batch_size, learning_rate, iterations must be positive")

    def resolved_lambda(self, strategy: Strategy) -> float:
        if self.lambda_ is not None:
            return self.lambda_
        return 0.1 if strategy is Strategy.CARE else 0.0


def _iou_corners(boxes: np.ndarray, box: np.ndarray) -> np.ndarray:
    """IoU of each row of (N, 4) corner boxes against one corner box."""
    ix0 = np.maximum(boxes[:, 0], box[0])
    iy0 = np.maximum(boxes[:, 1], box[1])
    ix1 = np.minimum(boxes[:, 2], box[2])
    iy1 = np.minimum(boxes[:, 3], box[3])
    inter = np.clip(ix1 - ix0, 0.0, None) * np.clip(iy1 - iy0, 0.0, None)
    area_a = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    area_b = (box[2] - box[0]) * (box[3] - box[1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def assign_anchors(grid: AnchorGrid, gt: BBox) -> tuple[np.ndarray, np.ndarray]:
    """Two-threshold anchor assignment plus regression targets.

    IoU >= 0.5 is positive, < 0.3 negative, the band between is ignored;
    the single highest-IoU anchor is always positive so every labeled image
    trains the box head. Targets are (dx, dy, dw, dh) relative to anchors.
    """
    anchors = grid.boxes_corners()
    ious = _iou_corners(anchors, np.array(gt.as_tuple(), dtype=np.float64))
    labels = np.full(grid.count, IGNORE, dtype=np.int8)
    labels[ious < IOU_NEGATIVE] = NEGATIVE
    labels[ious >= IOU_POSITIVE] = POSITIVE
    labels[int(np.argmax(ious))] = POSITIVE

    cx, cy = grid.centers()
    gx = (gt.xmin + gt.xmax) / 2.0
    gy = (gt.ymin + gt.ymax) / 2.0
    gw = max(gt.width, 1e-6)
    gh = max(gt.height, 1e-6)
    targets = np.zeros((grid.count, 4), dtype=np.float64)
    pos = labels == POSITIVE
    targets[pos, 0] = (gx - cx[pos]) / grid.anchor_w
    targets[pos, 1] = (gy - cy[pos]) / grid.anchor_h
    targets[pos, 2] = math.log(gw / grid.anchor_w)
    targets[pos, 3] = math.log(gh / grid.anchor_h)
    return labels, targets


def _patch_coords(grid: AnchorGrid, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Sampling coordinates (A, p) in x and y for every anchor's patch."""
    frac = (np.arange(patch_size) + 0.5) / patch_size - 0.5
    cx, cy = grid.centers()
    xs = cx[:, None] + frac[None, :] * grid.anchor_w * PATCH_CONTEXT
    ys = cy[:, None] + frac[None, :] * grid.anchor_h * PATCH_CONTEXT
    return xs, ys


def patch_gray_u8(gray: np.ndarray, grid: AnchorGrid, patch_size: int) -> np.ndarray:
    """Bilinearly resampled anchor patches, rounded to uint8, shape (A, p*p).

    Rounding makes cached patches compact and keeps the train and inference
    paths numerically identical.
    """
    h, w = gray.shape
    xs, ys = _patch_coords(grid, patch_size)
    fx = np.clip(xs - 0.5, 0.0, w - 1.0)
    fy = np.clip(ys - 0.5, 0.0, h - 1.0)
    ix = np.clip(np.floor(fx).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(fx, dtype=np.int64)
    iy = np.clip(np.floor(fy).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(fy, dtype=np.int64)
    tx = fx - ix
    ty = fy - iy
    # Broadcast to (A, p, p): y indexes rows (outer), x columns (inner).
    iy_b = iy[:, :, None]
    ix_b = ix[:, None, :]
    ty_b = ty[:, :, None]
    tx_b = tx[:, None, :]
    g00 = gray[iy_b, ix_b]
    g01 = gray[iy_b, ix_b + 1]
    g10 = gray[iy_b + 1, ix_b]
    g11 = gray[iy_b + 1, ix_b + 1]
    val = ((1 - ty_b) * ((1 - tx_b) * g00 + tx_b * g01)
           + ty_b * ((1 - tx_b) * g10 + tx_b * g11))
    a = val.reshape(len(val), patch_size * patch_size)
    return np.rint(a).astype(np.uint8)


def patch_inputs(u8: np.ndarray) -> np.ndarray:
    """uint8 gray patches to mean-removed, rescaled float inputs.

    Per-patch mean removal makes the descriptor insensitive to absolute
    illumination, which narrows the day/night and terrain luminance axes.
    """
    f = u8.astype(np.float64) / 255.0
    f -= f.mean(axis=-1, keepdims=True)
    return f * PATCH_INPUT_SCALE


@dataclass
class Model:
    """Affine patch descriptor plus objectness and box heads."""

    grid: AnchorGrid
    patch_size: int
    w_feat: np.ndarray    # (d, p*p)
    b_feat: np.ndarray    # (d,)
    w_obj: np.ndarray     # (d,)
    b_obj: float
    w_box: np.ndarray     # (4, d)
    b_box: np.ndarray     # (4,)
    train_config: Optional[TrainConfig] = None

    @property
    def feature_dim(self) -> int:
        return len(self.b_feat)

    @classmethod
    def init(cls, grid: AnchorGrid, seed: int,
             patch_size: int = DEFAULT_PATCH_SIZE,
             feature_dim: int = DEFAULT_FEATURE_DIM) -> "Model":
        rng = np.random.default_rng(seed)
        n_in = patch_size * patch_size
        w_feat = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(feature_dim, n_in))
        w_obj = rng.normal(0.0, 1.0 / math.sqrt(feature_dim), size=feature_dim)
        w_box = rng.normal(0.0, 0.05, size=(4, feature_dim))
        return cls(
            grid=grid,
            patch_size=patch_size,
            w_feat=w_feat,
            b_feat=np.zeros(feature_dim),
            w_obj=w_obj,
            b_obj=-2.0,   # background prior: most anchors are negative
            w_box=w_box,
            b_box=np.zeros(4),
        )

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {"w_feat": self.w_feat, "b_feat": self.b_feat,
                "w_obj": self.w_obj, "w_box": self.w_box, "b_box": self.b_box}

    def forward(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(N, p*p) inputs -> per-anchor features, objectness logits, box deltas."""
        feats = inputs @ self.w_feat.T + self.b_feat
        logits = feats @ self.w_obj + self.b_obj
        deltas = feats @ self.w_box.T + self.b_box
        return feats, logits, deltas

    def save(self, path: str | Path) -> None:
        doc = {
            "format_version": 1,
            "patch_size": self.patch_size,
            "feature_dim": self.feature_dim,
            "grid": asdict(self.grid),
            "b_obj": self.b_obj,
            "params": {
                "w_feat": self.w_feat.tolist(),
                "b_feat": self.b_feat.tolist(),
                "w_obj": self.w_obj.tolist(),
                "w_box": self.w_box.tolist(),
                "b_box": self.b_box.tolist(),
            },
            "train_config": asdict(self.train_config) if self.train_config else None,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(doc, f)
            f.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format_version") != 1:
            raise DetectorError(f"unsupported checkpoint version {doc.get('format_version')}")
        params = doc["params"]
        cfg = doc.get("train_config")
        return cls(
            grid=AnchorGrid(**doc["grid"]),
            patch_size=doc["patch_size"],
            w_feat=np.array(params["w_feat"], dtype=np.float64),
            b_feat=np.array(params["b_feat"], dtype=np.float64),
            w_obj=np.array(params["w_obj"], dtype=np.float64),
            b_obj=float(doc["b_obj"]),
            w_box=np.array(params["w_box"], dtype=np.float64),
            b_box=np.array(params["b_box"], dtype=np.float64),
            train_config=TrainConfig(**cfg) if cfg else None,
        )


class PatchCache:
    """Per-image patches and anchor assignments, keyed by image_ref."""

    def __init__(self, grid: AnchorGrid, patch_size: int = DEFAULT_PATCH_SIZE):
        self.grid = grid
        self.patch_size = patch_size
        self._entries: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def get(self, sample: Sample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        entry = self._entries.get(sample.image_ref)
        if entry is None:
            image = Image.load_png(sample.image_ref)
            u8 = patch_gray_u8(image.grayscale(), self.grid, self.patch_size)
            if sample.bbox is not None:
                labels, targets = assign_anchors(self.grid, sample.bbox)
            else:
                labels = np.full(self.grid.count, NEGATIVE, dtype=np.int8)
                targets = np.zeros((self.grid.count, 4), dtype=np.float64)
            entry = (u8, labels, targets)
            self._entries[sample.image_ref] = entry
        return entry


def _loss_from_forward(
    model: Model,
    inputs: np.ndarray,
    feats: np.ndarray,
    logits: np.ndarray,
    deltas: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    domains: np.ndarray,
    lambda_: float,
    use_align: bool,
) -> tuple[LossBreakdown, dict[str, np.ndarray], float]:
    obj_value, g_logits = losses.objectness_loss(logits, labels)
    pos_mask = labels == POSITIVE
    box_value, g_deltas = losses.box_regression_loss(deltas, targets, pos_mask)
    frcnn = obj_value + box_value

    align_value = 0.0
    g_feats = g_logits[:, None] * model.w_obj[None, :] + g_deltas @ model.w_box
    if use_align:
        # Features are L2-normalized before alignment so the lambda weight
        # stays meaningful regardless of the descriptor's scale; the chain
        # rule through the normalization is applied below.
        synth_idx = np.where(pos_mask & (domains == 1))[0]
        real_idx = np.where(pos_mask & (domains == 0))[0]
        fs, fr = feats[synth_idx], feats[real_idx]
        ns = np.maximum(np.linalg.norm(fs, axis=1, keepdims=True), 1e-12)
        nr = np.maximum(np.linalg.norm(fr, axis=1, keepdims=True), 1e-12)
        us, ur = fs / ns, fr / nr
        res = losses.align_loss(us, ur)
        align_value = res.value
        if not res.missing_domain:
            gs = (res.grad_synth - us * np.sum(res.grad_synth * us, axis=1, keepdims=True)) / ns
            gr = (res.grad_real - ur * np.sum(res.grad_real * ur, axis=1, keepdims=True)) / nr
            g_feats[synth_idx] += lambda_ * gs
            g_feats[real_idx] += lambda_ * gr

    breakdown = losses.total_loss(frcnn, align_value, lambda_)
    grads = {
        "w_feat": g_feats.T @ inputs,
        "b_feat": g_feats.sum(axis=0),
        "w_obj": feats.T @ g_logits,
        "w_box": g_deltas.T @ feats,
        "b_box": g_deltas.sum(axis=0),
    }
    g_b_obj = float(g_logits.sum())
    return breakdown, grads, g_b_obj


def batch_loss_and_grads(
    model: Model,
    batch_items: list[tuple[np.ndarray, np.ndarray, np.ndarray, Domain]],
    lambda_: float,
    use_align: bool,
) -> tuple[LossBreakdown, dict[str, np.ndarray], float]:
    """One batch's loss breakdown and parameter gradients.

    batch_items holds (uint8 patches, labels, targets, domain) per image;
    anchor counts may differ across items. Also returns the gradient of
    b_obj (a bare float parameter).
    """
    inputs = np.concatenate([patch_inputs(u8) for u8, _, _, _ in batch_items], axis=0)
    labels = np.concatenate([lab for _, lab, _, _ in batch_items])
    targets = np.concatenate([tgt for _, _, tgt, _ in batch_items], axis=0)
    domains = np.concatenate([
        np.full(len(lab), 1 if dom is Domain.SYNTHETIC else 0, dtype=np.int8)
        for _, lab, _, dom in batch_items
    ])
    feats, logits, deltas = model.forward(inputs)
    return _loss_from_forward(model, inputs, feats, logits, deltas,
                              labels, targets, domains, lambda_, use_align)


def _mine_anchors(labels: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """All positives plus the highest-scoring negatives at HARD_NEG_RATIO.

    Deterministic: ties break to the lower anchor index.
    """
    pos = np.where(labels == POSITIVE)[0]
    neg = np.where(labels == NEGATIVE)[0]
    room = max(HARD_NEG_RATIO * len(pos), HARD_NEG_FLOOR)
    if len(neg) > room:
        hard = np.argsort(-logits[neg], kind="stable")[:room]
        neg = np.sort(neg[hard])
    return np.concatenate([pos, neg])


def train(
    real: Optional[Dataset],
    synth: Optional[Dataset],
    strategy: Strategy,
    cfg: TrainConfig,
    grid: Optional[AnchorGrid] = None,
    patch_cache: Optional[PatchCache] = None,
) -> Model:
    """Plain SGD over cfg.iterations batches; returns the final model.

    Deterministic for a fixed seed on a fixed machine. The alignment term is
    only evaluated for CARE with a nonzero lambda, so CARE at lambda = 0
    runs the exact arithmetic of SAMPLER.
    """
    strategy = Strategy(strategy)
    sampler = make_sampler(strategy.sampler_kind, real, synth, cfg.batch_size, cfg.seed)
    pool = real if real is not None and len(real) else synth
    if grid is None:
        probe = Image.load_png(pool.samples[0].image_ref)
        grid = default_grid(probe.width, probe.height)
    cache = patch_cache if patch_cache is not None else PatchCache(grid)
    if cache.grid != grid:
        raise ValueError("patch cache was built for a different grid")

    model = Model.init(grid, seed=cfg.seed)
    model.train_config = replace(cfg)
    lam = cfg.resolved_lambda(strategy)
    use_align = strategy.uses_alignment and lam != 0.0

    lr = cfg.learning_rate
    a = grid.count
    for it in range(cfg.iterations):
        batch = sampler.next_batch()
        all_inputs = []
        all_labels = []
        all_targets = []
        all_domains = []
        for sample in batch:
            u8, labels, targets = cache.get(sample)
            all_inputs.append(patch_inputs(u8))
            all_labels.append(labels)
            all_targets.append(targets)
            all_domains.append(np.full(a, 1 if sample.domain is Domain.SYNTHETIC else 0,
                                       dtype=np.int8))
        inputs = np.concatenate(all_inputs, axis=0)
        labels = np.concatenate(all_labels)
        targets = np.concatenate(all_targets, axis=0)
        domains = np.concatenate(all_domains)

        feats, logits, deltas = model.forward(inputs)
        sel = np.concatenate([
            _mine_anchors(all_labels[i], logits[i * a:(i + 1) * a]) + i * a
            for i in range(len(batch))
        ])
        breakdown, grads, g_b_obj = _loss_from_forward(
            model, inputs[sel], feats[sel], logits[sel], deltas[sel],
            labels[sel], targets[sel], domains[sel], lam, use_align)
        if not math.isfinite(breakdown.total):
            raise DivergedLoss(f"total loss became {breakdown.total} at iteration {it}")
        model.w_feat -= lr * grads["w_feat"]
        model.b_feat -= lr * grads["b_feat"]
        model.w_obj -= lr * grads["w_obj"]
        model.b_obj -= lr * g_b_obj
        model.w_box -= lr * grads["w_box"]
        model.b_box -= lr * grads["b_box"]
    return model


def decode_boxes(grid: AnchorGrid, deltas: np.ndarray) -> np.ndarray:
    """Anchor-relative (dx, dy, dw, dh) to corner boxes, (A, 4)."""
    cx, cy = grid.centers()
    px = cx + deltas[:, 0] * grid.anchor_w
    py = cy + deltas[:, 1] * grid.anchor_h
    pw = grid.anchor_w * np.exp(np.clip(deltas[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    ph = grid.anchor_h * np.exp(np.clip(deltas[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    return np.stack([px - pw / 2, py - ph / 2, px + pw / 2, py + ph / 2], axis=1)


def _nms(boxes: np.ndarray, scores: np.ndarray, nms_iou: float) -> list[int]:
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    for idx in order:
        box = boxes[idx]
        suppressed = False
        for kept in keep:
            if _iou_corners(boxes[kept:kept + 1], box)[0] > nms_iou:
                suppressed = True
                break
        if not suppressed:
            keep.append(int(idx))
    return keep


def detect_from_patches(
    model: Model,
    u8: np.ndarray,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 10,
) -> list[ScoredBox]:
    _, logits, deltas = model.forward(patch_inputs(u8))
    scores = sigmoid(logits)
    keep = scores >= score_threshold
    if not keep.any():
        return []
    boxes = decode_boxes(model.grid, deltas)[keep]
    scores = scores[keep]
    kept = _nms(boxes, scores, nms_iou)[:max_dets]
    return [ScoredBox(bbox=BBox(*(float(v) for v in boxes[i])), score=float(scores[i]))
            for i in kept]


def detect(
    model: Model,
    image: Image,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 10,
) -> list[ScoredBox]:
    """Score anchors, decode boxes, threshold, greedy NMS, top max_dets.

    Output is sorted by descending score.
    """
    if image.width != model.grid.image_width or image.height != model.grid.image_height:
        raise ValueError("image dimensions do not match the model's anchor grid")
    u8 = patch_gray_u8(image.grayscale(), model.grid, model.patch_size)
    return detect_from_patches(model, u8, score_threshold, nms_iou, max_dets)
