"""Focal loss, Adam, patch datasets and the training loop."""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from petrel import autodiff as ad
from petrel import detection
from petrel.raster import crop_patch, rasterize_labels, reflect_pad
from petrel.unet import UNetConfig, as_tensors, forward, forward_tensors, init_params

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------- the loss

def focal_loss(probs: ad.Tensor, targets, config: FocalLossConfig = FocalLossConfig()) -> ad.Tensor:
    """Mean over pixels of -(1 - p_t)^gamma * log(p_t).

    p_t is the probability given to the true class. Probabilities are clamped
    to [1e-7, 1 - 1e-7]; the gradient is evaluated at the clamped value.
    """
    y = np.asarray(targets)
    if y.shape != probs.shape:
        raise ValueError(f"targets shape {y.shape} != probabilities shape {probs.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be 0 or 1")
    pos = y == 1
    p = np.clip(probs.data, PROB_EPS, 1 - PROB_EPS)
    pt = np.where(pos, p, 1 - p)
    gamma = config.gamma
    log_pt = np.log(pt)
    mod = (1 - pt) ** gamma
    n = pt.size
    value = np.array(-(mod * log_pt).sum() / n)

    def _backward(g):
        # d/dpt of -(1-pt)^g log pt
        dpt = -mod / pt
        if gamma != 0:
            dpt = dpt + gamma * (1 - pt) ** (gamma - 1) * log_pt
        sign = np.where(pos, 1.0, -1.0)
        return (float(g) * dpt * sign / n,)

    return ad.make_op(value, (probs,), _backward, "focal_loss")


def binary_cross_entropy(p, y) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(y)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update. Returns (new params, state)."""
    if set(grads) - set(params):
        raise ValueError(f"gradients for unknown parameters {sorted(set(grads) - set(params))}")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    updated = OrderedDict()
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = value
            continue
        if g.shape != value.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {value.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(value.shape)
            state.v[name] = np.zeros(value.shape)
        elif m.shape != value.shape:
            raise ValueError(f"{name}: optimizer state shape {m.shape} != {value.shape}")
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        delta = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        updated[name] = (value.astype(np.float64) - delta).astype(value.dtype)
    return updated, state


# ------------------------------------------------------------------ dataset

@dataclass
class PatchDataset:
    images: np.ndarray          # (P, C, S, S) float32
    targets: np.ndarray         # (P, out, out) uint8
    origins: np.ndarray         # (P, 2) input-window top-left, scene coords (may be negative)
    scenes: list[str]
    split: np.ndarray           # (P,) "train" | "test"
    points: list[np.ndarray]    # truth points in each patch's output frame
    margin: int

    def __len__(self) -> int:
        return len(self.images)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def positive_fraction(self, split: str | None = None) -> float:
        idx = np.arange(len(self)) if split is None else self.indices(split)
        return float(self.targets[idx].mean()) if len(idx) else 0.0


def _grid(extent: int, out: int) -> list[int]:
    starts = list(range(0, extent - out + 1, out))
    if starts[-1] != extent - out:
        starts.append(extent - out)
    return starts


def _normalize_scenes(scenes):
    named = []
    for k, item in enumerate(scenes):
        if len(item) == 3:
            named.append(tuple(item))
        else:
            named.append((f"scene{k}", item[0], item[1]))
    return named


def build_dataset(scenes, per_scene_patches: int, unet_config: UNetConfig,
                  train_config: TrainConfig = TrainConfig(), exclude: str | None = None) -> PatchDataset:
    """Crop input-size patches from each scene and split them train/test.

    Every output-stride grid cell holding a bird is kept; seeded random
    bird-free windows top each scene up to ``per_scene_patches``. Scenes are
    mirror-padded by the network margin so birds at scene borders are usable.
    ``exclude`` drops one scene by name (leave-one-scene-out training).
    """
    size, out, margin = unet_config.input_size, unet_config.output_size, unet_config.margin
    images, targets, origins, tags, split, points = [], [], [], [], [], []
    for k, (name, raster, labels) in enumerate(_normalize_scenes(scenes)):
        if name == exclude:
            continue
        if raster.width < out or raster.height < out:
            raise ValueError(f"scene {name} ({raster.width}x{raster.height}) smaller than output size {out}")
        if len(raster.bands) != unet_config.in_channels:
            raise ValueError(f"scene {name} has {len(raster.bands)} bands, network expects {unet_config.in_channels}")
        rng = np.random.default_rng([train_config.seed, k])
        padded = reflect_pad(raster, margin)
        pts = np.rint(labels.points).astype(int) if len(labels) else np.zeros((0, 2), int)

        def covers(ox, oy, pad=0):
            return ((pts[:, 0] >= ox - pad) & (pts[:, 0] < ox + out + pad)
                    & (pts[:, 1] >= oy - pad) & (pts[:, 1] < oy + out + pad))

        chosen = [(ox, oy) for oy in _grid(raster.height, out) for ox in _grid(raster.width, out)
                  if covers(ox, oy).any()]
        seen = set(chosen)
        tries = 0
        while len(chosen) < per_scene_patches:
            tries += 1
            if tries > 1000 * per_scene_patches:
                raise RuntimeError(f"scene {name}: cannot find enough bird-free windows")
            ox = int(rng.integers(0, raster.width - out + 1))
            oy = int(rng.integers(0, raster.height - out + 1))
            if (ox, oy) in seen or covers(ox, oy, pad=1).any():
                continue
            seen.add((ox, oy))
            chosen.append((ox, oy))

        n_test = int(round(len(chosen) * train_config.test_fraction))
        test_ids = set(rng.permutation(len(chosen))[:n_test].tolist())
        for i, (ox, oy) in enumerate(chosen):
            images.append(crop_patch(padded, (ox, oy), size))
            origin = (ox - margin, oy - margin)
            targets.append(rasterize_labels(labels, origin, out, margin))
            origins.append(origin)
            tags.append(name)
            split.append("test" if i in test_ids else "train")
            inside = covers(ox, oy)
            points.append(labels.points[inside] - np.array([ox, oy], dtype=np.float64))
    if not images:
        raise ValueError("no patches: every scene was excluded")
    return PatchDataset(np.stack(images), np.stack(targets), np.asarray(origins), tags,
                        np.asarray(split), points, margin)


# --------------------------------------------------------------------- loop

def train(dataset: PatchDataset, unet_config: UNetConfig, train_config: TrainConfig,
          loss_config: FocalLossConfig = FocalLossConfig(), params=None, on_epoch=None):
    """Optimise the network on the dataset's train split.

    Returns (params, loss_log) where loss_log is a list of
    (epoch, mean_train_loss) starting at epoch 1. ``on_epoch(epoch, params)``
    is called after every epoch when given.
    """
    train_idx = dataset.indices("train")
    if not len(train_idx):
        raise ValueError("dataset has no training patches")
    if params is None:
        params = init_params(unet_config, train_config.seed)
    state = AdamState()
    rng = np.random.default_rng([train_config.seed, 7919])
    loss_log = []
    bs = train_config.batch_size
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(train_idx)
        total = 0.0
        for b, start in enumerate(range(0, len(order), bs)):
            batch = np.sort(order[start:start + bs])
            tensors = as_tensors(params, requires_grad=True)
            x = ad.Tensor(dataset.images[batch])
            y = dataset.targets[batch][:, None].astype(np.float64)
            try:
                probs = forward_tensors(tensors, x, unet_config)
                loss = focal_loss(probs, y, loss_config)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {b} (patches {batch.tolist()}): {exc}"
                ) from exc
            ad.backward(loss)
            grads = {k: t.grad for k, t in tensors.items()}
            params, state = adam_step(params, grads, state, train_config)
            total += loss.item() * len(batch)
        mean = total / len(order)
        loss_log.append((epoch, mean))
        log.info("epoch %d mean train loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, loss_log


def predict_patches(params, dataset: PatchDataset, indices, unet_config: UNetConfig,
                    batch: int = 8) -> np.ndarray:
    out = []
    for start in range(0, len(indices), batch):
        idx = indices[start:start + batch]
        out.append(forward(params, dataset.images[idx].astype(np.float64), unet_config)[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + dataset.targets.shape[1:])


def evaluate_patches(params, dataset: PatchDataset, unet_config: UNetConfig, split: str = "test",
                     thresholds=None, radius: float = detection.DEFAULT_RADIUS):
    """Pooled precision-recall curve over every patch of one split."""
    idx = dataset.indices(split)
    heatmaps = predict_patches(params, dataset, idx, unet_config)
    curves = [detection.pr_curve(h, dataset.points[i], thresholds, radius) for h, i in zip(heatmaps, idx)]
    return detection.merge_curves(curves)


def gamma_sweep(dataset: PatchDataset, gammas, replicates: int, unet_config: UNetConfig,
                train_config: TrainConfig, thresholds=None, radius: float = detection.DEFAULT_RADIUS,
                recall_bins=None):
    """Train ``replicates`` models per gamma and average their test PR curves.

    Returns (rows, runs). rows holds one dict per (gamma, recall bin) with
    precision_mean / precision_std; runs holds per-model curves and AP.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    bins = np.linspace(0, 1, 11) if recall_bins is None else np.asarray(recall_bins)
    rows, runs = [], []
    for gamma in gammas:
        interp = []
        for r in range(replicates):
            cfg = replace(train_config, seed=train_config.seed + r)
            params, loss_log = train(dataset, unet_config, cfg, FocalLossConfig(gamma))
            curve = evaluate_patches(params, dataset, unet_config, "test", thresholds, radius)
            interp.append(detection.interpolated_precision(curve, bins))
            runs.append({"gamma": gamma, "seed": cfg.seed, "curve": curve, "loss_log": loss_log,
                         "ap": detection.average_precision(curve, bins)})
        interp = np.array(interp)
        for k, rb in enumerate(bins):
            rows.append({"gamma": gamma, "recall_bin": float(rb),
                         "precision_mean": float(interp[:, k].mean()),
                         "precision_std": float(interp[:, k].std())})
    return rows, runs


def mean_ap(runs, gamma) -> float:
    return float(np.mean([r["ap"] for r in runs if r["gamma"] == gamma]))


def write_loss_log(loss_log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_train_loss"])
        for epoch, loss in loss_log:
            w.writerow([epoch, repr(float(loss))])


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "recall_bin", "precision_mean", "precision_std"])
        for r in rows:
            w.writerow([repr(float(r["gamma"])), repr(r["recall_bin"]), repr(r["precision_mean"]),
                        repr(r["precision_std"])])
