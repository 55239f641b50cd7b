"""Synthetic colony scenes and simulated human observers.

Birds are bright Gaussian dots on a darker, green-dominant textured
background. Distractors come in two flavours: bird-sized bright spots on a
bare-ground (reddish) patch, and single-pixel glints that are smaller than a
bird.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from petrel.raster import DEFAULT_BANDS, PointLabelSet, Raster, bilinear_upsample, upsample_ms_to_pan

# background reflectance per MS band (blue, green, red, nir1)
HABITAT = np.array([0.12, 0.42, 0.18, 0.34])
BARE_GROUND = np.array([0.30, 0.27, 0.46, 0.30])
WHITE = np.array([0.90, 0.92, 0.90, 0.85])


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    n_birds: int
    seed: int
    bird_radius_px: float = 2.2
    n_distractors: int = 0
    background_texture_scale: float = 32.0
    ms_factor: int = 4

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("scene must be at least 1x1")
        if self.width % self.ms_factor or self.height % self.ms_factor:
            raise ValueError(f"scene size must be a multiple of ms_factor={self.ms_factor}")
        if self.n_birds < 0 or self.n_distractors < 0:
            raise ValueError("counts must be non-negative")
        if self.bird_radius_px <= 0 or self.background_texture_scale <= 0:
            raise ValueError("bird_radius_px and background_texture_scale must be positive")

    @property
    def min_separation(self) -> float:
        return 2 * self.bird_radius_px + 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ObserverModel:
    miss_rate: float = 0.0
    false_alarm_density: float = 0.0  # expected false labels per megapixel
    jitter_sigma_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.miss_rate <= 1:
            raise ValueError("miss_rate must lie in [0, 1]")
        if self.false_alarm_density < 0 or self.jitter_sigma_px < 0:
            raise ValueError("false_alarm_density and jitter_sigma_px must be >= 0")

    def expected_count(self, n_truth: int, width: int, height: int) -> tuple[float, float]:
        """Mean and standard deviation of the label count this observer produces."""
        lam = self.false_alarm_density * width * height / 1e6
        mean = n_truth * (1 - self.miss_rate) + lam
        var = n_truth * self.miss_rate * (1 - self.miss_rate) + lam
        return mean, float(np.sqrt(var))


def value_noise(height: int, width: int, scale: float, rng: np.random.Generator,
                octaves: int = 4) -> np.ndarray:
    """Sum of bilinearly smoothed random lattices, rescaled to [-1, 1]."""
    total = np.zeros((height, width))
    amplitude, weight = 1.0, 0.0
    cell = max(int(round(scale)), 1)
    for _ in range(octaves):
        gh, gw = -(-height // cell) + 1, -(-width // cell) + 1
        lattice = rng.uniform(-1, 1, size=(gh, gw))
        total += amplitude * bilinear_upsample(lattice, cell)[:height, :width]
        weight += amplitude
        amplitude *= 0.5
        cell = max(cell // 2, 1)
    total /= weight
    span = np.abs(total).max()
    return total / span if span > 0 else total


def _place(n: int, taken: list, spec: SceneSpec, rng, border: int) -> list:
    placed = []
    sep2 = spec.min_separation ** 2
    attempts = 0
    budget = 200 * n + 1000
    while len(placed) < n:
        attempts += 1
        if attempts > budget:
            raise PlacementError(
                f"could not place {n} objects {spec.min_separation:.1f}px apart "
                f"in {spec.width}x{spec.height} (placed {len(placed)})"
            )
        x = int(rng.integers(border, spec.width - border))
        y = int(rng.integers(border, spec.height - border))
        if taken:
            arr = np.asarray(taken)
            if np.min((arr[:, 0] - x) ** 2 + (arr[:, 1] - y) ** 2) < sep2:
                continue
        taken.append((x, y))
        placed.append((x, y))
    return placed


def _stamp(plane: np.ndarray, cx: float, cy: float, sigma: float, amp: float) -> None:
    """Blend a truncated Gaussian toward ``amp`` at (cx, cy), in place."""
    reach = int(np.ceil(3 * sigma))
    h, w = plane.shape
    y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
    x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    g = np.exp(-d2 / (2 * sigma ** 2))
    g[d2 > (3 * sigma) ** 2] = 0.0
    region = plane[y0:y1, x0:x1]
    plane[y0:y1, x0:x1] = region * (1 - g) + amp * g


def generate_scene(spec: SceneSpec) -> tuple[Raster, PointLabelSet]:
    """Render a 5-band scene at PAN resolution and its exact bird centres."""
    rng = np.random.default_rng(spec.seed)
    h, w, f = spec.height, spec.width, spec.ms_factor
    texture = value_noise(h, w, spec.background_texture_scale, rng)
    pan = 0.30 + 0.12 * texture

    # MS bands start at PAN resolution and are block-averaged down by ms_factor
    ms_hi = HABITAT[:, None, None] * (1 + 0.25 * texture)[None]

    border = min(3, (min(h, w) - 1) // 2)
    taken: list = []
    birds = _place(spec.n_birds, taken, spec, rng, border)
    distractors = _place(spec.n_distractors, taken, spec, rng, border)

    sigma = spec.bird_radius_px / 1.5
    for x, y in birds:
        _stamp(pan, x, y, sigma, rng.uniform(0.85, 1.0))
        for b in range(4):
            _stamp(ms_hi[b], x, y, sigma, WHITE[b])

    for k, (x, y) in enumerate(distractors):
        if k % 2 == 0:
            # bright spot on a patch of bare ground
            _stamp(pan, x, y, sigma, rng.uniform(0.85, 1.0))
            for b in range(4):
                _stamp(ms_hi[b], x, y, 2.5 * sigma * f / 2, BARE_GROUND[b])
        else:
            # glint: too small to be a bird
            _stamp(pan, x, y, 0.45, rng.uniform(0.85, 1.0))

    ms = ms_hi.reshape(4, h // f, f, w // f, f).mean(axis=(2, 4))
    pan_r = Raster(np.clip(pan, 0, 1)[None], ["pan"])
    ms_r = Raster(np.clip(ms, 0, 1), list(DEFAULT_BANDS[1:]))
    scene = upsample_ms_to_pan(ms_r, pan_r)
    labels = PointLabelSet("truth", np.asarray(birds, dtype=np.float64).reshape(-1, 2))
    return scene, labels


def simulate_observer(truth: PointLabelSet, raster: Raster, model: ObserverModel,
                      observer_id: str = "observer") -> PointLabelSet:
    """Drop, jitter and add labels to mimic one imperfect human counter."""
    rng = np.random.default_rng(model.seed)
    pts = truth.points
    keep = rng.random(len(pts)) >= model.miss_rate
    kept = pts[keep].copy()
    if model.jitter_sigma_px > 0 and len(kept):
        kept += rng.normal(0.0, model.jitter_sigma_px, size=kept.shape)
        kept[:, 0] = np.clip(kept[:, 0], 0, raster.width - 1)
        kept[:, 1] = np.clip(kept[:, 1], 0, raster.height - 1)
    n_false = rng.poisson(model.false_alarm_density * raster.width * raster.height / 1e6)
    false = np.column_stack([
        rng.uniform(0, raster.width - 1, n_false),
        rng.uniform(0, raster.height - 1, n_false),
    ])
    return PointLabelSet(observer_id, np.vstack([kept, false]))
