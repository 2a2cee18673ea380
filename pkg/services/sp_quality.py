"""
SP-map quality scores: Sobel edge mask, edge-weighted L1, high-pass
spectral loss and their weighted sum. Deterministic comparisons between a
candidate map and a reference map; no gradients.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from services.errors import GridMismatch, OutOfRange
from services.sp_core import SENTINEL, SpMap

log = logging.getLogger(__name__)

PHASE_EPS = 1e-9


@dataclass(frozen=True)
class QualityWeights:
    mu: float = 0.8
    zeta: float = 0.1
    alpha: float = 1.0
    beta: float = 0.1
    highpass_radius_frac: float = 0.25
    margin: int = 2
    threshold_frac: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise OutOfRange(f"mu must be in [0, 1], got {self.mu}")
        for name in ("zeta", "alpha", "beta", "highpass_radius_frac", "margin", "threshold_frac"):
            if getattr(self, name) < 0:
                raise OutOfRange(f"{name} must be >= 0, got {getattr(self, name)}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class EdgeMask:
    mask: np.ndarray
    margin: int


@dataclass(frozen=True)
class QualityScores:
    total: float
    l1: float
    l_edge: float
    l_spec: float

    def as_dict(self) -> dict:
        return {"l_total": self.total, "l1": self.l1, "l_edge": self.l_edge, "l_spec": self.l_spec}


def filled_layer(sp_map: SpMap, layer: int) -> np.ndarray:
    return np.where(sp_map.valid[layer], sp_map.depth[layer], SENTINEL).astype(np.float64)


def _wrap_pad(a: np.ndarray, pad: int, row_mode: str) -> np.ndarray:
    a = np.pad(a, ((0, 0), (pad, pad)), mode="wrap")
    if row_mode == "edge":
        return np.pad(a, ((pad, pad), (0, 0)), mode="edge")
    return np.pad(a, ((pad, pad), (0, 0)), mode="constant")


def sobel_magnitude(layer: np.ndarray) -> np.ndarray:
    """Gradient magnitude with columns wrapped in azimuth and rows clamped at the poles."""
    padded = _wrap_pad(np.asarray(layer, dtype=np.float64), 1, "edge")
    gx = ndimage.sobel(padded, axis=1)
    gy = ndimage.sobel(padded, axis=0)
    return np.hypot(gx, gy)[1:-1, 1:-1]


def edge_mask(layer: np.ndarray, margin: int = 2, threshold: float | None = None,
              threshold_frac: float = 0.05) -> EdgeMask:
    """Sobel magnitude above threshold (default threshold_frac of the depth range), dilated by margin."""
    layer = np.asarray(layer, dtype=np.float64)
    if threshold is None:
        threshold = threshold_frac * float(layer.max() - layer.min())
    edges = sobel_magnitude(layer) > threshold
    if margin > 0 and edges.any():
        padded = _wrap_pad(edges, margin, "constant")
        grown = ndimage.binary_dilation(padded, structure=np.ones((2 * margin + 1,) * 2, dtype=bool))
        edges = grown[margin:-margin, margin:-margin]
    return EdgeMask(mask=edges, margin=margin)


def _check_shapes(cand: np.ndarray, ref: np.ndarray) -> None:
    if cand.shape != ref.shape:
        raise GridMismatch(f"layer shapes differ: {cand.shape} vs {ref.shape}")


def edge_weighted_l1(cand: np.ndarray, ref: np.ndarray, mask: EdgeMask, mu: float,
                     valid: np.ndarray | None = None) -> float:
    """mu * mean error inside the edge band + (1 - mu) * mean error outside it, over valid pixels."""
    cand, ref = np.asarray(cand, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    _check_shapes(cand, ref)
    valid = np.ones(cand.shape, dtype=bool) if valid is None else valid
    err = np.abs(cand - ref)
    on = mask.mask & valid
    off = ~mask.mask & valid
    e_on = float(err[on].mean()) if on.any() else 0.0
    e_off = float(err[off].mean()) if off.any() else 0.0
    return mu * e_on + (1.0 - mu) * e_off


def highpass_mask(shape: tuple[int, int], radius_frac: float) -> np.ndarray:
    """True outside the centered circle of radius radius_frac * min(H, W) / 2 (fftshift layout)."""
    h, w = shape
    r = np.arange(h)[:, None] - h // 2
    c = np.arange(w)[None, :] - w // 2
    return np.hypot(r, c) > radius_frac * min(h, w) / 2.0


def centered_spectrum(layer: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(layer, norm="ortho"))


def spectral_loss(cand: np.ndarray, ref: np.ndarray, weights: QualityWeights | None = None) -> float:
    """Mean over high-pass frequencies of wrapped phase difference plus zeta * modulus difference."""
    weights = weights or QualityWeights()
    cand, ref = np.asarray(cand, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    _check_shapes(cand, ref)
    fc, fr = centered_spectrum(cand), centered_spectrum(ref)
    passed = highpass_mask(cand.shape, weights.highpass_radius_frac)
    if not passed.any():
        return 0.0
    mag_c, mag_r = np.abs(fc), np.abs(fr)
    # phase is undefined on empty bins
    floor = PHASE_EPS * max(float(mag_c.max()), float(mag_r.max()), 1e-300)
    phase = np.abs(np.angle(fc * np.conj(fr)))
    phase = np.where((mag_c > floor) & (mag_r > floor), phase, 0.0)
    term = phase + weights.zeta * np.abs(mag_c - mag_r)
    return float(term[passed].mean())


def combined_quality(cand: SpMap, ref: SpMap, weights: QualityWeights | None = None) -> QualityScores:
    """Per-layer L1 + alpha * edge-weighted L1 + beta * spectral loss, averaged over layers."""
    weights = weights or QualityWeights()
    if cand.grid != ref.grid or cand.k != ref.k:
        raise GridMismatch(
            f"maps differ: {cand.grid.height}x{cand.grid.width}x{cand.k} "
            f"vs {ref.grid.height}x{ref.grid.width}x{ref.k}"
        )
    l1s, edges, specs = [], [], []
    for j in range(ref.k):
        c, r = filled_layer(cand, j), filled_layer(ref, j)
        co_valid = cand.valid[j] & ref.valid[j]
        l1s.append(float(np.abs(c - r)[co_valid].mean()) if co_valid.any() else 0.0)
        mask = edge_mask(r, weights.margin, threshold_frac=weights.threshold_frac)
        edges.append(edge_weighted_l1(c, r, mask, weights.mu, co_valid))
        specs.append(spectral_loss(c, r, weights))
    l1, l_edge, l_spec = float(np.mean(l1s)), float(np.mean(edges)), float(np.mean(specs))
    total = l1 + weights.alpha * l_edge + weights.beta * l_spec
    return QualityScores(total=total, l1=l1, l_edge=l_edge, l_spec=l_spec)
