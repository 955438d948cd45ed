"""Loss terms, pixel masks and the composite mapping/tracking objectives.

Masks follow the cumulative-opacity conventions: the unobserved mask
selects under-reconstructed pixels for Gaussian expansion, the observed
mask restricts tracking to well-reconstructed, geometrically normal
pixels. Both are stop-gradient constants within an iteration.

Every objective also emits the per-pixel adjoint grids consumed by the
renderer backward, plus direct parameter gradients (scale regularizer,
decoder weights), so one forward render per iteration suffices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .data import Frame
from .decode import SemanticDecoder, decode_labels, decoder_backward
from .field import GaussianField, ScaleStats
from .grad import AdjointGrids
from .raster import RenderOutput

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
MEDIAN_FLOOR = 1e-6  # meters; keeps the multiplicative clauses sane at zero error


class EmptyValidDepthError(ValueError):
    pass


class ImageTooSmallError(ValueError):
    pass


@dataclass
class LossWeights:
    """Objective weights and opacity thresholds (mapping and tracking)."""

    lambda_c_m: float = 0.5
    lambda_d_m: float = 1.0
    lambda_s_m: float = 0.01
    lambda_big_m: float = 0.01
    lambda_small_m: float = 0.001
    lambda_c_t: float = 0.5
    lambda_d_t: float = 1.0
    lambda_s_t: float = 0.001
    dssim_lambda: float = 0.2
    tau_unobs: float = 0.5
    tau_obs: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 <= self.dssim_lambda <= 1.0:
            raise ValueError("dssim_lambda must be in [0, 1]")
        if not 0.0 < self.tau_unobs <= self.tau_obs < 1.0:
            raise ValueError("need 0 < tau_unobs <= tau_obs < 1")


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def _valid_and_median(rendered: RenderOutput, d_gt: np.ndarray):
    valid = d_gt > 0
    if not valid.any():
        raise EmptyValidDepthError("no valid ground-truth depth in frame")
    l1 = np.abs(rendered.depth - d_gt)
    med = max(float(np.median(l1[valid])), MEDIAN_FLOOR)
    return valid, l1, med


def unobserved_mask(
    rendered: RenderOutput, d_gt: np.ndarray, weights: LossWeights
) -> np.ndarray:
    """Pixels needing new Gaussians: thin coverage, or geometry expected in
    front of the current estimate. Invalid-depth pixels are excluded."""
    valid, l1, med = _valid_and_median(rendered, d_gt)
    thin = rendered.acc_opacity < weights.tau_unobs
    in_front = (rendered.depth > d_gt) & (l1 > 50.0 * med)
    return valid & (thin | in_front)


def observed_mask(
    rendered: RenderOutput, d_gt: np.ndarray, weights: LossWeights
) -> np.ndarray:
    """Well-reconstructed pixels usable for tracking."""
    valid, l1, med = _valid_and_median(rendered, d_gt)
    return valid & (rendered.acc_opacity > weights.tau_obs) & (l1 < 10.0 * med)


# ---------------------------------------------------------------------------
# SSIM (11x11 Gaussian window, sigma 1.5, C1=0.01^2, C2=0.03^2, L=1)
# ---------------------------------------------------------------------------

_WIN = 11
_PAD = _WIN // 2
_C1 = 0.01**2
_C2 = 0.03**2


def _window1d(dtype) -> np.ndarray:
    xs = np.arange(_WIN, dtype=np.float64) - _PAD
    w = np.exp(-(xs**2) / (2 * 1.5**2))
    return (w / w.sum()).astype(dtype)


def _filt(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable zero-padded Gaussian filter over the two leading axes."""
    tmp = convolve1d(img, k1d, axis=0, mode="constant", cval=0.0)
    return convolve1d(tmp, k1d, axis=1, mode="constant", cval=0.0)


def _embed(grid: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=grid.dtype)
    out[_PAD:-_PAD, _PAD:-_PAD] = grid
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over channels; images (H, W, 3) with values in [0, 1]."""
    val, _ = ssim_with_grad(a, b, need_grad=False)
    return val


def ssim_with_grad(a: np.ndarray, b: np.ndarray, need_grad: bool = True):
    """SSIM and (optionally) d(mssim)/da. Statistics use the valid interior
    (windows fully inside the image); borders are cropped."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError("ssim expects two (H, W, C) images of equal shape")
    h, w, _c = a.shape
    if h < _WIN or w < _WIN:
        raise ImageTooSmallError(f"ssim needs at least {_WIN}x{_WIN} images")
    k1d = _window1d(np.float64)
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    crop = (slice(_PAD, -_PAD), slice(_PAD, -_PAD))
    u1 = _filt(af, k1d)[crop]
    u2 = _filt(bf, k1d)[crop]
    v1 = _filt(af * af, k1d)[crop]
    v2 = _filt(bf * bf, k1d)[crop]
    v12 = _filt(af * bf, k1d)[crop]
    a1 = 2 * u1 * u2 + _C1
    a2 = 2 * (v12 - u1 * u2) + _C2
    b1 = u1 * u1 + u2 * u2 + _C1
    b2 = (v1 - u1 * u1) + (v2 - u2 * u2) + _C2
    s = (a1 * a2) / (b1 * b2)
    n_px = s.size
    mssim = float(s.sum()) / n_px
    if not need_grad:
        return mssim, None
    inv = 1.0 / (b1 * b2)
    ds_du1 = (2 * u2 * a2 - 2 * u2 * a1) * inv - s * (2 * u1 / b1 - 2 * u1 / b2)
    ds_dv1 = -s / b2
    ds_dv12 = 2 * a1 * inv
    grad = _filt(_embed(ds_du1, af.shape), k1d)
    grad += 2.0 * af * _filt(_embed(ds_dv1, af.shape), k1d)
    grad += bf * _filt(_embed(ds_dv12, af.shape), k1d)
    return mssim, grad / n_px


# ---------------------------------------------------------------------------
# individual loss terms
# ---------------------------------------------------------------------------

def color_loss_mapping(c_hat: np.ndarray, c_gt: np.ndarray, dssim_lambda: float = 0.2) -> float:
    """(1 - lambda) * L1 + lambda * (1 - SSIM)."""
    l1 = float(np.mean(np.abs(c_hat - c_gt)))
    return (1.0 - dssim_lambda) * l1 + dssim_lambda * (1.0 - ssim(c_hat, c_gt))


def depth_loss(d_hat: np.ndarray, d_gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute depth error over masked pixels; 0 if the mask is empty."""
    n = int(mask.sum())
    if n == 0:
        log.warning("depth loss: empty mask, contributing 0")
        return 0.0
    return float(np.abs(d_hat - d_gt)[mask].sum() / n)


def semantic_loss(probs: np.ndarray, s_gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Per-class one-vs-rest BCE of softmax outputs against one-hot labels,
    averaged over masked pixels and channels."""
    k = probs.shape[-1]
    if s_gt.min(initial=0) < 0 or s_gt.max(initial=0) >= k:
        raise ValueError("label id out of range")
    if mask is None:
        mask = np.ones(s_gt.shape, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        log.warning("semantic loss: empty mask, contributing 0")
        return 0.0
    p = np.clip(probs[mask], PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.eye(k, dtype=p.dtype)[s_gt[mask]]
    bce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(bce.sum() / (n * k))


def _semantic_adjoint(probs, s_gt, mask, scale):
    """d(semantic_loss)/d(probs), zero outside the mask and at the clamp."""
    k = probs.shape[-1]
    d = np.zeros(probs.shape, dtype=np.float64)
    n = int(mask.sum())
    if n == 0:
        return d, 0.0
    p_raw = probs[mask]
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.eye(k, dtype=p.dtype)[s_gt[mask]]
    bce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    g = (-y / p + (1.0 - y) / (1.0 - p)) / (n * k)
    g[(p_raw < PROB_CLAMP) | (p_raw > 1.0 - PROB_CLAMP)] = 0.0
    d[mask] = g * scale
    return d, float(bce.sum() / (n * k))


def dsr_loss(field: GaussianField, stats: ScaleStats) -> tuple[float, float]:
    """Mean oversized scale / mean negative-log undersized scale, over the
    axis-scale population outside the 2-sigma band; 0 for empty sets."""
    s = np.exp(field.log_scales.astype(np.float64))
    big = s > stats.s_big
    small = s < stats.s_small
    l_big = float(s[big].mean()) if big.any() else 0.0
    l_small = float(-np.log(s[small]).mean()) if small.any() else 0.0
    return l_big, l_small


def _dsr_grad(field: GaussianField, stats: ScaleStats, w_big: float, w_small: float):
    """Direct log-scale gradient of the weighted scale regularizer."""
    s = np.exp(field.log_scales.astype(np.float64))
    g = np.zeros_like(s)
    big = s > stats.s_big
    small = s < stats.s_small
    nb = int(big.sum())
    ns = int(small.sum())
    if nb:
        g[big] += w_big * s[big] / nb
    if ns:
        g[small] -= w_small / ns  # d(-log s)/d(log s) = -1
    return g


# ---------------------------------------------------------------------------
# composite objectives
# ---------------------------------------------------------------------------


@dataclass
class MappingLossResult:
    total: float
    parts: dict
    adjoints: AdjointGrids
    d_log_scales: np.ndarray  # direct scale-regularizer gradient, (N, 3)
    d_dec_weight: np.ndarray | None
    d_dec_bias: np.ndarray | None


@dataclass
class TrackingLossResult:
    total: float
    parts: dict
    adjoints: AdjointGrids
    mask: np.ndarray
    degenerate: bool


def mapping_loss(
    rendered: RenderOutput,
    decoder: SemanticDecoder | None,
    frame: Frame,
    field: GaussianField,
    stats: ScaleStats | None,
    weights: LossWeights,
) -> MappingLossResult:
    """Weighted color + depth + semantic + scale-regularizer objective with
    the per-pixel adjoints and direct parameter gradients it induces.

    Color covers the full image, depth is masked by depth validity, the
    semantic term feeds the decoder backward as well."""
    h, w = frame.shape
    n_sem = rendered.features.shape[-1]
    adj = AdjointGrids.zeros(h, w, n_sem)
    parts: dict[str, float] = {}

    lam = weights.dssim_lambda
    diff = rendered.color.astype(np.float64) - frame.rgb.astype(np.float64)
    l1 = float(np.mean(np.abs(diff)))
    mssim, dssim_da = ssim_with_grad(rendered.color, frame.rgb)
    parts["color"] = (1.0 - lam) * l1 + lam * (1.0 - mssim)
    adj.d_color += weights.lambda_c_m * (
        (1.0 - lam) * np.sign(diff) / diff.size - lam * dssim_da
    )

    valid = frame.depth > 0
    parts["depth"] = depth_loss(rendered.depth, frame.depth, valid)
    nv = int(valid.sum())
    if nv:
        ddiff = rendered.depth.astype(np.float64) - frame.depth.astype(np.float64)
        adj.d_depth += weights.lambda_d_m * np.sign(ddiff) * valid / nv

    d_dec_w = d_dec_b = None
    parts["semantic"] = 0.0
    if weights.lambda_s_m > 0.0 and decoder is not None:
        probs, _ = decode_labels(rendered.features, decoder)
        d_probs, bce = _semantic_adjoint(
            probs, frame.labels, np.ones((h, w), bool), weights.lambda_s_m
        )
        parts["semantic"] = bce
        d_feat, d_dec_w, d_dec_b = decoder_backward(rendered.features, decoder, d_probs)
        adj.d_features += d_feat

    parts["dsr_big"] = parts["dsr_small"] = 0.0
    d_ls = np.zeros((field.n, 3))
    if stats is not None and (weights.lambda_big_m > 0.0 or weights.lambda_small_m > 0.0):
        l_big, l_small = dsr_loss(field, stats)
        parts["dsr_big"], parts["dsr_small"] = l_big, l_small
        d_ls = _dsr_grad(field, stats, weights.lambda_big_m, weights.lambda_small_m)

    total = (
        weights.lambda_c_m * parts["color"]
        + weights.lambda_d_m * parts["depth"]
        + weights.lambda_s_m * parts["semantic"]
        + weights.lambda_big_m * parts["dsr_big"]
        + weights.lambda_small_m * parts["dsr_small"]
    )
    return MappingLossResult(float(total), parts, adj, d_ls, d_dec_w, d_dec_b)


def tracking_loss(
    rendered: RenderOutput,
    decoder: SemanticDecoder | None,
    frame: Frame,
    weights: LossWeights,
    mask_override: np.ndarray | None = None,
) -> TrackingLossResult:
    """Observed-mask-restricted L1 color + depth + semantic objective.

    The mask is a stop-gradient constant; each term is normalized by the
    masked pixel count. An all-false mask yields loss 0 and flags the
    iteration as degenerate."""
    h, w = frame.shape
    n_sem = rendered.features.shape[-1]
    adj = AdjointGrids.zeros(h, w, n_sem)
    mask = (
        mask_override
        if mask_override is not None
        else observed_mask(rendered, frame.depth, weights)
    )
    n = int(mask.sum())
    parts = {"color": 0.0, "depth": 0.0, "semantic": 0.0}
    if n == 0:
        log.warning("tracking loss: empty observed mask (degenerate iteration)")
        return TrackingLossResult(0.0, parts, adj, mask, True)

    diff = rendered.color.astype(np.float64) - frame.rgb.astype(np.float64)
    parts["color"] = float(np.abs(diff[mask]).mean())
    adj.d_color[mask] = weights.lambda_c_t * np.sign(diff[mask]) / (n * 3)

    ddiff = rendered.depth.astype(np.float64) - frame.depth.astype(np.float64)
    parts["depth"] = float(np.abs(ddiff[mask]).mean())
    adj.d_depth[mask] = weights.lambda_d_t * np.sign(ddiff[mask]) / n

    if weights.lambda_s_t > 0.0 and decoder is not None:
        probs, _ = decode_labels(rendered.features, decoder)
        d_probs, bce = _semantic_adjoint(probs, frame.labels, mask, weights.lambda_s_t)
        parts["semantic"] = bce
        d_feat, _, _ = decoder_backward(rendered.features, decoder, d_probs)
        adj.d_features += d_feat

    total = (
        weights.lambda_c_t * parts["color"]
        + weights.lambda_d_t * parts["depth"]
        + weights.lambda_s_t * parts["semantic"]
    )
    return TrackingLossResult(float(total), parts, adj, mask, False)
