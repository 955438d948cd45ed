"""Storage and maintenance of the semantic Gaussian field.

Each of the N primitives carries a world position, an orientation
quaternion, per-axis log scales, an opacity logit, an RGB color and a
low-dimensional semantic feature vector. Opacity is stored in logit
space and scale in log space so the optimizer works on unconstrained
parameters while sigmoid/exp keep the rendered quantities in range by
construction.

Arrays are float32 (matching the checkpoint format); verification paths
upcast to float64 internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import Frame
from .geom import Intrinsics, Pose, quat_mul, quat_normalize, quat_to_rot, quat_to_rot_batch


class EmptyVisibleSetError(ValueError):
    pass


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GaussianField:
    positions: np.ndarray  # (N, 3) meters
    rotations: np.ndarray  # (N, 4) unit quaternions, scalar-first
    log_scales: np.ndarray  # (N, 3) log meters
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) in [0, 1]
    features: np.ndarray  # (N, N_sem)

    def __post_init__(self) -> None:
        n = self.positions.shape[0]
        assert self.rotations.shape == (n, 4)
        assert self.log_scales.shape == (n, 3)
        assert self.opacity_logits.shape == (n,)
        assert self.colors.shape == (n, 3)
        assert self.features.shape[0] == n

    @staticmethod
    def empty(n_sem: int) -> "GaussianField":
        f32 = np.float32
        return GaussianField(
            positions=np.zeros((0, 3), f32),
            rotations=np.zeros((0, 4), f32),
            log_scales=np.zeros((0, 3), f32),
            opacity_logits=np.zeros((0,), f32),
            colors=np.zeros((0, 3), f32),
            features=np.zeros((0, n_sem), f32),
        )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def n_sem(self) -> int:
        return self.features.shape[1]

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits.astype(np.float64))

    def copy(self) -> "GaussianField":
        return GaussianField(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
            self.features.copy(),
        )

    def param_blocks(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
            "features": self.features,
        }


@dataclass
class ScaleStats:
    """Mean/std of the visible axis-scale population and the 2-sigma band."""

    mu_s: float
    sigma_s: float

    @property
    def s_big(self) -> float:
        return self.mu_s + 2.0 * self.sigma_s

    @property
    def s_small(self) -> float:
        return self.mu_s - 2.0 * self.sigma_s


def covariance_3d(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R diag(exp(ls))^2 R^T of a single Gaussian."""
    r = quat_to_rot(rotation)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (r * s2[None, :]) @ r.T


def covariance_3d_batch(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    r = quat_to_rot_batch(rotations)
    s2 = np.exp(2.0 * log_scales.astype(np.float64))
    return (r * s2[:, None, :]) @ r.transpose(0, 2, 1)


def backproject_pixels(
    rows: np.ndarray, cols: np.ndarray, depth: np.ndarray, pose: Pose, k: Intrinsics
) -> np.ndarray:
    """World points of pixels at given depths under a world-to-camera pose."""
    x = (cols - k.cx) / k.fx * depth
    y = (rows - k.cy) / k.fy * depth
    p_cam = np.stack([x, y, depth], axis=-1)
    r_wc = quat_to_rot(pose.q).T
    return (p_cam - pose.t[None, :]) @ r_wc.T


def expand_from_mask(
    field: GaussianField,
    frame: Frame,
    pose: Pose,
    k: Intrinsics,
    mask: np.ndarray,
    rng: np.random.Generator,
) -> GaussianField:
    """Add one Gaussian per masked pixel with valid depth.

    New primitives are backprojected to the observed depth, take the pixel
    color, opacity 0.5, identity rotation, an isotropic scale of
    d / mean(fx, fy), and a near-zero random semantic feature. Masked
    pixels without valid depth are skipped. Existing rows are untouched.
    """
    if mask.shape != frame.shape:
        raise ValueError("mask shape must match the frame")
    rows, cols = np.nonzero(mask)
    d = frame.depth[rows, cols].astype(np.float64)
    valid = d > 0
    rows, cols, d = rows[valid], cols[valid], d[valid]
    m = rows.shape[0]
    if m == 0:
        return field

    pts = backproject_pixels(
        rows.astype(np.float64), cols.astype(np.float64), d, pose, k
    )
    f32 = np.float32
    quats = np.zeros((m, 4), f32)
    quats[:, 0] = 1.0
    scales = np.log(d / k.mean_focal).astype(f32)[:, None].repeat(3, axis=1)
    feats = rng.uniform(-1e-4, 1e-4, size=(m, field.n_sem)).astype(f32)
    return GaussianField(
        positions=np.concatenate([field.positions, pts.astype(f32)]),
        rotations=np.concatenate([field.rotations, quats]),
        log_scales=np.concatenate([field.log_scales, scales]),
        opacity_logits=np.concatenate(
            [field.opacity_logits, np.full(m, logit(0.5), f32)]
        ),
        colors=np.concatenate([field.colors, frame.rgb[rows, cols].astype(f32)]),
        features=np.concatenate([field.features, feats]),
    )


def prune_low_opacity(
    field: GaussianField, threshold: float
) -> tuple[GaussianField, np.ndarray]:
    """Drop Gaussians with sigmoid(opacity) < threshold; order preserved.

    Returns the filtered field and the boolean keep mask so optimizer
    state can be filtered in lockstep.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    keep = sigmoid(field.opacity_logits.astype(np.float64)) >= threshold
    if keep.all():
        return field, keep
    return (
        GaussianField(
            field.positions[keep],
            field.rotations[keep],
            field.log_scales[keep],
            field.opacity_logits[keep],
            field.colors[keep],
            field.features[keep],
        ),
        keep,
    )


def compute_scale_stats(field: GaussianField, visible: np.ndarray) -> ScaleStats:
    """Mean and population std over all three axis scales of visible Gaussians.

    The population flattens every axis of every visible Gaussian so the
    regularizer acts on each anisotropic axis independently. The result is
    treated as a constant by the losses (no gradient flows through it).
    """
    visible = np.asarray(visible)
    if visible.size == 0:
        raise EmptyVisibleSetError("scale statistics need a non-empty visible set")
    s = np.exp(field.log_scales[visible].astype(np.float64)).ravel()
    return ScaleStats(mu_s=float(s.mean()), sigma_s=float(s.std()))


def field_transform(field: GaussianField, pose: Pose) -> GaussianField:
    """Camera-frame view of the field: positions mapped by the pose, rotations
    left-multiplied by the pose rotation; other attributes shared. The input
    field is not mutated."""
    q_pose = quat_normalize(pose.q)
    r = quat_to_rot(q_pose)
    pos = (field.positions.astype(np.float64) @ r.T + pose.t[None, :]).astype(
        field.positions.dtype
    )
    rots = np.empty_like(field.rotations)
    for i in range(field.n):
        rots[i] = quat_normalize(quat_mul(q_pose, field.rotations[i].astype(np.float64)))
    return GaussianField(
        pos, rots, field.log_scales, field.opacity_logits, field.colors, field.features
    )


# ---------------------------------------------------------------------------
# checkpoint format: "SGF1" | u32 N | u32 N_sem | f32 arrays
#   positions, rotations, log_scales, opacity_logits, colors, features
# optionally followed by "DEC1" | u32 K_sem | f32 weight (K_sem x N_sem) | f32 bias
# all little-endian
# ---------------------------------------------------------------------------

_MAGIC = b"SGF1"
_DEC_MAGIC = b"DEC1"


def save_checkpoint(path: str, field: GaussianField, decoder=None) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", field.n, field.n_sem))
        for arr in (
            field.positions,
            field.rotations,
            field.log_scales,
            field.opacity_logits,
            field.colors,
            field.features,
        ):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if decoder is not None:
            f.write(_DEC_MAGIC)
            f.write(struct.pack("<I", decoder.k_sem))
            f.write(np.ascontiguousarray(decoder.weight, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(decoder.bias, dtype="<f4").tobytes())


def load_checkpoint(path: str):
    """Read a field checkpoint; returns (field, decoder_or_None)."""
    from .decode import SemanticDecoder

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    n, n_sem = struct.unpack_from("<II", blob, 4)
    off = 12
    shapes = [(n, 3), (n, 4), (n, 3), (n,), (n, 3), (n, n_sem)]
    arrays = []
    for shape in shapes:
        cnt = int(np.prod(shape))
        end = off + 4 * cnt
        if end > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays.append(np.frombuffer(blob[off:end], dtype="<f4").reshape(shape).copy())
        off = end
    field = GaussianField(*arrays)
    decoder = None
    if off < len(blob):
        if blob[off : off + 4] != _DEC_MAGIC:
            raise ValueError(f"{path}: bad decoder block magic")
        (k_sem,) = struct.unpack_from("<I", blob, off + 4)
        off += 8
        w_end = off + 4 * k_sem * n_sem
        b_end = w_end + 4 * k_sem
        if b_end != len(blob):
            raise ValueError(f"{path}: decoder block has wrong length")
        weight = np.frombuffer(blob[off:w_end], dtype="<f4").reshape(k_sem, n_sem).copy()
        bias = np.frombuffer(blob[w_end:b_end], dtype="<f4").copy()
        decoder = SemanticDecoder(weight=weight, bias=bias)
    return field, decoder
