"""Reverse-mode derivatives of the renderer and a finite-difference harness.

The backward pass is the exact reverse of the recorded forward
computation: per-pixel contributor lists (instance id + raw alpha) are
replayed back-to-front, reconstructing each contribution's transmittance
from the stored final value. Per-instance gradients are accumulated
race-free (an instance belongs to exactly one tile) and then chained
through the projection in one vectorized pass:

    alpha -> (conic, projected center, opacity)
          -> 2D covariance -> (J, world covariance, camera rotation)
          -> camera point  -> (position, pose)

Clamps (alpha <= 0.99, the 1/255 skip, early termination) act as
stop-gradients. Gradients of Gaussians that contributed to no pixel are
exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .field import GaussianField
from .geom import (
    Intrinsics,
    Pose,
    quat_normalize,
    quat_rotation_vjp,
    quat_to_rot,
    quat_to_rot_batch,
    unit_quat_grad_to_raw,
)
from .raster import RenderConfig, RenderOutput, RenderRecord, render


class ForwardBackwardMismatchError(RuntimeError):
    """The replayed forward pass deviated from the recorded one."""


@dataclass
class FieldGradients:
    d_positions: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_colors: np.ndarray
    d_features: np.ndarray

    @staticmethod
    def zeros(n: int, n_sem: int) -> "FieldGradients":
        return FieldGradients(
            d_positions=np.zeros((n, 3)),
            d_rotations=np.zeros((n, 4)),
            d_log_scales=np.zeros((n, 3)),
            d_opacity_logits=np.zeros(n),
            d_colors=np.zeros((n, 3)),
            d_features=np.zeros((n, n_sem)),
        )

    def blocks(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.d_positions,
            "rotations": self.d_rotations,
            "log_scales": self.d_log_scales,
            "opacity_logits": self.d_opacity_logits,
            "colors": self.d_colors,
            "features": self.d_features,
        }


@dataclass
class PoseGradient:
    d_q: np.ndarray  # (4,) raw-quaternion gradient
    d_t: np.ndarray  # (3,)

    @staticmethod
    def zeros() -> "PoseGradient":
        return PoseGradient(np.zeros(4), np.zeros(3))


@dataclass
class AdjointGrids:
    """Per-pixel loss derivatives with respect to the render outputs."""

    d_color: np.ndarray  # (H, W, 3)
    d_depth: np.ndarray  # (H, W)
    d_features: np.ndarray  # (H, W, N_sem)
    d_acc: np.ndarray  # (H, W)

    @staticmethod
    def zeros(h: int, w: int, n_sem: int) -> "AdjointGrids":
        return AdjointGrids(
            d_color=np.zeros((h, w, 3)),
            d_depth=np.zeros((h, w)),
            d_features=np.zeros((h, w, n_sem)),
            d_acc=np.zeros((h, w)),
        )


@njit(parallel=True, fastmath=True, cache=True)
def _backward_tiles(
    offsets, rec_inst, rec_alpha, cnt, final_t, inst_g,
    gx, gy, gz, con_a, con_b, con_c, cov_u, cov_v, cov_w, inv_det, inv_opac,
    colors, feats,
    d_color, d_depth, d_feat, d_acc,
    width, height, tile, tiles_x, tiles_y, alpha_clamp, want_field,
    i_dg, i_duvw, i_do, i_dc, i_dd, i_df,
):
    n_tiles = tiles_x * tiles_y
    n_sem = feats.shape[1]
    for t in prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        px0 = tx * tile
        px1 = min(px0 + tile, width)
        py0 = ty * tile
        py1 = min(py0 + tile, height)
        dfl = np.empty(n_sem, dtype=rec_alpha.dtype)
        for py in range(py0, py1):
            for px in range(px0, px1):
                m = cnt[py, px]
                if m == 0:
                    continue
                base = offsets[py * width + px]
                t_run = final_t[py, px]
                s_acc = rec_alpha[0] * 0.0
                dc0 = d_color[py, px, 0]
                dc1 = d_color[py, px, 1]
                dc2 = d_color[py, px, 2]
                ddep = d_depth[py, px]
                dacc = d_acc[py, px]
                for s in range(n_sem):
                    dfl[s] = d_feat[py, px, s]
                for kk in range(m - 1, -1, -1):
                    slot = base + kk
                    ii = rec_inst[slot]
                    araw = rec_alpha[slot]
                    g = inst_g[ii]
                    alpha = min(araw, alpha_clamp)
                    inv1m = 1.0 / (1.0 - alpha)
                    t_i = t_run * inv1m
                    wgt = alpha * t_i
                    r_i = (
                        colors[g, 0] * dc0
                        + colors[g, 1] * dc1
                        + colors[g, 2] * dc2
                        + gz[g] * ddep
                        + dacc
                    )
                    for s in range(n_sem):
                        r_i += feats[g, s] * dfl[s]
                    if want_field:
                        i_dc[ii, 0] += wgt * dc0
                        i_dc[ii, 1] += wgt * dc1
                        i_dc[ii, 2] += wgt * dc2
                        for s in range(n_sem):
                            i_df[ii, s] += wgt * dfl[s]
                    i_dd[ii] += wgt * ddep
                    e = t_i * r_i - s_acc * inv1m
                    s_acc += wgt * r_i
                    t_run = t_i
                    if araw < alpha_clamp:
                        dx = px - gx[g]
                        dy = py - gy[g]
                        a = con_a[g]
                        b = con_b[g]
                        c = con_c[g]
                        q2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                        dq2 = -0.5 * araw * e
                        i_dg[ii, 0] -= dq2 * (2.0 * a * dx + 2.0 * b * dy)
                        i_dg[ii, 1] -= dq2 * (2.0 * b * dx + 2.0 * c * dy)
                        idet = inv_det[g]
                        i_duvw[ii, 0] += dq2 * (dy * dy - q2 * cov_w[g]) * idet
                        i_duvw[ii, 1] += dq2 * (-2.0 * dx * dy + 2.0 * q2 * cov_v[g]) * idet
                        i_duvw[ii, 2] += dq2 * (dx * dx - q2 * cov_u[g]) * idet
                        if want_field:
                            i_do[ii] += e * araw * inv_opac[g]


def backward_render(
    field: GaussianField,
    pose: Pose,
    k: Intrinsics,
    adjoints: AdjointGrids,
    cfg: RenderConfig | None = None,
    forward: RenderOutput | None = None,
    want_field: bool = True,
    replay: tuple[RenderOutput, RenderRecord | None] | None = None,
) -> tuple[FieldGradients, PoseGradient]:
    """Gradients of a scalar loss with per-pixel adjoints w.r.t. field & pose.

    ``replay`` lets callers pass the recorded forward pass; otherwise it
    is recomputed here. If ``forward`` is given, the replayed outputs are
    checked against it (1e-5) to catch forward/backward mismatches.
    """
    cfg = cfg or RenderConfig()
    if replay is None:
        replay = render(field, pose, k, cfg, record=True)
    out, rec = replay
    if forward is not None:
        dev = max(
            float(np.max(np.abs(out.color - forward.color), initial=0.0)),
            float(np.max(np.abs(out.depth - forward.depth), initial=0.0)),
            float(np.max(np.abs(out.acc_opacity - forward.acc_opacity), initial=0.0)),
        )
        if dev > 1e-5:
            raise ForwardBackwardMismatchError(
                f"replayed forward deviates from recorded forward by {dev:.3e}"
            )
    fg = FieldGradients.zeros(field.n, field.n_sem)
    pg = PoseGradient.zeros()
    if rec is None or rec.rec_inst.size == 0:
        return fg, pg

    proj = rec.proj
    dt = cfg.dtype
    h, w = k.height, k.width
    tiles_x = (w + cfg.tile_size - 1) // cfg.tile_size
    tiles_y = (h + cfg.tile_size - 1) // cfg.tile_size
    n_inst = rec.inst_g.shape[0]
    n_sem = field.n_sem
    i_dg = np.zeros((n_inst, 2), dt)
    i_duvw = np.zeros((n_inst, 3), dt)
    i_do = np.zeros(n_inst, dt)
    i_dc = np.zeros((n_inst, 3), dt)
    i_dd = np.zeros(n_inst, dt)
    i_df = np.zeros((n_inst, n_sem), dt)
    _backward_tiles(
        rec.offsets, rec.rec_inst, rec.rec_alpha, out.last_contrib,
        out.transmittance, rec.inst_g,
        proj.gx, proj.gy, proj.depth, proj.con_a, proj.con_b, proj.con_c,
        proj.cov_u, proj.cov_v, proj.cov_w,
        (1.0 / proj.det.astype(np.float64)).astype(dt),
        (1.0 / proj.opacity.astype(np.float64)).astype(dt),
        proj.colors, proj.feats,
        np.ascontiguousarray(adjoints.d_color, dtype=dt),
        np.ascontiguousarray(adjoints.d_depth, dtype=dt),
        np.ascontiguousarray(adjoints.d_features, dtype=dt),
        np.ascontiguousarray(adjoints.d_acc, dtype=dt),
        w, h, cfg.tile_size, tiles_x, tiles_y, dt(cfg.alpha_clamp), want_field,
        i_dg, i_duvw, i_do, i_dc, i_dd, i_df,
    )

    # deterministic instance -> visible-Gaussian reduction
    n_vis = proj.idx.size
    ig = rec.inst_g

    def reduce_cols(cols: np.ndarray) -> np.ndarray:
        if cols.ndim == 1:
            return np.bincount(ig, weights=cols.astype(np.float64), minlength=n_vis)
        return np.stack(
            [np.bincount(ig, weights=cols[:, j].astype(np.float64), minlength=n_vis)
             for j in range(cols.shape[1])],
            axis=1,
        )

    g_dg = reduce_cols(i_dg)
    g_duvw = reduce_cols(i_duvw)
    g_do = reduce_cols(i_do)
    g_dc = reduce_cols(i_dc)
    g_dd = reduce_cols(i_dd)
    g_df = reduce_cols(i_df)

    return _chain_to_parameters(
        field, pose, k, proj, g_dg, g_duvw, g_do, g_dc, g_dd, g_df, want_field
    )


def _chain_to_parameters(
    field, pose, k, proj, g_dg, g_duvw, g_do, g_dc, g_dd, g_df, want_field
):
    """Vectorized chain from screen-space gradients to raw parameters."""
    idx = proj.idx
    p = proj.p_cam  # (n, 3) float64
    covw = proj.cov_world  # (n, 3, 3) float64
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = k.fx, k.fy

    rot = quat_to_rot(pose.q)
    m = rot @ covw @ rot.T
    n = idx.size
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    jac_t = jac.transpose(0, 2, 1)

    gc2 = np.empty((n, 2, 2))
    gc2[:, 0, 0] = g_duvw[:, 0]
    gc2[:, 0, 1] = gc2[:, 1, 0] = 0.5 * g_duvw[:, 1]
    gc2[:, 1, 1] = g_duvw[:, 2]

    d_jac = 2.0 * (gc2 @ jac @ m)
    d_m = jac_t @ gc2 @ jac
    d_covw = rot.T @ d_m @ rot

    dp = (jac_t @ g_dg[:, :, None])[:, :, 0]
    dp[:, 2] += g_dd
    dp[:, 0] += d_jac[:, 0, 2] * (-fx / (z * z))
    dp[:, 1] += d_jac[:, 1, 2] * (-fy / (z * z))
    dp[:, 2] += (
        d_jac[:, 0, 0] * (-fx / (z * z))
        + d_jac[:, 1, 1] * (-fy / (z * z))
        + d_jac[:, 0, 2] * (2.0 * fx * x / z**3)
        + d_jac[:, 1, 2] * (2.0 * fy * y / z**3)
    )

    mu = field.positions[idx].astype(np.float64)
    d_rot = 2.0 * (d_m @ rot @ covw).sum(axis=0)
    d_rot += dp.T @ mu
    q_hat = quat_normalize(pose.q)
    d_q_hat = quat_rotation_vjp(q_hat[None, :], d_rot[None, :, :])[0]
    pg = PoseGradient(
        d_q=unit_quat_grad_to_raw(pose.q, d_q_hat), d_t=dp.sum(axis=0)
    )

    fg = FieldGradients.zeros(field.n, field.n_sem)
    if not want_field:
        return fg, pg

    fg.d_positions[idx] = dp @ rot
    q_g = field.rotations[idx].astype(np.float64)
    norms = np.linalg.norm(q_g, axis=1, keepdims=True)
    q_g_hat = q_g / norms
    r_g = quat_to_rot_batch(q_g)
    big_d = np.exp(2.0 * field.log_scales[idx].astype(np.float64))
    d_rg = 2.0 * (d_covw @ r_g) * big_d[:, None, :]
    d_diag = np.diagonal(r_g.transpose(0, 2, 1) @ d_covw @ r_g, axis1=1, axis2=2)
    fg.d_log_scales[idx] = d_diag * 2.0 * big_d
    d_qg_hat = quat_rotation_vjp(q_g_hat, d_rg)
    inner = np.sum(q_g_hat * d_qg_hat, axis=1, keepdims=True)
    fg.d_rotations[idx] = (d_qg_hat - q_g_hat * inner) / norms
    o = 1.0 / (1.0 + np.exp(-field.opacity_logits[idx].astype(np.float64)))
    fg.d_opacity_logits[idx] = g_do * o * (1.0 - o)
    fg.d_colors[idx] = g_dc
    fg.d_features[idx] = g_df
    return fg, pg


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

def _field_as_float64(field: GaussianField) -> GaussianField:
    return GaussianField(
        field.positions.astype(np.float64),
        field.rotations.astype(np.float64),
        field.log_scales.astype(np.float64),
        field.opacity_logits.astype(np.float64),
        field.colors.astype(np.float64),
        field.features.astype(np.float64),
    )


def finite_difference_gradients(
    loss_fn, field: GaussianField, pose: Pose, eps: float = 1e-5
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Central differences of ``loss_fn(field, pose)`` per scalar parameter.

    The field is upcast to float64 so perturbations are exactly
    representable. Returns (field_block_grads, pose_block_grads).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps outside the supported range [1e-7, 1e-3]")
    base = _field_as_float64(field)
    field_grads: dict[str, np.ndarray] = {}
    for name, arr in base.param_blocks().items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(base, pose)
            flat[i] = orig - eps
            lm = loss_fn(base, pose)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * eps)
        field_grads[name] = g
    pose_grads: dict[str, np.ndarray] = {}
    for name, vec in (("q", pose.q), ("t", pose.t)):
        g = np.zeros_like(vec)
        for i in range(vec.size):
            orig = vec[i]
            vec[i] = orig + eps
            lp = loss_fn(base, pose)
            vec[i] = orig - eps
            lm = loss_fn(base, pose)
            vec[i] = orig
            g[i] = (lp - lm) / (2.0 * eps)
        pose_grads[name] = g
    return field_grads, pose_grads


def relative_errors(fd: np.ndarray, an: np.ndarray) -> np.ndarray:
    """Elementwise relative error with an absolute floor for near-zero pairs."""
    fd = np.asarray(fd, dtype=np.float64)
    an = np.asarray(an, dtype=np.float64)
    scale = np.maximum(np.abs(fd), np.abs(an))
    floor = 1e-7 * max(1.0, float(np.max(np.abs(fd), initial=0.0)))
    err = np.abs(fd - an) / np.maximum(scale, floor)
    err[scale < floor] = 0.0
    return err


def finite_difference_check(
    loss_fn,
    field: GaussianField,
    pose: Pose,
    analytic_field: FieldGradients,
    analytic_pose: PoseGradient,
    eps: float = 1e-5,
) -> dict[str, dict[str, float]]:
    """Max/mean relative FD-vs-analytic error per parameter block."""
    fd_field, fd_pose = finite_difference_gradients(loss_fn, field, pose, eps)
    report: dict[str, dict[str, float]] = {}
    an_blocks = analytic_field.blocks()
    for name, fd in fd_field.items():
        err = relative_errors(fd, an_blocks[name])
        report[name] = {
            "max_rel": float(err.max(initial=0.0)),
            "mean_rel": float(err.mean()) if err.size else 0.0,
        }
    for name, fd, an in (("pose_q", fd_pose["q"], analytic_pose.d_q),
                         ("pose_t", fd_pose["t"], analytic_pose.d_t)):
        err = relative_errors(fd, an)
        report[name] = {"max_rel": float(err.max()), "mean_rel": float(err.mean())}
    return report
