"""Tracking and mapping loops, keyframe sampling, and the Adam optimizer.

The pipeline is sequential by contract: tracking of frame t renders the
field mapped through frame t-1 with all field parameters frozen, then
mapping refines the field (and decoder) with poses frozen. Keyframe
mapping iterations pick their target frame by random sampling with a
periodic forced selection of the current frame; a covisibility-based
alternative ("lckm") exists solely for optimization-bias comparisons.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .config import Hyperparameters
from .data import Frame
from .decode import SemanticDecoder, init_decoder
from .field import (
    GaussianField,
    compute_scale_stats,
    covariance_3d_batch,
    expand_from_mask,
    prune_low_opacity,
)
from .geom import Intrinsics, Pose, constant_velocity_init, quat_normalize, quat_to_rot
from .grad import backward_render
from .losses import mapping_loss, tracking_loss, unobserved_mask
from .raster import RenderConfig, render

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def like(arr: np.ndarray) -> "AdamState":
        return AdamState(m=np.zeros(arr.shape, arr.dtype), v=np.zeros(arr.shape, arr.dtype))

    def grow(self, n_new: int) -> None:
        """Append zero-initialized moment rows for newly added Gaussians."""
        if n_new <= 0:
            return
        pad = (n_new,) + self.m.shape[1:]
        self.m = np.concatenate([self.m, np.zeros(pad, self.m.dtype)])
        self.v = np.concatenate([self.v, np.zeros(pad, self.v.dtype)])

    def filter(self, keep: np.ndarray) -> None:
        self.m = self.m[keep]
        self.v = self.v[keep]


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One in-place Adam update with bias correction.

    Moments live in the parameter dtype. A non-finite gradient skips the
    update for this block (the step counter still advances) and logs a
    warning."""
    state.step += 1
    if not np.all(np.isfinite(grad)):
        log.warning("adam: non-finite gradient, skipping update at step %d", state.step)
        return params
    g = np.asarray(grad).astype(state.m.dtype, copy=False)
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    params -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)
    return params


class MapOptimizer:
    """Per-block Adam states for the field plus the decoder, kept in
    lockstep with field expansion and pruning."""

    def __init__(self, field: GaussianField, decoder: SemanticDecoder | None):
        self.states = {name: AdamState.like(arr) for name, arr in field.param_blocks().items()}
        self.dec_w = AdamState.like(decoder.weight) if decoder is not None else None
        self.dec_b = AdamState.like(decoder.bias) if decoder is not None else None

    def grow(self, n_new: int) -> None:
        for st in self.states.values():
            st.grow(n_new)

    def filter(self, keep: np.ndarray) -> None:
        for st in self.states.values():
            st.filter(keep)


# ---------------------------------------------------------------------------
# keyframes and samplers
# ---------------------------------------------------------------------------


@dataclass
class Keyframe:
    frame_id: int
    pose: Pose
    frame: Frame


@dataclass
class KeyframeSet:
    items: list[Keyframe] = dc_field(default_factory=list)

    def add(self, frame_id: int, pose: Pose, frame: Frame) -> None:
        if self.items and frame_id <= self.items[-1].frame_id:
            raise ValueError("keyframe ids must be strictly increasing")
        self.items.append(Keyframe(frame_id, pose.copy(), frame))

    def ids(self) -> list[int]:
        return [kf.frame_id for kf in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def select_keyframe(frame_id: int, hyper: Hyperparameters) -> bool:
    return frame_id % hyper.keyframe_every == 0


def rskm_sample(
    keyframes: KeyframeSet, current: int, k_m: int, t_opt: int, rng: np.random.Generator
) -> int:
    """Random-sampling keyframe selection with periodic current-frame focus.

    On iterations divisible by t_opt the current frame is chosen
    deterministically; otherwise the draw is uniform over the keyframe
    set united with the current frame."""
    universe = keyframes.ids()
    if current not in universe:
        universe = universe + [current]
    if k_m % t_opt == 0:
        return current
    return universe[int(rng.integers(len(universe)))]


def covisible_keyframes(
    keyframes: KeyframeSet,
    frame: Frame,
    pose: Pose,
    k: Intrinsics,
    stride: int = 8,
    min_overlap: float = 0.25,
    near: float = 0.01,
) -> list[int]:
    """Keyframes whose frustum sees the current frame's backprojected points."""
    rows, cols = np.nonzero(frame.depth[::stride, ::stride] > 0)
    d = frame.depth[::stride, ::stride][rows, cols].astype(np.float64)
    rows = rows * stride
    cols = cols * stride
    if d.size == 0:
        return keyframes.ids()
    x = (cols - k.cx) / k.fx * d
    y = (rows - k.cy) / k.fy * d
    p_cam = np.stack([x, y, d], axis=-1)
    r_wc = quat_to_rot(pose.q).T
    pts_w = (p_cam - pose.t[None, :]) @ r_wc.T
    out = []
    for kf in keyframes:
        pc = pts_w @ quat_to_rot(kf.pose.q).T + kf.pose.t[None, :]
        z = pc[:, 2]
        ok = z > near
        u = k.fx * pc[ok, 0] / z[ok] + k.cx
        v = k.fy * pc[ok, 1] / z[ok] + k.cy
        inside = (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
        if inside.sum() / d.size >= min_overlap:
            out.append(kf.frame_id)
    return out


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------


@dataclass
class TrackResult:
    pose: Pose
    losses: list[float]
    failed: bool
    degenerate_iters: int


def track_frame(
    field: GaussianField,
    decoder: SemanticDecoder | None,
    frame: Frame,
    pose_init: Pose,
    hyper: Hyperparameters,
    k: Intrinsics,
    cfg: RenderConfig | None = None,
) -> TrackResult:
    """Optimize the camera pose against the frozen field.

    Runs iters_track Adam iterations on (q, t), renormalizing q after
    every step, and returns the pose with the lowest recorded loss. If
    the observed mask is empty for more than half the iterations the
    frame is flagged as a tracking failure and the initial pose is
    returned."""
    cfg = cfg or RenderConfig()
    if field.n == 0:
        log.warning("tracking frame %d against an empty field", frame.id)
        return TrackResult(pose_init.copy(), [], True, hyper.iters_track)

    cov_world = covariance_3d_batch(field.rotations, field.log_scales)
    pose = pose_init.copy()
    st_q = AdamState.like(pose.q)
    st_t = AdamState.like(pose.t)
    best_loss = np.inf
    best_pose = pose_init.copy()
    losses: list[float] = []
    degenerate = 0
    valid_mask = frame.depth > 0 if not hyper.use_obs_mask else None

    for _ in range(hyper.iters_track):
        out, rec = render(field, pose, k, cfg, record=True, cov_world=cov_world)
        tl = tracking_loss(out, decoder, frame, hyper.weights, mask_override=valid_mask)
        losses.append(tl.total)
        if tl.degenerate or rec is None:
            degenerate += 1
            continue
        if tl.total < best_loss:
            best_loss = tl.total
            best_pose = pose.copy()
        _, pg = backward_render(
            field, pose, k, tl.adjoints, cfg, want_field=False, replay=(out, rec)
        )
        adam_step(pose.q, pg.d_q, st_q, hyper.lr_q)
        adam_step(pose.t, pg.d_t, st_t, hyper.lr_t)
        pose.q = quat_normalize(pose.q)

    if degenerate > hyper.iters_track // 2:
        log.warning("tracking failure on frame %d (%d degenerate iters)", frame.id, degenerate)
        return TrackResult(pose_init.copy(), losses, True, degenerate)
    return TrackResult(best_pose, losses, False, degenerate)


# ---------------------------------------------------------------------------
# mapping
# ---------------------------------------------------------------------------


def _visible_field_indices(rec) -> np.ndarray:
    """Field rows of Gaussians that contributed to at least one pixel."""
    if rec is None or rec.rec_inst.size == 0:
        return np.empty(0, np.int64)
    flags = np.zeros(rec.proj.idx.size, bool)
    flags[rec.inst_g[rec.rec_inst]] = True
    return rec.proj.idx[flags]


@dataclass
class MapStats:
    expanded: int = 0
    skipped_invalid: int = 0
    pruned: int = 0
    mask_fraction: float = 0.0
    final_loss: float = 0.0
    first_loss: float = 0.0
    final_parts: dict = dc_field(default_factory=dict)


class SlamState:
    """Shared mutable state of one run: field, decoder, optimizer, rng."""

    def __init__(self, hyper: Hyperparameters, k: Intrinsics, k_sem: int,
                 cfg: RenderConfig | None = None):
        self.hyper = hyper
        self.k = k
        self.cfg = cfg or RenderConfig()
        self.rng = np.random.default_rng(hyper.seed)
        n_sem = min(hyper.n_sem, k_sem - 1)
        if n_sem < 1:
            raise ValueError(f"K_sem={k_sem} leaves no room for features (n_sem >= 1)")
        if n_sem != hyper.n_sem:
            log.info("clamping n_sem from %d to %d (< K_sem=%d)", hyper.n_sem, n_sem, k_sem)
        self.field = GaussianField.empty(n_sem)
        self.decoder = init_decoder(k_sem, n_sem, hyper.seed)
        self.optimizer = MapOptimizer(self.field, self.decoder)
        self.keyframes = KeyframeSet()
        self.iter_counts: dict[int, int] = {}
        self.total_map_iters = 0


def _expand(state: SlamState, frame: Frame, pose: Pose, mask: np.ndarray) -> tuple[int, int]:
    hyper = state.hyper
    budget = hyper.max_gaussians - state.field.n
    n_masked = int(mask.sum())
    if n_masked > budget:
        log.warning("expansion capped at %d of %d masked pixels", budget, n_masked)
        rows, cols = np.nonzero(mask)
        pick = state.rng.choice(rows.size, size=max(budget, 0), replace=False)
        capped = np.zeros_like(mask)
        capped[rows[pick], cols[pick]] = True
        mask = capped
    n_before = state.field.n
    state.field = expand_from_mask(state.field, frame, pose, state.k, mask, state.rng)
    added = state.field.n - n_before
    state.optimizer.grow(added)
    return added, int(mask.sum()) - added


def _mapping_iterations(
    state: SlamState, current: Frame, current_pose: Pose, n_iters: int,
    covisible: list[int] | None,
) -> tuple[float, float, dict]:
    """The shared inner loop of map_frame and first-frame initialization."""
    hyper = state.hyper
    by_id = {kf.frame_id: kf for kf in state.keyframes}
    first = last = 0.0
    last_parts: dict = {}
    for k_m in range(n_iters):
        if hyper.sampler == "rskm":
            fid = rskm_sample(state.keyframes, current.id, k_m, hyper.t_opt, state.rng)
        else:
            ids = covisible if covisible is not None else state.keyframes.ids()
            universe = ids + ([current.id] if current.id not in ids else [])
            fid = universe[int(state.rng.integers(len(universe)))]
        if fid == current.id:
            frame, pose = current, current_pose
        else:
            kf = by_id[fid]
            frame, pose = kf.frame, kf.pose
        out, rec = render(state.field, pose, state.k, state.cfg, record=True)
        stats = None
        if hyper.use_dsr:
            visible = _visible_field_indices(rec)
            if visible.size:
                stats = compute_scale_stats(state.field, visible)
        ml = mapping_loss(out, state.decoder, frame, state.field, stats, hyper.weights)
        fg, _ = backward_render(
            state.field, pose, state.k, ml.adjoints, state.cfg, replay=(out, rec)
        )
        fg.d_log_scales += ml.d_log_scales
        f = state.field
        opt = state.optimizer
        adam_step(f.positions, fg.d_positions, opt.states["positions"], hyper.lr_position)
        adam_step(f.rotations, fg.d_rotations, opt.states["rotations"], hyper.lr_rotation)
        adam_step(f.log_scales, fg.d_log_scales, opt.states["log_scales"], hyper.lr_scale)
        adam_step(f.opacity_logits, fg.d_opacity_logits, opt.states["opacity_logits"], hyper.lr_opacity)
        adam_step(f.colors, fg.d_colors, opt.states["colors"], hyper.lr_color)
        adam_step(f.features, fg.d_features, opt.states["features"], hyper.lr_feature)
        norms = np.linalg.norm(f.rotations, axis=1, keepdims=True)
        f.rotations /= np.maximum(norms, 1e-12).astype(f.rotations.dtype)
        if ml.d_dec_weight is not None:
            adam_step(state.decoder.weight, ml.d_dec_weight, opt.dec_w, hyper.lr_decoder)
            adam_step(state.decoder.bias, ml.d_dec_bias, opt.dec_b, hyper.lr_decoder)
        state.iter_counts[fid] = state.iter_counts.get(fid, 0) + 1
        state.total_map_iters += 1
        if (
            hyper.prune_enabled
            and state.total_map_iters % hyper.prune_every == 0
            and state.field.n
        ):
            state.field, keep = prune_low_opacity(state.field, hyper.prune_threshold)
            if not keep.all():
                state.optimizer.filter(keep)
        if k_m == 0:
            first = ml.total
        last = ml.total
        last_parts = ml.parts
    return first, last, last_parts


def initialize_first_frame(
    frame: Frame, state: SlamState
) -> tuple[GaussianField, SemanticDecoder, KeyframeSet]:
    """Bootstrap the field from frame 0 at the identity pose.

    All valid-depth pixels become Gaussians and the mapping loop runs for
    k_init iterations on the single keyframe."""
    if not (frame.depth > 0).any():
        raise ValueError("first frame has no valid depth; cannot initialize")
    pose0 = Pose.identity()
    mask = frame.depth > 0
    _expand(state, frame, pose0, mask)
    state.keyframes.add(frame.id, pose0, frame)
    _mapping_iterations(state, frame, pose0, state.hyper.k_init, None)
    return state.field, state.decoder, state.keyframes


def map_frame(
    state: SlamState, frame: Frame, pose: Pose, n_iters: int | None = None
) -> MapStats:
    """Expand the field from the unobserved mask of the current frame, then
    run the keyframe-sampled mapping iterations."""
    hyper = state.hyper
    ms = MapStats()
    out = render(state.field, pose, state.k, state.cfg)
    if hyper.use_unobs_mask:
        mask = unobserved_mask(out, frame.depth, hyper.weights)
    else:
        valid = frame.depth > 0
        mask = valid & (state.rng.random(frame.shape) < hyper.random_expand_fraction)
    ms.mask_fraction = float(mask.mean())
    ms.expanded, ms.skipped_invalid = _expand(state, frame, pose, mask)

    covis = None
    if hyper.sampler == "lckm":
        covis = covisible_keyframes(state.keyframes, frame, pose, state.k)
    ms.first_loss, ms.final_loss, ms.final_parts = _mapping_iterations(
        state, frame, pose, n_iters if n_iters is not None else hyper.iters_map, covis
    )
    return ms


# ---------------------------------------------------------------------------
# full sequence
# ---------------------------------------------------------------------------


@dataclass
class SequenceResult:
    trajectory: list[Pose]
    field: GaussianField
    decoder: SemanticDecoder
    per_frame: list[dict]
    keyframes: KeyframeSet
    iter_counts: dict[int, int]


def run_sequence(
    frames: list[Frame],
    hyper: Hyperparameters,
    k: Intrinsics,
    k_sem: int,
    cfg: RenderConfig | None = None,
    progress: bool = False,
) -> SequenceResult:
    """Track and map a whole RGB-D-semantic sequence.

    Frame 0 initializes the field at the identity pose; every later frame
    is tracked from the constant-velocity extrapolation, optionally
    admitted as a keyframe, and mapped. Tracking failures fall back to
    the initial pose and the pipeline continues."""
    if not frames:
        raise ValueError("need at least one frame")
    state = SlamState(hyper, k, k_sem, cfg)
    trajectory: list[Pose] = []
    per_frame: list[dict] = []

    for i, frame in enumerate(frames):
        t0 = time.perf_counter()
        entry: dict = {"frame_id": frame.id, "n_before": state.field.n}
        if i == 0:
            initialize_first_frame(frame, state)
            pose = Pose.identity()
            entry["tracking"] = None
        else:
            prev = trajectory[i - 1]
            prev2 = trajectory[i - 2] if i >= 2 else trajectory[i - 1]
            pose_init = constant_velocity_init(prev, prev2)
            tr = track_frame(state.field, state.decoder, frame, pose_init, hyper, k, state.cfg)
            pose = tr.pose
            entry["tracking"] = {
                "first_loss": tr.losses[0] if tr.losses else None,
                "best_loss": min(tr.losses) if tr.losses else None,
                "last_loss": tr.losses[-1] if tr.losses else None,
                "failed": tr.failed,
                "degenerate_iters": tr.degenerate_iters,
            }
        trajectory.append(pose)
        if i > 0 and select_keyframe(frame.id, hyper):
            state.keyframes.add(frame.id, pose, frame)
        if i == 0:
            ms = MapStats(expanded=state.field.n, final_loss=0.0)
        else:
            ms = map_frame(state, frame, pose)
        entry.update(
            {
                "n_gaussians": state.field.n,
                "expanded": ms.expanded,
                "mask_fraction": ms.mask_fraction,
                "map_first_loss": ms.first_loss,
                "map_final_loss": ms.final_loss,
                "map_final_parts": ms.final_parts,
                "wall_time_s": time.perf_counter() - t0,
            }
        )
        per_frame.append(entry)
        if progress:
            print(
                f"frame {frame.id:4d}  N={state.field.n:7d}  "
                f"map_loss={ms.final_loss:.4f}  t={entry['wall_time_s']:.1f}s",
                flush=True,
            )
    return SequenceResult(
        trajectory, state.field, state.decoder, per_frame, state.keyframes, state.iter_counts
    )
