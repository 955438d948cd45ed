"""Dataset I/O, synthetic scene generation, and an analytic raycast oracle.

The raycaster is deliberately independent of the splatting renderer: it
intersects camera rays with textured axis-aligned rectangles in closed
form, so it can serve as ground truth for end-to-end runs.

Dataset layout on disk::

    root/rgb/%05d.png        8-bit RGB
    root/depth/%05d.png      16-bit grayscale, meters * depth_scale, 0 = invalid
    root/semantic/%05d.png   label ids (8-bit if K_sem <= 256 else 16-bit)
    root/intrinsics.json     {fx, fy, cx, cy, width, height, depth_scale, K_sem}
    root/traj.txt            optional ground-truth trajectory (camera-to-world)
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geom import (
    Intrinsics,
    Pose,
    load_trajectory,
    pose_inverse,
    quat_mul,
    quat_normalize,
    quat_to_rot,
)


class DataError(Exception):
    """Base class for dataset problems."""


class MissingFileError(DataError):
    pass


class MismatchedFilesError(DataError):
    pass


class UnreadableImageError(DataError):
    pass


class NonMonotoneIdsError(DataError):
    pass


@dataclass
class Frame:
    """One observed RGB-D-semantic frame.

    rgb is (H, W, 3) in [0, 1]; depth is (H, W) meters with 0 marking
    invalid pixels; labels is (H, W) int32 class ids.
    """

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    id: int
    gt_pose: Pose | None = None

    def __post_init__(self) -> None:
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3) or self.labels.shape != (h, w):
            raise ValueError("frame grids must share H x W")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


# ---------------------------------------------------------------------------
# synthetic plane scenes
# ---------------------------------------------------------------------------


@dataclass
class Rect:
    """Axis-aligned textured rectangle: constant coordinate along `axis`."""

    axis: int  # 0, 1 or 2; the coordinate held constant
    value: float
    lo: np.ndarray  # (2,) bounds on the two free axes (sorted ascending axis ids)
    hi: np.ndarray
    class_id: int
    base: np.ndarray  # (3,) base color
    amp: np.ndarray  # (3,) texture amplitude
    freq: np.ndarray  # (2,) cycles per meter on the two free axes
    phase: np.ndarray  # (2,)

    def free_axes(self) -> tuple[int, int]:
        return tuple(a for a in (0, 1, 2) if a != self.axis)  # type: ignore[return-value]

    def color_at(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Smooth low-frequency texture sampled at in-plane coordinates."""
        s = np.sin(2 * np.pi * (self.freq[0] * u + self.phase[0])) * np.sin(
            2 * np.pi * (self.freq[1] * v + self.phase[1])
        )
        return np.clip(self.base[None, :] + self.amp[None, :] * s[:, None], 0.0, 1.0)


@dataclass
class PlaneScene:
    rects: list[Rect]
    k_sem: int

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = [], []
        for r in self.rects:
            a0, a1 = r.free_axes()
            lo = np.empty(3)
            hi = np.empty(3)
            lo[r.axis] = hi[r.axis] = r.value
            lo[[a0, a1]] = r.lo
            hi[[a0, a1]] = r.hi
            los.append(lo)
            his.append(hi)
        return np.min(los, axis=0), np.max(his, axis=0)


def synth_plane_scene(seed: int, k_sem: int) -> PlaneScene:
    """Deterministic room-like arrangement of textured rectangles.

    Floor, four tall walls and a few boxes; every class id in
    [0, K_sem) is assigned to at least one rectangle. World frame is the
    first camera frame: +z into the room, +y down, floor below the camera.
    """
    if not 2 <= k_sem <= 32:
        raise ValueError("k_sem must be in [2, 32]")
    rng = np.random.default_rng(seed)

    floor_y = 1.2 + rng.uniform(0.0, 0.3)
    top_y = -3.0
    z_back = -2.0 - rng.uniform(0.0, 0.5)
    z_front = 4.5 + rng.uniform(0.0, 1.5)
    x_half = 2.8 + rng.uniform(0.0, 0.8)

    def tex():
        base = rng.uniform(0.25, 0.75, size=3)
        amp = rng.uniform(0.08, 0.22, size=3)
        freq = rng.uniform(0.15, 0.55, size=2)
        phase = rng.uniform(0.0, 1.0, size=2)
        return base, amp, freq, phase

    def rect(axis, value, lo0, hi0, lo1, hi1):
        base, amp, freq, phase = tex()
        return Rect(axis, float(value), np.array([lo0, lo1], dtype=float),
                    np.array([hi0, hi1], dtype=float), 0, base, amp, freq, phase)

    rects: list[Rect] = []
    # floor: y = floor_y, free axes (x, z)
    rects.append(rect(1, floor_y, -x_half, x_half, z_back, z_front))
    # front / back walls: z = const, free axes (x, y)
    rects.append(rect(2, z_front, -x_half, x_half, top_y, floor_y))
    rects.append(rect(2, z_back, -x_half, x_half, top_y, floor_y))
    # side walls: x = const, free axes (y, z)
    rects.append(rect(0, x_half, top_y, floor_y, z_back, z_front))
    rects.append(rect(0, -x_half, top_y, floor_y, z_back, z_front))

    n_boxes = int(rng.integers(1, 6))
    n_boxes = max(n_boxes, math.ceil((k_sem - len(rects)) / 6))
    for _ in range(n_boxes):
        sx = rng.uniform(0.35, 1.1)
        sy = rng.uniform(0.35, 1.0)
        sz = rng.uniform(0.35, 1.1)
        cx = rng.uniform(-x_half + 1.2, x_half - 1.2)
        cz = rng.uniform(1.2, z_front - 1.2)
        y0, y1 = floor_y - sy, floor_y
        x0, x1 = cx - sx / 2, cx + sx / 2
        z0, z1 = cz - sz / 2, cz + sz / 2
        rects.append(rect(1, y0, x0, x1, z0, z1))  # top
        rects.append(rect(0, x0, y0, y1, z0, z1))
        rects.append(rect(0, x1, y0, y1, z0, z1))
        rects.append(rect(2, z0, x0, x1, y0, y1))
        rects.append(rect(2, z1, x0, x1, y0, y1))
        rects.append(rect(1, y1, x0, x1, z0, z1))  # bottom, rarely visible

    # round-robin class assignment over a deterministic shuffle keeps ids dense
    order = rng.permutation(len(rects))
    for slot, ridx in enumerate(order):
        rects[ridx].class_id = slot % k_sem
    return PlaneScene(rects, k_sem)


def raycast_render(scene: PlaneScene, pose: Pose, k: Intrinsics) -> Frame:
    """Exact per-pixel ray-rectangle intersection; depth is camera-frame z.

    Rays are parameterized so the ray parameter equals camera z, matching
    the depth convention of the splatting renderer. Pixels with no hit get
    depth 0, color black and the background class 0.
    """
    h, w = k.height, k.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=-1
    ).reshape(-1, 3)
    r_wc = quat_to_rot(pose.q).T  # camera-to-world rotation
    center = -(r_wc @ pose.t)
    dirs = dirs_cam @ r_wc.T

    n = dirs.shape[0]
    best = np.full(n, np.inf)
    color = np.zeros((n, 3))
    label = np.zeros(n, dtype=np.int32)

    for rect in scene.rects:
        d_axis = dirs[:, rect.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (rect.value - center[rect.axis]) / d_axis
        a0, a1 = rect.free_axes()
        p0 = center[a0] + s * dirs[:, a0]
        p1 = center[a1] + s * dirs[:, a1]
        hit = (
            np.isfinite(s)
            & (s > 1e-6)
            & (s < best)
            & (p0 >= rect.lo[0]) & (p0 <= rect.hi[0])
            & (p1 >= rect.lo[1]) & (p1 <= rect.hi[1])
        )
        if not hit.any():
            continue
        best[hit] = s[hit]
        color[hit] = rect.color_at(p0[hit], p1[hit])
        label[hit] = rect.class_id

    depth = np.where(np.isfinite(best), best, 0.0)
    return Frame(
        rgb=color.reshape(h, w, 3).astype(np.float32),
        depth=depth.reshape(h, w).astype(np.float32),
        labels=label.reshape(h, w),
        id=0,
        gt_pose=pose.copy(),
    )


def synth_trajectory(kind: str, length: int, scale: float = 1.0) -> list[Pose]:
    """Smooth world-to-camera trajectories starting at the identity.

    Inter-frame motion stays small (<= 2 cm, <= 1 degree at scale 1) so the
    constant-velocity extrapolation used by tracking is a good initializer.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    poses = []
    if kind == "static":
        return [Pose.identity() for _ in range(length)]
    if kind == "arc":
        radius = 1.2 * scale
        step_deg = 0.8
        for i in range(length):
            th = math.radians(step_deg * i)
            # camera orbits a point ahead of the start while panning
            c = math.cos(th)
            s = math.sin(th)
            pos = np.array([radius * (1 - c), 0.0, radius * s])
            yaw = -th
            qc2w = np.array([math.cos(yaw / 2), 0.0, math.sin(yaw / 2), 0.0])
            poses.append(pose_inverse(Pose(qc2w, pos)))
        return poses
    if kind == "lissajous":
        amp = np.array([0.08, 0.05, 0.08]) * scale
        for i in range(length):
            ph = 2 * np.pi * i / max(length, 2)
            pos = np.array(
                [amp[0] * math.sin(ph), amp[1] * math.sin(2 * ph), amp[2] * (1 - math.cos(ph))]
            )
            yaw = math.radians(4.0) * math.sin(ph)
            pitch = math.radians(2.0) * math.sin(2 * ph)
            qy = np.array([math.cos(yaw / 2), 0.0, math.sin(yaw / 2), 0.0])
            qx = np.array([math.cos(pitch / 2), math.sin(pitch / 2), 0.0, 0.0])
            qc2w = quat_normalize(quat_mul(qy, qx))
            poses.append(pose_inverse(Pose(qc2w, pos)))
        return poses
    raise ValueError(f"unknown trajectory kind {kind!r}")


# ---------------------------------------------------------------------------
# PNG + dataset I/O
# ---------------------------------------------------------------------------

def _write_png(path: str, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path)


def write_color_png(path: str, rgb01: np.ndarray) -> None:
    arr = np.clip(np.asarray(rgb01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    _write_png(path, arr)


def write_depth_png(path: str, depth_m: np.ndarray, depth_scale: float) -> None:
    arr = np.clip(np.asarray(depth_m) * depth_scale + 0.5, 0, 65535).astype(np.uint16)
    _write_png(path, arr)


def write_label_png(path: str, labels: np.ndarray, k_sem: int) -> None:
    if k_sem <= 256:
        _write_png(path, labels.astype(np.uint8))
    else:
        _write_png(path, labels.astype(np.uint16))


def _read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except FileNotFoundError:
        raise MissingFileError(f"missing image {path}") from None
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise UnreadableImageError(f"cannot read image {path}: {exc}") from exc


def save_dataset(
    root: str,
    frames: list[Frame],
    k: Intrinsics,
    depth_scale: float,
    k_sem: int,
    gt_poses_w2c: list[Pose] | None = None,
) -> None:
    for sub in ("rgb", "depth", "semantic"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for fr in frames:
        write_color_png(os.path.join(root, "rgb", f"{fr.id:05d}.png"), fr.rgb)
        write_depth_png(os.path.join(root, "depth", f"{fr.id:05d}.png"), fr.depth, depth_scale)
        write_label_png(os.path.join(root, "semantic", f"{fr.id:05d}.png"), fr.labels, k_sem)
    meta = {
        "fx": k.fx,
        "fy": k.fy,
        "cx": k.cx,
        "cy": k.cy,
        "width": k.width,
        "height": k.height,
        "depth_scale": depth_scale,
        "K_sem": k_sem,
    }
    with open(os.path.join(root, "intrinsics.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    if gt_poses_w2c is not None:
        from .geom import save_trajectory

        save_trajectory(
            os.path.join(root, "traj.txt"), [fr.id for fr in frames], gt_poses_w2c
        )


def load_sequence(
    root: str, semantics_required: bool = True
) -> tuple[list[Frame], Intrinsics, float, int, list[Pose] | None]:
    """Load a dataset directory.

    Returns (frames, intrinsics, depth_scale, K_sem, gt_trajectory_or_None).
    Depth is raw 16-bit / depth_scale; label ids are remapped through a
    contiguous table onto [0, K_sem). With ``semantics_required=False`` a
    missing semantic directory yields all-zero label grids.
    """
    meta_path = os.path.join(root, "intrinsics.json")
    if not os.path.exists(meta_path):
        raise MissingFileError(f"missing {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    k = Intrinsics(
        fx=float(meta["fx"]),
        fy=float(meta["fy"]),
        cx=float(meta["cx"]),
        cy=float(meta["cy"]),
        width=int(meta["width"]),
        height=int(meta["height"]),
    )
    depth_scale = float(meta["depth_scale"])
    k_sem = int(meta["K_sem"])

    rgb_dir = os.path.join(root, "rgb")
    depth_dir = os.path.join(root, "depth")
    sem_dir = os.path.join(root, "semantic")
    if not os.path.isdir(rgb_dir) or not os.path.isdir(depth_dir):
        raise MissingFileError(f"dataset at {root} needs rgb/ and depth/ directories")
    names = sorted(n for n in os.listdir(rgb_dir) if n.endswith(".png"))
    if not names:
        raise MissingFileError(f"no frames under {rgb_dir}")
    ids = [int(os.path.splitext(n)[0]) for n in names]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise NonMonotoneIdsError(f"frame ids not strictly increasing in {rgb_dir}")

    have_sem = os.path.isdir(sem_dir)
    if semantics_required and not have_sem:
        raise MissingFileError(f"missing semantic directory {sem_dir}")

    raw_labels: list[np.ndarray] = []
    frames: list[Frame] = []
    for fid, name in zip(ids, names):
        rgb = _read_image(os.path.join(rgb_dir, name))
        if rgb.ndim != 3 or rgb.shape[2] < 3:
            raise UnreadableImageError(f"{name}: expected RGB image")
        rgb = rgb[:, :, :3].astype(np.float32) / 255.0
        dpath = os.path.join(depth_dir, name)
        if not os.path.exists(dpath):
            raise MismatchedFilesError(f"depth image missing for frame {fid}")
        depth = _read_image(dpath).astype(np.float32) / depth_scale
        if depth.shape != rgb.shape[:2]:
            raise MismatchedFilesError(f"frame {fid}: depth shape {depth.shape} != rgb")
        if have_sem:
            spath = os.path.join(sem_dir, name)
            if not os.path.exists(spath):
                raise MismatchedFilesError(f"semantic image missing for frame {fid}")
            lab = _read_image(spath).astype(np.int64)
            if lab.shape != rgb.shape[:2]:
                raise MismatchedFilesError(f"frame {fid}: label shape mismatch")
        else:
            lab = np.zeros(rgb.shape[:2], dtype=np.int64)
        raw_labels.append(lab)
        frames.append(Frame(rgb=rgb, depth=depth, labels=lab.astype(np.int32), id=fid))

    # contiguous remap of raw label ids onto [0, K_sem)
    uniq = np.unique(np.concatenate([l.ravel() for l in raw_labels]))
    if len(uniq) > k_sem:
        raise DataError(f"{len(uniq)} distinct raw label ids exceed K_sem={k_sem}")
    remap = {int(v): i for i, v in enumerate(uniq)}
    for fr, lab in zip(frames, raw_labels):
        out = np.zeros(lab.shape, dtype=np.int32)
        for raw, new in remap.items():
            out[lab == raw] = new
        fr.labels = out

    traj_path = os.path.join(root, "traj.txt")
    gt = None
    if os.path.exists(traj_path):
        tids, tposes = load_trajectory(traj_path)
        by_id = dict(zip(tids, tposes))
        gt = []
        for fr in frames:
            if fr.id not in by_id:
                raise MismatchedFilesError(f"traj.txt has no pose for frame {fr.id}")
            fr.gt_pose = by_id[fr.id]
            gt.append(by_id[fr.id])
    return frames, k, depth_scale, k_sem, gt


def save_metrics(path: str, metrics: dict) -> None:
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
