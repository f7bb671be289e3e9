"""Motion sequences: representation, synthetic generator, forward kinematics,
normalization and the .motk file format.

Feature layout per frame (D = 4 + 3J + 3J + |contact|):
    [0]                root yaw rate, rad/s
    [1:3]              root planar velocity (x, z) in the heading-local frame, units/s
    [3]                root height
    [4 : 4+3J]         per-joint offset from its parent, heading-local (x, y, z)
    [4+3J : 4+6J]      per-joint world velocity, units/s
    [4+6J : D]         contact flags for the contact-capable joints, 0/1

The world trajectory integrates yaw and planar velocity with explicit Euler
(divide by fps), so a constant forward speed v gives root x = v*t/fps.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Rng, Tensor


class MotionFileError(ValueError):
    pass


class MalformedHeaderError(MotionFileError):
    pass


class TruncatedPayloadError(MotionFileError):
    pass


MOTK_MAGIC = b"MOTK"
MOTK_VERSION = 1
_HEADER = struct.Struct("<4sIIIIfiI")  # magic, version, N, D, J, fps, category, flags
assert _HEADER.size == 32


@dataclass
class MotionSequence:
    frames: np.ndarray          # [N, D] float64
    fps: float
    category: int | None = None
    text: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [N>=1, D], got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SkeletonSpec:
    parent: tuple[int, ...]             # parent index per joint, root points at itself
    rest_offset: np.ndarray             # [J, 3]; row 0 is the rest root position
    foot_joints: tuple[int, ...]        # contact-capable joints, sorted
    names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rest_offset",
                           np.asarray(self.rest_offset, dtype=np.float64))
        j = len(self.parent)
        if self.parent[0] != 0:
            raise ValueError("joint 0 must be the root (parent == self)")
        for i, p in enumerate(self.parent[1:], start=1):
            if not 0 <= p < i:
                raise ValueError(f"parent of joint {i} must precede it (tree, no cycles)")
        if self.rest_offset.shape != (j, 3):
            raise ValueError("rest_offset must be [J, 3]")
        if any(not 0 <= f < j for f in self.foot_joints):
            raise ValueError("foot_joints out of range")

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    def leg_length(self) -> float:
        """Offset-chain length from the first non-root contact joint to the root."""
        legs = [f for f in self.foot_joints if f != 0]
        if not legs:
            return float(abs(self.rest_offset[0, 1]))
        total, j = 0.0, legs[0]
        while j != 0:
            total += float(np.linalg.norm(self.rest_offset[j]))
            j = self.parent[j]
        return total


def default_skeleton() -> SkeletonSpec:
    """8-joint biped. Contact set is {pelvis, l_foot, r_foot}: the pelvis flag
    fires when sitting on the ground, giving sit classes contact structure too."""
    return SkeletonSpec(
        parent=(0, 0, 1, 2, 0, 4, 0, 6),
        rest_offset=np.array([
            [0.00, 0.95, 0.00],    # pelvis (rest root position)
            [0.00, 0.30, 0.00],    # spine
            [0.00, 0.20, 0.00],    # neck
            [0.00, 0.15, 0.00],    # head
            [-0.12, -0.47, 0.00],  # l_knee
            [0.00, -0.48, 0.00],   # l_foot
            [0.12, -0.47, 0.00],   # r_knee
            [0.00, -0.48, 0.00],   # r_foot
        ]),
        foot_joints=(0, 5, 7),
        names=("pelvis", "spine", "neck", "head", "l_knee", "l_foot", "r_knee", "r_foot"),
    )


@dataclass(frozen=True)
class FeatureLayout:
    joint_count: int
    contact_count: int

    @classmethod
    def for_skeleton(cls, skel: SkeletonSpec) -> "FeatureLayout":
        return cls(joint_count=skel.joint_count, contact_count=len(skel.foot_joints))

    @property
    def dim(self) -> int:
        return 4 + 6 * self.joint_count + self.contact_count

    @property
    def yaw_rate(self) -> slice:
        return slice(0, 1)

    @property
    def planar_vel(self) -> slice:
        return slice(1, 3)

    @property
    def height(self) -> slice:
        return slice(3, 4)

    @property
    def joint_pos(self) -> slice:
        return slice(4, 4 + 3 * self.joint_count)

    @property
    def joint_vel(self) -> slice:
        return slice(4 + 3 * self.joint_count, 4 + 6 * self.joint_count)

    @property
    def contacts(self) -> slice:
        return slice(4 + 6 * self.joint_count, self.dim)

    def validate(self, d: int) -> None:
        slices = [self.yaw_rate, self.planar_vel, self.height,
                  self.joint_pos, self.joint_vel, self.contacts]
        covered = 0
        for s in slices:
            covered += s.stop - s.start
        if covered != d or self.dim != d:
            raise ValueError(f"layout covers {self.dim} columns, sequence has {d}")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-6


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: list[MotionSequence]) -> "NormStats":
        if not seqs:
            raise ValueError("cannot compute normalization stats from an empty split")
        stacked = np.concatenate([s.frames for s in seqs], axis=0)
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), STD_FLOOR)
        return cls(mean=mean, std=std)


def normalize(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"dimension mismatch: frames D={frames.shape[-1]}, "
                         f"stats D={stats.mean.shape[0]}")
    return (frames - stats.mean) / stats.std


def denormalize(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"dimension mismatch: frames D={frames.shape[-1]}, "
                         f"stats D={stats.mean.shape[0]}")
    return frames * stats.std + stats.mean


def denormalize_t(frames: Tensor, stats: NormStats) -> Tensor:
    return nk.add(nk.mul(frames, stats.std), stats.mean)


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def _exclusive_cumsum(x: Tensor, axis: int) -> Tensor:
    cs = nk.cumsum(x, axis=axis)
    n = x.shape[axis]
    zero = nk.const(np.zeros(_slice_shape(x.shape, axis, 1)))
    return nk.concat([zero, nk.narrow(cs, axis, 0, n - 1)], axis=axis)


def _slice_shape(shape, axis, n):
    s = list(shape)
    s[axis] = n
    return tuple(s)


def fk_positions_t(frames: Tensor, skel: SkeletonSpec, layout: FeatureLayout,
                   fps: float) -> Tensor:
    """Differentiable FK: [*, N, D] features -> [*, N, J, 3] world positions.

    Heading theta integrates the yaw-rate column; planar velocity (given in
    the heading-local frame) is rotated into world and integrated; per-joint
    local offsets are rotated by the heading and chained down the parent tree.
    """
    layout.validate(frames.shape[-1])
    squeeze = frames.data.ndim == 2
    x = nk.reshape(frames, (1,) + frames.shape) if squeeze else frames
    J = layout.joint_count

    yaw = nk.narrow(x, -1, 0, 1)                      # [B, N, 1]
    theta = _exclusive_cumsum(nk.mul(yaw, 1.0 / fps), axis=1)
    c, s = nk.cos(theta), nk.sin(theta)               # [B, N, 1]

    vx = nk.narrow(x, -1, 1, 1)
    vz = nk.narrow(x, -1, 2, 1)
    wx = nk.add(nk.mul(c, vx), nk.mul(s, vz))         # heading-local -> world
    wz = nk.sub(nk.mul(c, vz), nk.mul(s, vx))
    px = _exclusive_cumsum(nk.mul(wx, 1.0 / fps), axis=1)
    pz = _exclusive_cumsum(nk.mul(wz, 1.0 / fps), axis=1)
    height = nk.narrow(x, -1, 3, 1)
    root = nk.concat([px, height, pz], axis=-1)       # [B, N, 3]

    B, N = x.shape[0], x.shape[1]
    off = nk.reshape(nk.narrow(x, -1, 4, 3 * J), (B, N, J, 3))
    ox = nk.narrow(off, -1, 0, 1)
    oy = nk.narrow(off, -1, 1, 1)
    oz = nk.narrow(off, -1, 2, 1)
    c4 = nk.reshape(c, (B, N, 1, 1))
    s4 = nk.reshape(s, (B, N, 1, 1))
    owx = nk.add(nk.mul(c4, ox), nk.mul(s4, oz))
    owz = nk.sub(nk.mul(c4, oz), nk.mul(s4, ox))
    off_w = nk.concat([owx, oy, owz], axis=-1)        # [B, N, J, 3]

    world: list[Tensor] = [None] * J
    root4 = nk.reshape(root, (B, N, 1, 3))
    world[0] = nk.add(root4, nk.narrow(off_w, 2, 0, 1))
    for j in range(1, J):
        world[j] = nk.add(world[skel.parent[j]], nk.narrow(off_w, 2, j, 1))
    out = nk.concat(world, axis=2)
    if squeeze:
        out = nk.reshape(out, out.shape[1:])
    return out


def fk_positions(seq: MotionSequence, skel: SkeletonSpec,
                 layout: FeatureLayout) -> np.ndarray:
    """[N, J, 3] world joint positions of a sequence (non-differentiating path)."""
    return fk_positions_t(nk.const(seq.frames), skel, layout, seq.fps).data


# ---------------------------------------------------------------------------
# synthetic labeled motion generator
# ---------------------------------------------------------------------------

DEFAULT_CLASSES = ("walk", "walk-sit", "sit-stand", "jump")

CONTACT_HEIGHT_FRAC = 0.05      # height threshold as a fraction of leg length
CONTACT_SPEED_THRESH = 0.1      # units per frame


def default_contact_thresholds(skel: SkeletonSpec) -> tuple[float, float]:
    return CONTACT_HEIGHT_FRAC * skel.leg_length(), CONTACT_SPEED_THRESH


def threshold_contacts(positions: np.ndarray, foot_joints,
                       height_thresh: float, speed_thresh: float) -> np.ndarray:
    """Binary contact labels [N, |foot|]: low AND slow.

    Speed is the per-frame displacement magnitude ||p[t] - p[t-1]||; the first
    frame copies the second.
    """
    pos = np.asarray(positions, dtype=np.float64)[:, list(foot_joints), :]
    speed = np.zeros(pos.shape[:2])
    if pos.shape[0] > 1:
        speed[1:] = np.linalg.norm(pos[1:] - pos[:-1], axis=-1)
        speed[0] = speed[1]
    low = pos[:, :, 1] < height_thresh
    slow = speed < speed_thresh
    return (low & slow).astype(np.float64)

TEXT_TEMPLATES: dict[str, tuple[str, ...]] = {
    "walk": (
        "a person walks forward at a steady pace",
        "someone strolls straight ahead",
        "a person is walking forward slowly",
    ),
    "walk-sit": (
        "a person walks forward and then sits down",
        "someone walks a few steps and sits on the ground",
        "a person walks then lowers into a seat",
    ),
    "sit-stand": (
        "a person stands up from a seated position",
        "someone rises from sitting to standing",
        "a person gets up off the ground",
    ),
    "jump": (
        "a person jumps up and down in place",
        "someone hops repeatedly on the spot",
        "a person is jumping vertically",
    ),
}

MIN_SYNTH_LENGTH = 16


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _heading_and_root(yaw_rate, v_local, fps):
    """Integrate yaw + local planar velocity the same way FK does."""
    n = yaw_rate.shape[0]
    theta = np.concatenate([[0.0], np.cumsum(yaw_rate / fps)[:-1]])
    c, s = np.cos(theta), np.sin(theta)
    wx = c * v_local[:, 0] + s * v_local[:, 1]
    wz = c * v_local[:, 1] - s * v_local[:, 0]
    px = np.concatenate([[0.0], np.cumsum(wx / fps)[:-1]])
    pz = np.concatenate([[0.0], np.cumsum(wz / fps)[:-1]])
    return theta, px, pz


def _world_to_local(theta, dx, dz):
    c, s = np.cos(theta), np.sin(theta)
    return c * dx - s * dz, s * dx + c * dz


def _foot_track(stance, root_xz, theta, lateral, step_ahead, lift):
    """World xz+y track of one foot given its stance mask and the root path.

    Plant points are sampled from the root pose at each stance onset; swing
    phases interpolate plant-to-plant with a sine lift, so feet are pinned
    (zero world velocity) for every stance frame.
    """
    n = stance.shape[0]
    px, pz = root_xz
    c, s = np.cos(theta), np.sin(theta)

    def plant_at(t):
        ahead = step_ahead
        x = px[t] + c[t] * lateral + s[t] * ahead
        z = pz[t] + c[t] * ahead - s[t] * lateral
        return np.array([x, z])

    # segment boundaries
    onsets = [0] if stance[0] else []
    onsets += [t for t in range(1, n) if stance[t] and not stance[t - 1]]
    plants = {t: plant_at(t) for t in onsets}

    foot_xz = np.zeros((n, 2))
    foot_y = np.zeros(n)
    cur_plant = plants[onsets[0]] if onsets and onsets[0] == 0 else plant_at(0)
    t = 0
    while t < n:
        if stance[t]:
            if t in plants:
                cur_plant = plants[t]
            foot_xz[t] = cur_plant
            foot_y[t] = 0.0
            t += 1
        else:
            # swing run [t, end)
            end = t
            while end < n and not stance[end]:
                end += 1
            target = plants[end] if end < n and end in plants else (
                plants[end] if end in plants else plant_at(min(end, n - 1)))
            start_xz = cur_plant.copy()
            length = end - t + 1
            for k in range(t, end):
                prog = (k - t + 1) / length
                foot_xz[k] = start_xz + (target - start_xz) * prog
                foot_y[k] = lift * math.sin(math.pi * prog)
            cur_plant = target
            t = end
    return foot_xz, foot_y


def _features_from_world(world, theta, px, pz, yaw_rate, v_local, contacts,
                         skel, layout, fps):
    """Assemble the frame matrix from world joint positions + root signals."""
    n, J = world.shape[0], world.shape[1]
    d = layout.dim
    frames = np.zeros((n, d))
    frames[:, 0] = yaw_rate
    frames[:, 1:3] = v_local
    frames[:, 3] = world[:, 0, 1]
    # parent-relative offsets back-rotated into the heading frame
    off = np.zeros((n, J, 3))
    root_w = np.stack([px, world[:, 0, 1], pz], axis=1)
    for j in range(J):
        parent_pos = root_w if j == 0 else world[:, skel.parent[j], :]
        rel = world[:, j, :] - parent_pos
        lx, lz = _world_to_local(theta, rel[:, 0], rel[:, 2])
        off[:, j, 0], off[:, j, 1], off[:, j, 2] = lx, rel[:, 1], lz
    frames[:, layout.joint_pos] = off.reshape(n, 3 * J)
    vel = np.zeros((n, J, 3))
    vel[1:] = (world[1:] - world[:-1]) * fps
    vel[0] = vel[1]
    frames[:, layout.joint_vel] = vel.reshape(n, 3 * J)
    frames[:, layout.contacts] = contacts
    return frames


def synth_generate(category, length: int, rng: Rng,
                   skel: SkeletonSpec | None = None, fps: float = 20.0,
                   classes: tuple[str, ...] = DEFAULT_CLASSES) -> MotionSequence:
    """Deterministic procedural motion for one labeled category.

    Per-seed jitter warps rate and amplitude but never the phase origin, so
    same-class sequences share the ordering of contact events while being
    temporally stretched relative to each other. A slow within-sequence
    envelope (tied to normalized time) makes global progress observable,
    which is the structure temporal-alignment training has to recover.
    """
    if isinstance(category, (int, np.integer)):
        if not 0 <= category < len(classes):
            raise ValueError(f"unknown category id {category}")
        cls_name = classes[category]
        cls_id = int(category)
    else:
        if category not in classes:
            raise ValueError(f"unknown category {category!r} (have {classes})")
        cls_name = category
        cls_id = classes.index(category)
    if length < MIN_SYNTH_LENGTH:
        raise ValueError(f"length must be >= {MIN_SYNTH_LENGTH}, got {length}")
    if skel is None:
        skel = default_skeleton()
    layout = FeatureLayout.for_skeleton(skel)

    rate_j = 1.0 + rng.uniform(-0.20, 0.20)
    amp_j = rng.uniform(0.9, 1.1)
    warp_k = 1.0 + 0.3 * rng.uniform(-1.0, 1.0)
    templates = TEXT_TEMPLATES.get(cls_name, (f"a person does {cls_name}",))
    text = templates[int(rng.integers(0, len(templates)))]

    n = int(length)
    t = np.arange(n)
    tau = (t / (n - 1)) ** warp_k            # warped normalized time
    rest = skel.rest_offset
    pelvis_h = rest[0, 1]

    builder = {
        "walk": _build_walk,
        "walk-sit": _build_walk_sit,
        "sit-stand": _build_sit_stand,
        "jump": _build_jump,
    }.get(cls_name, _build_walk)
    world, theta, px, pz, yaw_rate, v_local = builder(
        n, t, tau, fps, rate_j, amp_j, skel, pelvis_h)

    # ground-truth contact flags come from the same thresholding rule the
    # contact detector applies, evaluated on the generator's own world tracks
    h_thr, s_thr = default_contact_thresholds(skel)
    contacts = threshold_contacts(world, skel.foot_joints, h_thr, s_thr)

    frames = _features_from_world(world, theta, px, pz, yaw_rate, v_local,
                                  contacts, skel, layout, fps)
    # snap to float32 grid so .motk round trips are bit-exact
    frames = frames.astype(np.float32).astype(np.float64)
    return MotionSequence(frames=frames, fps=fps, category=cls_id, text=text)


def _chain_upper(world, px, pz, pelvis_y, theta, skel, sway):
    """Place spine/neck/head stacked above the pelvis with a small sway."""
    n = world.shape[0]
    rest = skel.rest_offset
    world[:, 0] = np.stack([px, pelvis_y, pz], axis=1)
    for j in (1, 2, 3):
        off = rest[j].copy()
        world[:, j] = world[:, skel.parent[j]] + off
        world[:, j, 0] += sway * 0.3
    return world


def _legs_from_feet(world, foot_l, foot_r, skel):
    """Knees sit between pelvis and foot with a forward-of-ankle bend."""
    pelvis = world[:, 0]
    for knee, foot in ((4, foot_l), (6, foot_r)):
        hip = pelvis.copy()
        hip[:, 0] += skel.rest_offset[knee][0]
        mid = 0.5 * (hip + foot)
        bend = np.clip(0.30 - 0.5 * (pelvis[:, 1:2] - foot[:, 1:2] - 0.6), 0.05, 0.4)
        mid[:, 2] += bend[:, 0] * 0.2
        world[:, knee] = mid
        world[:, knee + 1] = foot
    return world


def _gait(n, t, tau, fps, rate_j, amp_j, skel, pelvis_h, speed_env, stop_at=None):
    """Common walking machinery; returns world joints + root signals.

    Stance duty is 0.65 per foot with the right foot offset by half a cycle;
    swing speeds stay well above the contact speed threshold so thresholded
    detection recovers exactly one down/up event pair per foot per cycle.
    """
    f_stride = 1.25 * rate_j
    cyc = np.mod(f_stride * t / fps, 1.0)
    speed = 1.4 * speed_env * amp_j
    if stop_at is not None:
        speed = np.where(t >= stop_at, 0.0, speed)
    moving = speed > 1e-6
    yaw_rate = 0.15 * np.sin(2.0 * math.pi * 1.5 * tau) * moving
    v_local = np.stack([np.zeros(n), speed], axis=1)
    theta, px, pz = _heading_and_root(yaw_rate, v_local, fps)

    stance_l = (cyc < 0.65) | ~moving
    stance_r = ((cyc >= 0.5) | (cyc < 0.15)) | ~moving
    step_ahead = 0.18 * amp_j
    lift = 0.10 * amp_j
    foot_l_xz, foot_l_y = _foot_track(stance_l, (px, pz), theta,
                                      lateral=-0.12, step_ahead=step_ahead, lift=lift)
    foot_r_xz, foot_r_y = _foot_track(stance_r, (px, pz), theta,
                                      lateral=0.12, step_ahead=step_ahead, lift=lift)
    foot_l = np.stack([foot_l_xz[:, 0], foot_l_y, foot_l_xz[:, 1]], axis=1)
    foot_r = np.stack([foot_r_xz[:, 0], foot_r_y, foot_r_xz[:, 1]], axis=1)

    phase = 2.0 * math.pi * cyc
    bob = 0.015 * amp_j * np.sin(2.0 * phase) * moving
    pelvis_y = pelvis_h + bob
    world = np.zeros((n, skel.joint_count, 3))
    sway = 0.02 * amp_j * np.sin(phase)
    world = _chain_upper(world, px, pz, pelvis_y, theta, skel, sway)
    world = _legs_from_feet(world, foot_l, foot_r, skel)
    return world, theta, px, pz, yaw_rate, v_local, stance_l, stance_r


def _double_support_frame(n, t, tau, fps, rate_j, after: float) -> int:
    """First frame past normalized time `after` where both feet are planted."""
    f_stride = 1.25 * rate_j
    cyc = np.mod(f_stride * t / fps, 1.0)
    both = (cyc < 0.15) | ((cyc >= 0.5) & (cyc < 0.65))
    ok = np.where((tau >= after) & both)[0]
    return int(ok[0]) if ok.size else n - 1


def _build_walk(n, t, tau, fps, rate_j, amp_j, skel, pelvis_h):
    env = 0.85 + 0.3 * tau   # progress envelope: speeds up over the clip
    world, theta, px, pz, yaw, v_local, _, _ = _gait(
        n, t, tau, fps, rate_j, amp_j, skel, pelvis_h, env)
    return world, theta, px, pz, yaw, v_local


def _build_walk_sit(n, t, tau, fps, rate_j, amp_j, skel, pelvis_h):
    # walk at full stride, halt abruptly on a double-support frame, then sit
    t_stop = _double_support_frame(n, t, tau, fps, rate_j, after=0.45)
    env = 0.85 + 0.3 * tau
    world, theta, px, pz, yaw, v_local, _, _ = _gait(
        n, t, tau, fps, rate_j, amp_j, skel, pelvis_h, env, stop_at=t_stop)
    desc = _smoothstep((t - t_stop - 3) / (0.30 * n))
    pelvis_y = world[:, 0, 1] * (1.0 - desc) + 0.03 * desc
    world[:, 0, 1] = pelvis_y
    for j in (1, 2, 3):
        world[:, j, 1] = world[:, skel.parent[j], 1] \
            + skel.rest_offset[j, 1] * (1.0 - 0.2 * desc)
    world = _legs_from_feet(world, world[:, 5].copy(), world[:, 7].copy(), skel)
    return world, theta, px, pz, yaw, v_local


def _build_sit_stand(n, t, tau, fps, rate_j, amp_j, skel, pelvis_h):
    rise = _smoothstep((tau - 0.20) / 0.40)
    pelvis_y = 0.03 + (pelvis_h - 0.03) * rise
    yaw_rate = np.zeros(n)
    v_local = np.zeros((n, 2))
    theta, px, pz = _heading_and_root(yaw_rate, v_local, fps)
    sway = 0.01 * amp_j * np.sin(2.0 * math.pi * 0.8 * tau)
    world = np.zeros((n, skel.joint_count, 3))
    world = _chain_upper(world, px, pz, pelvis_y, theta, skel, sway)
    foot_l = np.tile(np.array([-0.12, 0.0, 0.15]), (n, 1))
    foot_r = np.tile(np.array([0.12, 0.0, 0.15]), (n, 1))
    world = _legs_from_feet(world, foot_l, foot_r, skel)
    return world, theta, px, pz, yaw_rate, v_local


def _build_jump(n, t, tau, fps, rate_j, amp_j, skel, pelvis_h):
    """In-place hops. The foot flight profile sin(pi * prog^0.55) takes off
    fast (clears the contact height band in one frame) but lands gently
    (final descent below the speed threshold), so thresholded detection
    fires exactly around the ground phases."""
    f_jump = 0.7 * rate_j
    cyc = np.mod(f_jump * t / fps, 1.0)
    air = cyc >= 0.62
    air_prog = np.where(air, (cyc - 0.62) / 0.38, 0.0)
    flight = np.sin(math.pi * np.clip(air_prog, 0.0, 1.0) ** 0.55) * air
    h_feet = 0.33 * amp_j * (0.8 + 0.4 * tau)
    feet_y = h_feet * flight
    pelvis_rise = 0.75 * h_feet * flight
    crouch = 0.10 * amp_j * np.sin(math.pi * np.clip(cyc / 0.62, 0, 1)) * ~air
    pelvis_y = pelvis_h - crouch + pelvis_rise
    yaw_rate = np.zeros(n)
    v_local = np.zeros((n, 2))
    theta, px, pz = _heading_and_root(yaw_rate, v_local, fps)
    world = np.zeros((n, skel.joint_count, 3))
    world = _chain_upper(world, px, pz, pelvis_y, theta, skel, np.zeros(n))
    foot_l = np.stack([np.full(n, -0.12), feet_y, np.zeros(n)], axis=1)
    foot_r = np.stack([np.full(n, 0.12), feet_y, np.zeros(n)], axis=1)
    world = _legs_from_feet(world, foot_l, foot_r, skel)
    return world, theta, px, pz, yaw_rate, v_local


def contact_events(seq: MotionSequence, layout: FeatureLayout) -> list[tuple[int, str]]:
    """Ordered (joint_slot, 'down'|'up') transitions of the contact flags.

    Simultaneous transitions are ordered by contact slot, so the event list is
    deterministic and comparable across sequences of one class.
    """
    flags = seq.frames[:, layout.contacts] > 0.5
    events = []
    for tt in range(1, flags.shape[0]):
        for j in range(flags.shape[1]):
            if flags[tt, j] and not flags[tt - 1, j]:
                events.append((j, "down"))
            elif not flags[tt, j] and flags[tt - 1, j]:
                events.append((j, "up"))
    return events


# ---------------------------------------------------------------------------
# .motk binary format + debug text export
# ---------------------------------------------------------------------------

def save(seq: MotionSequence, path, joints: int = 0) -> None:
    """32-byte header + little-endian float32 payload + optional text trailer."""
    flags = 1 if seq.text is not None else 0
    cat = -1 if seq.category is None else int(seq.category)
    n, d = seq.frames.shape
    header = _HEADER.pack(MOTK_MAGIC, MOTK_VERSION, n, d, joints,
                          float(seq.fps), cat, flags)
    payload = seq.frames.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        if seq.text is not None:
            enc = seq.text.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)


def load(path) -> MotionSequence:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: header shorter than {_HEADER.size} bytes")
    magic, version, n, d, _joints, fps, cat, flags = _HEADER.unpack_from(blob, 0)
    if magic != MOTK_MAGIC:
        raise MalformedHeaderError(f"{path}: malformed header (bad magic {magic!r})")
    if version != MOTK_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    need = n * d * 4
    off = _HEADER.size
    if len(blob) < off + need:
        raise TruncatedPayloadError(f"{path}: truncated payload "
                                    f"({len(blob) - off} of {need} bytes)")
    frames = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off)
    frames = frames.astype(np.float64).reshape(n, d)
    off += need
    text = None
    if flags & 1:
        if len(blob) < off + 4:
            raise TruncatedPayloadError(f"{path}: truncated text length")
        (tlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + tlen:
            raise TruncatedPayloadError(f"{path}: truncated text trailer")
        text = blob[off:off + tlen].decode("utf-8")
        off += tlen
    if off != len(blob):
        raise MalformedHeaderError(f"{path}: {len(blob) - off} trailing bytes")
    return MotionSequence(frames=frames, fps=float(fps),
                          category=None if cat < 0 else cat, text=text)


def save_text(seq: MotionSequence, path) -> None:
    """Debug dump: one JSON header line, then one frame per line."""
    with open(path, "w") as f:
        f.write(json.dumps({"fps": seq.fps, "n": seq.n_frames, "d": seq.dim,
                            "category": seq.category, "text": seq.text}) + "\n")
        for row in seq.frames:
            f.write(json.dumps([round(v, 9) for v in row.tolist()]) + "\n")
