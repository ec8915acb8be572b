"""Slot-structured unified state-action space.

Every embodiment writes its raw signal into a sparse subset of a fixed-length
vector whose slots carry physical quantities (radians, metres, axis-angle).
Nothing here rescales values statistically; ``clip_outliers`` is the only
filtering step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .uac import DelayModel, default_delay_model


class LengthMismatchError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class SlotKind(str, Enum):
    ARM_JOINT_RAD = "arm_joint_rad"
    EEF_DELTA_M = "eef_delta_m"
    EEF_ROT_AXIS_ANGLE = "eef_rot_axis_angle"
    GRIPPER_WIDTH_M = "gripper_width_m"
    FINGER_RAD = "finger_rad"
    BASE_VEL = "base_vel"
    BASE_HEADING = "base_heading"


# Per-step physical bounds used by clip_outliers.
DEFAULT_CLIP_BOUNDS: dict[SlotKind, tuple[float, float]] = {
    SlotKind.ARM_JOINT_RAD: (-math.pi, math.pi),
    SlotKind.FINGER_RAD: (-math.pi, math.pi),
    SlotKind.EEF_DELTA_M: (-0.25, 0.25),
    SlotKind.EEF_ROT_AXIS_ANGLE: (-math.pi, math.pi),
    SlotKind.GRIPPER_WIDTH_M: (0.0, 0.12),
    SlotKind.BASE_VEL: (-1.5, 1.5),
    SlotKind.BASE_HEADING: (-math.pi, math.pi),
}


@dataclass(frozen=True)
class SlotGroup:
    name: str
    width: int
    kind: SlotKind

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"slot group {self.name!r}: width must be >= 1")
        object.__setattr__(self, "kind", SlotKind(self.kind))


@dataclass(frozen=True)
class SlotLayout:
    """Ordered slot groups; group ``i`` owns a contiguous index range."""

    groups: tuple[SlotGroup, ...]

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise ValueError("layout needs at least one slot group")
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate slot group names in {names}")
        object.__setattr__(self, "groups", groups)

    @property
    def d(self) -> int:
        return sum(g.width for g in self.groups)

    def group_range(self, name: str) -> range:
        start = 0
        for g in self.groups:
            if g.name == name:
                return range(start, start + g.width)
            start += g.width
        raise KeyError(name)

    def ranges(self) -> list[range]:
        out, start = [], 0
        for g in self.groups:
            out.append(range(start, start + g.width))
            start += g.width
        return out

    def kinds(self) -> list[SlotKind]:
        """Slot kind of every index, length ``d``."""
        return [g.kind for g in self.groups for _ in range(g.width)]

    def group_of(self, index: int) -> int:
        for gi, r in enumerate(self.ranges()):
            if index in r:
                return gi
        raise IndexError(index)

    def indices_of_kind(self, kind: SlotKind | str) -> list[int]:
        kind = SlotKind(kind)
        return [i for i, k in enumerate(self.kinds()) if k is kind]


@dataclass(frozen=True)
class EmbodimentSpec:
    id: str
    active_slots: tuple[int, ...]
    control_period: float
    latency_budget: float = 0.0
    delay_model: DelayModel | None = None
    rest_action: tuple[float, ...] | None = None
    dynamics: str = "integrator"
    lag_alpha: float = 0.5

    def __post_init__(self):
        slots = tuple(sorted(int(i) for i in self.active_slots))
        if not slots:
            raise ValueError(f"embodiment {self.id!r}: active_slots must be non-empty")
        if len(set(slots)) != len(slots):
            raise ValueError(f"embodiment {self.id!r}: duplicate active slots")
        if slots[0] < 0:
            raise ValueError(f"embodiment {self.id!r}: negative slot index")
        if not self.control_period > 0:
            raise ValueError(f"embodiment {self.id!r}: control_period must be > 0")
        if self.latency_budget < 0:
            raise ValueError(f"embodiment {self.id!r}: latency_budget must be >= 0")
        object.__setattr__(self, "active_slots", slots)
        if self.delay_model is None:
            object.__setattr__(
                self, "delay_model",
                default_delay_model(self.latency_budget, self.control_period),
            )
        if self.rest_action is not None and len(self.rest_action) != len(slots):
            raise LengthMismatchError(
                f"embodiment {self.id!r}: rest_action has {len(self.rest_action)} "
                f"entries for {len(slots)} active slots"
            )

    @property
    def n_active(self) -> int:
        return len(self.active_slots)

    def check_layout(self, layout: SlotLayout) -> None:
        if self.active_slots[-1] >= layout.d:
            raise ValueError(
                f"embodiment {self.id!r}: slot {self.active_slots[-1]} outside d={layout.d}"
            )

    def mask(self, d: int) -> np.ndarray:
        m = np.zeros(d, dtype=bool)
        m[list(self.active_slots)] = True
        return m

    def rest_unified(self, d: int) -> np.ndarray:
        out = np.zeros(d)
        if self.rest_action is not None:
            out[list(self.active_slots)] = self.rest_action
        return out


def project(raw: Sequence[float], emb: EmbodimentSpec, layout: SlotLayout | int) -> np.ndarray:
    """Scatter an embodiment's raw vector into the unified space."""
    d = layout if isinstance(layout, int) else layout.d
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1 or raw.shape[0] != emb.n_active:
        raise LengthMismatchError(
            f"raw vector has length {raw.size}, embodiment {emb.id!r} expects {emb.n_active}"
        )
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError("raw vector contains NaN or Inf")
    if emb.active_slots[-1] >= d:
        raise ValueError(f"embodiment {emb.id!r} does not fit in d={d}")
    out = np.zeros(d)
    out[list(emb.active_slots)] = raw
    return out


def extract(u: Sequence[float], emb: EmbodimentSpec) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or emb.active_slots[-1] >= u.shape[0]:
        raise LengthMismatchError(f"vector of length {u.size} too short for {emb.id!r}")
    return u[list(emb.active_slots)].copy()


def clip_outliers(
    series: Iterable[Sequence[float]],
    layout: SlotLayout,
    bounds: Mapping[SlotKind | str, tuple[float, float]] | None = None,
) -> np.ndarray:
    """Clamp every slot into the bounds of its kind; returns a new array."""
    arr = np.array([np.asarray(v, dtype=float) for v in series], dtype=float)
    if arr.size == 0:
        return arr.reshape(0, layout.d)
    if arr.ndim == 1:
        arr = arr[None, :]
    merged = dict(DEFAULT_CLIP_BOUNDS)
    for k, b in (bounds or {}).items():
        merged[SlotKind(k)] = b
    lo = np.empty(layout.d)
    hi = np.empty(layout.d)
    for i, kind in enumerate(layout.kinds()):
        a, b = merged[kind]
        if not (math.isfinite(a) and math.isfinite(b) and a < b):
            raise ValueError(f"bad bounds for {kind.value}: {(a, b)}")
        lo[i], hi[i] = a, b
    return np.minimum(np.maximum(arr, lo), hi)


# ---------------------------------------------------------------- rotations

def _quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError("quaternion must have 4 components (w, x, y, z)")
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("zero or non-finite quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = _quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    # Shepperd: pivot on the largest of (w, x, y, z) for conditioning.
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    i = int(np.argmax(diag))
    if i == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * math.sqrt(max(1.0 + R[1, 1] - R[0, 0] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 + R[2, 2] - R[0, 0] - R[1, 1], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _quat_normalize(q)


def euler_xyz_to_quat(angles) -> np.ndarray:
    """Intrinsic X-Y-Z Euler angles (radians) to a unit quaternion."""
    a = np.asarray(angles, dtype=float)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ValueError("Euler angles must be 3 finite numbers")
    qs = []
    for axis, ang in enumerate(a):
        q = np.zeros(4)
        q[0] = math.cos(ang / 2)
        q[1 + axis] = math.sin(ang / 2)
        qs.append(q)
    return _quat_mul(_quat_mul(qs[0], qs[1]), qs[2])


def _quat_mul(p, q) -> np.ndarray:
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def _canonical_axis(axis: np.ndarray) -> np.ndarray:
    for c in axis:
        if c != 0.0:
            return axis if c > 0 else -axis
    return axis


def quat_to_axis_angle(q) -> np.ndarray:
    q = _quat_normalize(q)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s == 0.0:
        return np.zeros(3)
    theta = 2.0 * math.atan2(s, q[0])
    axis = v / s
    if q[0] == 0.0:
        axis = _canonical_axis(axis)
    return theta * axis


def axis_angle_to_quat(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    if theta == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = omega / theta
    return np.concatenate([[math.cos(theta / 2)], math.sin(theta / 2) * axis])


def axis_angle_to_matrix(omega) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    if theta == 0.0:
        return np.eye(3)
    k = omega / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * (K @ K)


def matrix_to_axis_angle(R) -> np.ndarray:
    return quat_to_axis_angle(matrix_to_quat(R))


def to_axis_angle(rot, convention: str = "quat") -> np.ndarray:
    """Canonical axis-angle (theta in [0, pi]) of a quaternion or XYZ Euler triple."""
    if convention == "quat":
        return quat_to_axis_angle(rot)
    if convention in ("euler", "euler_xyz"):
        return quat_to_axis_angle(euler_xyz_to_quat(rot))
    raise ValueError(f"unknown rotation convention {convention!r}")


def _as_matrix(rot) -> np.ndarray:
    r = np.asarray(rot, dtype=float)
    if r.shape == (3, 3):
        return r
    if r.shape == (4,):
        return quat_to_matrix(r)
    if r.shape == (3,):
        return axis_angle_to_matrix(r)
    raise ValueError(f"cannot interpret rotation of shape {r.shape}")


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def matrix(self) -> np.ndarray:
        return _as_matrix(self.rotation)


def delta_pose(pose_t: Pose, pose_t1: Pose) -> np.ndarray:
    """(p1 - p0, axis-angle of R0^T R1) as a 6-vector."""
    dp = np.asarray(pose_t1.position, float) - np.asarray(pose_t.position, float)
    R_rel = pose_t.matrix().T @ pose_t1.matrix()
    return np.concatenate([dp, matrix_to_axis_angle(R_rel)])


def apply_delta(pose: Pose, delta) -> Pose:
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (6,):
        raise LengthMismatchError("pose delta must have 6 entries")
    R = pose.matrix() @ axis_angle_to_matrix(delta[3:])
    return Pose(np.asarray(pose.position, float) + delta[:3], R)


# ------------------------------------------------------------------ config

def default_layout() -> SlotLayout:
    """Two arms, two hands, a mobile base (d = 43)."""
    groups = []
    for side in ("left", "right"):
        groups += [
            SlotGroup(f"{side}_arm_joints", 7, SlotKind.ARM_JOINT_RAD),
            SlotGroup(f"{side}_eef_pos", 3, SlotKind.EEF_DELTA_M),
            SlotGroup(f"{side}_eef_rot", 3, SlotKind.EEF_ROT_AXIS_ANGLE),
            SlotGroup(f"{side}_fingers", 6, SlotKind.FINGER_RAD),
            SlotGroup(f"{side}_gripper", 1, SlotKind.GRIPPER_WIDTH_M),
        ]
    groups += [
        SlotGroup("base_vel", 2, SlotKind.BASE_VEL),
        SlotGroup("base_heading", 1, SlotKind.BASE_HEADING),
    ]
    return SlotLayout(tuple(groups))


def _delay_from_json(obj) -> DelayModel | None:
    if obj is None:
        return None
    kind = obj.get("type")
    if kind == "uniform":
        return DelayModel.uniform(int(obj["d_max"]))
    if kind == "pmf":
        return DelayModel(tuple(float(p) for p in obj["p"]))
    raise ValueError(f"unknown delay model type {kind!r}")


def delay_to_json(model: DelayModel) -> dict:
    p = np.asarray(model.pmf)
    if np.allclose(p, p[0], rtol=0, atol=1e-15):
        return {"type": "uniform", "d_max": model.d_max}
    return {"type": "pmf", "p": [float(x) for x in p]}


def embodiment_from_json(obj: Mapping) -> EmbodimentSpec:
    rest = obj.get("rest_action")
    return EmbodimentSpec(
        id=str(obj["id"]),
        active_slots=tuple(obj["active_slots"]),
        control_period=float(obj["control_period_s"]),
        latency_budget=float(obj.get("latency_budget_s", 0.0)),
        delay_model=_delay_from_json(obj.get("delay_model")),
        rest_action=None if rest is None else tuple(float(x) for x in rest),
        dynamics=obj.get("dynamics", "integrator"),
        lag_alpha=float(obj.get("lag_alpha", 0.5)),
    )


def embodiment_to_json(emb: EmbodimentSpec) -> dict:
    out = {
        "id": emb.id,
        "active_slots": list(emb.active_slots),
        "control_period_s": emb.control_period,
        "latency_budget_s": emb.latency_budget,
        "delay_model": delay_to_json(emb.delay_model),
        "dynamics": emb.dynamics,
    }
    if emb.rest_action is not None:
        out["rest_action"] = list(emb.rest_action)
    if emb.dynamics == "first_order_lag":
        out["lag_alpha"] = emb.lag_alpha
    return out


def layout_from_json(groups: Sequence[Mapping]) -> SlotLayout:
    return SlotLayout(tuple(SlotGroup(str(g["name"]), int(g["width"]), SlotKind(g["kind"])) for g in groups))


def load_space_config(source: str | Path | Mapping) -> tuple[SlotLayout, dict[str, EmbodimentSpec]]:
    """Read ``{"groups": [...], "embodiments": [...]}`` from a path or mapping."""
    if isinstance(source, Mapping):
        obj = source
    else:
        obj = json.loads(Path(source).read_text())
    layout = layout_from_json(obj["groups"])
    fleet: dict[str, EmbodimentSpec] = {}
    for e in obj.get("embodiments", []):
        emb = embodiment_from_json(e)
        emb.check_layout(layout)
        if emb.id in fleet:
            raise ValueError(f"duplicate embodiment id {emb.id!r}")
        fleet[emb.id] = emb
    return layout, fleet


def space_config_json(layout: SlotLayout, fleet: Mapping[str, EmbodimentSpec]) -> dict:
    return {
        "groups": [{"name": g.name, "width": g.width, "kind": g.kind.value} for g in layout.groups],
        "embodiments": [embodiment_to_json(e) for e in fleet.values()],
    }
