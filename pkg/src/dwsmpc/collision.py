"""Closed-form signed distances between planar primitives and the arm.

Supported primitive pairs: disc–disc, disc–capsule, capsule–capsule,
capsule–box and disc–box.  Negative values are penetration.  Capsule cores are
segments; penetration of two capsules uses |core distance| − r1 − r2, and box
penetration uses the deepest point with the deepest-axis convention (ties go to
the lowest axis index).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arm as arm_mod
from .arm import ArmSpec


# ---------------------------------------------------------------------------
# shapes and poses
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Disc:
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("disc radius must be positive")

    def to_dict(self):
        return {"type": "disc", "r": self.r}


@dataclass(frozen=True)
class Box:
    hx: float
    hy: float

    def __post_init__(self):
        if not (self.hx > 0 and self.hy > 0):
            raise ValueError("box half-extents must be positive")

    def to_dict(self):
        return {"type": "box", "hx": self.hx, "hy": self.hy}


@dataclass(frozen=True)
class Capsule:
    hl: float
    r: float

    def __post_init__(self):
        if not (self.hl > 0 and self.r > 0):
            raise ValueError("capsule dimensions must be positive")

    def to_dict(self):
        return {"type": "capsule", "hl": self.hl, "r": self.r}


Shape = Disc | Box | Capsule


def shape_from_dict(d: dict) -> Shape:
    kind = d.get("type")
    if kind == "disc":
        return Disc(float(d["r"]))
    if kind == "box":
        return Box(float(d["hx"]), float(d["hy"]))
    if kind == "capsule":
        return Capsule(float(d["hl"]), float(d["r"]))
    raise ValueError(f"unknown shape type {kind!r}")


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.theta])):
            raise ValueError("pose entries must be finite")

    @property
    def t(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def to_local(self, p) -> np.ndarray:
        """World points (..., 2) into this frame."""
        return (np.asarray(p) - self.t) @ self.rotation()

    def to_world_dir(self, d) -> np.ndarray:
        return np.asarray(d) @ self.rotation().T

    def compose(self, other: "Pose2") -> "Pose2":
        """self ∘ other (apply other first, then self)."""
        t = self.t + self.rotation() @ other.t
        return Pose2(float(t[0]), float(t[1]), self.theta + other.theta)

    def to_list(self):
        return [self.x, self.y, self.theta]

    @classmethod
    def from_list(cls, v) -> "Pose2":
        return cls(float(v[0]), float(v[1]), float(v[2]) if len(v) > 2 else 0.0)


@dataclass(frozen=True)
class CollisionPair:
    """A link against scene body ``other`` (kind="body") or link ``other`` (kind="self")."""

    link: int
    other: int
    kind: str = "body"


class UnsupportedPair(TypeError):
    pass


# ---------------------------------------------------------------------------
# vectorised primitive kernels; all points are (..., 2)
# ---------------------------------------------------------------------------
def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]


def _norm(a):
    return np.sqrt(_dot(a, a))


def _unit(a, fallback=(1.0, 0.0)):
    n = _norm(a)
    safe = n > 1e-15
    out = np.where(safe[..., None], a / np.where(safe, n, 1.0)[..., None], np.asarray(fallback))
    return out


def point_segment(p, a, b):
    """Closest point on segment ab to p: returns (distance, s, closest)."""
    ab = b - a
    denom = _dot(ab, ab)
    s = np.clip(_dot(p - a, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    s = np.where(denom > 0, s, 0.0)
    c = a + s[..., None] * ab
    return _norm(p - c), s, c


def point_box_sd(p, half):
    """Signed distance from local points p to an origin-centred box and its gradient."""
    half = np.asarray(half, dtype=float)
    ap = np.abs(p)
    sgn = np.where(p < 0, -1.0, 1.0)
    qd = ap - half
    outside = np.maximum(qd, 0.0)
    out_len = _norm(outside)
    inner = np.maximum(qd[..., 0], qd[..., 1])
    sd = out_len + np.minimum(inner, 0.0)
    is_out = out_len > 0
    g_out = sgn * outside / np.where(is_out, out_len, 1.0)[..., None]
    # deepest-axis convention: x unless y is strictly deeper
    use_y = qd[..., 1] > qd[..., 0]
    g_in = np.stack([np.where(use_y, 0.0, sgn[..., 0]), np.where(use_y, sgn[..., 1], 0.0)], axis=-1)
    grad = np.where(is_out[..., None], g_out, g_in)
    return sd, grad


def segment_box(a, b, half, with_grad: bool = True):
    """Minimum of the box signed distance over local segments ab.

    The box signed distance is convex, so along the segment its minimum is at
    an endpoint, at a kink of the interior piecewise-linear part, or at the
    projection of a corner.  Every such candidate is evaluated exactly.
    ``half`` broadcasts against the points' leading axes.
    Returns (sd, s, point, gradient).
    """
    half = np.asarray(half, dtype=float)
    hx, hy = half[..., 0], half[..., 1]
    d = b - a
    shape = np.broadcast_shapes(a.shape[:-1], half.shape[:-1])
    cands = [np.zeros(shape), np.ones(shape)]
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis in (0, 1):
            cands.append(-a[..., axis] / d[..., axis])
        # |px| - hx = |py| - hy for each sign pattern
        for sx in (1.0, -1.0):
            for sy in (1.0, -1.0):
                num = hx - hy - sx * a[..., 0] + sy * a[..., 1]
                den = sx * d[..., 0] - sy * d[..., 1]
                cands.append(num / den)
        dd = _dot(d, d)
        for sx in (-1.0, 1.0):
            for sy in (-1.0, 1.0):
                cands.append(((sx * hx - a[..., 0]) * d[..., 0] + (sy * hy - a[..., 1]) * d[..., 1]) / dd)
    S = np.stack(np.broadcast_arrays(*cands), axis=-1)
    S = np.where(np.isfinite(S), np.clip(S, 0.0, 1.0), 0.0)
    pts = a[..., None, :] + S[..., None] * d[..., None, :]
    sd, _ = point_box_sd(pts, half[..., None, :])
    k = np.argmin(sd, axis=-1)
    s = np.take_along_axis(S, k[..., None], axis=-1)[..., 0]
    p = a + s[..., None] * d
    best, grad = point_box_sd(p, half)
    if with_grad:
        grad = _interior_kink_gradient(best, s, p, d, half, grad)
    return best, s, p, grad


_PIECES = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


def _interior_kink_gradient(best, s, p, d, half, grad):
    """Exact gradient when the deepest point is an interior crossing of two faces' depth planes.

    Inside the box the distance is the max of four affine pieces, so along the
    segment the value is min_s max_k ψ_k.  At an interior crossing of pieces
    with opposite slopes the value's gradient is the convex combination that
    makes the combined slope zero (min-max duality).
    """
    inside = best < 0
    if not np.any(inside):
        return grad
    psi = p @ _PIECES.T - np.stack([half[..., 0], half[..., 0], half[..., 1], half[..., 1]], axis=-1)  # (..., 4)
    slope = d @ _PIECES.T
    active = psi >= best[..., None] - 1e-12 * (1.0 + np.abs(best[..., None]))
    up = np.where(active, slope, -np.inf)
    down = np.where(active, slope, np.inf)
    k1, k2 = np.argmax(up, axis=-1), np.argmin(down, axis=-1)
    a1 = np.take_along_axis(slope, k1[..., None], axis=-1)[..., 0]
    a2 = np.take_along_axis(slope, k2[..., None], axis=-1)[..., 0]
    kink = inside & (s > 0) & (s < 1) & (a1 > 0) & (a2 < 0)
    if not np.any(kink):
        return grad
    denom = np.where(kink, a1 - a2, 1.0)
    w1, w2 = -a2 / denom, a1 / denom
    combo = w1[..., None] * _PIECES[k1] + w2[..., None] * _PIECES[k2]
    return np.where(kink[..., None], combo, grad)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def segment_segment(a0, a1, b0, b1):
    """Distance between segments and witness points (wa on a, wb on b)."""
    da, db = a1 - a0, b1 - b0
    # proper or touching intersection via orientation tests
    o1 = _cross(da, b0 - a0)
    o2 = _cross(da, b1 - a0)
    o3 = _cross(db, a0 - b0)
    o4 = _cross(db, a1 - b0)
    crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
    d1, s1, c1 = point_segment(a0, b0, b1)
    d2, s2, c2 = point_segment(a1, b0, b1)
    d3, s3, c3 = point_segment(b0, a0, a1)
    d4, s4, c4 = point_segment(b1, a0, a1)
    D = np.stack([d1, d2, d3, d4], axis=-1)
    WA = np.stack([a0, a1, c3, c4], axis=-2)
    WB = np.stack([c1, c2, b0, b1], axis=-2)
    k = np.argmin(D, axis=-1)
    dist = np.take_along_axis(D, k[..., None], axis=-1)[..., 0]
    wa = np.take_along_axis(WA, k[..., None, None], axis=-2)[..., 0, :]
    wb = np.take_along_axis(WB, k[..., None, None], axis=-2)[..., 0, :]
    if np.any(crossing):
        denom = _cross(da, db)
        t = np.where(crossing, _cross(b0 - a0, db) / np.where(crossing, denom, 1.0), 0.0)
        inter = a0 + t[..., None] * da
        dist = np.where(crossing, 0.0, dist)
        wa = np.where(crossing[..., None], inter, wa)
        wb = np.where(crossing[..., None], inter, wb)
    return dist, wa, wb


# ---------------------------------------------------------------------------
# primitive signed distance (scalar API)
# ---------------------------------------------------------------------------
def _capsule_ends(shape: Capsule, pose: Pose2):
    axis = np.array([np.cos(pose.theta), np.sin(pose.theta)]) * shape.hl
    return pose.t - axis, pose.t + axis


_ORDER = {Disc: 0, Capsule: 1, Box: 2}


def _key(shape, pose):
    return (_ORDER[type(shape)],) + tuple(vars(shape).values()) + (pose.x, pose.y, pose.theta)


def signed_distance(shape_a: Shape, pose_a: Pose2, shape_b: Shape, pose_b: Pose2) -> float:
    """Signed distance in metres between two placed primitives."""
    for s in (shape_a, shape_b):
        if type(s) not in _ORDER:
            raise UnsupportedPair(f"unsupported shape {type(s).__name__}")
    # canonical argument order makes the result exactly symmetric
    if _key(shape_a, pose_a) > _key(shape_b, pose_b):
        shape_a, pose_a, shape_b, pose_b = shape_b, pose_b, shape_a, pose_a
    ta, tb = type(shape_a), type(shape_b)
    if ta is Disc and tb is Disc:
        return float(_norm(pose_a.t - pose_b.t) - shape_a.r - shape_b.r)
    if ta is Disc and tb is Capsule:
        e0, e1 = _capsule_ends(shape_b, pose_b)
        return float(point_segment(pose_a.t, e0, e1)[0] - shape_a.r - shape_b.r)
    if ta is Capsule and tb is Capsule:
        a0, a1 = _capsule_ends(shape_a, pose_a)
        b0, b1 = _capsule_ends(shape_b, pose_b)
        return float(segment_segment(a0, a1, b0, b1)[0] - shape_a.r - shape_b.r)
    if ta is Disc and tb is Box:
        sd, _ = point_box_sd(pose_b.to_local(pose_a.t), (shape_b.hx, shape_b.hy))
        return float(sd - shape_a.r)
    if ta is Capsule and tb is Box:
        e0, e1 = _capsule_ends(shape_a, pose_a)
        sd = segment_box(pose_b.to_local(e0), pose_b.to_local(e1), (shape_b.hx, shape_b.hy))[0]
        return float(sd - shape_a.r)
    raise UnsupportedPair(f"unsupported pair {ta.__name__}–{tb.__name__}")


# ---------------------------------------------------------------------------
# arm against scene
# ---------------------------------------------------------------------------
def scene_bodies(scene) -> list[tuple[Shape, Pose2]]:
    if scene is None:
        return []
    if hasattr(scene, "bodies"):
        return list(scene.bodies())
    return list(scene)


def link_capsules(spec: ArmSpec, q) -> list[tuple[Capsule, Pose2]]:
    """Capsule shape and centre pose of every link; endpoints are the joints."""
    pts = arm_mod.joint_positions(spec, np.asarray(q, dtype=float))
    theta = np.cumsum(q)
    out = []
    for i in range(spec.n):
        c = 0.5 * (pts[i] + pts[i + 1])
        out.append((Capsule(spec.lengths[i] / 2, spec.link_radius), Pose2(float(c[0]), float(c[1]), float(theta[i]))))
    return out


def collision_pairs(spec: ArmSpec, scene) -> list[CollisionPair]:
    """Link–body pairs for every body, then non-adjacent link–link pairs."""
    pairs = [CollisionPair(i, j, "body") for j in range(len(scene_bodies(scene))) for i in range(spec.n)]
    pairs += [CollisionPair(i, j, "self") for i in range(spec.n) for j in range(i + 2, spec.n)]
    return pairs


def pair_distances(spec: ArmSpec, q, scene, with_jacobian: bool = False):
    """Distances of every collision pair for configurations q (..., n).

    Returns d (..., P) and, if requested, ∂d/∂q (..., P, n).  Pair order is
    :func:`collision_pairs`.
    """
    q = np.asarray(q, dtype=float)
    n = spec.n
    r = spec.link_radius
    pts = arm_mod.joint_positions(spec, q)
    a0, a1 = pts[..., :-1, :], pts[..., 1:, :]  # (..., n, 2)
    bodies = scene_bodies(scene)
    batch = q.shape[:-1]
    d_body = np.empty(batch + (len(bodies), n))
    J_body = np.empty(batch + (len(bodies), n, n)) if with_jacobian else None
    groups: dict[type, list[int]] = {}
    for k, (shape, _) in enumerate(bodies):
        if type(shape) not in _ORDER:
            raise UnsupportedPair(f"link capsule vs {type(shape).__name__}")
        groups.setdefault(type(shape), []).append(k)
    A0, A1 = a0[..., None, :, :], a1[..., None, :, :]  # (..., 1, n, 2) against (B, 1, ...) body data
    for kind, idx in groups.items():
        shapes = [bodies[k][0] for k in idx]
        poses = [bodies[k][1] for k in idx]
        t = np.array([p.t for p in poses])[:, None, :]  # (B, 1, 2)
        if kind is Box:
            R = np.array([p.rotation() for p in poses])[:, None]  # (B, 1, 2, 2)
            half = np.array([[sh.hx, sh.hy] for sh in shapes])[:, None, :]
            la = np.einsum("...k,...kj->...j", A0 - t, R)
            lb = np.einsum("...k,...kj->...j", A1 - t, R)
            sd, s_, _, g = segment_box(la, lb, half, with_grad=with_jacobian)
            d = sd - r
            if with_jacobian:
                w = A0 + s_[..., None] * (A1 - A0)
                nrm = np.einsum("...k,...jk->...j", g, R)
        elif kind is Disc:
            radii = np.array([sh.r for sh in shapes])[:, None]
            dist, _, c = point_segment(t, A0, A1)
            d = dist - radii - r
            if with_jacobian:
                w, nrm = c, _unit(c - t)
        else:
            radii = np.array([sh.r for sh in shapes])[:, None]
            ends = [_capsule_ends(sh, p) for sh, p in zip(shapes, poses)]
            e0 = np.array([e[0] for e in ends])[:, None, :]
            e1 = np.array([e[1] for e in ends])[:, None, :]
            shp = np.broadcast_shapes(A0.shape, e0.shape)
            dist, wa, wb = segment_segment(*(np.broadcast_to(x, shp) for x in (A0, A1, e0, e1)))
            d = dist - radii - r
            if with_jacobian:
                # crossing cores: value is locally constant
                w, nrm = wa, _unit(wa - wb) * (dist > 0)[..., None]
        d_body[..., idx, :] = d
        if with_jacobian:
            J = arm_mod.point_jacobian(spec, q[..., None, None, :], np.arange(n), w)  # (..., B, n, 2, nq)
            J_body[..., idx, :, :] = np.einsum("...k,...kj->...j", nrm, J)
    ds = [d_body.reshape(batch + (-1,))]
    jacs = [J_body.reshape(batch + (-1, n))] if with_jacobian else []
    for i in range(n):
        for j in range(i + 2, n):
            dist, wa, wb = segment_segment(a0[..., i, :], a1[..., i, :], a0[..., j, :], a1[..., j, :])
            ds.append((dist - 2 * r)[..., None])
            if with_jacobian:
                nrm = _unit(wa - wb) * (dist > 0)[..., None]
                Ja = arm_mod.point_jacobian(spec, q, i, wa)
                Jb = arm_mod.point_jacobian(spec, q, j, wb)
                jacs.append(np.einsum("...k,...kj->...j", nrm, Ja - Jb)[..., None, :])
    d_all = np.concatenate(ds, axis=-1)
    if not with_jacobian:
        return d_all
    J_all = np.concatenate(jacs, axis=-2)
    return d_all, J_all


def distance_jacobian(spec: ArmSpec, q, pair: CollisionPair, scene) -> np.ndarray:
    """∂d/∂q for one pair at a single configuration (length n)."""
    pairs = collision_pairs(spec, scene)
    idx = pairs.index(pair)
    _, J = pair_distances(spec, q, scene, with_jacobian=True)
    return J[idx]


def min_clearance(spec: ArmSpec, q, scene) -> tuple[float, CollisionPair | None]:
    """Smallest pair distance and its pair; (+inf, None) when there are no pairs."""
    d = pair_distances(spec, q, scene)
    if d.shape[-1] == 0:
        return float("inf"), None
    k = int(np.argmin(d))
    return float(d[k]), collision_pairs(spec, scene)[k]


def clearance(spec: ArmSpec, q, scene) -> np.ndarray:
    """Minimum pair distance for each configuration in a batch (..., n) -> (...)."""
    d = pair_distances(spec, q, scene)
    if d.shape[-1] == 0:
        return np.full(np.shape(q)[:-1], np.inf)
    return d.min(axis=-1)


def penetration_depth(trajectory, spec: ArmSpec, scene) -> float:
    """Σ_t Σ_pairs max(0, −d) over configurations of a trajectory (T+1, n)."""
    d = pair_distances(spec, np.asarray(trajectory, dtype=float), scene)
    return float(np.maximum(0.0, -d).sum())
