"""SO(3)/SE(3) rotations, rigid transforms, and the tangent-space machinery
used by the Gauss-Newton solvers.

Conventions used throughout the package:

* Rotations are plain 3x3 orthonormal matrices wrapped in :class:`Rot3`.
* Rigid transforms are rotation + translation pairs (:class:`Pose3`);
  ``T.apply(p) = R @ p + t``.
* Tangent vectors are 6-vectors in *translation-first* order
  ``(rho, phi)`` (:class:`Tangent6`).
* Pose increments use the right-hand perturbation ``T * exp(xi)``.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

# Below this rotation angle (rad) exp/log switch to their Taylor branches.
SMALL_ANGLE = 1e-9


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    return a


def skew(v) -> np.ndarray:
    """Cross-product (wedge) matrix of a 3-vector."""
    x, y, z = _as_vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues rotation matrix for the rotation vector ``phi``."""
    phi = _as_vec3(phi)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < SMALL_ANGLE:
        # second-order series, exact to machine precision at this scale
        return np.eye(3) + k + 0.5 * (k @ k)
    # sin(t)/t and (1-cos(t))/t^2 written in cancellation-free form
    a = math.sin(theta) / theta
    b = 2.0 * math.sin(0.5 * theta) ** 2 / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def _vee_antisym(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def _pi_branch_axis(r: np.ndarray) -> np.ndarray:
    """Rotation axis for angles at/near pi, from the dominant diagonal of (R+I)/2."""
    b = 0.5 * (r + np.eye(3))
    k = int(np.argmax(np.diag(b)))
    axis = b[:, k] / math.sqrt(max(b[k, k], 1e-300))
    axis = axis / np.linalg.norm(axis)
    # deterministic sign: non-negative z, tie-broken by y then x
    for c in (2, 1, 0):
        if abs(axis[c]) > 1e-12:
            if axis[c] < 0.0:
                axis = -axis
            break
    return axis


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (inverse of :func:`so3_exp`)."""
    r = np.asarray(r, dtype=float)
    w = _vee_antisym(r)  # = sin(theta) * axis
    cos_t = max(-1.0, min(1.0, 0.5 * (np.trace(r) - 1.0)))
    sin_t = float(np.linalg.norm(w))
    theta = math.atan2(sin_t, cos_t)
    if theta < SMALL_ANGLE:
        return w
    if math.pi - theta < 1e-6:
        axis = _pi_branch_axis(r)
        if sin_t > 1e-12 and float(np.dot(axis, w)) < 0.0:
            axis = -axis
        return theta * axis
    return (theta / sin_t) * w


def so3_left_jacobian(phi) -> np.ndarray:
    """V matrix: translation block of the SE(3) exponential."""
    phi = _as_vec3(phi)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < 1e-4:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    b = 2.0 * math.sin(0.5 * theta) ** 2 / theta**2
    c = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + b * k + c * (k @ k)


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = _as_vec3(phi)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < 1e-4:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    half = 0.5 * theta
    cot = half / math.tan(half)
    return np.eye(3) - 0.5 * k + ((1.0 - cot) / theta**2) * (k @ k)


@dataclasses.dataclass(frozen=True)
class Rot3:
    """A 3x3 orthonormal rotation matrix (det +1)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(3, 3)
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "Rot3":
        return Rot3(np.eye(3))

    @staticmethod
    def exp(phi) -> "Rot3":
        return Rot3(so3_exp(phi))

    @staticmethod
    def from_matrix(m, tol: float = 1e-9) -> "Rot3":
        m = np.asarray(m, dtype=float).reshape(3, 3)
        if np.max(np.abs(m.T @ m - np.eye(3))) > tol:
            raise ValueError("matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > tol:
            raise ValueError("matrix determinant is not +1")
        return Rot3(m)

    def log(self) -> np.ndarray:
        return so3_log(self.m)

    def inverse(self) -> "Rot3":
        return Rot3(self.m.T)

    def __matmul__(self, other: "Rot3") -> "Rot3":
        return Rot3(self.m @ other.m)

    def apply(self, points) -> np.ndarray:
        """Rotate one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.m.T

    def angle_to(self, other: "Rot3") -> float:
        return float(np.linalg.norm(so3_log(self.m.T @ other.m)))


@dataclasses.dataclass(frozen=True)
class Pose3:
    """SE(3) rigid transform: ``apply(p) = rot @ p + trans``."""

    rot: Rot3 = dataclasses.field(default_factory=Rot3.identity)
    trans: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.trans, dtype=float).reshape(3).copy()
        t.flags.writeable = False
        object.__setattr__(self, "trans", t)
        if not isinstance(self.rot, Rot3):
            object.__setattr__(self, "rot", Rot3(self.rot))

    @staticmethod
    def identity() -> "Pose3":
        return Pose3()

    @staticmethod
    def from_rt(rot_matrix, trans) -> "Pose3":
        return Pose3(Rot3(np.asarray(rot_matrix, dtype=float)), trans)

    @staticmethod
    def from_matrix(m) -> "Pose3":
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return Pose3(Rot3(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rot.m
        m[:3, 3] = self.trans
        return m

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(self.rot @ other.rot, self.rot.apply(other.trans) + self.trans)

    __matmul__ = compose

    def inverse(self) -> "Pose3":
        rinv = self.rot.inverse()
        return Pose3(rinv, -rinv.apply(self.trans))

    def apply(self, points) -> np.ndarray:
        return self.rot.apply(points) + self.trans

    def translation_to(self, other: "Pose3") -> float:
        return float(np.linalg.norm(self.trans - other.trans))

    def rotation_to(self, other: "Pose3") -> float:
        return self.rot.angle_to(other.rot)


@dataclasses.dataclass(frozen=True)
class Twist:
    """Linear (m/s) and angular (rad/s) velocity of a rigid body."""

    v: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("v", "w"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(3).copy()
            if not np.all(np.isfinite(a)):
                raise ValueError(f"twist {name} has non-finite components")
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @staticmethod
    def zero() -> "Twist":
        return Twist()

    def is_zero(self) -> bool:
        return not (np.any(self.v) or np.any(self.w))


@dataclasses.dataclass(frozen=True)
class Tangent6:
    """se(3) increment, translation-first: (rho, phi)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        for name in ("rho", "phi"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(3).copy()
            if not np.all(np.isfinite(a)):
                raise ValueError(f"tangent {name} has non-finite components")
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @staticmethod
    def from_vector(xi) -> "Tangent6":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Tangent6(xi[:3], xi[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


def _tangent_vec(xi) -> np.ndarray:
    if isinstance(xi, Tangent6):
        return xi.vector
    return np.asarray(xi, dtype=float).reshape(6)


def se3_compose(a: Pose3, b: Pose3) -> Pose3:
    return a.compose(b)


def se3_exp(xi) -> Pose3:
    xi = _tangent_vec(xi)
    rho, phi = xi[:3], xi[3:]
    return Pose3(Rot3(so3_exp(phi)), so3_left_jacobian(phi) @ rho)


def se3_log(t: Pose3) -> np.ndarray:
    """Tangent vector (rho, phi) with ``se3_exp(se3_log(T)) = T``."""
    phi = t.rot.log()
    rho = so3_left_jacobian_inv(phi) @ t.trans
    return np.concatenate([rho, phi])


def se3_boxplus(t: Pose3, xi) -> Pose3:
    """Right-perturbation update ``T * exp(xi)``."""
    return t.compose(se3_exp(xi))


def se3_adjoint(t: Pose3) -> np.ndarray:
    """6x6 adjoint mapping tangents across a frame change (rho-first blocks)."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = t.rot.m
    ad[3:, 3:] = t.rot.m
    ad[:3, 3:] = skew(t.trans) @ t.rot.m
    return ad


def _q_matrix(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian (linear in rho)."""
    theta = float(np.linalg.norm(phi))
    rx = skew(rho)
    px = skew(phi)
    pxrx = px @ rx
    rxpx = rx @ px
    pxrxpx = pxrx @ px
    if theta < 1e-4:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        t2 = theta * theta
        t4 = t2 * t2
        sin_t = math.sin(theta)
        cos_t = math.cos(theta)
        c1 = (theta - sin_t) / (t2 * theta)
        c2 = -(1.0 - 0.5 * t2 - cos_t) / t4
        c3 = -0.5 * (
            (1.0 - 0.5 * t2 - cos_t) / t4
            - 3.0 * (theta - sin_t - t2 * theta / 6.0) / (t4 * theta)
        )
    q = 0.5 * rx
    q += c1 * (pxrx + rxpx + pxrxpx)
    q += c2 * (px @ pxrx + rxpx @ px - 3.0 * pxrxpx)
    q += c3 * (pxrxpx @ px + px @ pxrxpx)
    return q


def se3_left_jacobian(xi) -> np.ndarray:
    xi = _tangent_vec(xi)
    rho, phi = xi[:3], xi[3:]
    j = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[:3, 3:] = _q_matrix(rho, phi)
    return out


def se3_right_jacobian_inv(xi) -> np.ndarray:
    """Inverse right Jacobian: d/d(delta) log(exp(xi) exp(delta)) at delta = 0."""
    xi = _tangent_vec(xi)
    rho, phi = xi[:3], xi[3:]
    j_inv = so3_left_jacobian_inv(-phi)
    q = _q_matrix(-rho, -phi)
    out = np.zeros((6, 6))
    out[:3, :3] = j_inv
    out[3:, 3:] = j_inv
    out[:3, 3:] = -j_inv @ q @ j_inv
    return out


def jac_point_action(t: Pose3, l) -> np.ndarray:
    """3x6 derivative of ``(T * exp(xi)).apply(l)`` at xi = 0."""
    out = np.zeros((3, 6))
    out[:, :3] = t.rot.m
    out[:, 3:] = -t.rot.m @ skew(l)
    return out


def quaternion_from_rotation(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w), w >= 0, from a rotation matrix."""
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    else:
        k = int(np.argmax(np.diag(r)))
        i, j = (k + 1) % 3, (k + 2) % 3
        s = math.sqrt(max(r[k, k] - r[i, i] - r[j, j], 0.0) + 1.0) * 2.0
        q = np.zeros(4)
        q[k] = 0.25 * s
        q[3] = (r[j, i] - r[i, j]) / s
        q[i] = (r[i, k] + r[k, i]) / s
        q[j] = (r[j, k] + r[k, j]) / s
        x, y, z, w = q
    quat = np.array([x, y, z, w])
    quat /= np.linalg.norm(quat)
    if quat[3] < 0.0:
        quat = -quat
    return quat


def rotation_from_quaternion(q) -> np.ndarray:
    """Rotation matrix from a quaternion (x, y, z, w); normalizes its input."""
    q = np.asarray(q, dtype=float).reshape(4)
    q = q / np.linalg.norm(q)
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> Rot3:
    """Uniform random rotation (quaternion method), for tests and Monte-Carlo."""
    q = rng.normal(size=4)
    return Rot3(rotation_from_quaternion(q))
