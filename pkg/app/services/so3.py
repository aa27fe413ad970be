"""SO(3) mathematics: 6D encoding, Gram-Schmidt projection, geodesic
distance, Haar sampling, farthest-point selection and shared rotations.

Conventions:
  - A rotation is a (3, 3) float64 array acting on column vectors.
  - A rotation set is a (n, 3, 3) array (any sequence of rotations is
    accepted and stacked).
  - The 6D encoding is column-major: ``(R[:, 0], R[:, 1])``. Datasets and
    checkpoints depend on this layout.

Every function is pure; randomness comes only from an explicit
``numpy.random.Generator``.
"""

from typing import List, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from app.errors import BadCount, DegenerateInput

RotationMatrix = NDArray[np.float64]
Rot6D = NDArray[np.float64]

NORM_EPS = 1e-12
ORTHO_TOL = 1e-6


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def is_rotation(R: ArrayLike, tol: float = ORTHO_TOL) -> bool:
    """True if ``R`` is orthonormal with determinant +1 within ``tol``."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


def as_rotation_set(rots: Sequence[ArrayLike] | NDArray) -> NDArray[np.float64]:
    """Stack a sequence of rotations into a (n, 3, 3) array."""
    arr = np.asarray(rots, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr.reshape(-1, 3, 3)


# ---------------------------------------------------------------------------
# 6D representation
# ---------------------------------------------------------------------------

def rot6d_from_matrix(R: ArrayLike) -> Rot6D:
    """First two columns of ``R`` concatenated; works on (..., 3, 3)."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def project_so3(v: ArrayLike) -> RotationMatrix:
    """Gram-Schmidt map from a 6-vector (or (..., 6) batch) to SO(3).

    Raises DegenerateInput when the first half, or the second half after
    removing its component along the first, has norm <= 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    u, w = v[..., 0:3], v[..., 3:6]

    n1 = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n1 <= NORM_EPS):
        raise DegenerateInput("first column of 6D rotation has zero norm")
    a1 = u / n1

    residual = w - np.sum(a1 * w, axis=-1, keepdims=True) * a1
    n2 = np.linalg.norm(residual, axis=-1, keepdims=True)
    if np.any(n2 <= NORM_EPS):
        raise DegenerateInput("second column of 6D rotation is collinear with the first")
    a2 = residual / n2

    a3 = np.cross(a1, a2)
    return np.stack([a1, a2, a3], axis=-1)


# ---------------------------------------------------------------------------
# Metric
# ---------------------------------------------------------------------------

def geodesic_angle(R1: ArrayLike, R2: ArrayLike) -> float | NDArray[np.float64]:
    """Rotation angle of R1ᵀR2 in radians, in [0, π].

    Broadcasts over leading dimensions; returns a float for single pairs.
    """
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    # trace(R1ᵀ R2) = sum of elementwise products
    trace = np.sum(R1 * R2, axis=(-2, -1))
    cos = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    if np.ndim(angle) == 0:
        return float(angle)
    return angle


def pairwise_geodesic(A: ArrayLike, B: ArrayLike) -> NDArray[np.float64]:
    """(n, m) matrix of geodesic angles between two rotation sets."""
    A = as_rotation_set(A)
    B = as_rotation_set(B)
    trace = np.einsum("iab,jab->ij", A, B)
    return np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def quaternion_to_matrix(q: ArrayLike) -> NDArray[np.float64]:
    """Unit quaternion(s) (w, x, y, z) to rotation matrix(es)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def random_rotations(rng: np.random.Generator, n: int) -> NDArray[np.float64]:
    """``n`` Haar-uniform rotations from normalized 4-D Gaussians."""
    q = rng.standard_normal((n, 4))
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    # A zero Gaussian 4-vector has probability zero; redraw to be safe.
    while np.any(norms < NORM_EPS):
        bad = norms[:, 0] < NORM_EPS
        q[bad] = rng.standard_normal((int(bad.sum()), 4))
        norms = np.linalg.norm(q, axis=1, keepdims=True)
    return quaternion_to_matrix(q / norms)


def random_rotation(rng: np.random.Generator) -> RotationMatrix:
    """A single Haar-uniform rotation."""
    return random_rotations(rng, 1)[0]


def axis_angle(axis: ArrayLike, angle: float) -> RotationMatrix:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rot_x(angle: float) -> RotationMatrix:
    return axis_angle((1.0, 0.0, 0.0), angle)


def rot_y(angle: float) -> RotationMatrix:
    return axis_angle((0.0, 1.0, 0.0), angle)


def rot_z(angle: float) -> RotationMatrix:
    return axis_angle((0.0, 0.0, 1.0), angle)


# ---------------------------------------------------------------------------
# Rotation sets
# ---------------------------------------------------------------------------

def fps_select(rots: Sequence[ArrayLike] | NDArray, k: int) -> List[int]:
    """Greedy farthest-point sampling under the geodesic metric.

    Starts from index 0; each next pick maximizes the minimum distance to
    the picks so far, ties going to the lowest index.
    """
    rots = as_rotation_set(rots)
    n = rots.shape[0]
    if not 1 <= k <= n:
        raise BadCount(f"fps_select: k={k} outside [1, {n}]")

    picked = [0]
    available = np.ones(n, dtype=bool)
    available[0] = False
    min_dist = geodesic_angle(rots, rots[0])
    for _ in range(1, k):
        candidates = np.where(available, min_dist, -np.inf)
        nxt = int(np.argmax(candidates))  # first maximum = lowest index
        picked.append(nxt)
        available[nxt] = False
        min_dist = np.minimum(min_dist, geodesic_angle(rots, rots[nxt]))
    return picked


def apply_shared_rotation(rots: Sequence[ArrayLike] | NDArray, R: ArrayLike) -> NDArray[np.float64]:
    """Right-multiply every rotation of the set by ``R``."""
    rots = as_rotation_set(rots)
    R = np.asarray(R, dtype=np.float64)
    return rots @ R


def cube_group() -> NDArray[np.float64]:
    """The 24 proper rotations of the cube (signed permutation matrices)."""
    mats = []
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        for signs in np.ndindex(2, 2, 2):
            M = np.zeros((3, 3))
            for row, col in enumerate(perm):
                M[row, col] = -1.0 if signs[row] else 1.0
            if np.linalg.det(M) > 0:
                mats.append(M)
    return np.stack(mats)
