"""Point-cloud primitives: chamfer distances, centering, rotations, and
area-weighted surface sampling of triangle meshes.

The nearest-neighbor inner loop runs on a compiled kernel when the
extension built from ``_kernels.pyx`` is importable, and on a numpy
fallback otherwise. Set ``P2V_KERNEL=numpy`` or ``P2V_KERNEL=compiled``
to force a backend; the two are bit-equivalent (see ``_kernels_np``).
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

_choice = os.environ.get("P2V_KERNEL", "auto").lower()
if _choice == "numpy":
    from . import _kernels_np as _kern
elif _choice == "compiled":
    from . import _kernels as _kern
elif _choice == "auto":
    try:
        from . import _kernels as _kern
    except ImportError:
        from . import _kernels_np as _kern
else:
    raise ImportError(f"P2V_KERNEL must be 'auto', 'compiled' or 'numpy', got {_choice!r}")


def kernel_backend():
    """Name of the active nearest-neighbor backend: 'compiled' or 'numpy'."""
    return _kern.BACKEND


def as_cloud(points, name="cloud"):
    """Validate and return a point cloud as an (N, 3) float64 array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise InvalidInputError(f"{name} must contain at least one point")
    if not np.isfinite(pts).all():
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return pts


def min_sqdist(a, b):
    """Per-point squared distance from each point of `a` to its nearest point of `b`."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _kern.min_sqdist(a, b)


def chamfer_distance(a, b):
    """Symmetric chamfer distance between two point clouds.

    Mean squared nearest-neighbor distance from a to b plus the same
    from b to a. Size-normalized, so clouds of different cardinality
    compare on equal footing. Zero iff the clouds cover the same point set.
    """
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    return float(min_sqdist(a, b).mean() + min_sqdist(b, a).mean())


def center(points):
    """Translate a cloud so its per-axis mean is zero.

    Returns (centered, centroid) where centroid is the removed mean.
    """
    pts = as_cloud(points)
    centroid = pts.mean(axis=0)
    return pts - centroid, centroid


def rotate_z(points, theta):
    """Rotate a cloud about the z axis by `theta` radians (norm-preserving)."""
    pts = np.asarray(points, dtype=np.float64)
    c = math.cos(theta)
    s = math.sin(theta)
    out = np.empty_like(pts)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
    out[:, 2] = pts[:, 2]
    return out


def _golden_min(f, lo, hi, tol):
    """Golden-section search for the minimum of f on [lo, hi].

    Returns the best (x, f(x)) among all evaluated points; assumes f is
    unimodal on the bracket, degrades gracefully when it is not because
    every evaluation is tracked.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = f(c), f(d)
    best_x, best_f = (c, fc) if fc <= fd else (d, fd)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = f(c)
            if fc < best_f:
                best_x, best_f = c, fc
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = f(d)
            if fd < best_f:
                best_x, best_f = d, fd
    return best_x, best_f


def rotation_optimized_chamfer(a, b, grid_steps=36, refine_tol=1e-3):
    """Minimum chamfer distance between `a` and `b` over z-axis rotations.

    Scans `grid_steps` uniformly spaced angles, then refines around the
    best grid cell with a golden-section pass until the bracket is
    narrower than `refine_tol` radians (pass None to skip refinement).
    Both clouds are expected to be centered.

    Returns (distance, angle) where `angle` in [0, 2*pi) rotates `a`
    into its best alignment with `b`. Never exceeds chamfer_distance(a, b)
    because angle 0 is always on the grid.
    """
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    if grid_steps < 4:
        raise InvalidInputError(f"grid_steps must be >= 4, got {grid_steps}")

    def f(theta):
        rotated = rotate_z(a, theta)
        return float(min_sqdist(rotated, b).mean() + min_sqdist(b, rotated).mean())

    step = 2.0 * math.pi / grid_steps
    best_angle = 0.0
    best_dist = math.inf
    for i in range(grid_steps):
        theta = i * step
        d = f(theta)
        if d < best_dist:
            best_dist, best_angle = d, theta

    if refine_tol is not None:
        x, fx = _golden_min(f, best_angle - step, best_angle + step, refine_tol)
        if fx < best_dist:
            best_dist, best_angle = fx, x

    return best_dist, best_angle % (2.0 * math.pi)


@dataclass
class TriangleMesh:
    """Indexed triangle soup with a per-face instance id.

    vertices: (V, 3) float64, faces: (F, 3) int64 vertex indices,
    face_instance_ids: (F,) int64 grouping faces into instances.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_instance_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.face_instance_ids is None:
            self.face_instance_ids = np.zeros(len(self.faces), dtype=np.int64)
        else:
            self.face_instance_ids = np.asarray(self.face_instance_ids, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise InvalidInputError("mesh vertices must have shape (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise InvalidInputError("mesh faces must have shape (F, 3)")
        if len(self.face_instance_ids) != len(self.faces):
            raise InvalidInputError("face_instance_ids length must match faces")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("mesh face indices out of range")

    def face_areas(self):
        """(F,) array of triangle areas."""
        v0 = self.vertices[self.faces[:, 0]]
        v1 = self.vertices[self.faces[:, 1]]
        v2 = self.vertices[self.faces[:, 2]]
        cross = np.cross(v1 - v0, v2 - v0)
        return 0.5 * np.linalg.norm(cross, axis=1)

    def instance_ids(self):
        return np.unique(self.face_instance_ids)


def sample_surface(mesh, instance_id, n_points, rng_seed):
    """Sample `n_points` uniformly over the surface of one mesh instance.

    Faces are picked with probability proportional to their area, points
    placed by the reflected-barycentric construction, so the expected
    per-face count is proportional to face area. Deterministic per seed.
    """
    if n_points < 1:
        raise InvalidInputError(f"n_points must be >= 1, got {n_points}")
    mask = mesh.face_instance_ids == instance_id
    if not mask.any():
        raise InvalidInputError(f"mesh has no faces for instance {instance_id!r}")
    faces = mesh.faces[mask]
    areas = mesh.face_areas()[mask]
    total = areas.sum()
    if total <= 0.0:
        raise InvalidInputError(f"instance {instance_id!r} has zero total surface area")

    rng = np.random.default_rng(rng_seed)
    cum = np.cumsum(areas)
    picks = np.searchsorted(cum, rng.random(n_points) * total, side="right")
    picks = np.minimum(picks, len(faces) - 1)

    v0 = mesh.vertices[faces[picks, 0]]
    e1 = mesh.vertices[faces[picks, 1]] - v0
    e2 = mesh.vertices[faces[picks, 2]] - v0

    r = rng.random((n_points, 2))
    outside = r.sum(axis=1) > 1.0
    r[outside] = 1.0 - r[outside]
    return v0 + r[:, :1] * e1 + r[:, 1:] * e2
