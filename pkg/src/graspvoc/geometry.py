"""Point clouds, PCA frames and exact nearest-point queries."""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateCloud, EmptyCloud

JACOBI_TOL = 1e-12
DEGENERATE_GAP = 1e-12
_WORLD_AXES = np.eye(3)


def as_point(p):
    arr = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite point {arr!r}")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) points in metres. Row index is the point's identity."""

    points: np.ndarray
    frame_id: str = "object"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.size == 0:
            raise EmptyCloud("point cloud has no points")
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise EmptyCloud("point cloud has no points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains NaN or Inf")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n_points(self):
        return self.points.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.points[idx], self.frame_id)

    def translated(self, offset):
        return PointCloud(self.points + as_point(offset), self.frame_id)

    def transformed(self, rotation):
        rot = np.asarray(rotation, dtype=np.float64)
        return PointCloud(self.points @ rot.T, self.frame_id)


@dataclass(frozen=True, eq=False)
class PcaFrame:
    centroid: np.ndarray
    axes: np.ndarray  # rows are unit axes, descending variance
    variances: np.ndarray = field(default_factory=lambda: np.zeros(3))


def covariance(points):
    """Population (1/N) covariance of an (N, 3) array, plus its centroid."""
    pts = np.asarray(points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    centred = pts - centroid
    return centred.T @ centred / pts.shape[0], centroid


def jacobi_eigh(matrix, tol=JACOBI_TOL, max_sweeps=64):
    """Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvectors as columns, unsorted.
    Iterates until the off-diagonal Frobenius norm is below ``tol`` times the
    matrix norm.
    """
    a = np.array(matrix, dtype=np.float64)
    v = np.eye(3)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(3), v
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * (a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2))
        if off <= tol * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            if theta == 0.0:
                t = 1.0
            elif abs(theta) > 1e150:
                t = 0.5 / theta  # theta**2 would overflow
            else:
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a[p, q] = a[q, p] = 0.0
            v = v @ rot
    return np.diag(a).copy(), v


def _complete_degenerate(axes, values):
    """Replace eigenvectors inside degenerate eigenvalue clusters.

    Cluster members are rebuilt by Gram-Schmidt of the world axes (x, y, z in
    that order) against the axes already fixed, so symmetric shapes get a
    reproducible frame.
    """
    gap = DEGENERATE_GAP * max(float(values.sum()), 0.0)
    clusters = [[0]]
    for i in range(1, 3):
        if values[i - 1] - values[i] < gap:
            clusters[-1].append(i)
        else:
            clusters.append([i])
    if all(len(c) == 1 for c in clusters):
        return axes
    out = axes.copy()
    fixed = [out[c[0]] for c in clusters if len(c) == 1]
    for cluster in clusters:
        if len(cluster) == 1:
            continue
        candidates = iter(_WORLD_AXES)
        for slot in cluster:
            for w in candidates:
                r = w.copy()
                for _ in range(2):
                    for f in fixed:
                        r -= (r @ f) * f
                norm = np.linalg.norm(r)
                if norm > 1e-6:
                    out[slot] = r / norm
                    fixed.append(out[slot])
                    break
    return out


def _fix_signs(axes):
    out = axes.copy()
    for i in range(3):
        k = int(np.argmax(np.abs(out[i])))
        if out[i, k] < 0:
            out[i] = -out[i]
    if np.linalg.det(out) < 0:
        out[2] = -out[2]
    return out


def pca_frame(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.shape[0] < 3:
        raise DegenerateCloud(f"PCA needs at least 3 points, got {pts.shape[0]}")
    cov, centroid = covariance(pts)
    if not np.any(cov):
        raise DegenerateCloud("all points coincide")
    values, vectors = jacobi_eigh(cov)
    order = np.argsort(-values, kind="stable")
    values = np.clip(values[order], 0.0, None)
    axes = vectors[:, order].T.copy()
    axes = _complete_degenerate(axes, values)
    axes = _fix_signs(axes)
    return PcaFrame(centroid=centroid, axes=axes, variances=values)


def nearest(queries, cloud):
    """Vectorised exact nearest-point lookup: (indices, distances)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot query an empty cloud")
    idx, d2 = _kernels.nearest(queries, pts)
    return idx, np.sqrt(d2)


def nearest_index(query, cloud):
    idx, _ = nearest(as_point(query).reshape(1, 3), cloud)
    return int(idx[0])


def nearest_distance(query, cloud):
    _, dist = nearest(as_point(query).reshape(1, 3), cloud)
    return float(dist[0])
