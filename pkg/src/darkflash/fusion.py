"""Depth refinement from normals, and a guided bilateral baseline.

The refined depth ``z`` minimizes

    w_z * sum_i (z_i - z_stereo_i)^2 + w_n * sum_(i,j) (n_i . (P_j - P_i))^2

over valid pixels, where ``P = z * r`` is the unprojected point along the
pixel ray ``r`` and ``(i, j)`` runs over right and down neighbor pairs. Each
tangent constraint ``z_j (n_i . r_j) - z_i (n_i . r_i)`` is linear in depth,
so the minimizer solves a sparse symmetric positive definite system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .imaging import Camera, NormalMap, ray_directions, unproject_depth, valid_depth


class FusionError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass
class FusionSystem:
    matrix: sp.csr_matrix        # (N, N) normal equations over the unknowns
    rhs: np.ndarray              # (N,)
    index: np.ndarray            # flat pixel index of each unknown
    shape: tuple[int, int]
    stereo: np.ndarray           # (H, W) input depth, returned where nothing is solved
    w_z: float
    w_n: float
    pairs: np.ndarray            # (P, 2) unknown indices (i, j) of tangent constraints
    coeffs: np.ndarray           # (P, 2) coefficients (n_i . r_i, n_i . r_j)

    @property
    def start(self) -> np.ndarray:
        return self.stereo.ravel()[self.index]

    def energy(self, z: np.ndarray) -> float:
        """Least-squares energy of a full depth map or of the unknown vector."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z.ravel()[self.index]
        pos = self.w_z * float(((z - self.start) ** 2).sum())
        i, j = self.pairs.T
        tangent = z[j] * self.coeffs[:, 1] - z[i] * self.coeffs[:, 0]
        return pos + self.w_n * float((tangent**2).sum())

    def to_image(self, z: np.ndarray) -> np.ndarray:
        out = self.stereo.copy().ravel()
        out[self.index] = z
        return out.reshape(self.shape)


def build_fusion_system(stereo_depth, normals: NormalMap, camera: Camera,
                        w_z: float = 1.0, w_n: float = 10.0) -> FusionSystem:
    depth = np.asarray(stereo_depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[..., 0]
    if normals.shape != depth.shape or (camera.height, camera.width) != depth.shape:
        raise ValueError("depth, normals and camera must share dimensions")
    if w_z < 0 or w_n < 0 or (w_z == 0 and w_n == 0):
        raise ValueError("weights must be nonnegative and not both zero")
    valid = valid_depth(depth) & normals.valid
    if not valid.any():
        raise ValueError("no valid pixels to fuse")
    h, w = depth.shape
    index = np.flatnonzero(valid)
    unknown = np.full(h * w, -1)
    unknown[index] = np.arange(index.size)
    rays = ray_directions(camera, depth.shape).reshape(-1, 3)
    n = normals.normals.reshape(-1, 3)

    pairs, coeffs = [], []
    flat = np.arange(h * w).reshape(h, w)
    for src, dst in ((flat[:, :-1], flat[:, 1:]), (flat[:-1, :], flat[1:, :])):
        src, dst = src.ravel(), dst.ravel()
        keep = valid.ravel()[src] & valid.ravel()[dst]
        src, dst = src[keep], dst[keep]
        ci = np.einsum("ij,ij->i", n[src], rays[src])
        cj = np.einsum("ij,ij->i", n[src], rays[dst])
        pairs.append(np.stack([unknown[src], unknown[dst]], 1))
        coeffs.append(np.stack([ci, cj], 1))
    pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), int)
    coeffs = np.concatenate(coeffs) if coeffs else np.zeros((0, 2))

    # A = w_z I + w_n sum_p g_p g_p^T with g_p = cj e_j - ci e_i
    i, j = pairs.T
    ci, cj = coeffs.T
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = w_n * np.concatenate([ci * ci, cj * cj, -ci * cj, -ci * cj])
    size = index.size
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()
    matrix = (matrix + w_z * sp.identity(size, format="csr")).tocsr()
    rhs = w_z * depth.ravel()[index]
    return FusionSystem(matrix, rhs, index, (h, w), depth, float(w_z), float(w_n), pairs, coeffs)


def conjugate_gradient(matrix, rhs, x0, tolerance: float = 1e-8, max_iters: int | None = None):
    """Jacobi-preconditioned conjugate gradient; returns ``(x, relative residual, iterations)``.

    The residual is measured relative to ``|b|``, or to ``|A x0|`` when ``b``
    vanishes. Raises :class:`FusionError` when the cap is reached first.
    """
    b = np.asarray(rhs, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    diag = matrix.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    if max_iters is None:
        max_iters = max(10 * b.size, 100)
    r = b - matrix @ x
    scale = float(np.linalg.norm(b)) or float(np.linalg.norm(matrix @ x)) or 1.0
    res = float(np.linalg.norm(r)) / scale
    if res <= tolerance:
        return x, res, 0
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iters + 1):
        ap = matrix @ p
        pap = float(p @ ap)
        if pap <= 0:
            raise FusionError("matrix is not positive definite along the search direction", res)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r)) / scale
        if res <= tolerance:
            return x, res, it
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise FusionError(f"conjugate gradient did not converge in {max_iters} iterations", res)


def solve_fusion(system: FusionSystem, tolerance: float = 1e-8,
                 max_iters: int | None = None) -> np.ndarray:
    """Refined depth map; pixels outside the system keep the stereo depth."""
    z, res, _ = conjugate_gradient(system.matrix, system.rhs, system.start, tolerance, max_iters)
    return system.to_image(z)


def fuse(stereo_depth, normals: NormalMap, camera: Camera, w_z: float = 1.0, w_n: float = 10.0,
         tolerance: float = 1e-8, max_iters: int | None = None) -> np.ndarray:
    return solve_fusion(build_fusion_system(stereo_depth, normals, camera, w_z, w_n),
                        tolerance, max_iters)


def bilateral_smooth_depth(depth, guide_image, spatial_sigma: float = 2.0,
                           range_sigma: float = 0.1) -> np.ndarray:
    """Guided bilateral filter over valid depths.

    Weights are ``exp(-d^2 / 2 s^2) * exp(-|g_i - g_j|^2 / 2 r^2)`` over a
    window of radius ``ceil(3 s)``; invalid or out-of-image neighbors are
    dropped and invalid pixels are returned unchanged.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[..., 0]
    guide = np.asarray(guide_image, dtype=np.float64)
    if guide.ndim == 2:
        guide = guide[..., None]
    if guide.shape[:2] != depth.shape:
        raise ValueError("guide and depth must share dimensions")
    if spatial_sigma <= 0 or range_sigma <= 0:
        raise ValueError("sigmas must be positive")
    valid = valid_depth(depth)
    h, w = depth.shape
    radius = int(math.ceil(3.0 * spatial_sigma))
    num = np.zeros_like(depth)
    den = np.zeros_like(depth)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(w, w - dx))
            yt = slice(max(0, dy), min(h, h + dy))
            xt = slice(max(0, dx), min(w, w + dx))
            ws = math.exp(-(dy * dy + dx * dx) / (2.0 * spatial_sigma**2))
            dg = ((guide[ys, xs] - guide[yt, xt]) ** 2).sum(-1)
            if math.isinf(range_sigma):
                wr = np.ones_like(dg)
            else:
                wr = np.exp(-dg / (2.0 * range_sigma**2))
            wgt = ws * wr * valid[yt, xt]
            num[ys, xs] += wgt * depth[yt, xt]
            den[ys, xs] += wgt
    out = depth.copy()
    ok = valid & (den > 0)
    out[ok] = num[ok] / den[ok]
    return out


def depth_rmse(depth, reference, mask=None) -> float:
    """Root mean square depth difference in meters over masked pixels valid in both maps."""
    depth = np.asarray(depth, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if depth.shape != reference.shape:
        raise ValueError("depth maps must share dimensions")
    sel = valid_depth(depth) & valid_depth(reference)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if not sel.any():
        raise ValueError("depth RMSE over an empty mask")
    return float(np.sqrt(np.mean((depth[sel] - reference[sel]) ** 2)))


def write_ply(path, depth, camera: Camera, mask=None) -> int:
    """ASCII PLY grid mesh over valid pixels; returns the number of faces."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = valid_depth(depth)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    h, w = depth.shape
    vid = np.full((h, w), -1)
    vid[valid] = np.arange(int(valid.sum()))
    pts = unproject_depth(camera, depth)[valid]
    a, b = vid[:-1, :-1], vid[:-1, 1:]
    c, d = vid[1:, :-1], vid[1:, 1:]
    quad = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    # counter-clockwise as seen from the camera (y up on screen, rows go down)
    faces = np.concatenate([np.stack([a[quad], c[quad], b[quad]], 1),
                            np.stack([b[quad], c[quad], d[quad]], 1)])
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\nproperty float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n")
        for p in pts:
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
        for f in faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    return len(faces)
