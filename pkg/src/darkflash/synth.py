"""Synthetic scenes with exact ground truth, the light rig, and stereo stand-ins."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .brdf import Material, ShadingModel, render
from .imaging import (NORMAL_MIN_Z, Camera, NormalMap, PointLight, Segment, normalize,
                      ray_directions, unproject_depth, valid_depth)

SHADOW_BIAS = 0.002
DEPTH_QUANTUM = 0.001

DEFAULT_SPHERE_BANDS = (
    Material((0.70, 0.50, 0.40, 0.60), 0.0),
    Material((0.45, 0.55, 0.65, 0.50), 0.0),
)
DEFAULT_BUMP_BANDS = (
    Material((0.55, 0.35, 0.30, 0.50), 0.0),
    Material((0.70, 0.50, 0.40, 0.60), 0.1),
)


@dataclass
class SceneTruth:
    depth: np.ndarray
    normals: NormalMap
    albedo: np.ndarray
    specular: np.ndarray
    segmentation: np.ndarray
    camera: Camera
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = self.depth.shape
        if (self.normals.shape != shape or self.albedo.shape != shape + (4,)
                or self.specular.shape != shape or self.segmentation.shape != shape):
            raise ValueError("scene rasters must share dimensions")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def mask(self) -> np.ndarray:
        return self.normals.valid & valid_depth(self.depth)


@dataclass(frozen=True)
class LightRig:
    visible: tuple[PointLight, ...]
    nir: tuple[PointLight, ...]
    flash: PointLight

    def __post_init__(self):
        if len(self.visible) != 4 or len(self.nir) != 4:
            raise ValueError("the rig has exactly 4 visible and 4 NIR lights")
        if np.linalg.norm(self.flash.position) > 0.05:
            raise ValueError("the flash must sit within 5 cm of the camera")

    @property
    def lights(self) -> list[PointLight]:
        return [*self.visible, *self.nir, self.flash]

    def to_dict(self) -> dict:
        return {"visible": [l.to_dict() for l in self.visible],
                "nir": [l.to_dict() for l in self.nir],
                "flash": self.flash.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "LightRig":
        return cls(tuple(PointLight.from_dict(x) for x in d["visible"]),
                   tuple(PointLight.from_dict(x) for x in d["nir"]),
                   PointLight.from_dict(d["flash"]))


def default_rig(width: float = 1.5, height: float = 0.8, nir_offset: float = 0.05,
                visible_intensity: float = 1.2, nir_intensity: float = 1.2,
                flash_intensity: float = 0.8) -> LightRig:
    """Four visible spots on the corners of a ``width`` x ``height`` rectangle
    in the camera plane (the subject sits about 1.1 m in front), a NIR spot
    ``nir_offset`` inboard of each, and a NIR flash 2 cm beside the lens."""
    hw, hh = width / 2.0, height / 2.0
    corners = [(-hw, hh), (hw, hh), (-hw, -hh), (hw, -hh)]
    names = ["top_left", "top_right", "bottom_left", "bottom_right"]
    vis = tuple(PointLight((x, y, 0.0), (visible_intensity,) * 3 + (0.0,), f"vis_{n}")
                for (x, y), n in zip(corners, names))
    nir = tuple(PointLight((x - math.copysign(nir_offset, x), y, 0.0),
                           (0.0, 0.0, 0.0, nir_intensity), f"nir_{n}")
                for (x, y), n in zip(corners, names))
    flash = PointLight((0.02, 0.0, 0.0), (0.0, 0.0, 0.0, flash_intensity), "flash")
    return LightRig(vis, nir, flash)


def _paint_bands(shape, bands) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    bands = list(bands)
    idx = np.minimum((np.arange(w) * len(bands)) // w, len(bands) - 1)
    albedo = np.array([b.albedo for b in bands])[idx]
    rho = np.array([b.specular for b in bands])[idx]
    return (np.broadcast_to(albedo, (h, w, 4)).copy(),
            np.broadcast_to(rho, (h, w)).copy())


def _resolution(resolution) -> tuple[int, int]:
    if np.isscalar(resolution):
        return int(resolution), int(resolution)
    w, h = resolution
    return int(w), int(h)


def make_sphere_scene(resolution=128, radius: float = 0.12, center=(0.0, 0.0, 1.1),
                      materials=DEFAULT_SPHERE_BANDS, camera: Camera | None = None) -> SceneTruth:
    """Analytic sphere; ``center`` is (x, y, depth) in meters."""
    w, h = _resolution(resolution)
    camera = camera or Camera.default(w, h)
    c = np.array([center[0], center[1], -center[2]], dtype=float)
    # every image corner ray must miss the sphere's silhouette cone
    cam_dist = np.linalg.norm(c)
    if radius >= cam_dist:
        raise ValueError("camera lies inside the sphere")
    half_angle = math.asin(radius / cam_dist)
    axis = c / cam_dist
    border = np.concatenate([ray_directions(camera, (h, w))[[0, -1]].reshape(-1, 3),
                             ray_directions(camera, (h, w))[:, [0, -1]].reshape(-1, 3)])
    border_angle = np.arccos(np.clip(normalize(border) @ axis, -1, 1))
    if np.any(border_angle <= half_angle):
        raise ValueError("sphere is clipped by the view frustum")

    r = ray_directions(camera, (h, w))
    # |t r - c|^2 = R^2, nearest root; r_z = -1 so t is the depth
    a = np.einsum("...i,...i->...", r, r)
    b = -2.0 * (r @ c)
    disc = b * b - 4 * a * (c @ c - radius**2)
    hit = disc >= 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), 0.0)
    points = t[..., None] * r
    normals = (points - c) / radius
    valid = hit & (normals[..., 2] >= NORMAL_MIN_Z)
    depth = np.where(valid, t, 0.0)
    albedo, rho = _paint_bands((h, w), materials)
    seg = np.where(valid, Segment.HEAD, Segment.BACKGROUND).astype(np.int8)
    params = {"type": "sphere", "radius": radius, "center": list(center)}
    return SceneTruth(depth, NormalMap(normals, valid), albedo * valid[..., None],
                      rho * valid, seg, camera, params)


@dataclass(frozen=True)
class BumpField:
    """Sum of plane-wave sinusoids over pixel coordinates (depth in meters)."""

    base_depth: float
    amplitudes: tuple[float, ...]
    directions: tuple[tuple[float, float], ...]
    phases: tuple[float, ...]
    frequency: float  # cycles per pixel

    @classmethod
    def random(cls, base_depth, amplitude, frequency, seed, count: int = 3) -> "BumpField":
        rng = np.random.default_rng(seed)
        theta = rng.uniform(0.0, math.pi, count)
        phase = rng.uniform(0.0, 2 * math.pi, count)
        return cls(base_depth, (amplitude / count,) * count,
                   tuple((math.cos(t), math.sin(t)) for t in theta),
                   tuple(phase), frequency)

    def height(self, u, v):
        u, v = np.asarray(u, float), np.asarray(v, float)
        z = np.full(np.broadcast(u, v).shape, self.base_depth)
        w = 2 * math.pi * self.frequency
        for a, (dx, dy), ph in zip(self.amplitudes, self.directions, self.phases):
            z = z + a * np.sin(w * (dx * u + dy * v) + ph)
        return z

    def gradient(self, u, v):
        u, v = np.asarray(u, float), np.asarray(v, float)
        du = np.zeros(np.broadcast(u, v).shape)
        dv = np.zeros_like(du)
        w = 2 * math.pi * self.frequency
        for a, (dx, dy), ph in zip(self.amplitudes, self.directions, self.phases):
            c = a * w * np.cos(w * (dx * u + dy * v) + ph)
            du += c * dx
            dv += c * dy
        return du, dv


def surface_normals(camera: Camera, depth, d_du, d_dv) -> np.ndarray:
    """Normals of the surface ``P(u, v) = depth(u, v) * ray(u, v)`` from its
    pixel-space depth derivatives."""
    r = ray_directions(camera, np.shape(depth))
    r_u = np.array([1.0 / camera.fx, 0.0, 0.0])
    r_v = np.array([0.0, -1.0 / camera.fy, 0.0])
    p_u = d_du[..., None] * r + depth[..., None] * r_u
    p_v = d_dv[..., None] * r + depth[..., None] * r_v
    return normalize(np.cross(p_v, p_u))


def make_bumpfield_scene(resolution=64, base_depth: float = 1.1, amplitude: float = 1e-3,
                         frequency: float = 1 / 8, seed: int = 0,
                         materials=DEFAULT_BUMP_BANDS, camera: Camera | None = None,
                         count: int = 3) -> SceneTruth:
    """Fronto-parallel plane with seeded sinusoidal relief.

    The left half of the image is labeled body (clothing) and the right half
    head; ``materials`` are painted in equal vertical bands.
    """
    if not 0 <= amplitude < base_depth / 10:
        raise ValueError("amplitude must be below a tenth of the base depth")
    w, h = _resolution(resolution)
    camera = camera or Camera.default(w, h)
    field_ = BumpField.random(base_depth, amplitude, frequency, seed, count)
    v, u = np.mgrid[0:h, 0:w].astype(float)
    depth = field_.height(u, v)
    d_du, d_dv = field_.gradient(u, v)
    normals = surface_normals(camera, depth, d_du, d_dv)
    valid = normals[..., 2] >= NORMAL_MIN_Z
    albedo, rho = _paint_bands((h, w), materials)
    seg = np.where(u < w / 2, Segment.BODY, Segment.HEAD).astype(np.int8)
    params = {"type": "bumpfield", "base_depth": base_depth, "amplitude": amplitude,
              "frequency": frequency, "seed": seed, "count": count}
    return SceneTruth(np.where(valid, depth, 0.0), NormalMap(normals, valid), albedo, rho,
                      seg, camera, params)


# ---------------------------------------------------------------------------
# shadows

def shadow_bias(depth: np.ndarray, base: float = SHADOW_BIAS) -> np.ndarray:
    """Per-cell occlusion tolerance: ``base`` plus the local depth slope.

    The slope term is the smaller one-sided depth step along each axis, so a
    smooth steep surface gets a proportional tolerance while a depth
    discontinuity (a real occluder edge) keeps the base value.
    """
    ok = valid_depth(depth)
    d = np.where(ok, depth, 0.0)
    total = np.zeros_like(d)
    for axis in (0, 1):
        steps = []
        for shift in (1, -1):
            nb = np.roll(d, shift, axis=axis)
            nb_ok = np.roll(ok, shift, axis=axis)
            edge = np.zeros_like(ok)
            idx = [slice(None), slice(None)]
            idx[axis] = 0 if shift == 1 else -1
            edge[tuple(idx)] = True
            nb_ok = nb_ok & ~edge
            steps.append(np.where(nb_ok, np.abs(d - nb), np.inf))
        s = np.minimum(*steps)
        total += np.where(np.isfinite(s), s, 0.0)
    return np.where(ok, base + total, 0.0)


def compute_shadow_map(depth: np.ndarray, camera: Camera, light: PointLight,
                       bias: float = SHADOW_BIAS, chunk: int = 4096) -> np.ndarray:
    """Binary visibility (H, W) of ``light`` over the depth-map surface.

    Each depth cell is a flat tile at its stored depth. The segment from a
    surface point to the light is occluded when, inside any tile it projects
    onto, it lies farther from the camera than the tile plus its bias. Depth
    is linear along the segment, so only the points where the projected
    segment crosses pixel boundaries need testing.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    ok = valid_depth(depth)
    tol = depth + shadow_bias(depth, bias)
    pts = unproject_depth(camera, depth).reshape(-1, 3)
    lp = np.asarray(light.position, dtype=float)
    idx_all = np.flatnonzero(ok)
    lit = np.zeros(h * w, dtype=bool)
    flat_ok = ok.ravel()
    flat_tol = tol.ravel()
    depth_flat = depth.ravel()
    col_lines = np.arange(w + 1) - 0.5
    row_lines = np.arange(h + 1) - 0.5

    for start in range(0, idx_all.size, chunk):
        idx = idx_all[start:start + chunk]
        p = pts[idx]
        dp = depth_flat[idx]
        delta = lp - p
        dd = -delta[:, 2]                      # change of camera depth along the segment
        up = idx % w
        vp = idx // w
        occluded = np.zeros(idx.size, dtype=bool)

        # crossings of vertical pixel boundaries u = U
        den = camera.fx * delta[:, 0:1] - (col_lines[None, :] - camera.cx) * dd[:, None]
        num = dp[:, None] * (col_lines[None, :] - up[:, None])
        occluded |= _test_crossings(num, den, p, delta, dp, dd, camera, flat_ok, flat_tol,
                                    w, h, vertical=True, lines=col_lines)
        den = (row_lines[None, :] - camera.cy) * dd[:, None] + camera.fy * delta[:, 1:2]
        num = dp[:, None] * (vp[:, None] - row_lines[None, :])
        occluded |= _test_crossings(num, den, p, delta, dp, dd, camera, flat_ok, flat_tol,
                                    w, h, vertical=False, lines=row_lines)

        # segment end inside the image (lights in front of the camera plane)
        d_end = dp + dd
        if np.any(d_end > 0):
            u_end = camera.cx + camera.fx * lp[0] / np.where(d_end > 0, d_end, 1.0)
            v_end = camera.cy - camera.fy * lp[1] / np.where(d_end > 0, d_end, 1.0)
            cu = np.floor(u_end + 0.5).astype(np.int64)
            cv = np.floor(v_end + 0.5).astype(np.int64)
            inside = (d_end > 0) & (cu >= 0) & (cu < w) & (cv >= 0) & (cv < h)
            q = np.where(inside, cv * w + cu, 0)
            occluded |= inside & flat_ok[q] & (d_end > flat_tol[q])

        lit[idx] = ~occluded
    return lit.reshape(h, w).astype(np.float64)


def _test_crossings(num, den, p, delta, dp, dd, camera, flat_ok, flat_tol, w, h,
                    vertical, lines):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / den
    d_t = dp[:, None] + t * dd[:, None]
    good = (den != 0) & (t > 0) & (t <= 1) & (d_t > 1e-12)
    if not np.any(good):
        return np.zeros(p.shape[0], dtype=bool)
    safe_d = np.where(good, d_t, 1.0)
    if vertical:
        y = p[:, 1:2] + t * delta[:, 1:2]
        other = camera.cy - camera.fy * y / safe_d
        cross = np.floor(other + 0.5).astype(np.int64)
        line_idx = np.broadcast_to(np.arange(lines.size), t.shape)
        in_row = good & (cross >= 0) & (cross < h)
        occ = np.zeros(p.shape[0], dtype=bool)
        for side in (-1, 0):                    # cells left and right of the line
            col = line_idx + side
            m = in_row & (col >= 0) & (col < w)
            q = np.where(m, cross * w + col, 0)
            occ |= np.any(m & flat_ok[q] & (d_t > flat_tol[q]), axis=1)
        return occ
    x = p[:, 0:1] + t * delta[:, 0:1]
    other = camera.cx + camera.fx * x / safe_d
    cross = np.floor(other + 0.5).astype(np.int64)
    line_idx = np.broadcast_to(np.arange(lines.size), t.shape)
    in_col = good & (cross >= 0) & (cross < w)
    occ = np.zeros(p.shape[0], dtype=bool)
    for side in (-1, 0):                        # cells above and below the line
        row = line_idx + side
        m = in_col & (row >= 0) & (row < h)
        q = np.where(m, row * w + cross, 0)
        occ |= np.any(m & flat_ok[q] & (d_t > flat_tol[q]), axis=1)
    return occ


# ---------------------------------------------------------------------------
# stereo stand-in

def masked_gaussian(depth: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur over valid pixels only, renormalized; invalid stay 0."""
    ok = valid_depth(depth)
    if sigma <= 0:
        return np.where(ok, depth, 0.0)
    num = ndimage.gaussian_filter(np.where(ok, depth, 0.0), sigma, mode="constant")
    den = ndimage.gaussian_filter(ok.astype(float), sigma, mode="constant")
    return np.where(ok & (den > 1e-12), num / np.where(den > 1e-12, den, 1.0), 0.0)


def simulate_stereo_depth(true_depth: np.ndarray, smoothing_radius: float = 4.0,
                          noise_sigma: float = 1e-3, seed: int = 0,
                          quantum: float = DEPTH_QUANTUM) -> np.ndarray:
    """Blur, add seeded Gaussian noise, and quantize to ``quantum`` meters."""
    if smoothing_radius < 0 or noise_sigma < 0:
        raise ValueError("smoothing radius and noise must be nonnegative")
    ok = valid_depth(true_depth)
    out = masked_gaussian(true_depth, smoothing_radius)
    if noise_sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_sigma, out.shape)
    out = np.round(out / quantum) * quantum
    return np.where(ok & (out > 0), out, 0.0)


def normals_from_depth(depth: np.ndarray, camera: Camera,
                       presmooth_radius: float = 0.0) -> NormalMap:
    """Normals from central differences of the unprojected depth map."""
    d = masked_gaussian(depth, presmooth_radius)
    ok = valid_depth(d)
    p = unproject_depth(camera, d)
    p_u = np.zeros_like(p)
    p_v = np.zeros_like(p)
    p_u[:, 1:-1] = (p[:, 2:] - p[:, :-2]) / 2
    p_v[1:-1] = (p[2:] - p[:-2]) / 2
    n = normalize(np.cross(p_v, p_u))
    valid = np.zeros_like(ok)
    valid[1:-1, 1:-1] = (ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2]
                         & ok[2:, 1:-1] & ok[:-2, 1:-1])
    valid &= n[..., 2] >= NORMAL_MIN_Z
    return NormalMap(n, valid)


# ---------------------------------------------------------------------------
# OLAT rendering

@dataclass
class Olat:
    name: str
    light: PointLight
    image: np.ndarray
    shadow: np.ndarray


def render_scene(scene: SceneTruth, light: PointLight, shading: ShadingModel = ShadingModel(),
                 shadow: np.ndarray | None = None) -> np.ndarray:
    return render(scene.normals, scene.albedo, scene.specular, scene.depth, scene.camera,
                  light, shading, shadow)


def render_olats(scene: SceneTruth, rig: LightRig,
                 shading: ShadingModel = ShadingModel()) -> list[Olat]:
    """One render per rig light (4 visible, 4 NIR, flash) with true-depth shadows."""
    out = []
    for light in rig.lights:
        shadow = compute_shadow_map(scene.depth, scene.camera, light)
        out.append(Olat(light.name, light, render_scene(scene, light, shading, shadow), shadow))
    return out
