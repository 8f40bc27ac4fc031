"""Lambertian + Blinn-Phong image formation.

Reflectance ``f = a + rho * (m + 2) / (2 pi) * max(n.h, 0)^m`` and pixel
intensity ``I = f * max(n.l, 0) * L``. The specular lobe is white (``rho`` is a
scalar), the diffuse albedo has four channels (R, G, B, NIR).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .imaging import Camera, NormalMap, PointLight, shading_geometry, valid_depth

HALFVECTOR_MODES = ("blinn", "paper-literal")
FALLOFF_MODES = ("inverse-square", "constant")

_UNIT_TOL = 1e-4


@dataclass(frozen=True)
class ShadingModel:
    m: float = 30.0
    halfvector: str = "blinn"
    falloff: str = "inverse-square"

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("specular exponent must be positive")
        if self.halfvector not in HALFVECTOR_MODES:
            raise ValueError(f"halfvector must be one of {HALFVECTOR_MODES}")
        if self.falloff not in FALLOFF_MODES:
            raise ValueError(f"falloff must be one of {FALLOFF_MODES}")

    @property
    def literal(self) -> bool:
        return self.halfvector == "paper-literal"


@dataclass(frozen=True)
class Material:
    albedo: tuple[float, float, float, float]
    specular: float = 0.0
    exponent: float = 30.0

    def __post_init__(self):
        albedo = np.broadcast_to(np.asarray(self.albedo, dtype=float), (4,))
        if np.any(albedo < 0) or self.specular < 0 or self.exponent <= 0:
            raise ValueError("invalid material parameters")
        object.__setattr__(self, "albedo", tuple(float(a) for a in albedo))


@dataclass(frozen=True)
class ShadePoint:
    n: tuple[float, float, float]
    l: tuple[float, float, float]
    v: tuple[float, float, float]
    L: tuple[float, float, float, float]


def lobe_scale(m: float) -> float:
    return (m + 2.0) / (2.0 * math.pi)


def _check_unit(*vectors):
    for vec in vectors:
        if abs(np.linalg.norm(vec) - 1.0) > _UNIT_TOL:
            raise ValueError(f"expected a unit vector, got {vec}")


def half_vector(l, v) -> np.ndarray:
    s = np.asarray(l, dtype=float) + np.asarray(v, dtype=float)
    norm = np.linalg.norm(s)
    if norm < 1e-12:
        raise ValueError("half vector undefined for opposite light and view vectors")
    return s / norm


class Terms(NamedTuple):
    """Intermediate quantities of one shading evaluation (broadcast over pixels)."""

    intensity: np.ndarray   # (..., 4)
    cos: np.ndarray         # n.l, unclamped
    q: np.ndarray           # n.h, unclamped
    lobe: np.ndarray        # k * max(q, 0)^m
    f: np.ndarray           # reflectance (..., 4)
    dq: np.ndarray          # d(n.h)/dn (..., 3)


def shade_terms(n, l, h, albedo, rho, light, m: float = 30.0, literal: bool = False) -> Terms:
    """Vectorized shading core.

    ``light`` is the effective per-channel intensity (including falloff and
    any shadow factor). ``h`` is the Blinn half vector and is ignored when
    ``literal`` is set, in which case ``h = (n + l) / |n + l|``. Inputs are
    not checked for unit length so that finite differences can probe them.
    """
    cos = np.einsum("...i,...i->...", n, l)
    if literal:
        s = n + l
        sn = np.linalg.norm(s, axis=-1)
        sn = np.where(sn > 1e-12, sn, 1e-12)
        a_dot = np.einsum("...i,...i->...", n, s)
        q = a_dot / sn
        dq = (2.0 * n + l) / sn[..., None] - (a_dot / sn**3)[..., None] * s
    else:
        q = np.einsum("...i,...i->...", n, h)
        dq = np.broadcast_to(h, np.shape(n))
    lobe = lobe_scale(m) * np.maximum(q, 0.0) ** m
    f = albedo + (rho * lobe)[..., None]
    intensity = f * np.maximum(cos, 0.0)[..., None] * light
    return Terms(intensity, cos, q, lobe, f, dq)


def shade_terms_gradients(t: Terms, n, l, rho, light, m: float):
    """Partials of ``t.intensity`` w.r.t. n (..., 4, 3), albedo (..., 4) and log rho (..., 4)."""
    lit = t.cos > 0
    cp = np.maximum(t.cos, 0.0)
    d_albedo = cp[..., None] * light
    d_logrho = (rho * t.lobe * cp)[..., None] * light
    qp = np.maximum(t.q, 0.0)
    dlobe = lobe_scale(m) * m * qp ** (m - 1.0) * (t.q > 0)
    d_n = (t.f * light)[..., :, None] * (l * lit[..., None])[..., None, :]
    d_n = d_n + (rho * dlobe * cp)[..., None, None] * light[..., :, None] * t.dq[..., None, :]
    return d_n, d_albedo, d_logrho


def reflectance(material: Material, n, l, v, halfvector: str = "blinn") -> np.ndarray:
    n, l, v = (np.asarray(x, dtype=float) for x in (n, l, v))
    _check_unit(n, l, v)
    literal = halfvector == "paper-literal"
    h = None if literal else half_vector(l, v)
    t = shade_terms(n, l, h, np.asarray(material.albedo), material.specular,
                    np.ones(4), material.exponent, literal)
    return t.f


def shade(material: Material, point: ShadePoint, halfvector: str = "blinn") -> np.ndarray:
    n, l, v = (np.asarray(x, dtype=float) for x in (point.n, point.l, point.v))
    light = np.broadcast_to(np.asarray(point.L, dtype=float), (4,))
    _check_unit(n, l, v)
    literal = halfvector == "paper-literal"
    h = None if literal else half_vector(l, v)
    t = shade_terms(n, l, h, np.asarray(material.albedo), material.specular,
                    light, material.exponent, literal)
    return t.intensity


def shade_gradients(material: Material, point: ShadePoint, halfvector: str = "blinn") -> dict:
    """Analytic partials of :func:`shade`.

    Returns ``{"normal": (4, 3), "albedo": (4, 4) diagonal, "log_specular": (4,)}``.
    The normal partial treats ``n`` as a free 3-vector.
    """
    n, l, v = (np.asarray(x, dtype=float) for x in (point.n, point.l, point.v))
    light = np.broadcast_to(np.asarray(point.L, dtype=float), (4,))
    _check_unit(n, l, v)
    literal = halfvector == "paper-literal"
    h = None if literal else half_vector(l, v)
    t = shade_terms(n, l, h, np.asarray(material.albedo), material.specular,
                    light, material.exponent, literal)
    d_n, d_a, d_r = shade_terms_gradients(t, n, l, material.specular, light, material.exponent)
    return {"normal": d_n, "albedo": np.diag(d_a), "log_specular": d_r}


def effective_intensity(camera: Camera, depth: np.ndarray, light: PointLight,
                        falloff: str = "inverse-square"):
    """Per-pixel ``(l, v, L_eff)`` with inverse-square falloff folded into L."""
    l, v, fall = shading_geometry(camera, depth, light)
    if falloff == "constant":
        fall = valid_depth(depth).astype(float)
    elif falloff != "inverse-square":
        raise ValueError(f"unknown falloff mode {falloff!r}")
    return l, v, fall[..., None] * np.asarray(light.intensity)


def render(normals: NormalMap, albedo, specular, depth, camera: Camera, light: PointLight,
           shading: ShadingModel = ShadingModel(), shadow=None) -> np.ndarray:
    """Render one point light over the whole image; returns (H, W, 4)."""
    albedo = np.asarray(albedo, dtype=float)
    specular = np.asarray(specular, dtype=float)
    if specular.ndim == 3:
        specular = specular[..., 0]
    depth = np.asarray(depth, dtype=float)
    if depth.ndim == 3:
        depth = depth[..., 0]
    shape = normals.shape
    if albedo.shape != shape + (4,) or specular.shape != shape or depth.shape != shape:
        raise ValueError("render inputs must share dimensions")
    ok = normals.valid & valid_depth(depth)
    l, v, light_eff = effective_intensity(camera, depth, light, shading.falloff)
    if shadow is not None:
        shadow = np.asarray(shadow, dtype=float)
        if shadow.ndim == 3:
            shadow = shadow[..., 0]
        if shadow.shape != shape:
            raise ValueError("shadow map must match the image size")
        light_eff = light_eff * shadow[..., None]
    h = _blinn_half(l, v)
    t = shade_terms(normals.normals, l, h, albedo, specular, light_eff, shading.m, shading.literal)
    return np.where(ok[..., None], t.intensity, 0.0)


def _blinn_half(l, v):
    s = l + v
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    return np.divide(s, norm, out=np.zeros_like(s), where=norm > 1e-12)
