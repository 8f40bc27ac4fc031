"""Adding a virtual fill light to a photograph from estimated surface maps."""

from __future__ import annotations

import numpy as np

from .brdf import ShadingModel, render
from .imaging import Camera, PointLight

MODELS = ("full", "lambertian-only")


def render_virtual_light(estimate, camera: Camera, depth, light: PointLight,
                         model: str = "full", shading: ShadingModel = ShadingModel()) -> np.ndarray:
    """RGB contribution (H, W, 3) of one virtual point light, without shadows.

    ``estimate`` is anything with ``normals``, ``albedo`` and ``specular``
    maps (a solver estimate or a scene truth). ``lambertian-only`` drops the
    specular lobe.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    specular = np.asarray(estimate.specular, dtype=np.float64)
    if model == "lambertian-only":
        specular = np.zeros_like(specular)
    out = render(estimate.normals, estimate.albedo, specular, depth, camera, light, shading)
    return out[..., :3]


def composite_fill(input_rgb, contribution, blend: float = 1.0) -> np.ndarray:
    """``clip(input + blend * contribution, 0, 1)`` on the RGB channels."""
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    img = np.asarray(input_rgb, dtype=np.float64)[..., :3]
    add = np.asarray(contribution, dtype=np.float64)[..., :3]
    if img.shape != add.shape:
        raise ValueError("input and contribution sizes disagree")
    return np.clip(img + blend * np.maximum(add, 0.0), 0.0, 1.0)
