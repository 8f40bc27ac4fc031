"""Glue between the synthetic data source and the solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import Augmentation
from .brdf import ShadingModel
from .imaging import NormalMap, PointLight
from .solver import DataBundle, Observation, SceneEstimate
from .synth import (LightRig, Olat, SceneTruth, compute_shadow_map, default_rig,
                    normals_from_depth, render_olats, simulate_stereo_depth)

STAGES = {"scene": 0, "stereo": 1, "augment": 2, "solve": 3}


def stage_seed(seed: int, stage: str) -> int:
    """Seed for one pipeline stage, derived from the top-level seed.

    Stage ``k`` (scene=0, stereo=1, augment=2, solve=3) gets the first 32-bit
    word of ``SeedSequence(seed, spawn_key=(k,))``.
    """
    seq = np.random.SeedSequence(seed, spawn_key=(STAGES[stage],))
    return int(seq.generate_state(1)[0])


@dataclass
class Capture:
    """Everything a real session would record, synthesized from a scene."""

    scene: SceneTruth
    rig: LightRig
    shading: ShadingModel
    olats: list[Olat]
    stereo_depth: np.ndarray
    stereo_normals: NormalMap
    stereo_shadows: list[np.ndarray]

    @property
    def visible(self) -> list[Olat]:
        return self.olats[:4]

    @property
    def nir(self) -> list[Olat]:
        return self.olats[4:8]

    @property
    def flash(self) -> Olat:
        return self.olats[8]


def capture(scene: SceneTruth, rig: LightRig | None = None,
            shading: ShadingModel = ShadingModel(), smoothing_radius: float = 4.0,
            noise_sigma: float = 1e-3, presmooth_radius: float = 1.0,
            seed: int = 0) -> Capture:
    rig = rig or default_rig()
    olats = render_olats(scene, rig, shading)
    stereo = simulate_stereo_depth(scene.depth, smoothing_radius, noise_sigma, seed)
    ns = normals_from_depth(stereo, scene.camera, presmooth_radius)
    shadows = [compute_shadow_map(stereo, scene.camera, o.light) for o in olats]
    return Capture(scene, rig, shading, olats, stereo, ns, shadows)


def olat_observation(olat: Olat, shadow: np.ndarray) -> Observation:
    return Observation(olat.image, (olat.light,), (shadow,), name=olat.name)


def augmented_observation(aug: Augmentation, lights: list[PointLight],
                          shadows: list[np.ndarray]) -> Observation:
    """The augmented RGB image modeled as a sum of gain-scaled visible lights."""
    eff, sh = [], []
    for k, gain in aug.lighting:
        eff.append(lights[k].scaled(tuple(gain) + (0.0,)))
        sh.append(shadows[k])
    return Observation(aug.image, tuple(eff), tuple(sh),
                       channels=np.array([True, True, True, False]), name=f"input:{aug.kind}")


def build_bundle(cap: Capture, augmentation: Augmentation | None = None,
                 visible=(0, 1, 2, 3), nir: bool = True, flash: bool = True) -> DataBundle:
    """Solver bundle with stereo geometry and stereo-depth shadow maps.

    ``visible`` selects which visible OLATs enter the photometric term; the
    augmented input, when given, is placed first.
    """
    obs = []
    if augmentation is not None:
        obs.append(augmented_observation(augmentation, [o.light for o in cap.visible],
                                         cap.stereo_shadows[:4]))
    for k in visible:
        obs.append(olat_observation(cap.olats[k], cap.stereo_shadows[k]))
    if nir:
        for k in range(4, 8):
            obs.append(olat_observation(cap.olats[k], cap.stereo_shadows[k]))
    if flash:
        obs.append(olat_observation(cap.olats[8], cap.stereo_shadows[8]))
    return DataBundle(cap.scene.camera, cap.stereo_depth, cap.stereo_normals, obs,
                      cap.scene.segmentation)


def truth_estimate(scene: SceneTruth) -> SceneEstimate:
    with np.errstate(divide="ignore"):
        log_rho = np.log(np.maximum(scene.specular, 1e-30))
    return SceneEstimate(NormalMap(scene.normals.normals, scene.normals.valid),
                         scene.albedo.copy(), log_rho)
