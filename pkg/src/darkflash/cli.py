"""Command-line pipeline: synth -> augment -> solve -> fuse -> relight -> eval.

Every command reads and writes plain files: PFM rasters, PNG previews and
JSON sidecars. ``synth`` writes a manifest that lists every file with its
role together with the camera, rig and shading parameters, so downstream
commands need nothing but the manifest path and their own flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import augment as aug_mod
from .brdf import FALLOFF_MODES, HALFVECTOR_MODES, Material, ShadingModel
from .fusion import FusionError, bilateral_smooth_depth, build_fusion_system, depth_rmse
from .fusion import solve_fusion, write_ply
from .imaging import Camera, NormalMap, PFMError, PointLight, read_pfm, write_pfm
from .imaging import write_png_preview
from .pipeline import Capture, build_bundle, capture, stage_seed
from .relight import MODELS, composite_fill, render_virtual_light
from .solver import (MODES, LossConfig, SceneEstimate, SolverConfig, SolverDivergence,
                     mean_angular_error, solve, total_loss)
from .synth import (LightRig, Olat, SceneTruth, default_rig, make_bumpfield_scene,
                    make_sphere_scene, normals_from_depth)

log = logging.getLogger("darkflash")

MANIFEST_FORMAT = "darkflash-manifest"

_vec = lambda n: {"type": "array", "items": {"type": "number"}, "minItems": n, "maxItems": n}
_light = {
    "type": "object",
    "required": ["position", "intensity"],
    "properties": {"name": {"type": "string"}, "position": _vec(3), "intensity": _vec(4)},
    "additionalProperties": False,
}
_material = {
    "type": "object",
    "required": ["albedo"],
    "properties": {"albedo": _vec(4), "specular": {"type": "number", "minimum": 0}},
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["scene", "camera"],
    "properties": {
        "scene": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": ["sphere", "bumpfield"]},
                "resolution": {"oneOf": [{"type": "integer", "minimum": 4},
                                         {"type": "array", "items": {"type": "integer",
                                                                     "minimum": 4},
                                          "minItems": 2, "maxItems": 2}]},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "center": _vec(3),
                "base_depth": {"type": "number", "exclusiveMinimum": 0},
                "amplitude": {"type": "number", "minimum": 0},
                "frequency": {"type": "number", "exclusiveMinimum": 0},
                "count": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "materials": {"type": "array", "items": _material, "minItems": 1},
            },
            "additionalProperties": False,
        },
        "camera": {
            "type": "object",
            "required": ["fx", "fy", "cx", "cy", "width", "height"],
            "properties": {
                "fx": {"type": "number", "exclusiveMinimum": 0},
                "fy": {"type": "number", "exclusiveMinimum": 0},
                "cx": {"type": "number"},
                "cy": {"type": "number"},
                "width": {"type": "integer", "minimum": 4},
                "height": {"type": "integer", "minimum": 4},
            },
            "additionalProperties": False,
        },
        "rig": {
            "type": "object",
            "properties": {
                "visible": {"type": "array", "items": _light, "minItems": 4, "maxItems": 4},
                "nir": {"type": "array", "items": _light, "minItems": 4, "maxItems": 4},
                "flash": _light,
            },
            "additionalProperties": False,
        },
        "stereo": {
            "type": "object",
            "properties": {
                "smoothing_radius": {"type": "number", "minimum": 0},
                "noise_sigma": {"type": "number", "minimum": 0},
                "presmooth_radius": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "shading": {
            "type": "object",
            "properties": {
                "m": {"type": "number", "exclusiveMinimum": 0},
                "halfvector": {"enum": list(HALFVECTOR_MODES)},
                "falloff": {"enum": list(FALLOFF_MODES)},
            },
            "additionalProperties": False,
        },
        "seed": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}


class CliError(Exception):
    """User-facing failure; the message is printed and the exit code is 1."""


# ---------------------------------------------------------------------------
# config

def _field(path, error) -> str:
    parts = [str(p) for p in path]
    if error.validator == "required":
        missing = [k for k in error.validator_value if k not in error.instance]
        if missing:
            parts.append(missing[0])
    if error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        if extra:
            parts.append(extra[0])
    return ".".join(parts) or "<root>"


def validate_config(cfg) -> dict:
    """Validate a config dict; raises :class:`CliError` naming the first bad field."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        raise CliError(f"invalid config field {_field(err.absolute_path, err)!r}: {err.message}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from exc
    return validate_config(cfg)


def scene_from_config(cfg: dict, seed: int) -> SceneTruth:
    c = cfg["camera"]
    camera = Camera(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"])
    s = cfg["scene"]
    res = s.get("resolution", [camera.width, camera.height])
    res = [res, res] if isinstance(res, int) else list(res)
    if res != [camera.width, camera.height]:
        raise CliError(f"scene.resolution {res} disagrees with the camera size "
                       f"{[camera.width, camera.height]}")
    kwargs = {"camera": camera}
    if "materials" in s:
        kwargs["materials"] = tuple(Material(tuple(m["albedo"]), m.get("specular", 0.0))
                                    for m in s["materials"])
    if s["type"] == "sphere":
        for key in ("radius", "center"):
            if key in s:
                kwargs[key] = s[key]
        return make_sphere_scene(res, **kwargs)
    for key in ("base_depth", "amplitude", "frequency", "count"):
        if key in s:
            kwargs[key] = s[key]
    return make_bumpfield_scene(res, seed=s.get("seed", stage_seed(seed, "scene")), **kwargs)


def rig_from_config(cfg: dict) -> LightRig:
    rig = default_rig().to_dict()
    rig.update(cfg.get("rig", {}))
    return LightRig.from_dict(rig)


def shading_from_config(cfg: dict) -> ShadingModel:
    return ShadingModel(**cfg.get("shading", {}))


# ---------------------------------------------------------------------------
# file helpers

def _dump_json(path: Path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise CliError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from exc


class _Writer:
    """Writes rasters under ``root`` and records each file with its role."""

    def __init__(self, root: Path):
        self.root = root
        self.listing: list[dict] = []
        root.mkdir(parents=True, exist_ok=True)

    def raster(self, rel: str, image, role: str, preview: str | None = "image") -> str:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        for p in write_pfm(path, image):
            self.listing.append({"path": p.relative_to(self.root).as_posix(), "role": role})
        if preview is not None:
            png = path.with_suffix(".png")
            img = np.asarray(image, dtype=np.float64)
            if preview == "depth":
                ok = img > 0
                lo, hi = (img[ok].min(), img[ok].max()) if ok.any() else (0.0, 1.0)
                img = np.where(ok, (hi - img) / max(hi - lo, 1e-12), 0.0)
            write_png_preview(png, img, normals=preview == "normals",
                              gamma=1.0 if preview in ("depth", "mask") else 2.2)
            self.listing.append({"path": png.relative_to(self.root).as_posix(),
                                 "role": role + ":preview"})
        return path.relative_to(self.root).as_posix()

    def json(self, rel: str, data, role: str) -> str:
        path = self.root / rel
        _dump_json(path, data)
        self.listing.append({"path": rel, "role": role})
        return rel


def _read(base: Path, rel: str) -> np.ndarray:
    try:
        return read_pfm(base / rel).astype(np.float64)
    except FileNotFoundError as exc:
        raise CliError(f"missing raster {base / rel}") from exc


def _normal_map(arr) -> NormalMap:
    return NormalMap.from_array(arr)


def _rel(target: Path, start: Path) -> str:
    return Path(os.path.relpath(target.resolve(), start.resolve())).as_posix()


# ---------------------------------------------------------------------------
# manifest

def write_capture(cap: Capture, root: Path, manifest_extra: dict) -> dict:
    w = _Writer(root)
    scene = cap.scene
    files = {
        "truth_depth": w.raster("truth/depth.pfm", scene.depth, "truth:depth", "depth"),
        "truth_normals": w.raster("truth/normals.pfm", scene.normals.normals, "truth:normals",
                                  "normals"),
        "truth_albedo": w.raster("truth/albedo.pfm", scene.albedo, "truth:albedo"),
        "truth_specular": w.raster("truth/specular.pfm", scene.specular, "truth:specular",
                                   "mask"),
        "segmentation": w.raster("truth/segmentation.pfm", scene.segmentation.astype(float),
                                 "truth:segmentation", None),
        "stereo_depth": w.raster("stereo/depth.pfm", cap.stereo_depth, "stereo:depth", "depth"),
        "stereo_normals": w.raster("stereo/normals.pfm", cap.stereo_normals.normals,
                                   "stereo:normals", "normals"),
    }
    roles = ["visible"] * 4 + ["nir"] * 4 + ["flash"]
    lights = []
    for olat, role, sshadow in zip(cap.olats, roles, cap.stereo_shadows):
        entry = olat.light.to_dict()
        entry["role"] = role
        entry["olat"] = w.raster(f"olat/{olat.name}.pfm", olat.image, f"olat:{role}")
        entry["shadow"] = w.raster(f"shadow/{olat.name}.pfm", olat.shadow, "shadow:truth",
                                   "mask")
        entry["stereo_shadow"] = w.raster(f"shadow/stereo_{olat.name}.pfm", sshadow,
                                          "shadow:stereo", "mask")
        lights.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        **manifest_extra,
        "camera": scene.camera.to_dict(),
        "shading": {"m": cap.shading.m, "halfvector": cap.shading.halfvector,
                    "falloff": cap.shading.falloff},
        "scene": scene.params,
        "lights": lights,
        "files": files,
    }
    manifest["listing"] = w.listing + [{"path": "manifest.json", "role": "manifest"}]
    _dump_json(root / "manifest.json", manifest)
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = _load_json(path)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise CliError(f"{path} is not a manifest written by 'synth'")
    for key in ("camera", "shading", "lights", "files"):
        if key not in manifest:
            raise CliError(f"manifest {path} lacks the {key!r} entry")
    return manifest, path.parent


def load_capture(manifest_path) -> tuple[Capture, dict, Path]:
    """Rebuild a :class:`Capture` from a manifest written by ``synth``."""
    manifest, base = load_manifest(manifest_path)
    files = manifest["files"]
    for key in ("truth_depth", "truth_normals", "truth_albedo", "truth_specular",
                "segmentation", "stereo_depth", "stereo_normals"):
        if key not in files:
            raise CliError(f"manifest lacks the file entry {key!r}")
    camera = Camera(**manifest["camera"])
    depth = _read(base, files["truth_depth"])[..., 0]
    if depth.shape != (camera.height, camera.width):
        raise CliError("truth depth does not match the camera size")
    scene = SceneTruth(depth, _normal_map(_read(base, files["truth_normals"])),
                       _read(base, files["truth_albedo"]),
                       _read(base, files["truth_specular"])[..., 0],
                       np.rint(_read(base, files["segmentation"])[..., 0]).astype(np.int8),
                       camera, manifest.get("scene", {}))
    olats, shadows = [], []
    for entry in manifest["lights"]:
        light = PointLight.from_dict(entry)
        image = _read(base, entry["olat"])
        if image.shape[:2] != depth.shape:
            raise CliError(f"OLAT {entry['olat']} has the wrong size")
        olats.append(Olat(light.name, light, image, _read(base, entry["shadow"])[..., 0]))
        shadows.append(_read(base, entry["stereo_shadow"])[..., 0])
    if len(olats) != 9:
        raise CliError("manifest must list 4 visible, 4 NIR and 1 flash light")
    rig = LightRig(tuple(o.light for o in olats[:4]), tuple(o.light for o in olats[4:8]),
                   olats[8].light)
    cap = Capture(scene, rig, ShadingModel(**manifest["shading"]), olats,
                  _read(base, files["stereo_depth"])[..., 0],
                  _normal_map(_read(base, files["stereo_normals"])), shadows)
    return cap, manifest, base


def _load_augmentation(path) -> tuple[aug_mod.Augmentation, dict]:
    path = Path(path)
    side = _load_json(path)
    for key in ("image", "kind", "lighting"):
        if key not in side:
            raise CliError(f"augmentation sidecar {path} lacks {key!r}")
    image = _read(path.parent, side["image"])
    lighting = [(int(e["olat"]), tuple(e["gain"])) for e in side["lighting"]]
    return aug_mod.Augmentation(image, side["kind"], side.get("seed"), side.get("params", {}),
                                lighting), side


def _load_estimate(path) -> tuple[SceneEstimate, dict, Path]:
    path = Path(path)
    side = _load_json(path)
    base = path.parent
    files = side.get("files", {})
    for key in ("normals", "albedo", "specular"):
        if key not in files:
            raise CliError(f"estimate sidecar {path} lacks the file entry {key!r}")
    normals = _normal_map(_read(base, files["normals"]))
    spec = _read(base, files["specular"])[..., 0]
    with np.errstate(divide="ignore"):
        log_rho = np.log(np.maximum(spec, 1e-30))
    est = SceneEstimate(normals, _read(base, files["albedo"]), log_rho)
    if est.albedo.shape[:2] != normals.shape:
        raise CliError("estimate rasters disagree in size")
    return est, side, base


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    scene = scene_from_config(cfg, seed)
    stereo = {"smoothing_radius": 4.0, "noise_sigma": 1e-3, "presmooth_radius": 1.0}
    stereo.update(cfg.get("stereo", {}))
    cap = capture(scene, rig_from_config(cfg), shading_from_config(cfg),
                  seed=stage_seed(seed, "stereo"), **stereo)
    out = Path(args.out)
    seeds = {k: stage_seed(seed, k) for k in ("scene", "stereo", "augment", "solve")}
    manifest = write_capture(cap, out, {"seed": seed, "seeds": seeds, "config": cfg,
                                        "stereo": stereo})
    print(f"wrote {len(manifest['listing'])} files to {out}")
    return 0


def cmd_augment(args) -> int:
    cap, manifest, base = load_capture(args.manifest)
    seed = args.seed if args.seed is not None else manifest.get("seeds", {}).get("augment", 0)
    aug = aug_mod.simulate(args.kind, [o.image for o in cap.visible], seed)
    out = Path(args.out)
    w = _Writer(out)
    image = w.raster("input.pfm", aug.image, f"input:{aug.kind}")
    side = {"manifest": _rel(base / "manifest.json", out), "image": image, **aug.sidecar()}
    side["lighting_lights"] = [cap.visible[k].name for k, _ in aug.lighting]
    w.json("augment.json", side, "augment:sidecar")
    print(f"{aug.kind}: {json.dumps(aug.params)}")
    return 0


def _loss_config(args, shading: dict) -> LossConfig:
    return LossConfig(lambda_p=args.lambda_p, lambda_c=args.lambda_c,
                      m=args.m if args.m is not None else shading["m"],
                      halfvector=args.halfvector or shading["halfvector"],
                      falloff=args.falloff or shading["falloff"])


def _bundle(cap: Capture, aug, visible, nir: bool, flash: bool):
    return build_bundle(cap, aug, visible=visible, nir=nir, flash=flash)


def cmd_solve(args) -> int:
    cap, manifest, base = load_capture(args.manifest)
    aug = None
    if args.input:
        aug, _ = _load_augmentation(args.input)
        if aug.image.shape[:2] != cap.scene.shape:
            raise CliError("augmented input does not match the capture size")
    visible = tuple(int(v) for v in args.visible.split(",") if v.strip()) if args.visible else ()
    if any(not 0 <= v < 4 for v in visible):
        raise CliError("--visible indices must lie in 0..3")
    if aug is None and not visible and args.no_nir and args.no_flash:
        raise CliError("no observation left for the photometric term")
    bundle = _bundle(cap, aug, visible, not args.no_nir, not args.no_flash)
    loss = _loss_config(args, manifest["shading"])
    seed = args.seed if args.seed is not None else manifest.get("seeds", {}).get("solve", 0)
    solver = SolverConfig(max_iterations=args.iters, step_size=args.step, mode=args.mode,
                          seed=seed)
    result = solve(bundle, loss, solver)
    est = result.estimate
    out = Path(args.out)
    w = _Writer(out)
    files = {
        "normals": w.raster("normals.pfm", est.normals.normals, "estimate:normals", "normals"),
        "albedo": w.raster("albedo.pfm", est.albedo, "estimate:albedo"),
        "specular": w.raster("specular.pfm", est.specular, "estimate:specular", "mask"),
    }
    (out / "log.csv").write_text(result.log_csv(), encoding="utf-8")
    w.listing.append({"path": "log.csv", "role": "estimate:log"})
    files["log"] = "log.csv"
    truth = cap.scene
    # the first metric matches 'eval'; the pair after it compares with n_s on its own pixels
    ev = truth.mask & cap.stereo_normals.valid
    metrics = {
        "angular_error_deg": mean_angular_error(est.normals, truth.normals,
                                                truth.mask & est.normals.valid),
        "angular_error_deg_stereo_pixels": mean_angular_error(est.normals, truth.normals, ev),
        "stereo_angular_error_deg": mean_angular_error(cap.stereo_normals, truth.normals, ev),
    }
    side = {
        "manifest": _rel(base / "manifest.json", out),
        "input": _rel(Path(args.input), out) if args.input else None,
        "observations": [o.name for o in bundle.observations],
        "visible": list(visible), "nir": not args.no_nir, "flash": not args.no_flash,
        "loss": {"lambda_p": loss.lambda_p, "lambda_c": loss.lambda_c, "m": loss.m,
                 "halfvector": loss.halfvector, "falloff": loss.falloff},
        "solver": {"max_iterations": solver.max_iterations, "step_size": solver.step_size,
                   "mode": solver.mode, "seed": solver.seed},
        "energy": result.energy,
        "breakdown": result.breakdown,
        "iterations": result.iterations, "converged": result.converged,
        "reason": result.reason,
        "metrics": metrics,
        "files": files,
    }
    w.json("solve.json", side, "estimate:sidecar")
    print(f"energy {result.energy:.6g} after {result.iterations} iterations ({result.reason}); "
          f"normal error {metrics['angular_error_deg_stereo_pixels']:.3f} deg "
          f"(stereo {metrics['stereo_angular_error_deg']:.3f} deg)")
    return 0


def cmd_fuse(args) -> int:
    cap, manifest, base = load_capture(args.manifest)
    est, _, _ = _load_estimate(args.estimate)
    if est.normals.shape != cap.scene.shape:
        raise CliError("estimate does not match the capture size")
    camera = cap.scene.camera
    system = build_fusion_system(cap.stereo_depth, est.normals, camera, args.wz, args.wn)
    fused = solve_fusion(system, args.tolerance)
    guide = cap.visible[0].image[..., :3] + cap.flash.image[..., 3:]
    smoothed = bilateral_smooth_depth(cap.stereo_depth, guide, args.spatial_sigma,
                                      args.range_sigma)
    out = Path(args.out)
    w = _Writer(out)
    files = {"fused_depth": w.raster("fused_depth.pfm", fused, "fusion:depth", "depth"),
             "bilateral_depth": w.raster("bilateral_depth.pfm", smoothed,
                                         "fusion:bilateral", "depth")}
    truth = cap.scene
    metrics = {"energy_start": system.energy(system.start),
               "energy_fused": system.energy(fused)}
    ev = truth.mask
    for name, d in (("fused", fused), ("bilateral", smoothed), ("stereo", cap.stereo_depth)):
        metrics[f"{name}_depth_rmse_m"] = depth_rmse(d, truth.depth, ev)
        nmap = normals_from_depth(d, camera)
        sel = nmap.valid & ev
        metrics[f"{name}_normal_error_deg"] = (mean_angular_error(nmap, truth.normals, sel)
                                               if sel.any() else None)
    if args.ply:
        faces = write_ply(out / "fused.ply", fused, camera)
        w.listing.append({"path": "fused.ply", "role": "fusion:mesh"})
        metrics["ply_faces"] = faces
    side = {"manifest": _rel(base / "manifest.json", out),
            "estimate": _rel(Path(args.estimate), out),
            "weights": {"w_z": args.wz, "w_n": args.wn}, "tolerance": args.tolerance,
            "bilateral": {"spatial_sigma": args.spatial_sigma, "range_sigma": args.range_sigma},
            "metrics": metrics, "files": files}
    w.json("fuse.json", side, "fusion:sidecar")
    print(f"fused depth RMSE {metrics['fused_depth_rmse_m']:.3e} m, "
          f"bilateral {metrics['bilateral_depth_rmse_m']:.3e} m")
    return 0


def cmd_relight(args) -> int:
    cap, manifest, base = load_capture(args.manifest)
    est, est_side, _ = _load_estimate(args.estimate)
    if args.input:
        aug, _ = _load_augmentation(args.input)
        image = aug.image
    else:
        image = cap.visible[0].image[..., :3]
    depth = cap.stereo_depth
    if args.depth:
        depth = read_pfm(args.depth).astype(np.float64)[..., 0]
    if depth.shape != est.normals.shape or image.shape[:2] != depth.shape:
        raise CliError("relight inputs disagree in size")
    intensity = list(args.light_intensity)
    if len(intensity) == 1:
        intensity = intensity * 3
    light = PointLight(tuple(args.light_position), tuple(intensity) + (0.0,), "virtual")
    shading = ShadingModel(args.m if args.m is not None else manifest["shading"]["m"],
                           args.halfvector or manifest["shading"]["halfvector"],
                           args.falloff or manifest["shading"]["falloff"])
    contrib = render_virtual_light(est, cap.scene.camera, depth, light, args.model, shading)
    result = composite_fill(image, contrib, args.blend)
    out = Path(args.out)
    w = _Writer(out)
    files = {"contribution": w.raster("virtual.pfm", contrib, "relight:contribution"),
             "composite": w.raster("composite.pfm", result, "relight:composite")}
    side = {"manifest": _rel(base / "manifest.json", out),
            "estimate": _rel(Path(args.estimate), out),
            "input": _rel(Path(args.input), out) if args.input else None,
            "light": light.to_dict(), "model": args.model, "blend": args.blend,
            "files": files}
    w.json("relight.json", side, "relight:sidecar")
    print(f"composited virtual light ({args.model}) into {out}")
    return 0


def cmd_eval(args) -> int:
    cap, manifest, base = load_capture(args.truth)
    truth = cap.scene
    metrics: dict = {}
    normals = depth = None
    est = None
    if args.estimate:
        est, est_side, _ = _load_estimate(args.estimate)
        normals = est.normals
    if args.normals:
        normals = _normal_map(read_pfm(args.normals).astype(np.float64))
    if args.depth:
        depth = read_pfm(args.depth).astype(np.float64)[..., 0]
    if normals is None and depth is None:
        raise CliError("eval needs --estimate, --normals or --depth")
    if normals is not None:
        if normals.shape != truth.shape:
            raise CliError("normals do not match the truth size")
        sel = truth.mask & normals.valid
        if not sel.any():
            raise CliError("no pixel is valid in both normal maps")
        metrics["angular_error_deg"] = mean_angular_error(normals, truth.normals, sel)
        metrics["evaluated_pixels"] = int(sel.sum())
    if depth is not None:
        if depth.shape != truth.shape:
            raise CliError("depth does not match the truth size")
        metrics["depth_rmse_m"] = depth_rmse(depth, truth.depth, truth.mask)
    if est is not None:
        aug = None
        if est_side.get("input"):
            aug, _ = _load_augmentation(Path(args.estimate).parent / est_side["input"])
        bundle = _bundle(cap, aug, tuple(est_side.get("visible", (0, 1, 2, 3))),
                         est_side.get("nir", True), est_side.get("flash", True))
        loss = LossConfig(**est_side["loss"]) if "loss" in est_side else LossConfig()
        total, breakdown = total_loss(est, bundle, loss)
        metrics["energy"] = total
        metrics["breakdown"] = breakdown
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "metrics.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(out, metrics)
    print(json.dumps({k: v for k, v in metrics.items() if k != "breakdown"}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _shading_flags(p, with_m=True):
    if with_m:
        p.add_argument("--m", type=float, default=None, help="specular exponent")
    p.add_argument("--halfvector", choices=HALFVECTOR_MODES, default=None)
    p.add_argument("--falloff", choices=FALLOFF_MODES, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darkflash", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic capture from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="simulate a visible lighting condition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", required=True, choices=aug_mod.KINDS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("solve", help="estimate normals, albedo and specular intensity")
    p.add_argument("--manifest", required=True)
    p.add_argument("--input", default=None, help="augment.json of the RGB input")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-p", type=float, default=10.0)
    p.add_argument("--lambda-c", type=float, default=50.0)
    _shading_flags(p)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--mode", choices=MODES, default=MODES[0])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--visible", default="0,1,2,3",
                   help="comma-separated visible OLAT indices used by the photometric term")
    p.add_argument("--no-nir", action="store_true", help="drop the NIR OLATs")
    p.add_argument("--no-flash", action="store_true", help="drop the NIR flash image")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("fuse", help="refine stereo depth with estimated normals")
    p.add_argument("--manifest", required=True)
    p.add_argument("--estimate", required=True, help="solve.json")
    p.add_argument("--out", required=True)
    p.add_argument("--wz", type=float, default=1.0)
    p.add_argument("--wn", type=float, default=10.0)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--spatial-sigma", type=float, default=2.0)
    p.add_argument("--range-sigma", type=float, default=0.1)
    p.add_argument("--ply", action="store_true", help="also write fused.ply")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("relight", help="add a virtual fill light to an RGB image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--estimate", required=True, help="solve.json")
    p.add_argument("--input", default=None, help="augment.json; default is the first visible OLAT")
    p.add_argument("--depth", default=None, help="depth PFM; default is the stereo depth")
    p.add_argument("--out", required=True)
    p.add_argument("--light-position", type=float, nargs=3, required=True)
    p.add_argument("--light-intensity", type=float, nargs="+", default=[1.0])
    p.add_argument("--model", choices=MODELS, default="full")
    p.add_argument("--blend", type=float, default=1.0)
    _shading_flags(p)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("eval", help="compare an estimate or depth map with the truth")
    p.add_argument("--truth", required=True, help="manifest of the capture")
    p.add_argument("--estimate", default=None, help="solve.json")
    p.add_argument("--normals", default=None, help="normal map PFM")
    p.add_argument("--depth", default=None, help="depth PFM")
    p.add_argument("--out", required=True, help="metrics .json file or directory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "light_intensity", None) is not None and len(args.light_intensity) not in (1, 3):
        parser.error("--light-intensity takes one value or three (RGB)")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"darkflash {args.command}: error: no such file: {exc.filename or exc}",
              file=sys.stderr)
        return 1
    except (CliError, PFMError, FusionError, SolverDivergence, ValueError) as exc:
        print(f"darkflash {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
