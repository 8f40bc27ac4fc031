"""Raster and camera geometry shared by every other module.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with C in {1, 3, 4}.
Four-channel images are always ordered R, G, B, NIR. Camera coordinates are
x right, y up, z toward the camera, so visible surfaces have negative z and
"depth" is the positive distance along the optical axis.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

RGB = slice(0, 3)
NIR = 3

MAX_DEPTH = 100.0
NORMAL_MIN_Z = 0.05


class Segment(enum.IntEnum):
    BACKGROUND = 0
    HEAD = 1
    HAIR = 2
    BODY = 3
    UPPER_ARM = 4
    LOWER_ARM = 5


CLOTHING = (Segment.BODY, Segment.UPPER_ARM, Segment.LOWER_ARM)


class PFMError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int, height: int | None = None) -> "Camera":
        """Synthetic pinhole camera used by the scene generators.

        The focal length scales with the image width (3.75 * W) so that a
        0.12 m sphere at 1.1 m fills roughly 80% of the frame at any
        resolution. The principal point sits on the pixel at (W/2, H/2).
        """
        height = width if height is None else height
        f = 3.75 * width
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class PointLight:
    position: tuple[float, float, float]
    intensity: tuple[float, float, float, float]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        pos = tuple(float(p) for p in self.position)
        inten = tuple(float(i) for i in self.intensity)
        if len(pos) != 3 or len(inten) != 4:
            raise ValueError("light needs a 3-vector position and 4-channel intensity")
        if min(inten) < 0:
            raise ValueError("light intensity must be nonnegative")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "intensity", inten)

    def scaled(self, gain) -> "PointLight":
        """Copy with the intensity multiplied per channel (scalar or 4-vector)."""
        gain = np.broadcast_to(np.asarray(gain, dtype=float), (4,))
        return PointLight(self.position, tuple(np.asarray(self.intensity) * gain), self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "position": list(self.position),
                "intensity": list(self.intensity)}

    @classmethod
    def from_dict(cls, d: dict) -> "PointLight":
        return cls(tuple(d["position"]), tuple(d["intensity"]), d.get("name", ""))


@dataclass
class NormalMap:
    """Unit normals (H, W, 3) plus a validity mask; invalid entries are zero."""

    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.normals.shape[:2] != self.valid.shape or self.normals.shape[-1] != 3:
            raise ValueError("normal map and mask shapes disagree")
        self.normals = np.where(self.valid[..., None], self.normals, 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def from_array(cls, normals: np.ndarray) -> "NormalMap":
        """Treat zero vectors as invalid (the on-disk convention)."""
        normals = np.asarray(normals, dtype=np.float64)
        valid = np.linalg.norm(normals, axis=-1) > 0.5
        return cls(normalize(normals), valid)


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v, dtype=np.float64), where=n > 0)


def valid_depth(depth: np.ndarray) -> np.ndarray:
    return (depth > 0) & (depth <= MAX_DEPTH)


def as_image(data, channels: int | None = None) -> np.ndarray:
    """Coerce to a finite (H, W, C) float array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[-1] not in (1, 3, 4):
        raise ValueError(f"expected an (H, W, C) image with C in 1/3/4, got {img.shape}")
    if channels is not None and img.shape[-1] != channels:
        raise ValueError(f"expected {channels} channels, got {img.shape[-1]}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


# ---------------------------------------------------------------------------
# geometry

def ray_directions(camera: Camera, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Per-pixel ray ``r`` such that the surface point at depth d is ``d * r``."""
    h, w = shape if shape is not None else (camera.height, camera.width)
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([(px - camera.cx) / camera.fx,
                     -(py - camera.cy) / camera.fy,
                     -np.ones_like(px)], axis=-1)


def unproject(camera: Camera, px, py, depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive to unproject")
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    return np.stack(np.broadcast_arrays(depth * (px - camera.cx) / camera.fx,
                                        -depth * (py - camera.cy) / camera.fy,
                                        -depth), axis=-1)


def project(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`unproject`: camera-space points to pixel coordinates."""
    p = np.asarray(points, dtype=np.float64)
    depth = -p[..., 2]
    return camera.cx + camera.fx * p[..., 0] / depth, camera.cy - camera.fy * p[..., 1] / depth


def unproject_depth(camera: Camera, depth: np.ndarray) -> np.ndarray:
    """(H, W, 3) surface points; invalid pixels map to the origin."""
    depth = np.where(valid_depth(depth), depth, 0.0)
    return depth[..., None] * ray_directions(camera, depth.shape)


def light_dir_and_view(camera: Camera, px, py, depth, light: PointLight):
    """Unit light vector, unit view vector and inverse-square falloff at a pixel."""
    p = unproject(camera, px, py, depth)
    to_light = np.asarray(light.position) - p
    dist = np.linalg.norm(to_light, axis=-1)
    if np.any(dist < 1e-6):
        raise ValueError("light coincides with the surface point")
    l = to_light / dist[..., None]
    v = -p / np.linalg.norm(p, axis=-1)[..., None]
    return l, v, 1.0 / dist**2


def shading_geometry(camera: Camera, depth: np.ndarray, light: PointLight):
    """Image-wide :func:`light_dir_and_view`; invalid pixels get zeros."""
    ok = valid_depth(depth)
    p = unproject_depth(camera, depth)
    to_light = np.asarray(light.position) - p
    dist = np.linalg.norm(to_light, axis=-1)
    ok &= dist >= 1e-6
    l = np.where(ok[..., None], to_light / np.where(ok, dist, 1.0)[..., None], 0.0)
    v = np.where(ok[..., None], normalize(-p), 0.0)
    falloff = np.where(ok, 1.0 / np.where(ok, dist, 1.0) ** 2, 0.0)
    return l, v, falloff


# ---------------------------------------------------------------------------
# PFM

_SUFFIX_RGB = ".rgb.pfm"
_SUFFIX_NIR = ".nir.pfm"


def _split_paths(path) -> tuple[Path, Path]:
    s = str(path)
    stem = s[:-4] if s.endswith(".pfm") else s
    return Path(stem + _SUFFIX_RGB), Path(stem + _SUFFIX_NIR)


def _read_token(buf: bytes, pos: int) -> tuple[str, int]:
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PFMError("unexpected end of header")
    return buf[start:pos].decode("ascii", errors="replace"), pos


def _read_single_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tag, pos = _read_token(buf, 0)
    if tag == "PF":
        channels = 3
    elif tag == "Pf":
        channels = 1
    else:
        raise PFMError(f"{path}: bad PFM identifier {tag[:8]!r}")
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        s_tok, pos = _read_token(buf, pos)
        width, height, scale = int(w_tok), int(h_tok), float(s_tok)
    except ValueError as exc:
        raise PFMError(f"{path}: malformed header") from exc
    if width <= 0 or height <= 0 or width * height * channels > 2**31 - 1:
        raise PFMError(f"{path}: invalid dimensions {width}x{height}")
    if scale == 0 or not np.isfinite(scale):
        raise PFMError(f"{path}: invalid scale {s_tok}")
    pos += 1  # single whitespace byte ends the header
    count = width * height * channels
    if len(buf) - pos < 4 * count:
        raise PFMError(f"{path}: truncated payload")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    # PFM scanlines run bottom to top
    return data.reshape(height, width, channels)[::-1].astype(np.float32)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file, or an ``.rgb.pfm``/``.nir.pfm`` pair as one RGB+NIR image."""
    path = Path(path)
    if path.exists():
        return _read_single_pfm(path)
    rgb_path, nir_path = _split_paths(path)
    if rgb_path.exists() and nir_path.exists():
        rgb = _read_single_pfm(rgb_path)
        nir = _read_single_pfm(nir_path)
        if rgb.shape[:2] != nir.shape[:2] or nir.shape[2] != 1:
            raise PFMError(f"{path}: RGB and NIR halves disagree")
        return np.concatenate([rgb, nir], axis=-1)
    raise FileNotFoundError(path)


def _write_single_pfm(path, img: np.ndarray) -> None:
    h, w, c = img.shape
    tag = b"PF" if c == 3 else b"Pf"
    payload = np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + payload)


def write_pfm(path, image) -> list[Path]:
    """Write float32 little-endian PFM. Returns the file(s) written."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[-1] not in (1, 3, 4):
        raise PFMError(f"cannot store shape {img.shape} as PFM")
    img = img.astype(np.float32)
    if not np.all(np.isfinite(img)):
        raise PFMError("PFM data must be finite")
    if img.shape[-1] == 4:
        rgb_path, nir_path = _split_paths(path)
        _write_single_pfm(rgb_path, img[..., :3])
        _write_single_pfm(nir_path, img[..., 3:])
        return [rgb_path, nir_path]
    _write_single_pfm(path, img)
    return [Path(path)]


def pfm_files(path) -> list[Path]:
    """Files backing ``path`` on disk (one PFM or an RGB/NIR pair)."""
    path = Path(path)
    if path.exists():
        return [path]
    return [p for p in _split_paths(path) if p.exists()]


# ---------------------------------------------------------------------------
# PNG previews

def encode_preview(image, gamma: float = 2.2, normals: bool = False) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if normals:
        img = (img + 1.0) / 2.0
    if img.shape[-1] == 4:
        img = img[..., :3]
    img = np.clip(img, 0.0, 1.0)
    if not normals:
        img = img ** (1.0 / gamma)
    out = np.rint(img * 255.0).astype(np.uint8)
    return out[..., 0] if out.shape[-1] == 1 else out


def write_png_preview(path, image, gamma: float = 2.2, normals: bool = False) -> None:
    Image.fromarray(encode_preview(image, gamma, normals)).save(os.fspath(path), format="PNG")
