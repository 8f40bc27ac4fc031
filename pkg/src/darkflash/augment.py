"""Visible lighting conditions synthesized from the four visible OLAT images.

Every simulator is a deterministic function of ``(olats, seed)`` and returns
an :class:`Augmentation` that records the drawn parameters together with the
effective lighting (which OLATs contribute and with what RGB gain), so a
solver can model the resulting image as a sum of calibrated point lights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("well-lit", "shadows", "mixed-colors", "overexposure", "low-light")

C2 = 1.4388e-2                       # second radiation constant, m K
WAVELENGTHS = (600e-9, 550e-9, 450e-9)
WARM_RANGE = (1900.0, 2900.0)
COOL_RANGE = (7000.0, 20000.0)
OVEREXPOSURE_RANGE = (1.8, 2.3)
LOW_LIGHT_SIGMA = 25.0 / 255.0
WELL_LIT_PERCENTILE = 99.9
WELL_LIT_TARGET = 0.95
WELL_LIT_CEILING = 0.99


@dataclass
class Augmentation:
    image: np.ndarray                       # (H, W, 3) in [0, 1]
    kind: str
    seed: int | None
    params: dict = field(default_factory=dict)
    # (olat index, RGB gain) pairs; the image is sum_k gain_k * olat_k before clipping/noise
    lighting: list[tuple[int, tuple[float, float, float]]] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "params": self.params,
                "lighting": [{"olat": int(i), "gain": [float(g) for g in gain]}
                             for i, gain in self.lighting]}


def _stack(olats) -> np.ndarray:
    imgs = [np.asarray(o, dtype=np.float64) for o in olats]
    if not imgs:
        raise ValueError("no OLAT images given")
    shape = imgs[0].shape
    if any(i.shape != shape for i in imgs) or len(shape) != 3 or shape[-1] < 3:
        raise ValueError("OLATs must be same-sized images with at least 3 channels")
    return np.stack([i[..., :3] for i in imgs])


def well_lit(olats) -> Augmentation:
    """Equal average of all OLATs, scaled so the 99.9th percentile maps to 0.95.

    The scale is capped so the brightest value stays below 0.99: a few hot
    highlights can lower the exposure but never saturate.
    """
    stack = _stack(olats)
    avg = stack.mean(axis=0)
    peak = float(avg.max())
    anchor = float(np.percentile(avg, WELL_LIT_PERCENTILE))
    if peak <= 0 or anchor <= 0:
        raise ValueError("cannot normalize an all-black input")
    scale = min(WELL_LIT_TARGET / anchor, WELL_LIT_CEILING / peak)
    gain = scale / len(stack)
    return Augmentation(np.clip(avg * scale, 0.0, 1.0), "well-lit", None,
                        {"scale": scale, "percentile_value": anchor},
                        [(k, (gain,) * 3) for k in range(len(stack))])


def shadows(olats, seed: int) -> Augmentation:
    """A single OLAT chosen uniformly at random."""
    stack = _stack(olats)
    k = int(np.random.default_rng(seed).integers(len(stack)))
    return Augmentation(np.clip(stack[k], 0.0, 1.0), "shadows", seed, {"index": k},
                        [(k, (1.0, 1.0, 1.0))])


def blackbody_rgb(temperature: float) -> np.ndarray:
    """Planck radiance sampled at 600/550/450 nm, scaled so the max channel is 1."""
    if not 1000.0 <= temperature <= 25000.0:
        raise ValueError("temperature must lie in [1000, 25000] K")
    lam = np.asarray(WAVELENGTHS)
    radiance = lam**-5.0 / np.expm1(C2 / (lam * temperature))
    return radiance / radiance.max()


def mix_tinted(first, second, warm_k: float, cool_k: float) -> np.ndarray:
    a = np.asarray(first, dtype=np.float64)[..., :3]
    b = np.asarray(second, dtype=np.float64)[..., :3]
    out = 0.5 * (a * blackbody_rgb(warm_k) + b * blackbody_rgb(cool_k))
    return np.clip(out, 0.0, 1.0)


def mixed_colors(olats, seed: int) -> Augmentation:
    """Two distinct OLATs tinted warm and cool, then averaged."""
    stack = _stack(olats)
    if len(stack) < 2:
        raise ValueError("mixed colors needs at least two OLATs")
    rng = np.random.default_rng(seed)
    i, j = (int(x) for x in rng.choice(len(stack), size=2, replace=False))
    warm = float(rng.uniform(*WARM_RANGE))
    cool = float(rng.uniform(*COOL_RANGE))
    tint_w, tint_c = blackbody_rgb(warm), blackbody_rgb(cool)
    return Augmentation(mix_tinted(stack[i], stack[j], warm, cool), "mixed-colors", seed,
                        {"indices": [i, j], "temperatures": [warm, cool]},
                        [(i, tuple(0.5 * tint_w)), (j, tuple(0.5 * tint_c))])


def overexpose(olats, seed: int) -> Augmentation:
    """One OLAT scaled by a random factor in [1.8, 2.3] and clipped."""
    stack = _stack(olats)
    rng = np.random.default_rng(seed)
    k = int(rng.integers(len(stack)))
    scale = float(rng.uniform(*OVEREXPOSURE_RANGE))
    return Augmentation(np.clip(stack[k] * scale, 0.0, 1.0), "overexposure", seed,
                        {"index": k, "scale": scale}, [(k, (scale,) * 3)])


def low_light(olats, seed: int) -> Augmentation:
    """One OLAT plus white Gaussian noise of 25 8-bit levels, clipped to [0, 1]."""
    stack = _stack(olats)
    rng = np.random.default_rng(seed)
    k = int(rng.integers(len(stack)))
    noise = rng.normal(0.0, LOW_LIGHT_SIGMA, stack[k].shape)
    return Augmentation(np.clip(stack[k] + noise, 0.0, 1.0), "low-light", seed,
                        {"index": k, "sigma": LOW_LIGHT_SIGMA}, [(k, (1.0, 1.0, 1.0))])


def simulate(kind: str, olats, seed: int = 0) -> Augmentation:
    if kind == "well-lit":
        aug = well_lit(olats)
        aug.seed = seed
        return aug
    funcs = {"shadows": shadows, "mixed-colors": mixed_colors,
             "overexposure": overexpose, "low-light": low_light}
    if kind not in funcs:
        raise ValueError(f"unknown lighting condition {kind!r}; expected one of {KINDS}")
    return funcs[kind](olats, seed)
