"""Per-scene estimation of normals, albedo and specular intensity.

The energy is ``stereo + lambda_p * sum_j photometric_j + lambda_c * prior``:

* stereo: ``|n - n_s|_1 - n . n_s`` averaged over pixels with valid stereo normals;
* photometric: shadow-masked L1 rendering residual of each observation,
  averaged over solved pixels and observed channels;
* prior: 5x5 L1 albedo differences among clothing pixels, averaged over
  clothing pixels.

Normals are updated in their tangent plane and renormalized after every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .brdf import ShadingModel, _blinn_half, effective_intensity, lobe_scale, render
from .imaging import CLOTHING, NORMAL_MIN_Z, Camera, NormalMap, PointLight, normalize, valid_depth

log = logging.getLogger(__name__)

MODES = ("adaptive-first-order", "guarded-descent")
INIT_LOG_SPECULAR = math.log(0.05)
MAX_INIT_ALBEDO = 4.0
CLIP_LEVEL = 0.999
MAX_LOG_SPECULAR = 0.0     # rho <= 1
_MIN_NZ = 0.01
# residuals this small are round-off; their L1 subgradient is taken as 0
RESIDUAL_ROUNDOFF = 1e-12


class SolverDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_p: float = 10.0
    lambda_c: float = 50.0
    m: float = 30.0
    neighborhood: int = 5
    clothing: tuple[int, ...] = tuple(int(c) for c in CLOTHING)
    halfvector: str = "blinn"
    falloff: str = "inverse-square"

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_c < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ValueError("neighborhood must be a positive odd size")

    @property
    def shading(self) -> ShadingModel:
        return ShadingModel(self.m, self.halfvector, self.falloff)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 5000
    step_size: float = 1e-3
    mode: str = "adaptive-first-order"
    tolerance: float = 1e-7
    seed: int = 0
    window: int = 100
    # adaptive mode: the step decays geometrically from ``step_size`` to
    # ``final_step_ratio * step_size`` over ``max_iterations``; 1 keeps it constant
    final_step_ratio: float = 1.0
    gradient_tolerance: float = 1e-12
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # per-group multiples of ``step_size`` for albedo and log rho
    albedo_step_scale: float = 1.0
    specular_step_scale: float = 10.0

    def __post_init__(self):
        if self.specular_step_scale <= 0 or self.albedo_step_scale <= 0:
            raise ValueError("per-group step scales must be positive")
        if not 0 < self.final_step_ratio <= 1:
            raise ValueError("final_step_ratio must lie in (0, 1]")
        if self.max_iterations < 0 or self.step_size <= 0 or self.window < 1:
            raise ValueError("iteration counts and step size must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class Observation:
    """An image explained by a sum of calibrated point lights.

    A single-light observation is an OLAT; augmented inputs carry several
    lights with their gains folded into the intensities. ``channels`` marks
    which of R, G, B, NIR were measured.
    """

    image: np.ndarray
    lights: tuple[PointLight, ...]
    shadows: tuple[np.ndarray, ...]
    channels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 3 and self.image.shape[-1] == 3:
            self.image = np.concatenate([self.image, np.zeros_like(self.image[..., :1])], -1)
        if self.image.ndim != 3 or self.image.shape[-1] != 4:
            raise ValueError("observations are (H, W, 4) images")
        self.lights = tuple(self.lights)
        self.shadows = tuple(np.asarray(s, dtype=np.float64).reshape(self.image.shape[:2])
                             for s in self.shadows)
        if len(self.lights) != len(self.shadows) or not self.lights:
            raise ValueError("each light needs a shadow map")
        if self.channels is None:
            total = np.sum([l.intensity for l in self.lights], axis=0)
            self.channels = total > 0
        self.channels = np.asarray(self.channels, dtype=bool).reshape(4)
        if not self.channels.any():
            raise ValueError("observation measures no channel")

    @property
    def visibility(self) -> np.ndarray:
        return np.max(self.shadows, axis=0)


@dataclass
class DataBundle:
    camera: Camera
    depth: np.ndarray
    stereo_normals: NormalMap
    observations: list[Observation]
    segmentation: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        shape = self.depth.shape
        if self.stereo_normals.shape != shape or self.segmentation.shape != shape:
            raise ValueError("bundle rasters must share dimensions")
        for obs in self.observations:
            if obs.image.shape[:2] != shape:
                raise ValueError(f"observation {obs.name!r} has the wrong size")
        if self.mask is None:
            self.mask = valid_depth(self.depth)
        self.mask = np.asarray(self.mask, dtype=bool) & valid_depth(self.depth)
        if not self.mask.any():
            raise ValueError("bundle has no valid pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class SceneEstimate:
    normals: NormalMap
    albedo: np.ndarray
    log_specular: np.ndarray

    @property
    def specular(self) -> np.ndarray:
        return np.exp(self.log_specular)

    def copy(self) -> "SceneEstimate":
        return SceneEstimate(NormalMap(self.normals.normals.copy(), self.normals.valid.copy()),
                             self.albedo.copy(), self.log_specular.copy())


@dataclass
class SolveResult:
    estimate: SceneEstimate
    energy: float
    breakdown: dict
    log: list[dict] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reason: str = ""

    def log_csv(self) -> str:
        cols = ["iteration", "total", "stereo", "photometric", "prior", "step"]
        lines = [",".join(cols)]
        for row in self.log:
            lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                                  for c in cols))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# standalone loss terms on full images

def _as_normals(n) -> np.ndarray:
    return n.normals if isinstance(n, NormalMap) else np.asarray(n, dtype=np.float64)


def stereo_loss(normals, stereo_normals, mask) -> float:
    n = _as_normals(normals)
    ns = _as_normals(stereo_normals)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("stereo loss over an empty mask")
    per_px = np.abs(n - ns).sum(-1) - np.einsum("...i,...i->...", n, ns)
    return float(per_px[mask].mean())


def photometric_loss(estimate: SceneEstimate, observation: Observation, camera: Camera,
                     depth, mask, shading: ShadingModel = ShadingModel()) -> float:
    """Mean shadow-masked absolute residual of one observation.

    The rendering is the sum of the observation's lights, each masked by its
    own shadow map; the residual is kept where any light reaches the pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("photometric loss over an empty mask")
    if observation.image.shape[:2] != mask.shape:
        raise ValueError("observation and mask sizes disagree")
    rendered = np.zeros_like(observation.image)
    for light, shadow in zip(observation.lights, observation.shadows):
        rendered += render(estimate.normals, estimate.albedo, np.exp(estimate.log_specular),
                           depth, camera, light, shading, shadow)
    resid = observation.visibility[..., None] * (rendered - observation.image)
    resid = np.abs(resid[mask][:, observation.channels])
    return float(resid.mean())


def _offsets(size: int):
    r = size // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]


def _pair_slices(shape, dy, dx):
    h, w = shape
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yt = slice(max(0, dy), min(h, h + dy))
    xt = slice(max(0, dx), min(w, w + dx))
    return (ys, xs), (yt, xt)


def _prior_pairs(segmentation, neighborhood, clothing):
    """Flat indices of clothing pixel pairs, one entry per unordered neighbor pair."""
    cloth = np.isin(segmentation, clothing)
    flat = np.arange(cloth.size).reshape(cloth.shape)
    src, dst = [], []
    for dy, dx in _offsets(neighborhood):
        if (dy, dx) < (0, 0):
            continue
        a, b = _pair_slices(cloth.shape, dy, dx)
        both = cloth[a] & cloth[b]
        src.append(flat[a][both])
        dst.append(flat[b][both])
    cat = lambda x: np.concatenate(x) if x else np.zeros(0, dtype=int)
    return cat(src), cat(dst), int(cloth.sum())


def albedo_prior(albedo, segmentation, neighborhood: int = 5,
                 clothing=tuple(int(c) for c in CLOTHING)) -> float:
    """Mean over clothing pixels of summed L1 albedo differences to clothing neighbors."""
    albedo = np.asarray(albedo, dtype=np.float64)
    if albedo.shape[:2] != np.shape(segmentation):
        raise ValueError("albedo and segmentation sizes disagree")
    cloth = np.isin(segmentation, clothing)
    count = int(cloth.sum())
    if count == 0:
        return 0.0
    total = 0.0
    for dy, dx in _offsets(neighborhood):
        src, dst = _pair_slices(cloth.shape, dy, dx)
        both = cloth[src] & cloth[dst]
        total += float(np.abs(albedo[src] - albedo[dst])[both].sum())
    return total / count


def mean_angular_error(normals, reference, mask) -> float:
    """Mean absolute angle in degrees between two normal maps over ``mask``."""
    n = _as_normals(normals)
    r = _as_normals(reference)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("angular error over an empty mask")
    cos = np.clip(np.einsum("...i,...i->...", n, r)[mask], -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal tangent vectors (e1, e2) for unit normals ``n``."""
    n = np.asarray(n, dtype=np.float64)
    helper = np.where((np.abs(n[..., 0]) < 0.9)[..., None], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    e1 = normalize(np.cross(n, helper))
    e2 = np.cross(n, e1)
    return e1, e2


# ---------------------------------------------------------------------------
# compact problem over the solved pixels, stored channel-first: normals (3, N),
# albedo (4, N), log rho (N,)

def _powers(q, m: float):
    """``(q**(m-1), q**m)`` for ``q >= 0``; integer exponents use repeated squaring."""
    e = m - 1.0
    if e == int(e) and 0 <= e <= 256:
        e = int(e)
        out = np.ones_like(q)
        base = q
        while e:
            if e & 1:
                out = out * base
            e >>= 1
            if e:
                base = base * base
        return out, out * q
    qm1 = q ** e
    return qm1, qm1 * q


@dataclass
class _LightTerm:
    l: np.ndarray          # (3, N)
    h: np.ndarray          # (3, N)
    light: np.ndarray      # falloff * intensity * shadow, (4, N)
    channels: np.ndarray   # channel indices the light emits in


@dataclass
class _ObsTerm:
    target: np.ndarray     # (4, N)
    weight: np.ndarray     # (4, N): visibility * channel mask / (N * channels)
    channels: np.ndarray   # observed channel indices
    lights: list[_LightTerm]


class _Problem:
    def __init__(self, bundle: DataBundle, cfg: LossConfig):
        self.bundle = bundle
        self.cfg = cfg
        self.shape = bundle.shape
        self.idx = np.flatnonzero(bundle.mask)
        n_px = self.idx.size
        ns_valid = bundle.stereo_normals.valid.ravel()
        self.stereo_mask = ns_valid[self.idx]
        self.n_stereo = int(self.stereo_mask.sum())
        # stereo pixels outside the solved set keep their fixed contribution
        outside = ns_valid & ~bundle.mask.ravel()
        self.n_stereo_total = self.n_stereo + int(outside.sum())
        self.ns = np.ascontiguousarray(bundle.stereo_normals.normals.reshape(-1, 3)[self.idx].T)
        self.outside_stereo = outside
        self.prior_src, self.prior_dst, self.n_cloth = _prior_pairs(
            bundle.segmentation, cfg.neighborhood, cfg.clothing)
        self.obs: list[_ObsTerm] = []
        for o in bundle.observations:
            vis = o.visibility.ravel()[self.idx]
            nch = int(o.channels.sum())
            weight = vis[None, :] * o.channels[:, None] / (n_px * nch)
            terms = []
            for light, shadow in zip(o.lights, o.shadows):
                l, v, leff = effective_intensity(bundle.camera, bundle.depth, light, cfg.falloff)
                h = _blinn_half(l, v)
                leff = leff * shadow[..., None]
                active = np.flatnonzero((np.asarray(light.intensity) != 0) & o.channels)
                terms.append(_LightTerm(self._compact(l), self._compact(h), self._compact(leff),
                                        active))
            self.obs.append(_ObsTerm(self._compact(o.image), weight,
                                     np.flatnonzero(o.channels), terms))

    def _compact(self, img):
        return np.ascontiguousarray(img.reshape(-1, img.shape[-1])[self.idx].T)

    # -- packing -----------------------------------------------------------
    def gather(self, est: SceneEstimate):
        n = self._compact(est.normals.normals)
        a = self._compact(est.albedo)
        r = est.log_specular.ravel()[self.idx].copy()
        return n, a, r

    def scatter(self, template: SceneEstimate, n, a, r) -> SceneEstimate:
        out = template.copy()
        nn = out.normals.normals.reshape(-1, 3)
        nn[self.idx] = n.T
        valid = out.normals.valid.ravel()
        valid[self.idx] = True
        out.normals = NormalMap(nn.reshape(self.shape + (3,)), valid.reshape(self.shape))
        out.albedo.reshape(-1, 4)[self.idx] = a.T
        out.log_specular.reshape(-1)[self.idx] = r
        return out

    # -- energy ------------------------------------------------------------
    def evaluate(self, n, a, r, full_albedo, full_normals=None, grad: bool = True):
        """Energy, breakdown and (ambient) gradients w.r.t. the compact parameters."""
        cfg = self.cfg
        rho = np.exp(r)
        m = cfg.m
        k = lobe_scale(m)
        literal = cfg.halfvector == "paper-literal"
        gn = np.zeros_like(n) if grad else None
        ga = np.zeros_like(a) if grad else None
        gr = np.zeros_like(r) if grad else None

        # stereo
        stereo = 0.0
        if self.n_stereo_total:
            sm = self.stereo_mask
            ns = self.ns
            diff = n - ns
            per_px = np.abs(diff).sum(0) - (n * ns).sum(0)
            stereo = float(per_px[sm].sum())
            if full_normals is not None and self.outside_stereo.any():
                fn = full_normals.reshape(-1, 3)[self.outside_stereo]
                fs = self.bundle.stereo_normals.normals.reshape(-1, 3)[self.outside_stereo]
                stereo += float((np.abs(fn - fs).sum(-1) - np.einsum("ij,ij->i", fn, fs)).sum())
            stereo /= self.n_stereo_total
            if grad:
                gn += (np.sign(diff) - ns) * (sm / self.n_stereo_total)

        # photometric
        photo_terms = []
        for o in self.obs:
            rendered = np.zeros_like(o.target)
            cache = []
            for t in o.lights:
                cos = n[0] * t.l[0] + n[1] * t.l[1] + n[2] * t.l[2]
                cp = np.maximum(cos, 0.0)
                if literal:
                    s = n + t.l
                    sn = np.maximum(np.sqrt((s * s).sum(0)), 1e-12)
                    a_dot = (n * s).sum(0)
                    q = a_dot / sn
                    dq = (2.0 * n + t.l) / sn - (a_dot / sn**3) * s
                else:
                    q = n[0] * t.h[0] + n[1] * t.h[1] + n[2] * t.h[2]
                    dq = t.h
                qm1, qm = _powers(np.maximum(q, 0.0), m)
                spec = rho * k * qm
                for c in t.channels:
                    rendered[c] += (a[c] + spec) * cp * t.light[c]
                cache.append((cos, cp, qm1, qm, spec, dq))
            resid = rendered - o.target
            photo_terms.append(float((np.abs(resid) * o.weight).sum()))
            if grad:
                sgn = np.sign(resid) * (np.abs(resid) > RESIDUAL_ROUNDOFF)
                sgn *= o.weight * cfg.lambda_p
                for t, (cos, cp, qm1, qm, spec, dq) in zip(o.lights, cache):
                    sum_sl = np.zeros_like(cp)
                    coef_l = np.zeros_like(cp)
                    for c in t.channels:
                        sl = sgn[c] * t.light[c]
                        ga[c] += sl * cp
                        sum_sl += sl
                        coef_l += sl * (a[c] + spec)
                    coef_l *= cos > 0
                    gr += spec * cp * sum_sl
                    coef_h = rho * (k * m) * qm1 * cp * sum_sl
                    gn += coef_l * t.l + coef_h * dq
        photometric = float(sum(photo_terms))

        # prior over the full albedo image; each unordered pair appears once
        prior = 0.0
        if self.n_cloth and self.prior_src.size:
            flat = full_albedo.reshape(-1, 4)
            diff = flat[self.prior_src] - flat[self.prior_dst]
            prior = 2.0 * float(np.abs(diff).sum()) / self.n_cloth
            if grad:
                sgn = np.sign(diff) * (2.0 * cfg.lambda_c / self.n_cloth)
                size = flat.shape[0]
                for c in range(4):
                    g = (np.bincount(self.prior_src, sgn[:, c], size)
                         - np.bincount(self.prior_dst, sgn[:, c], size))
                    ga[c] += g[self.idx]

        total = stereo + cfg.lambda_p * photometric + cfg.lambda_c * prior
        breakdown = {"total": total, "stereo": stereo,
                     "photometric": cfg.lambda_p * photometric, "prior": cfg.lambda_c * prior,
                     "photometric_terms": photo_terms}
        if grad:
            gn -= (gn * n).sum(0) * n   # tangent projection
        return total, breakdown, (gn, ga, gr)


def _energy_at(problem: _Problem, est: SceneEstimate, grad: bool):
    n, a, r = problem.gather(est)
    return problem.evaluate(n, a, r, est.albedo, est.normals.normals, grad=grad)


def total_loss(estimate: SceneEstimate, bundle: DataBundle, cfg: LossConfig = LossConfig()):
    """Total energy and its weighted per-term breakdown."""
    total, breakdown, _ = _energy_at(_Problem(bundle, cfg), estimate, grad=False)
    return total, breakdown


def total_gradient(estimate: SceneEstimate, bundle: DataBundle, cfg: LossConfig = LossConfig()):
    """Gradients w.r.t. tangent-plane normal offsets (H, W, 2), albedo and log rho.

    The normal offsets ``(t1, t2)`` act as ``normalize(n + t1 e1 + t2 e2)`` with
    ``(e1, e2) = tangent_basis(n)``. Pixels outside the solved mask get zeros.
    """
    problem = _Problem(bundle, cfg)
    n, a, r = problem.gather(estimate)
    _, _, (gn, ga, gr) = problem.evaluate(n, a, r, estimate.albedo, grad=True)
    h, w = bundle.shape
    g_t = np.zeros((h * w, 2))
    gn = gn.T
    e1, e2 = tangent_basis(n.T)
    g_t[problem.idx, 0] = np.einsum("ij,ij->i", gn, e1)
    g_t[problem.idx, 1] = np.einsum("ij,ij->i", gn, e2)
    g_a = np.zeros((h * w, 4))
    g_a[problem.idx] = ga.T
    g_r = np.zeros(h * w)
    g_r[problem.idx] = gr
    return {"normal": g_t.reshape(h, w, 2), "albedo": g_a.reshape(h, w, 4),
            "log_specular": g_r.reshape(h, w)}


# ---------------------------------------------------------------------------
# initialization and optimization

def initial_estimate(bundle: DataBundle, cfg: LossConfig = LossConfig()) -> SceneEstimate:
    """Starting point of the solver.

    Normals are the stereo normals (pixels without one copy the nearest valid
    stereo normal). Each albedo channel is the ratio of the summed
    observations measuring it to their summed Lambertian shading at those
    normals, with the shading floored at 0.2 of the summed light; clipped
    observation pixels are left out. Summing over lights placed around the
    camera makes the ratio insensitive to small normal errors. rho = 0.05.
    """
    h, w = bundle.shape
    ns = bundle.stereo_normals
    if ns.valid.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~ns.valid, return_indices=True)
        normals = ns.normals[iy, ix]
    else:
        normals = np.broadcast_to([0.0, 0.0, 1.0], (h, w, 3)).copy()
    measured = np.zeros((h, w, 4))
    shading = np.zeros((h, w, 4))
    light_sum = np.zeros((h, w, 4))
    for obs in bundle.observations:
        unclipped = (obs.image[..., :3].max(-1) < CLIP_LEVEL) & (obs.image[..., 3] < CLIP_LEVEL)
        for light, shadow in zip(obs.lights, obs.shadows):
            l, _, leff = effective_intensity(bundle.camera, bundle.depth, light, cfg.falloff)
            lc = leff * (shadow * unclipped)[..., None] * obs.channels
            shading += np.maximum(np.einsum("...i,...i->...", normals, l), 0.0)[..., None] * lc
            light_sum += lc
        measured += obs.image * (unclipped[..., None] * obs.channels)
    denom = np.maximum(shading, 0.2 * light_sum)
    ok = denom > 1e-9
    albedo = np.where(ok, measured / np.where(ok, denom, 1.0), 0.5)
    albedo = np.clip(albedo, 0.0, MAX_INIT_ALBEDO)
    valid = bundle.mask | ns.valid
    return SceneEstimate(NormalMap(normals, valid), albedo, np.full((h, w), INIT_LOG_SPECULAR))


def _retract(n, a, r, dn, da, dr):
    n2 = n + dn
    n2[2] = np.maximum(n2[2], _MIN_NZ)
    n2 /= np.sqrt((n2 * n2).sum(0))
    return n2, np.maximum(a + da, 0.0), np.minimum(r + dr, MAX_LOG_SPECULAR)


def solve(bundle: DataBundle, loss_cfg: LossConfig = LossConfig(),
          solver_cfg: SolverConfig = SolverConfig(),
          init: SceneEstimate | None = None) -> SolveResult:
    """Minimize the total energy directly over the per-pixel maps.

    Returns the lowest-energy iterate seen. ``adaptive-first-order`` is Adam
    on tangent-plane normal steps, albedo (projected to >= 0) and log rho,
    with an optional geometric step decay. Both modes stop early when a window
    of iterations improves the best energy by less than ``tolerance``
    (relative).
    ``guarded-descent`` takes RMS-scaled gradient steps and halves the step
    up to 20 times until the energy decreases, skipping the update otherwise,
    so its energy log never increases.
    """
    problem = _Problem(bundle, loss_cfg)
    template = init.copy() if init is not None else initial_estimate(bundle, loss_cfg)
    full_albedo = template.albedo.copy()
    flat_albedo = full_albedo.reshape(-1, 4)
    n, a, r = problem.gather(template)
    n_px = problem.idx.size
    cfg = solver_cfg

    def evaluate(n, a, r, grad=True):
        flat_albedo[problem.idx] = a.T
        e, br, g = problem.evaluate(n, a, r, full_albedo, template.normals.normals, grad=grad)
        if not np.isfinite(e):
            raise SolverDivergence(f"energy became {e} (breakdown {br})")
        return e, br, g

    energy, breakdown, grads = evaluate(n, a, r)
    best = (energy, breakdown, n.copy(), a.copy(), r.copy())
    history = [_log_row(0, breakdown, 0.0)]
    state_m = [np.zeros_like(x) for x in (n, a, r)]
    state_v = [np.zeros_like(x) for x in (n, a, r)]
    t_adam = 0
    decay = cfg.final_step_ratio ** (1.0 / max(cfg.max_iterations, 1))
    step = cfg.step_size
    scales = (1.0, cfg.albedo_step_scale, cfg.specular_step_scale)
    rates = tuple(cfg.step_size * s for s in scales)
    window_best = energy
    converged, reason = False, "max_iterations"
    it = 0

    for it in range(1, cfg.max_iterations + 1):
        g = [x * n_px for x in grads]
        if max(float(np.abs(x).max(initial=0.0)) for x in g) <= cfg.gradient_tolerance:
            converged, reason, it = True, "stationary", it - 1
            break
        t_adam += 1
        for k in range(3):
            state_v[k] = cfg.beta2 * state_v[k] + (1 - cfg.beta2) * g[k] ** 2
        v_hat = [v / (1 - cfg.beta2 ** t_adam) for v in state_v]
        if cfg.mode == "adaptive-first-order":
            for k in range(3):
                state_m[k] = cfg.beta1 * state_m[k] + (1 - cfg.beta1) * g[k]
            m_hat = [m / (1 - cfg.beta1 ** t_adam) for m in state_m]
            mult = decay ** (it - 1)
            d = [-lr * mult * mh / (np.sqrt(vh) + cfg.eps)
                 for lr, mh, vh in zip(rates, m_hat, v_hat)]
            n, a, r = _retract(n, a, r, *d)
            energy, breakdown, grads = evaluate(n, a, r)
            history.append(_log_row(it, breakdown, cfg.step_size * mult))
        else:
            direction = [-s * gk / (np.sqrt(vh) + cfg.eps) for s, gk, vh in zip(scales, g, v_hat)]
            step = min(step * 2.0, cfg.step_size)
            accepted = False
            for _ in range(21):
                trial = _retract(n, a, r, *(step * dk for dk in direction))
                e_t, br_t, g_t = evaluate(*trial)
                if e_t < energy:
                    accepted = True
                    break
                step /= 2.0
            if accepted:
                n, a, r = trial
                energy, breakdown, grads = e_t, br_t, g_t
                history.append(_log_row(it, breakdown, step))
            else:
                flat_albedo[problem.idx] = a.T
                step = cfg.step_size
                history.append(_log_row(it, breakdown, 0.0))
        if energy < best[0]:
            best = (energy, breakdown, n.copy(), a.copy(), r.copy())
        if it % cfg.window == 0:
            gain = (window_best - best[0]) / max(abs(best[0]), 1e-12)
            window_best = best[0]
            if gain < cfg.tolerance:
                converged, reason = True, "tolerance"
                break

    energy, breakdown, n, a, r = best
    estimate = problem.scatter(template, n, a, r)
    log.info("solve finished after %d iterations (%s), energy %.6g", it, reason, energy)
    return SolveResult(estimate, energy, breakdown, history, it, converged, reason)


def _log_row(it: int, breakdown: dict, step: float) -> dict:
    return {"iteration": it, "total": breakdown["total"], "stereo": breakdown["stereo"],
            "photometric": breakdown["photometric"], "prior": breakdown["prior"], "step": step}
