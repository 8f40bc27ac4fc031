"""Independent reference implementations used as test oracles.

Each oracle is written from the defining formula with plain loops or dense
linear algebra and shares no code path with the package beyond the data
types it consumes.
"""

from __future__ import annotations

import math

import numpy as np

CLOTHING = (3, 4, 5)


# ---------------------------------------------------------------------------
# shading

def blinn_phong(n, l, v, albedo, rho, m, L):
    """Scalar reflectance times clamped cosine times intensity, one pixel."""
    h = (np.asarray(l) + np.asarray(v))
    h = h / math.sqrt(float(h @ h))
    k = (m + 2.0) / (2.0 * math.pi)
    lobe = k * max(float(np.dot(n, h)), 0.0) ** m
    cos = max(float(np.dot(n, l)), 0.0)
    return np.array([(a + rho * lobe) * cos * li for a, li in zip(albedo, L)])


def render_loop(normals, valid, albedo, rho, depth, camera, light, m=30.0, shadow=None):
    """Per-pixel loop renderer with inverse-square falloff."""
    h, w = depth.shape
    out = np.zeros((h, w, 4))
    lp = np.asarray(light.position, dtype=float)
    for y in range(h):
        for x in range(w):
            d = depth[y, x]
            if not valid[y, x] or d <= 0:
                continue
            p = np.array([d * (x - camera.cx) / camera.fx, -d * (y - camera.cy) / camera.fy, -d])
            to_l = lp - p
            dist = math.sqrt(float(to_l @ to_l))
            l = to_l / dist
            v = -p / math.sqrt(float(p @ p))
            L = np.asarray(light.intensity) / dist**2
            if shadow is not None:
                L = L * shadow[y, x]
            out[y, x] = blinn_phong(normals[y, x], l, v, albedo[y, x], rho[y, x], m, L)
    return out


# ---------------------------------------------------------------------------
# shadows

def slope_bias_loop(depth, base):
    """Occlusion tolerance: base plus, per axis, the smaller one-sided depth step."""
    h, w = depth.shape
    ok = (depth > 0) & (depth <= 100.0)
    out = np.zeros_like(depth)
    for y in range(h):
        for x in range(w):
            if not ok[y, x]:
                continue
            total = base
            for dy, dx in ((0, 1), (1, 0)):
                steps = []
                for s in (1, -1):
                    yy, xx = y + s * dy, x + s * dx
                    if 0 <= yy < h and 0 <= xx < w and ok[yy, xx]:
                        steps.append(abs(depth[y, x] - depth[yy, xx]))
                total += min(steps) if steps else 0.0
            out[y, x] = total
    return out


def shadow_oracle(depth, camera, light, base_bias, chunk=64):
    """Exhaustive visibility: every pixel's light segment against every depth tile.

    A tile is the pixel square at its stored depth. For each (segment, tile)
    pair the parameter interval where the segment projects into the square
    is found by Liang-Barsky clipping (each side of the square is a linear
    inequality in the segment parameter once multiplied by the positive
    depth). Depth is linear along the segment, so the pair occludes when
    the depth at either end of that interval exceeds the tile tolerance.
    """
    h, w = depth.shape
    ok = (depth > 0) & (depth <= 100.0)
    tol = depth + slope_bias_loop(depth, base_bias)
    cv_, cu_ = np.nonzero(ok)
    cell_tol = tol[cv_, cu_]
    lp = np.asarray(light.position, dtype=float)
    lit = np.zeros((h, w))
    pv, pu = np.nonzero(ok)
    for s in range(0, pv.size, chunk):
        v0, u0 = pv[s:s + chunk], pu[s:s + chunk]
        d0 = depth[v0, u0]
        P = np.stack([d0 * (u0 - camera.cx) / camera.fx, -d0 * (v0 - camera.cy) / camera.fy,
                      -d0], 1)
        D = lp[None] - P
        # depth d(t) = d0 - t D_z ; x(t) = P_x + t D_x ; y(t) = P_y + t D_y
        da, db = d0[:, None], -D[:, 2:3]
        xa, xb = P[:, 0:1], D[:, 0:1]
        ya, yb = P[:, 1:2], D[:, 1:2]
        U = cu_[None, :].astype(float)
        V = cv_[None, :].astype(float)
        cons = [
            # u >= U - 0.5
            (camera.fx * xa - (U - 0.5 - camera.cx) * da, camera.fx * xb - (U - 0.5 - camera.cx) * db),
            # u <= U + 0.5
            ((U + 0.5 - camera.cx) * da - camera.fx * xa, (U + 0.5 - camera.cx) * db - camera.fx * xb),
            # v >= V - 0.5  <=>  (cy - V + 0.5) d - fy y >= 0
            ((camera.cy - V + 0.5) * da - camera.fy * ya, (camera.cy - V + 0.5) * db - camera.fy * yb),
            # v <= V + 0.5
            (camera.fy * ya - (camera.cy - V - 0.5) * da, camera.fy * yb - (camera.cy - V - 0.5) * db),
            # d > 0
            (da - 1e-12 + 0 * U, db + 0 * U),
        ]
        t0 = np.zeros((v0.size, U.shape[1]))
        t1 = np.ones_like(t0)
        empty = np.zeros(t0.shape, dtype=bool)
        for a, b in cons:
            a = np.broadcast_to(a, t0.shape)
            b = np.broadcast_to(b, t0.shape)
            with np.errstate(divide="ignore", invalid="ignore"):
                r = -a / b
            empty |= (b == 0) & (a < 0)
            t0 = np.where(b > 0, np.maximum(t0, r), t0)
            t1 = np.where(b < 0, np.minimum(t1, r), t1)
        hit = ~empty & (t0 <= t1) & (t1 > 0)
        d_lo = da + np.maximum(t0, 0.0) * db
        d_hi = da + t1 * db
        occ = hit & (np.maximum(d_lo, d_hi) > cell_tol[None, :])
        lit[v0, u0] = ~occ.any(axis=1)
    return lit


# ---------------------------------------------------------------------------
# albedo prior

def albedo_prior_loop(albedo, segmentation, size=5, clothing=CLOTHING):
    """Direct double sum over clothing pixels and their clothing neighbors."""
    h, w = segmentation.shape
    r = size // 2
    total, count = 0.0, 0
    for y in range(h):
        for x in range(w):
            if segmentation[y, x] not in clothing:
                continue
            count += 1
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if (dy, dx) == (0, 0) or not (0 <= yy < h and 0 <= xx < w):
                        continue
                    if segmentation[yy, xx] in clothing:
                        total += float(np.abs(albedo[y, x] - albedo[yy, xx]).sum())
    return total / count if count else 0.0


# ---------------------------------------------------------------------------
# fusion

def dense_fusion(stereo, normals, valid, camera, w_z, w_n):
    """Dense normal equations built from explicit residual rows.

    Rows: sqrt(w_z) (z_i - s_i) per valid pixel and sqrt(w_n) n_i . (P_j - P_i)
    for right and down valid neighbors, with P = z * ray.
    """
    h, w = stereo.shape
    ids = -np.ones((h, w), dtype=int)
    ys, xs = np.nonzero(valid)
    ids[ys, xs] = np.arange(ys.size)
    n_unk = ys.size

    def ray(y, x):
        return np.array([(x - camera.cx) / camera.fx, -(y - camera.cy) / camera.fy, -1.0])

    rows, rhs = [], []
    for k, (y, x) in enumerate(zip(ys, xs)):
        row = np.zeros(n_unk)
        row[k] = math.sqrt(w_z)
        rows.append(row)
        rhs.append(math.sqrt(w_z) * stereo[y, x])
    for y, x in zip(ys, xs):
        for yy, xx in ((y, x + 1), (y + 1, x)):
            if yy < h and xx < w and valid[yy, xx]:
                n = normals[y, x]
                row = np.zeros(n_unk)
                row[ids[y, x]] -= math.sqrt(w_n) * float(n @ ray(y, x))
                row[ids[yy, xx]] += math.sqrt(w_n) * float(n @ ray(yy, xx))
                rows.append(row)
                rhs.append(0.0)
    J = np.array(rows)
    b = np.array(rhs)
    return J.T @ J, J.T @ b, ids


# ---------------------------------------------------------------------------
# finite differences

def central_difference(f, x, step=1e-4):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), np.abs(a).max(), floor))


# ---------------------------------------------------------------------------
# total-energy gradient check at one pixel

def perturbed(estimate, y, x, params):
    """Copy of ``estimate`` with pixel (y, x) moved by ``params``.

    ``params`` = (t1, t2, da0..da3, dlog_rho); the normal becomes
    normalize(n + t1 e1 + t2 e2) in the tangent basis of n.
    """
    from darkflash.solver import tangent_basis

    out = estimate.copy()
    n = estimate.normals.normals[y, x]
    e1, e2 = tangent_basis(n)
    moved = n + params[0] * e1 + params[1] * e2
    out.normals.normals[y, x] = moved / np.linalg.norm(moved)
    out.albedo[y, x] = estimate.albedo[y, x] + np.asarray(params[2:6])
    out.log_specular[y, x] = estimate.log_specular[y, x] + params[6]
    return out


def _pixel_signs(bundle, estimate, y, x, m, clothing):
    """Signs of every quantity whose zero crossing is a kink of the energy at (y, x)."""
    from darkflash.imaging import light_dir_and_view

    n = estimate.normals.normals[y, x]
    a = estimate.albedo[y, x]
    rho = math.exp(estimate.log_specular[y, x])
    d = bundle.depth[y, x]
    signs = []
    for obs in bundle.observations:
        total = np.zeros(4)
        for light, shadow in zip(obs.lights, obs.shadows):
            l, v, fall = light_dir_and_view(bundle.camera, x, y, d, light)
            h = (l + v) / np.linalg.norm(l + v)
            signs += [n @ l > 0, n @ h > 0]
            total += blinn_phong(n, l, v, a, rho, m, np.asarray(light.intensity) * fall * shadow[y, x])
        if max(s[y, x] for s in obs.shadows) > 0:
            signs += list((total - obs.image[y, x])[obs.channels] > 0)
    if bundle.stereo_normals.valid[y, x]:
        signs += list(n - bundle.stereo_normals.normals[y, x] > 0)
    seg = bundle.segmentation
    if seg[y, x] in clothing:
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                yy, xx = y + dy, x + dx
                if (dy, dx) != (0, 0) and 0 <= yy < seg.shape[0] and 0 <= xx < seg.shape[1] \
                        and seg[yy, xx] in clothing:
                    signs += list(a - estimate.albedo[yy, xx] > 0)
    return np.array(signs)


def pixel_has_kink(bundle, estimate, y, x, step, m=30.0, clothing=CLOTHING):
    """True when some kink quantity changes sign within +-step of any parameter."""
    base = _pixel_signs(bundle, estimate, y, x, m, clothing)
    for k in range(7):
        for s in (step, -step):
            params = np.zeros(7)
            params[k] = s
            if not np.array_equal(_pixel_signs(bundle, perturbed(estimate, y, x, params), y, x,
                                               m, clothing), base):
                return True
    return False


def numeric_pixel_gradient(bundle, estimate, y, x, cfg, step=1e-4):
    """Central differences of total_loss in the seven pixel parameters."""
    from darkflash.solver import total_loss

    return central_difference(lambda p: total_loss(perturbed(estimate, y, x, p), bundle, cfg)[0],
                              np.zeros(7), step)


def analytic_pixel_gradient(grads, y, x):
    return np.concatenate([grads["normal"][y, x], grads["albedo"][y, x],
                           [grads["log_specular"][y, x]]])


# ---------------------------------------------------------------------------
# bilateral filter

def bilateral_loop(depth, guide, spatial_sigma, range_sigma):
    """Guided bilateral filter written as an explicit double loop."""
    h, w = depth.shape
    radius = int(math.ceil(3 * spatial_sigma))
    valid = (depth > 0) & (depth <= 100.0)
    out = depth.copy()
    for y in range(h):
        for x in range(w):
            if not valid[y, x]:
                continue
            num = den = 0.0
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    if not valid[yy, xx]:
                        continue
                    dg = float(((guide[y, x] - guide[yy, xx]) ** 2).sum())
                    wgt = math.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * spatial_sigma**2)) \
                        * math.exp(-dg / (2 * range_sigma**2))
                    num += wgt * depth[yy, xx]
                    den += wgt
            out[y, x] = num / den
    return out
