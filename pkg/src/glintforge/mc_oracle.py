"""Monte Carlo reference estimators for the split-sum renderer.

``estimate_direct`` integrates f_r * L * cos over the unoccluded environment
with one-sample MIS (balance heuristic) between a cosine-weighted diffuse
lobe and GGX-sampled specular reflections.  ``path_trace`` sphere-traces the
SDF and, for two bounces, adds the specular reflection of other surfaces.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .brdf import (RHO_MIN, Material, base_reflectance, fresnel_schlick, ggx_ndf, normalize,
                   roughness_to_alpha, sample_ggx, smith_g, to_world)
from .envlight import CubeMipChain, sample_mip
from .geometry import SdfScene, normal_at

TILE_PIXELS = 256
TRACE_EPS = 1e-5
_LOBES = ("both", "diffuse", "specular")


@dataclass(frozen=True)
class McConfig:
    spp: int = 128
    max_bounces: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be >= 1")
        if self.max_bounces not in (1, 2):
            raise ValueError("max_bounces must be 1 or 2")


def env_radiance(env: CubeMipChain, d):
    return sample_mip(env, d, RHO_MIN)


def sample_cosine(normal, u1, u2):
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.clip(1.0 - u1, 0.0, 1.0))], axis=-1)
    shape = np.broadcast_shapes(local.shape, np.shape(normal))
    return to_world(np.broadcast_to(local, shape), np.broadcast_to(normal, shape))


def sample_ggx_light(alpha, normal, view_dir, u1, u2):
    """Mirror a GGX half-vector sample into a light direction.

    Returns ``(omega, pdf)`` with the pdf over solid angle of ``omega``.
    """
    h, pdf_h = sample_ggx(alpha, normal, u1, u2)
    vh = -np.sum(view_dir * h, axis=-1)
    omega = view_dir + 2.0 * vh[..., None] * h
    return omega, pdf_h / np.maximum(4.0 * np.abs(vh), 1e-12)


def ggx_light_pdf(alpha, normal, view_dir, omega):
    # h and -h mirror to the same omega; only the upper one can have been sampled
    h = normalize(omega - view_dir)
    nh = np.abs(np.sum(normal * h, axis=-1))
    vh = np.abs(np.sum(omega * h, axis=-1))
    return ggx_ndf(alpha, nh) * nh / np.maximum(4.0 * vh, 1e-12)


def _brdf_terms(albedo, alpha, metal, view_dir, normal, omega):
    """Diffuse and specular f_r (rgb each) for batched arrays."""
    nl = np.sum(normal * omega, axis=-1)
    nv = -np.sum(normal * view_dir, axis=-1)
    h = normalize(omega - view_dir)
    D = ggx_ndf(alpha, np.sum(normal * h, axis=-1))
    F = fresnel_schlick(base_reflectance(metal, albedo), np.sum(omega * h, axis=-1))
    G = smith_g(alpha, nv, nl)
    den = 4.0 * np.maximum(np.abs(nv), 1e-6) * np.maximum(np.abs(nl), 1e-6)
    spec = (D * G / den)[..., None] * F
    diff = (1.0 - metal)[..., None] * albedo / np.pi
    above = (nl > 0.0)[..., None]
    return np.where(above, diff, 0.0), np.where(above, spec, 0.0), nl


def spec_probability(albedo, metal, n_dot_v):
    """Chance of picking the GGX lobe, from a Fresnel-weighted lobe-energy guess."""
    fs = fresnel_schlick(base_reflectance(metal, albedo), n_dot_v).mean(axis=-1)
    fd = (1.0 - metal) * np.asarray(albedo).mean(axis=-1)
    tot = fs + fd
    return np.where(tot > 0.0, fs / np.maximum(tot, 1e-12), 0.5)


def direct_samples(albedo, rough, metal, view_dir, normal, env: CubeMipChain, u, lobes="both"):
    """Per-sample radiance estimates.

    Surface arrays have shape (P, ...); ``u`` has shape (P, N, 3) holding the
    lobe-choice and two direction variates.  Returns (P, N, 3).
    """
    if lobes not in _LOBES:
        raise ValueError(f"lobes must be one of {_LOBES}")
    albedo = np.asarray(albedo, dtype=float)[:, None, :]
    alpha = roughness_to_alpha(np.asarray(rough, dtype=float))[:, None]
    metal = np.asarray(metal, dtype=float)[:, None]
    v = np.asarray(view_dir, dtype=float)[:, None, :]
    n = np.asarray(normal, dtype=float)[:, None, :]
    nv = np.clip(-np.sum(v * n, axis=-1), 0.0, 1.0)
    if lobes == "both":
        q = np.broadcast_to(spec_probability(albedo, metal, nv), u.shape[:2])
    else:
        q = np.full(u.shape[:2], 1.0 if lobes == "specular" else 0.0)
    pick_spec = u[..., 0] < q
    w_d = sample_cosine(n, u[..., 1], u[..., 2])
    w_s, _ = sample_ggx_light(alpha, n, v, u[..., 1], u[..., 2])
    omega = normalize(np.where(pick_spec[..., None], w_s, w_d))
    f_d, f_s, nl = _brdf_terms(albedo, alpha, metal, v, n, omega)
    if lobes == "diffuse":
        f = f_d
    elif lobes == "specular":
        f = f_s
    else:
        f = f_d + f_s
    pdf = (1.0 - q) * np.maximum(nl, 0.0) / np.pi + q * ggx_light_pdf(alpha, n, v, omega)
    L = env_radiance(env, omega)
    weight = np.where(pdf > 0.0, np.maximum(nl, 0.0) / np.maximum(pdf, 1e-300), 0.0)
    return f * L * weight[..., None]


def pixel_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) ^ int(index))


def _variates(seed, indices, n, k=3):
    return np.stack([pixel_rng(seed, i).random((n, k)) for i in indices])


def estimate_direct(mat: Material, x, view_dir, normal, env: CubeMipChain, cfg: McConfig,
                    lobes: str = "both"):
    """Unbiased estimate of the direct environment lighting reflected toward ``-view_dir``.

    ``lobes`` restricts the integrand to the diffuse or specular BRDF term.
    """
    u = _variates(cfg.seed, [0], cfg.spp)
    s = direct_samples(np.asarray([mat.albedo]), np.asarray([mat.roughness]), np.asarray([mat.metallic]),
                       np.asarray(view_dir, dtype=float)[None], np.asarray(normal, dtype=float)[None],
                       env, u, lobes)
    return s[0].mean(axis=0)


def _surface_materials(scene: SdfScene, x):
    albedo, alt, rough, metal = scene.material_arrays()
    _, prim = scene.closest(x)
    checker = scene.checker_mask(prim, x)
    a = np.where(checker[:, None], alt[prim], albedo[prim])
    return a, rough[prim], metal[prim]


def sphere_trace(scene: SdfScene, origins, dirs, t_max, max_steps: int = 512, min_step=None):
    """Distance to the zero level set along rays, refined by bisection.

    Returns ``(t, hit)``; rays that escape past ``t_max`` or fail to converge
    in ``max_steps`` report ``hit = False``.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    r = o.shape[0]
    min_step = 1e-4 * scene.scale if min_step is None else min_step
    t = np.zeros(r)
    hit = np.zeros(r, dtype=bool)
    lo = np.zeros(r)
    hi = np.full(r, np.nan)
    active = np.arange(r)
    if not scene.primitives:
        return t, hit
    for _ in range(max_steps):
        if active.size == 0:
            break
        s = scene.distance(o[active] + t[active, None] * d[active])
        done = np.abs(s) < TRACE_EPS
        hit[active[done]] = True
        crossed = s < 0.0
        hi[active[crossed & ~done]] = t[active[crossed & ~done]]
        step_on = ~done & ~crossed
        lo[active[step_on]] = t[active[step_on]]
        t[active[step_on]] += np.maximum(s[step_on], min_step)
        escaped = t[active] > t_max
        active = active[step_on & ~escaped]
    # rays that stepped over the surface: bisect between lo (outside) and hi (inside)
    bis = np.nonzero(~hit & np.isfinite(hi))[0]
    a, b = lo[bis], hi[bis]
    for _ in range(60):
        if bis.size == 0:
            break
        m = 0.5 * (a + b)
        s = scene.distance(o[bis] + m[:, None] * d[bis])
        a = np.where(s > 0.0, m, a)
        b = np.where(s > 0.0, b, m)
        conv = np.abs(s) < TRACE_EPS
        t[bis[conv]] = m[conv]
        hit[bis[conv]] = True
        keep = ~conv
        bis, a, b = bis[keep], a[keep], b[keep]
    return t, hit


def _trace_surface(scene, origins, dirs, t_max):
    t, hit = sphere_trace(scene, origins, dirs, t_max)
    x = origins + t[:, None] * dirs
    n, ok = normal_at(scene, x)
    n = np.where(ok[:, None], n, -dirs)
    return hit, x, n


def _radiance_paths(scene, env, origins, dirs, u, max_bounces, t_max):
    """Mean radiance over N paths per ray and the variance of that mean.

    ``u`` is (P, N, 8).
    """
    p, nspp = u.shape[:2]
    out = env_radiance(env, dirs)
    var = np.zeros_like(out)
    hit, x, n = _trace_surface(scene, origins, dirs, t_max)
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        return out, hit, var
    a, r, m = _surface_materials(scene, x[idx])
    v = dirs[idx]
    L = direct_samples(a, r, m, v, n[idx], env, u[idx, :, 0:3])
    if max_bounces == 2:
        # one GGX reflection per path: swap the environment for the surface it hits
        alpha = roughness_to_alpha(r)[:, None]
        nn = n[idx][:, None, :]
        vv = v[:, None, :]
        om, pdf = sample_ggx_light(alpha, nn, vv, u[idx, :, 3], u[idx, :, 4])
        om = normalize(om)
        _, f_s, nl = _brdf_terms(a[:, None, :], alpha, m[:, None], vv, nn, om)
        ok = (nl > 0.0) & (pdf > 0.0)
        orig2 = np.broadcast_to(x[idx][:, None, :] + 1e-3 * scene.scale * nn, om.shape).reshape(-1, 3)
        om_f = om.reshape(-1, 3)
        sel = np.nonzero(ok.reshape(-1))[0]
        hit2, x2, n2 = _trace_surface(scene, orig2[sel], om_f[sel], t_max)
        corr = np.zeros((om_f.shape[0], 3))
        h2 = sel[hit2]
        if h2.size:
            a2, r2, m2 = _surface_materials(scene, x2[hit2])
            u2 = u.reshape(-1, 8)[:, 5:8]
            l_hit = direct_samples(a2, r2, m2, om_f[h2], n2[hit2], env, u2[h2][:, None, :])[:, 0]
            corr[h2] = l_hit - env_radiance(env, om_f[h2])
        w = np.where(ok, nl / np.maximum(pdf, 1e-300), 0.0)
        L = L + f_s * w[..., None] * corr.reshape(L.shape)
    out[idx] = L.mean(axis=1)
    if nspp > 1:
        var[idx] = L.var(axis=1, ddof=1) / nspp
    return out, hit, var


def path_trace(scene: SdfScene, ray, env: CubeMipChain, cfg: McConfig, t_max: float = 100.0):
    """Reference radiance along ``ray = (origin, direction)``."""
    o, d = ray
    u = _variates(cfg.seed, [0], cfg.spp, 8)
    rgb, _, _ = _radiance_paths(scene, env, np.asarray(o, dtype=float)[None],
                             normalize(np.asarray(d, dtype=float))[None], u, cfg.max_bounces, t_max)
    return rgb[0]


def path_trace_image(scene: SdfScene, camera, width: int, height: int, env: CubeMipChain,
                     cfg: McConfig, threads: int | None = 1, t_max: float = 100.0):
    """Reference image, hit mask and per-pixel variance of the estimate.

    Pixel i draws from its own stream seeded with ``seed ^ i``.
    """
    origins, dirs = camera.rays(width, height)
    n = origins.shape[0]
    chunk = max(1, min(TILE_PIXELS, (1 << 20) // cfg.spp))
    spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def run(span):
        s, e = span
        u = _variates(cfg.seed, range(s, e), cfg.spp, 8)
        return _radiance_paths(scene, env, origins[s:e], dirs[s:e], u, cfg.max_bounces, t_max)

    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        parts = list(pool.map(run, spans))
    rgb = np.concatenate([p[0] for p in parts]).reshape(height, width, 3)
    hit = np.concatenate([p[1] for p in parts]).reshape(height, width)
    var = np.concatenate([p[2] for p in parts]).reshape(height, width, 3)
    return rgb, hit, var


def error_map(img_a, img_b):
    """Per-pixel L2 distance and PSNR of [0,1]-clamped images (99 when identical)."""
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0)
    per_pixel = np.sqrt(np.sum(diff * diff, axis=-1)) if diff.ndim == 3 else np.abs(diff)
    mse = float(np.mean(diff * diff))
    psnr = 99.0 if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))
    return per_pixel, psnr


def relative_error(est, ref, mask=None, floor: float = 1e-3):
    """Per-pixel |est - ref|_1 / |ref|_1 over an optional mask."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    rel = np.abs(est - ref).sum(axis=-1) / np.maximum(np.abs(ref).sum(axis=-1), floor)
    return rel if mask is None else rel[mask]
