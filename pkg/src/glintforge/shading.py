"""Split-sum shading, volume-rendered pixels and second split-sum relighting."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .brdf import RHO_MIN, DfgLut, Material, base_reflectance, lookup_dfg
from .envlight import CubeMipChain, diffuse_irradiance, sample_mip
from .geometry import OPACITY_EPS, MarchConfig, RayMarchResult, SdfScene, march_rays, reflect_dir

TILE_ROWS = 8


@dataclass(frozen=True, eq=False)
class ShadingContext:
    env: CubeMipChain
    lut: DfgLut
    rho_t: float = 0.3
    indirect: bool = True
    background: str = "env"

    def __post_init__(self):
        # rho_t = 0 is allowed and switches secondary tracing off
        if not 0.0 <= self.rho_t < 1.0:
            raise ValueError("rho_t must lie in [0, 1)")
        if self.background not in ("env", "black"):
            raise ValueError(f"unknown background mode {self.background!r}")

    @property
    def traces_secondary(self) -> bool:
        return self.indirect and self.rho_t > RHO_MIN


def split_sum_terms(lut: DfgLut, albedo, rough, metal, cos, l_d, l_s):
    """Combine looked-up light integrals with a material.

    Returns ``(c_d, c_s, k_s)`` where ``k_s = F0*F1 + F2`` is the pre-integrated
    specular BSDF and ``c_s = k_s * l_s``.
    """
    albedo = np.asarray(albedo, dtype=float)
    metal = np.asarray(metal, dtype=float)
    c_d = (1.0 - metal)[..., None] * albedo * l_d
    f12 = lookup_dfg(lut, cos, rough)
    k_s = base_reflectance(metal, albedo) * f12[..., 0:1] + f12[..., 1:2]
    return c_d, k_s * l_s, k_s


def view_cosine(view_dir, normal):
    return np.clip(-np.sum(view_dir * normal, axis=-1), 0.0, 1.0)


def shade_points(ctx: ShadingContext, albedo, rough, metal, view_dir, normal):
    """Vectorized split-sum shading; see ``split_sum_terms`` for the outputs."""
    l_d = diffuse_irradiance(ctx.env, normal)
    l_s = sample_mip(ctx.env, reflect_dir(view_dir, normal), rough)
    return split_sum_terms(ctx.lut, albedo, rough, metal, view_cosine(view_dir, normal), l_d, l_s)


def shade_sample(ctx: ShadingContext, mat: Material, x, view_dir, normal):
    """(c_d, c_s) for one local surface sample."""
    c_d, c_s, _ = shade_points(ctx, np.asarray(mat.albedo), np.asarray(mat.roughness),
                               np.asarray(mat.metallic), np.asarray(view_dir, dtype=float),
                               np.asarray(normal, dtype=float))
    return c_d, c_s


def relight_light_integral(ctx: ShadingContext, rho, O, l_s, L_ind):
    """Blend the specular light integral with traced indirect light below rho_t."""
    rho = np.asarray(rho, dtype=float)[..., None]
    O = np.asarray(O, dtype=float)[..., None]
    l_s = np.asarray(l_s, dtype=float)
    blended = (1.0 - O) * l_s + O * np.asarray(L_ind, dtype=float)
    return np.where(rho > ctx.rho_t, l_s, blended)


@dataclass(eq=False)
class MaterialTable:
    """Per-primitive material arrays used by the shading pass."""

    albedo: np.ndarray
    alt_albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray

    @classmethod
    def from_scene(cls, scene: SdfScene) -> "MaterialTable":
        return cls(*scene.material_arrays())

    def lookup(self, prim, alt):
        a = np.where(np.asarray(alt)[..., None], self.alt_albedo[prim], self.albedo[prim])
        return a, self.roughness[prim], self.metallic[prim]


@dataclass(eq=False)
class SecondaryHits:
    """Reflected rays from expected intersections of a subset of primary rays."""

    ray_index: np.ndarray
    dirs: np.ndarray
    opacity: np.ndarray
    hit_point: np.ndarray
    normal: np.ndarray
    prim: np.ndarray
    alt: np.ndarray


def trace_secondary(scene: SdfScene, primary: RayMarchResult, ray_index, march: MarchConfig) -> SecondaryHits:
    ray_index = np.asarray(ray_index, dtype=int)
    n = primary.normal[ray_index]
    d2 = reflect_dir(primary.dirs[ray_index], n)
    origin = primary.hit_point[ray_index] + 1e-3 * scene.scale * n
    if len(ray_index) == 0:
        z = np.zeros((0, 3))
        return SecondaryHits(ray_index, z, np.zeros(0), z, z, np.zeros(0, int), np.zeros(0, bool))
    sec = march_rays(scene, origin, d2, 0.0, march.far - march.near, march.secondary_samples)
    _, prim = scene.closest(sec.hit_point)
    alt = scene.checker_mask(prim, sec.hit_point)
    return SecondaryHits(ray_index, d2, sec.opacity, sec.hit_point, sec.normal, prim, alt)


def _per_ray_sum(ray, values, n_rays):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.bincount(ray, weights=values, minlength=n_rays)
    return np.stack([np.bincount(ray, weights=values[:, k], minlength=n_rays)
                     for k in range(values.shape[1])], axis=1)


def pixel_roughness(n_rays, sample_ray, sample_w, sample_rough, opacity):
    """Volume-rendered roughness, normalized by opacity."""
    num = _per_ray_sum(sample_ray, sample_w * sample_rough, n_rays)
    return np.where(opacity > OPACITY_EPS, num / np.maximum(opacity, 1e-6), 1.0)


def composite(ctx: ShadingContext, n_rays, sample_ray, sample_w, opacity, rho, terms,
              sec_index=None, sec_opacity=None, sec_radiance=None, background=None):
    """Volume-render per-sample terms into pixels and apply the indirect blend.

    ``terms`` is the ``(c_d, c_s, k_s)`` triple of the primary samples;
    ``sec_radiance`` holds L_ind for the rays listed in ``sec_index``.
    """
    c_d, c_s, k_s = terms
    w = sample_w[:, None]
    C_d = _per_ray_sum(sample_ray, w * c_d, n_rays)
    C_s = _per_ray_sum(sample_ray, w * c_s, n_rays)
    if sec_index is not None and len(sec_index) and ctx.indirect:
        K_s = _per_ray_sum(sample_ray, w * k_s, n_rays)[sec_index]
        # C_s = K_s * l_s per sample, so blending C_s with K_s * L_ind applies the
        # relit light integral under the same volume-rendering weights
        C_s[sec_index] = relight_light_integral(ctx, rho[sec_index], sec_opacity, C_s[sec_index],
                                                K_s * sec_radiance)
    bg = 0.0 if background is None else (1.0 - opacity)[:, None] * background
    return C_d, C_s, C_d + C_s + bg


def background_radiance(ctx: ShadingContext, dirs):
    if ctx.background == "env":
        return sample_mip(ctx.env, dirs, RHO_MIN)
    return np.zeros(np.shape(dirs))


def shade_primary(ctx: ShadingContext, primary: RayMarchResult, mats: MaterialTable,
                  secondary: SecondaryHits | None = None):
    """Composite radiance and auxiliaries for a marched ray batch.

    Returns a dict with ``rgb``, ``diffuse``, ``specular``, ``normal``,
    ``roughness`` and ``opacity`` arrays (one row per ray).
    """
    r = len(primary)
    ray = primary.sample_ray
    albedo, rough, metal = mats.lookup(primary.sample_prim, primary.sample_alt)
    terms = shade_points(ctx, albedo, rough, metal, primary.dirs[ray], primary.sample_normals)
    O = primary.opacity
    rho = pixel_roughness(r, ray, primary.sample_weights, rough, O)
    sec = {}
    if secondary is not None and len(secondary.ray_index):
        a2, r2, m2 = mats.lookup(secondary.prim, secondary.alt)
        ld, ls, _ = shade_points(ctx, a2, r2, m2, secondary.dirs, secondary.normal)
        sec = dict(sec_index=secondary.ray_index, sec_opacity=secondary.opacity, sec_radiance=ld + ls)
    C_d, C_s, rgb = composite(ctx, r, ray, primary.sample_weights, O, rho, terms,
                              background=background_radiance(ctx, primary.dirs), **sec)
    hit = O > OPACITY_EPS
    return {
        "rgb": rgb,
        "diffuse": C_d,
        "specular": C_s,
        "normal": np.where(hit[:, None], primary.normal, 0.0),
        "roughness": np.where(hit, rho, 0.0),
        "opacity": O,
    }


def render_rays(ctx: ShadingContext, scene: SdfScene, origins, dirs, march: MarchConfig,
                offsets=None, mats: MaterialTable | None = None):
    mats = mats or MaterialTable.from_scene(scene)
    primary = march_rays(scene, origins, dirs, march.near, march.far, march.samples, offsets)
    secondary = None
    if ctx.traces_secondary:
        rho = pixel_roughness(len(primary), primary.sample_ray, primary.sample_weights,
                              mats.roughness[primary.sample_prim], primary.opacity)
        need = np.nonzero((primary.opacity > OPACITY_EPS) & (rho <= ctx.rho_t))[0]
        secondary = trace_secondary(scene, primary, need, march)
    return shade_primary(ctx, primary, mats, secondary)


def render_pixel(ctx: ShadingContext, scene: SdfScene, origin, direction, march: MarchConfig):
    out = render_rays(ctx, scene, np.atleast_2d(origin), np.atleast_2d(direction), march)
    return out["rgb"][0]


@dataclass(eq=False)
class RenderResult:
    rgb: np.ndarray
    diffuse: np.ndarray
    specular: np.ndarray
    normal: np.ndarray
    roughness: np.ndarray
    opacity: np.ndarray


def tile_offsets(seed, tile: int, n: int):
    return np.random.default_rng([int(seed), tile]).random(n)


def render_image(ctx: ShadingContext, scene: SdfScene, camera, width: int, height: int,
                 march: MarchConfig, seed: int | None = None, threads: int | None = 1,
                 mats: MaterialTable | None = None) -> RenderResult:
    """Render an image; with a seed every ray's samples get a seeded stratum offset.

    Work is split into fixed row tiles with their own RNG stream, so the
    result does not depend on the thread count.
    """
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be >= 1")
    origins, dirs = camera.rays(width, height)
    mats = mats or MaterialTable.from_scene(scene)
    tiles = [(i, slice(r0 * width, min(r0 + TILE_ROWS, height) * width))
             for i, r0 in enumerate(range(0, height, TILE_ROWS))]

    def run(item):
        i, sl = item
        n = sl.stop - sl.start
        off = None if seed is None else tile_offsets(seed, i, n)
        return render_rays(ctx, scene, origins[sl], dirs[sl], march, off, mats)

    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        parts = list(pool.map(run, tiles))
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    shape3 = (height, width, 3)
    return RenderResult(
        rgb=cat["rgb"].reshape(shape3), diffuse=cat["diffuse"].reshape(shape3),
        specular=cat["specular"].reshape(shape3), normal=cat["normal"].reshape(shape3),
        roughness=cat["roughness"].reshape(height, width), opacity=cat["opacity"].reshape(height, width),
    )


def tone_map_srgb(hdr):
    x = np.clip(np.asarray(hdr, dtype=float), 0.0, 1.0)
    return np.floor(255.0 * np.power(x, 1.0 / 2.2) + 0.5).astype(np.uint8)
