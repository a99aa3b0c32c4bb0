"""Analytic SDF scenes and NeuS-style volume rendering along rays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .brdf import Material, normalize

WEIGHT_EPS = 1e-7
OPACITY_EPS = 1e-3


@dataclass(frozen=True)
class Checker:
    albedo: tuple[float, float, float]
    scale: float = 0.25


@dataclass(frozen=True, eq=False)
class Primitive:
    """One SDF primitive in its local frame.

    ``kind`` is sphere (radius), box (half extents), plane (unit normal) or
    torus (major, minor radius; ring in the local xz-plane).
    """

    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    params: tuple = (1.0,)
    material: Material = field(default_factory=Material)
    checker: Checker | None = None
    rotation: np.ndarray | None = None  # world-from-local

    def to_local(self, x):
        p = np.asarray(x, dtype=float) - np.asarray(self.center, dtype=float)
        if self.rotation is not None:
            p = p @ self.rotation  # R^T p for row vectors
        return p

    def distance(self, x):
        p = self.to_local(x)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.params[0]
        if self.kind == "box":
            q = np.abs(p) - np.asarray(self.params, dtype=float)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(np.max(q, axis=-1), 0.0)
        if self.kind == "plane":
            return p @ np.asarray(self.params, dtype=float)
        if self.kind == "torus":
            big, small = self.params
            ring = np.hypot(p[..., 0], p[..., 2]) - big
            return np.hypot(ring, p[..., 1]) - small
        raise ValueError(f"unknown primitive {self.kind!r}")

    def extent(self) -> float:
        if self.kind == "sphere":
            return float(self.params[0])
        if self.kind == "box":
            return float(np.linalg.norm(self.params))
        if self.kind == "torus":
            return float(sum(self.params))
        return 0.0


def sphere(center, radius, material=None, **kw) -> Primitive:
    return Primitive("sphere", tuple(center), (float(radius),), material or Material(), **kw)


def box(center, half_extents, material=None, **kw) -> Primitive:
    return Primitive("box", tuple(center), tuple(float(h) for h in half_extents), material or Material(), **kw)


def plane(point, normal, material=None, **kw) -> Primitive:
    n = normalize(np.asarray(normal, dtype=float))
    return Primitive("plane", tuple(point), tuple(n.tolist()), material or Material(), **kw)


def torus(center, major, minor, material=None, **kw) -> Primitive:
    return Primitive("torus", tuple(center), (float(major), float(minor)), material or Material(), **kw)


@dataclass(frozen=True)
class MarchConfig:
    near: float = 0.5
    far: float = 6.0
    samples: int = 128
    secondary_samples: int = 64

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError("march needs near < far")
        if self.samples < 2 or self.secondary_samples < 2:
            raise ValueError("march needs at least 2 samples")


@dataclass(frozen=True, eq=False)
class SdfScene:
    primitives: tuple = ()
    sigma: float = 500.0
    scale: float | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if self.scale is None:
            ext = [np.linalg.norm(p.center) + p.extent() for p in self.primitives if p.kind != "plane"]
            object.__setattr__(self, "scale", float(max(ext, default=1.0)))

    def closest(self, x):
        """(distance, primitive index) of the union at points ``x``."""
        x = np.asarray(x, dtype=float)
        if not self.primitives:
            return np.full(x.shape[:-1], np.inf), np.full(x.shape[:-1], -1)
        d = np.stack([p.distance(x) for p in self.primitives])
        idx = np.argmin(d, axis=0)
        return np.take_along_axis(d, idx[None], axis=0)[0], idx

    def distance(self, x):
        return self.closest(x)[0]

    def material_arrays(self):
        """Per-primitive (albedo, checker albedo, roughness, metallic)."""
        albedo = np.array([p.material.albedo for p in self.primitives], dtype=float).reshape(-1, 3)
        alt = np.array([p.checker.albedo if p.checker else p.material.albedo for p in self.primitives],
                       dtype=float).reshape(-1, 3)
        rough = np.array([p.material.roughness for p in self.primitives], dtype=float)
        metal = np.array([p.material.metallic for p in self.primitives], dtype=float)
        return albedo, alt, rough, metal

    def checker_mask(self, prim_idx, x):
        """True where a checker primitive shows its second tone."""
        prim_idx = np.asarray(prim_idx)
        out = np.zeros(prim_idx.shape, dtype=bool)
        for i, p in enumerate(self.primitives):
            if p.checker is None:
                continue
            m = prim_idx == i
            if not m.any():
                continue
            cell = np.floor(p.to_local(np.asarray(x)[m]) / p.checker.scale).astype(np.int64)
            out[m] = (cell.sum(axis=-1) % 2) == 1
        return out

    def with_materials(self, materials) -> "SdfScene":
        prims = tuple(Primitive(p.kind, p.center, p.params, m, p.checker, p.rotation)
                      for p, m in zip(self.primitives, materials))
        return SdfScene(prims, self.sigma, self.scale)


def sdf_eval(scene: SdfScene, x):
    """Distance and material at a single point (union CSG)."""
    d, idx = scene.closest(np.asarray(x, dtype=float)[None])
    if idx[0] < 0:
        return float("inf"), Material()
    prim = scene.primitives[idx[0]]
    mat = prim.material
    if prim.checker is not None and scene.checker_mask(idx, np.asarray(x, dtype=float)[None])[0]:
        mat = Material(prim.checker.albedo, mat.roughness, mat.metallic)
    return float(d[0]), mat


def normal_at(scene: SdfScene, x, eps: float | None = None):
    """Central-difference SDF gradient, normalized.

    Returns ``(normals, valid)``; ``valid`` is False where the gradient vanishes.
    """
    x = np.asarray(x, dtype=float)
    h = 1e-4 * scene.scale if eps is None else eps
    g = np.empty(x.shape)
    with np.errstate(invalid="ignore"):
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = scene.distance(x + e) - scene.distance(x - e)
    norm = np.linalg.norm(g, axis=-1)
    valid = np.isfinite(norm) & (norm > 1e-12)
    return normalize(np.where(valid[..., None], g, 0.0)), valid


def neus_alpha(s_i, s_next, sigma):
    """Section opacity from the logistic CDF of consecutive SDF samples."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    cdf_i = expit(np.asarray(s_i, dtype=float) * sigma)
    cdf_n = expit(np.asarray(s_next, dtype=float) * sigma)
    a = (cdf_i - cdf_n) / np.maximum(cdf_i, 1e-300)
    return np.clip(np.where(cdf_i > 0.0, a, 0.0), 0.0, 1.0)


def reflect_dir(d, n):
    d = np.asarray(d, dtype=float)
    n = np.asarray(n, dtype=float)
    return normalize(d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n)


@dataclass(eq=False)
class RayMarchResult:
    """Samples along a batch of rays plus volume-rendered aggregates.

    Dense arrays have shape (R, n) for section edges and (R, n-1) for
    sections; the ``sample_*`` arrays list only sections with weight above
    ``WEIGHT_EPS`` (flattened, ordered by ray then depth).
    """

    origins: np.ndarray
    dirs: np.ndarray
    t_edges: np.ndarray
    sdf: np.ndarray
    t: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    hit_point: np.ndarray
    sample_ray: np.ndarray
    sample_points: np.ndarray
    sample_normals: np.ndarray
    sample_weights: np.ndarray
    sample_prim: np.ndarray
    sample_alt: np.ndarray

    def __len__(self):
        return self.origins.shape[0]


def march_rays(scene: SdfScene, origins, dirs, near, far, n_samples, offsets=None,
               with_samples: bool = True) -> RayMarchResult:
    """Volume-render the SDF along rays with stratified depths.

    ``offsets`` in [0,1) shift every sample of a ray by the same fraction of a
    stratum (0.5 when omitted); ``near``/``far`` may be per-ray arrays.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = normalize(np.atleast_2d(np.asarray(dirs, dtype=float)))
    r = o.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=float), (r,))
    far = np.broadcast_to(np.asarray(far, dtype=float), (r,))
    u = np.full(r, 0.5) if offsets is None else np.asarray(offsets, dtype=float)
    step = (far - near) / n_samples
    t_edges = near[:, None] + (np.arange(n_samples)[None] + u[:, None]) * step[:, None]
    pts = o[:, None, :] + t_edges[..., None] * d[:, None, :]
    s = scene.distance(pts)
    alpha = neus_alpha(s[:, :-1], s[:, 1:], scene.sigma)
    trans = np.cumprod(np.concatenate([np.ones((r, 1)), 1.0 - alpha[:, :-1]], axis=1), axis=1)
    w = trans * alpha
    t_mid = 0.5 * (t_edges[:, :-1] + t_edges[:, 1:])
    opacity = w.sum(axis=1)

    ray_i, samp_i = np.nonzero(w > WEIGHT_EPS) if with_samples else (np.zeros(0, int), np.zeros(0, int))
    sp = o[ray_i] + t_mid[ray_i, samp_i][:, None] * d[ray_i]
    sn, ok = normal_at(scene, sp)
    sn = np.where(ok[:, None], sn, -d[ray_i])
    sw = w[ray_i, samp_i]
    _, prim = scene.closest(sp)
    alt = scene.checker_mask(prim, sp)

    nsum = np.zeros((r, 3))
    for k in range(3):
        nsum[:, k] = np.bincount(ray_i, weights=sw * sn[:, k], minlength=r)
    hit = opacity > OPACITY_EPS
    depth = np.where(hit, (w * t_mid).sum(axis=1) / np.maximum(opacity, 1e-6), far)
    nlen = np.linalg.norm(nsum, axis=1)
    normal = np.where((nlen > 1e-12)[:, None], nsum / np.maximum(nlen, 1e-12)[:, None], -d)
    return RayMarchResult(
        origins=o, dirs=d, t_edges=t_edges, sdf=s, t=t_mid, alpha=alpha, weights=w,
        opacity=opacity, depth=depth, normal=normal, hit_point=o + depth[:, None] * d,
        sample_ray=ray_i, sample_points=sp, sample_normals=sn, sample_weights=sw,
        sample_prim=prim, sample_alt=alt,
    )


def march_ray(scene: SdfScene, origin, direction, config: MarchConfig, offset=None) -> RayMarchResult:
    off = None if offset is None else np.atleast_1d(offset)
    return march_rays(scene, origin, direction, config.near, config.far, config.samples, off)
