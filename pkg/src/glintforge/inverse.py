"""Per-primitive material estimation from rendered views.

Geometry and light lookups do not depend on the materials, so each view is
marched once and cached; a loss evaluation only re-runs the split-sum
combine and compositing.  Gradients are central finite differences and the
optimizer is Adam with projection onto the parameter box.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .brdf import RHO_MAX, RHO_MIN, Material
from .envlight import blend_levels, diffuse_irradiance, mip_level_stack
from .geometry import OPACITY_EPS, MarchConfig, SdfScene, march_rays, reflect_dir
from .shading import (MaterialTable, ShadingContext, background_radiance, composite, pixel_roughness,
                      split_sum_terms, trace_secondary, view_cosine)

FIELDS = ("albedo_r", "albedo_g", "albedo_b", "roughness", "metallic")
FD_STEP = 1e-3


class OptimizationAborted(RuntimeError):
    pass


@dataclass(eq=False)
class ParamVector:
    """Flat [r, g, b, roughness, metallic] block per primitive, box-constrained."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size % 5:
            raise ValueError("parameter vector length must be a multiple of 5")
        self.values = v

    @property
    def n_primitives(self) -> int:
        return self.values.size // 5

    @staticmethod
    def index(prim: int, name: str) -> int:
        return 5 * prim + FIELDS.index(name)

    def lower(self):
        return np.tile([0.0, 0.0, 0.0, RHO_MIN, 0.0], self.n_primitives)

    def upper(self):
        return np.tile([1.0, 1.0, 1.0, RHO_MAX, 1.0], self.n_primitives)

    def projected(self) -> "ParamVector":
        return ParamVector(np.clip(self.values, self.lower(), self.upper()))

    def in_box(self) -> bool:
        return bool(np.all(self.values >= self.lower()) and np.all(self.values <= self.upper()))

    def blocks(self):
        return self.values.reshape(-1, 5)

    def albedos(self):
        return self.blocks()[:, :3]

    def materials(self) -> list[Material]:
        return [Material(tuple(b[:3]), b[3], b[4]) for b in self.blocks()]

    @classmethod
    def from_materials(cls, materials) -> "ParamVector":
        return cls(np.concatenate([[*m.albedo, m.roughness, m.metallic] for m in materials]))

    @classmethod
    def uniform(cls, n_primitives: int, albedo=0.5, roughness=0.5, metallic=0.5) -> "ParamVector":
        return cls(np.tile([albedo, albedo, albedo, roughness, metallic], n_primitives)).projected()

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy())


@dataclass(eq=False)
class AdamState:
    size: int
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def step(self, grad):
        """Return the parameter update for ``grad`` and advance the moments."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(eq=False)
class _SampleSet:
    ray: np.ndarray
    weight: np.ndarray
    prim: np.ndarray
    alt: np.ndarray
    cos: np.ndarray
    l_d: np.ndarray
    l_stack: np.ndarray


@dataclass(eq=False)
class ViewCache:
    """Material-independent quantities of one view."""

    shape: tuple
    opacity: np.ndarray
    background: np.ndarray
    primary: _SampleSet
    sec_index: np.ndarray
    sec_opacity: np.ndarray
    secondary: _SampleSet
    target: np.ndarray


@dataclass(eq=False)
class InverseData:
    scene: SdfScene
    views: list

    def __post_init__(self):
        if not self.views:
            raise ValueError("need at least one view")


def _samples(ctx, ray, weight, prim, alt, view, normal):
    return _SampleSet(ray, weight, prim, alt, view_cosine(view, normal),
                      diffuse_irradiance(ctx.env, normal),
                      mip_level_stack(ctx.env, reflect_dir(view, normal)))


def prepare_view(ctx: ShadingContext, scene: SdfScene, camera, target, march: MarchConfig) -> ViewCache:
    target = np.asarray(target, dtype=float)
    h, w = target.shape[:2]
    origins, dirs = camera.rays(w, h)
    pr = march_rays(scene, origins, dirs, march.near, march.far, march.samples)
    prim = _samples(ctx, pr.sample_ray, pr.sample_weights, pr.sample_prim, pr.sample_alt,
                    pr.dirs[pr.sample_ray], pr.sample_normals)
    # secondary rays for every hit; the roughness indicator is applied per evaluation
    if ctx.traces_secondary:
        idx = np.nonzero(pr.opacity > OPACITY_EPS)[0]
    else:
        idx = np.zeros(0, dtype=int)
    sh = trace_secondary(scene, pr, idx, march)
    sec = _samples(ctx, np.arange(len(idx)), np.ones(len(idx)), sh.prim, sh.alt, sh.dirs, sh.normal)
    return ViewCache((h, w), pr.opacity, background_radiance(ctx, pr.dirs), prim, idx, sh.opacity, sec,
                     target.reshape(-1, 3))


def prepare(ctx: ShadingContext, scene: SdfScene, cameras, targets, march: MarchConfig,
            threads: int | None = 1) -> InverseData:
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        views = list(pool.map(lambda ct: prepare_view(ctx, scene, ct[0], ct[1], march), zip(cameras, targets)))
    return InverseData(scene, views)


def _material_table(data: InverseData, params: ParamVector) -> MaterialTable:
    b = params.blocks()
    if b.shape[0] != len(data.scene.primitives):
        raise ValueError(f"{b.shape[0]} parameter blocks for {len(data.scene.primitives)} primitives")
    _, alt, _, _ = data.scene.material_arrays()
    return MaterialTable(b[:, :3], alt, b[:, 3], b[:, 4])


def _terms(ctx, mats: MaterialTable, s: _SampleSet):
    albedo, rough, metal = mats.lookup(s.prim, s.alt)
    return split_sum_terms(ctx.lut, albedo, rough, metal, s.cos, s.l_d, blend_levels(s.l_stack, rough)), rough


def render_view(params: ParamVector, view: ViewCache, ctx: ShadingContext, data: InverseData):
    mats = _material_table(data, params)
    n = view.opacity.shape[0]
    p = view.primary
    terms, rough = _terms(ctx, mats, p)
    rho = pixel_roughness(n, p.ray, p.weight, rough, view.opacity)
    sec = {}
    if len(view.sec_index):
        (ld, ls, _), _ = _terms(ctx, mats, view.secondary)
        sec = dict(sec_index=view.sec_index, sec_opacity=view.sec_opacity, sec_radiance=ld + ls)
    _, _, rgb = composite(ctx, n, p.ray, p.weight, view.opacity, rho, terms, background=view.background, **sec)
    return rgb.reshape(*view.shape, 3)


def photometric_loss(params: ParamVector, data: InverseData, ctx: ShadingContext) -> float:
    """Mean squared error over all pixels, channels and views."""
    total, count = 0.0, 0
    for view in data.views:
        diff = render_view(params, view, ctx, data).reshape(-1, 3) - view.target
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def loss_gradient(params: ParamVector, data: InverseData, ctx: ShadingContext, h: float = FD_STEP,
                  free=None, threads: int | None = 1):
    """Central differences; one-sided at the box boundary.  ``free`` masks coordinates.

    A coordinate whose loss is no larger than at both central neighbours sits
    at a sampled minimum and reports zero, so Adam's scale-free step does not
    amplify the O(h^2) asymmetry of the difference quotient there.
    """
    x = params.values
    lo, hi = params.lower(), params.upper()
    coords = np.nonzero(np.ones(x.size, bool) if free is None else np.asarray(free, bool))[0]
    base = photometric_loss(params, data, ctx) if coords.size else None

    def f(v):
        return photometric_loss(ParamVector(v), data, ctx)

    def coord(i):
        up, dn = x.copy(), x.copy()
        if x[i] + h > hi[i]:
            dn[i] -= h
            return (base - f(dn)) / h
        if x[i] - h < lo[i]:
            up[i] += h
            return (f(up) - base) / h
        up[i] += h
        dn[i] -= h
        fu, fd = f(up), f(dn)
        if base <= min(fu, fd):
            return 0.0
        return (fu - fd) / (2.0 * h)

    g = np.zeros(x.size)
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        g[coords] = list(pool.map(coord, coords))
    return g


@dataclass
class OptimizeResult:
    params: ParamVector
    losses: list
    iterations: int
    aborted: bool = False


def optimize(initial: ParamVector, data: InverseData, ctx: ShadingContext, iters: int,
             lr: float = 0.05, free=None, threads: int | None = 1, callback=None) -> OptimizeResult:
    """Adam with box projection; ``losses[k]`` is the loss before step k.

    A non-finite loss stops the run and returns the last finite parameters.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    params = initial.projected()
    adam = AdamState(params.values.size, lr=lr)
    losses = []
    for k in range(iters):
        loss = photometric_loss(params, data, ctx)
        if not np.isfinite(loss):
            return OptimizeResult(params, losses, k, aborted=True)
        losses.append(loss)
        grad = loss_gradient(params, data, ctx, free=free, threads=threads)
        if not np.all(np.isfinite(grad)):
            return OptimizeResult(params, losses, k, aborted=True)
        params = ParamVector(params.values + adam.step(grad)).projected()
        if callback is not None:
            callback(k, loss, params)
    return OptimizeResult(params, losses, iters)


def align_channels(pred, gt):
    """Per-channel least-squares scale of ``pred`` onto ``gt``; returns (aligned, scales)."""
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    pc = p.reshape(-1, p.shape[-1])
    gc = g.reshape(-1, g.shape[-1])
    den = np.sum(pc * pc, axis=0)
    scales = np.where(den > 0.0, np.sum(pc * gc, axis=0) / np.where(den > 0.0, den, 1.0), 1.0)
    return p * scales, scales
