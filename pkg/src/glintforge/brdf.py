"""Microfacet BRDF, GGX sampling and the pre-integrated DFG lookup table.

Roughness ``rho`` is remapped to the GGX width as ``alpha = rho**2``.
Vector arguments are numpy arrays with a trailing axis of length 3 and
broadcast against each other.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RHO_MIN = 0.01
RHO_MAX = 1.0
F0_DIELECTRIC = 0.04
_DENOM_EPS = 1e-6
_COS_EPS = 1e-4

LUT_MAGIC = b"DFGL"
LUT_VERSION = 1


class LutBakeError(RuntimeError):
    pass


class LutFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    albedo: tuple[float, float, float] = (0.5, 0.5, 0.5)
    roughness: float = 0.5
    metallic: float = 0.0

    def __post_init__(self):
        a = np.clip(np.asarray(self.albedo, dtype=float).reshape(3), 0.0, 1.0)
        object.__setattr__(self, "albedo", tuple(float(c) for c in a))
        object.__setattr__(self, "roughness", float(np.clip(self.roughness, RHO_MIN, RHO_MAX)))
        object.__setattr__(self, "metallic", float(np.clip(self.metallic, 0.0, 1.0)))


def roughness_to_alpha(rho):
    return np.square(np.clip(rho, RHO_MIN, RHO_MAX))


def dot(a, b):
    return np.sum(np.asarray(a) * np.asarray(b), axis=-1)


def normalize(v):
    v = np.asarray(v, dtype=float)
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / np.maximum(n, 1e-12)


def orthonormal_basis(n):
    """Branchless tangent frame (Duff et al. 2017) around unit vectors ``n``."""
    n = np.asarray(n, dtype=float)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(z >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    t = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    bt = np.stack([b, sign + y * y * a, -y], axis=-1)
    return t, bt


def to_world(local, n):
    t, bt = orthonormal_basis(n)
    return local[..., 0:1] * t + local[..., 1:2] * bt + local[..., 2:3] * np.asarray(n, dtype=float)


def ggx_ndf(alpha, cos_theta_h):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0.0):
        raise ValueError("GGX alpha must be positive")
    c2 = np.square(np.clip(cos_theta_h, 0.0, 1.0))
    a2 = alpha * alpha
    d = c2 * (a2 - 1.0) + 1.0
    return a2 / (np.pi * d * d)


def smith_g1(alpha, cos_theta):
    k = np.asarray(alpha, dtype=float) / 2.0
    c = np.clip(cos_theta, 0.0, 1.0)
    den = c * (1.0 - k) + k
    return np.where(den > 0.0, c / np.maximum(den, 1e-300), 0.0)


def smith_g(alpha, n_dot_v, n_dot_l):
    """Separable Smith shadowing with the Schlick-GGX ``k = alpha/2``."""
    return smith_g1(alpha, n_dot_v) * smith_g1(alpha, n_dot_l)


def fresnel_schlick(f0, cos_term):
    f0 = np.asarray(f0, dtype=float)
    c = np.clip(np.asarray(cos_term, dtype=float), 0.0, 1.0)
    return f0 + (1.0 - f0) * np.power(1.0 - c, 5)[..., None]


def base_reflectance(m, albedo):
    m = np.asarray(m, dtype=float)[..., None]
    return F0_DIELECTRIC * (1.0 - m) + m * np.asarray(albedo, dtype=float)


def eval_brdf(mat: Material, view_dir, light_dir, normal):
    """f_r for ray direction ``view_dir`` (camera to surface) and light ``light_dir``.

    Returns an rgb array; zero where the light is below the hemisphere.
    """
    d = np.asarray(view_dir, dtype=float)
    w = np.asarray(light_dir, dtype=float)
    n = np.asarray(normal, dtype=float)
    albedo = np.asarray(mat.albedo)
    alpha = roughness_to_alpha(mat.roughness)
    n_dot_l = dot(w, n)
    n_dot_v = dot(-d, n)
    h = normalize(w - d)
    D = ggx_ndf(alpha, dot(n, h))
    F = fresnel_schlick(base_reflectance(mat.metallic, albedo), dot(w, h))
    G = smith_g(alpha, n_dot_v, n_dot_l)
    den = 4.0 * np.maximum(np.abs(n_dot_v), _DENOM_EPS) * np.maximum(np.abs(n_dot_l), _DENOM_EPS)
    spec = (D * G / den)[..., None] * F
    diffuse = (1.0 - mat.metallic) * albedo / np.pi
    out = diffuse + spec
    return np.where((n_dot_l > 0.0)[..., None], out, 0.0)


def sample_ggx(alpha, normal, u1, u2):
    """GGX half-vector sampling around ``normal``; pdf is over half-vectors."""
    alpha = np.asarray(alpha, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    # tan^2 = a^2 u/(1-u)  <=>  cos^2 = (1-u)/(1 + (a^2-1) u)
    cos2 = (1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1)
    cos_t = np.sqrt(np.clip(cos2, 0.0, 1.0))
    sin_t = np.sqrt(np.clip(1.0 - cos2, 0.0, 1.0))
    phi = 2.0 * np.pi * u2
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)
    normal = np.asarray(normal, dtype=float)
    shape = np.broadcast_shapes(local.shape, normal.shape)
    h = to_world(np.broadcast_to(local, shape), np.broadcast_to(normal, shape))
    pdf = ggx_ndf(alpha, cos_t) * cos_t
    return h, pdf


def stratified_samples(n: int, rng: np.random.Generator):
    """Latin-hypercube point set in [0,1)^2 (both marginals stratified)."""
    u1 = (np.arange(n) + rng.random(n)) / n
    u2 = (rng.permutation(n) + rng.random(n)) / n
    return u1, u2


def dfg_integrals(n_dot_d, rho, u1, u2):
    """Monte Carlo estimate of (F1, F2) for each (n_dot_d, rho) pair.

    ``n_dot_d`` and ``rho`` have shape (K,), the sample set (N,); returns (K, 2).
    """
    nv = np.maximum(np.asarray(n_dot_d, dtype=float), _COS_EPS)[:, None]
    alpha = roughness_to_alpha(np.asarray(rho, dtype=float))[:, None]
    cos2 = (1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1)
    nh = np.sqrt(np.clip(cos2, 0.0, 1.0))
    sh = np.sqrt(np.clip(1.0 - cos2, 0.0, 1.0))
    phi = 2.0 * np.pi * u2
    # normal = +z, outgoing v in the xz-plane
    vx = np.sqrt(1.0 - nv * nv)
    vh = vx * sh * np.cos(phi) + nv * nh
    nl = 2.0 * vh * nh - nv
    ok = (nl > 0.0) & (vh > 0.0)
    g = smith_g(alpha, nv, np.where(ok, nl, 0.0))
    g_vis = np.where(ok, g * vh / np.maximum(nh * nv, 1e-12), 0.0)
    fc = np.power(1.0 - np.clip(vh, 0.0, 1.0), 5)
    f1 = np.mean((1.0 - fc) * g_vis, axis=1)
    f2 = np.mean(fc * g_vis, axis=1)
    return np.stack([f1, f2], axis=-1)


@dataclass(frozen=True, eq=False)
class DfgLut:
    """(F1, F2) over a square grid; ``table[i_rho, i_cos]`` with cosine fastest."""

    table: np.ndarray = field(repr=False)
    samples: int = 0

    @property
    def resolution(self) -> int:
        return self.table.shape[0]

    def cos_grid(self):
        return np.linspace(0.0, 1.0, self.resolution)

    def rho_grid(self):
        return np.linspace(RHO_MIN, RHO_MAX, self.resolution)


def bake_dfg_lut(resolution: int = 64, samples_per_entry: int = 4096, seed: int = 0,
                 threads: int | None = 1) -> DfgLut:
    if resolution < 2:
        raise ValueError("LUT resolution must be >= 2")
    if samples_per_entry < 64:
        raise ValueError("LUT bake needs >= 64 samples per entry")
    u1, u2 = stratified_samples(samples_per_entry, np.random.default_rng(seed))
    cos = np.linspace(0.0, 1.0, resolution)
    rhos = np.linspace(RHO_MIN, RHO_MAX, resolution)

    def row(i):
        return dfg_integrals(cos, np.full(resolution, rhos[i]), u1[None], u2[None])

    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        rows = list(pool.map(row, range(resolution)))
    table = np.stack(rows).astype(np.float32)

    bad = (table < 0.0) | (table > 1.0)
    over = table.sum(axis=-1) > 1.0 + 1e-2
    if bad.any() or over.any():
        i, j = np.argwhere(bad.any(axis=-1) | over)[0]
        raise LutBakeError(
            f"DFG entry (rho={rhos[i]:.4f}, n.d={cos[j]:.4f}) out of bounds: {table[i, j].tolist()}")
    return DfgLut(table=table, samples=samples_per_entry)


def lookup_dfg(lut: DfgLut, n_dot_d, rho):
    """Bilinear (F1, F2) lookup; returns an array of shape ``(..., 2)``."""
    r = lut.resolution
    fx = np.clip(np.asarray(n_dot_d, dtype=float), 0.0, 1.0) * (r - 1)
    fy = (np.clip(np.asarray(rho, dtype=float), RHO_MIN, RHO_MAX) - RHO_MIN) / (RHO_MAX - RHO_MIN) * (r - 1)
    fx, fy = np.broadcast_arrays(fx, fy)
    x0 = np.clip(np.floor(fx).astype(int), 0, r - 2)
    y0 = np.clip(np.floor(fy).astype(int), 0, r - 2)
    tx = (fx - x0)[..., None]
    ty = (fy - y0)[..., None]
    t = lut.table
    top = t[y0, x0] * (1.0 - tx) + t[y0, x0 + 1] * tx
    bot = t[y0 + 1, x0] * (1.0 - tx) + t[y0 + 1, x0 + 1] * tx
    return top * (1.0 - ty) + bot * ty


def save_lut(lut: DfgLut, path) -> None:
    r = lut.resolution
    payload = np.ascontiguousarray(lut.table, dtype="<f4").tobytes()
    Path(path).write_bytes(LUT_MAGIC + bytes([LUT_VERSION]) + struct.pack("<I", r) + payload)


def load_lut(path) -> DfgLut:
    raw = Path(path).read_bytes()
    if raw[:4] != LUT_MAGIC:
        raise LutFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 9 or raw[4] != LUT_VERSION:
        raise LutFormatError(f"{path}: unsupported version")
    (r,) = struct.unpack("<I", raw[5:9])
    need = 9 + r * r * 2 * 4
    if r < 2 or len(raw) != need:
        raise LutFormatError(f"{path}: expected {need} bytes for resolution {r}, got {len(raw)}")
    table = np.frombuffer(raw[9:], dtype="<f4").reshape(r, r, 2).astype(np.float32)
    return DfgLut(table=table)
