"""Environment light: PFM ingestion, cube maps and the GGX-prefiltered mip chain.

Cube faces are ordered +x, -x, +y, -y, +z, -z and use the OpenGL cube-map
basis; texel (u, v) in [0,1]^2 with v growing downwards.  Face arrays are
indexed ``[face, row(v), col(u), rgb]``.
"""

from __future__ import annotations

import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .brdf import (RHO_MAX, RHO_MIN, ggx_ndf, normalize, roughness_to_alpha, sample_ggx,
                   stratified_samples)

CMIP_MAGIC = b"CMIP"
CMIP_VERSION = 1


class PfmFormatError(ValueError):
    pass


class MipFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EquirectImage:
    """Lat-long radiance; row 0 is +90 degrees latitude (+y)."""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("equirect radiance must be finite and non-negative")
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


# --- PFM ---------------------------------------------------------------------

_PFM_HEADER = re.compile(rb"\A(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path) -> np.ndarray:
    """Color PFM to a float32 (H, W, 3) array with row 0 at the top."""
    raw = Path(path).read_bytes()
    m = _PFM_HEADER.match(raw)
    if not m:
        raise PfmFormatError(f"{path}: malformed PFM header")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
    if tag == b"Pf":
        raise PfmFormatError(f"{path}: grayscale PFM ('Pf') not supported, need 'PF'")
    try:
        scale = float(scale)
    except ValueError:
        raise PfmFormatError(f"{path}: bad scale field {scale!r}") from None
    if scale == 0.0 or w <= 0 or h <= 0:
        raise PfmFormatError(f"{path}: bad dimensions or scale")
    need = w * h * 3 * 4
    body = raw[m.end():]
    if len(body) < need:
        raise PfmFormatError(f"{path}: truncated payload, expected {need} bytes, got {len(body)}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(body[:need], dtype=dtype).reshape(h, w, 3)
    # PFM stores the bottom row first
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


def write_pfm(path, image) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> EquirectImage:
    return EquirectImage(read_pfm(path))


# --- directions ----------------------------------------------------------------

def face_uv_to_dir(face, u, v):
    sc = 2.0 * np.asarray(u, dtype=float) - 1.0
    tc = 2.0 * np.asarray(v, dtype=float) - 1.0
    face, sc, tc = np.broadcast_arrays(np.asarray(face), sc, tc)
    one = np.ones_like(sc)
    table = [
        (one, -tc, -sc),   # +x
        (-one, -tc, sc),   # -x
        (sc, one, tc),     # +y
        (sc, -one, -tc),   # -y
        (sc, -tc, one),    # +z
        (-sc, -tc, -one),  # -z
    ]
    out = np.zeros(sc.shape + (3,))
    for f, (x, y, z) in enumerate(table):
        m = face == f
        out[m] = np.stack(np.broadcast_arrays(x, y, z), axis=-1)[m]
    return normalize(out)


def dir_to_face_uv(d):
    """Direction to (face, u, v) with u, v in [0, 1]."""
    d = np.asarray(d, dtype=float)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
    use_x = (ax >= ay) & (ax >= az)
    use_y = ~use_x & (ay >= az)
    use_z = ~use_x & ~use_y
    face = np.where(use_x, np.where(x > 0, 0, 1), np.where(use_y, np.where(y > 0, 2, 3), np.where(z > 0, 4, 5)))
    ma = np.where(use_x, ax, np.where(use_y, ay, az))
    ma = np.maximum(ma, 1e-30)
    sc = np.select([face == 0, face == 1, face == 2, face == 3, face == 4], [-z, z, x, x, x], -x)
    tc = np.select([face == 0, face == 1, face == 2, face == 3, face == 4], [-y, -y, z, -z, -y], -y)
    u = 0.5 * (sc / ma + 1.0)
    v = 0.5 * (tc / ma + 1.0)
    return face, u, v


def texel_directions(size: int):
    """Unit directions through every texel center, shape (6, size, size, 3)."""
    c = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(c, c, indexing="ij")
    faces = np.arange(6)[:, None, None]
    return face_uv_to_dir(faces, u[None], v[None])


def texel_solid_angles(size: int):
    """Exact solid angle of each texel, shape (6, size, size)."""
    e = np.linspace(-1.0, 1.0, size + 1)

    def area(x, y):
        return np.arctan2(x * y, np.sqrt(x * x + y * y + 1.0))

    x0, x1 = e[:-1][None, :], e[1:][None, :]
    y0, y1 = e[:-1][:, None], e[1:][:, None]
    sa = area(x0, y0) - area(x0, y1) - area(x1, y0) + area(x1, y1)
    return np.broadcast_to(np.abs(sa), (6, size, size)).copy()


def direction_to_equirect_uv(d):
    """Lat-long coordinates: u follows longitude atan2(x, -z), v=0 at +y."""
    d = normalize(d)
    u = 0.5 + np.arctan2(d[..., 0], -d[..., 2]) / (2.0 * np.pi)
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    return u, v


def equirect_uv_to_direction(u, v):
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    phi = (u - 0.5) * 2.0 * np.pi
    theta = v * np.pi
    s = np.sin(theta)
    return np.stack([s * np.sin(phi), np.cos(theta), -s * np.cos(phi)], axis=-1)


def sample_equirect(img: EquirectImage, d):
    u, v = direction_to_equirect_uv(d)
    h, w = img.height, img.width
    fx = u * w - 0.5
    fy = np.clip(v * h - 0.5, 0.0, h - 1)
    x0 = np.floor(fx).astype(int)
    y0 = np.minimum(np.floor(fy).astype(int), h - 2) if h > 1 else np.zeros_like(fx, dtype=int)
    tx = (fx - x0)[..., None]
    ty = (fy - y0)[..., None] if h > 1 else np.zeros_like(tx)
    y1 = np.minimum(y0 + 1, h - 1)
    xa, xb = x0 % w, (x0 + 1) % w
    p = img.pixels.astype(float)
    top = p[y0, xa] * (1 - tx) + p[y0, xb] * tx
    bot = p[y1, xa] * (1 - tx) + p[y1, xb] * tx
    return top * (1 - ty) + bot * ty


def equirect_to_cube(img: EquirectImage, face_size: int) -> np.ndarray:
    if face_size < 4:
        raise ValueError("face_size must be >= 4")
    dirs = texel_directions(face_size)
    return sample_equirect(img, dirs).astype(np.float32)


# --- mip chain -----------------------------------------------------------------

def level_roughness(levels: int) -> np.ndarray:
    return RHO_MIN + (RHO_MAX - RHO_MIN) * np.arange(levels) / (levels - 1)


def sample_face_bilinear(faces, face, u, v):
    """Bilinear lookup in a (6, S, S, 3) face stack, clamped at face edges."""
    s = faces.shape[1]
    fx = np.clip(np.asarray(u) * s - 0.5, 0.0, s - 1)
    fy = np.clip(np.asarray(v) * s - 0.5, 0.0, s - 1)
    if s == 1:
        return faces[face, 0, 0].astype(float)
    x0 = np.minimum(np.floor(fx).astype(int), s - 2)
    y0 = np.minimum(np.floor(fy).astype(int), s - 2)
    tx = (fx - x0)[..., None]
    ty = (fy - y0)[..., None]
    f = faces
    top = f[face, y0, x0] * (1 - tx) + f[face, y0, x0 + 1] * tx
    bot = f[face, y0 + 1, x0] * (1 - tx) + f[face, y0 + 1, x0 + 1] * tx
    return (top * (1 - ty) + bot * ty).astype(float)


def sample_cube(faces, d):
    face, u, v = dir_to_face_uv(d)
    return sample_face_bilinear(faces, face, u, v)


@dataclass(frozen=True, eq=False)
class CubeMipChain:
    levels: tuple = field(repr=False)

    def __post_init__(self):
        lv = tuple(np.ascontiguousarray(x, dtype=np.float32) for x in self.levels)
        if len(lv) < 2:
            raise ValueError("mip chain needs at least 2 levels")
        s = lv[0].shape[1]
        for i, x in enumerate(lv):
            if x.shape != (6, max(s >> i, 1), max(s >> i, 1), 3):
                raise ValueError(f"level {i} has shape {x.shape}")
        object.__setattr__(self, "levels", lv)

    @property
    def face_size(self) -> int:
        return self.levels[0].shape[1]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def roughness(self) -> np.ndarray:
        return level_roughness(self.n_levels)

    def level_mean(self, level: int) -> np.ndarray:
        """Solid-angle weighted mean radiance of one level."""
        f = self.levels[level].astype(float)
        sa = texel_solid_angles(f.shape[1])
        return np.sum(f * sa[..., None], axis=(0, 1, 2)) / (4.0 * np.pi)

    def scaled(self, k: float) -> "CubeMipChain":
        return CubeMipChain(tuple(x * np.float32(k) for x in self.levels))


def constant_chain(value, face_size: int = 8, levels: int = 5) -> CubeMipChain:
    c = np.broadcast_to(np.asarray(value, dtype=np.float32), (3,))
    return CubeMipChain(tuple(np.broadcast_to(c, (6, max(face_size >> i, 1), max(face_size >> i, 1), 3)).copy()
                              for i in range(levels)))


def _pool(faces):
    """2x2 solid-angle weighted average, so each level keeps the radiant energy."""
    s = faces.shape[1]
    if s == 1:
        return faces
    sa = texel_solid_angles(s)[..., None]
    num = (faces * sa).reshape(6, s // 2, 2, s // 2, 2, 3).sum(axis=(2, 4))
    den = sa.reshape(6, s // 2, 2, s // 2, 2, 1).sum(axis=(2, 4))
    return num / den


def _pyramid(base):
    pyr = [base.astype(float)]
    while pyr[-1].shape[1] > 1:
        pyr.append(_pool(pyr[-1]))
    return pyr


def _sample_pyramid(pyr, d, lod):
    """Trilinear lookup across box-pooled levels at fractional ``lod``."""
    face, u, v = dir_to_face_uv(d)
    lod = np.clip(lod, 0.0, len(pyr) - 1)
    l0 = np.floor(lod).astype(int)
    t = (lod - l0)[..., None]
    out = np.zeros(np.shape(lod) + (3,))
    for li in np.unique(l0):
        m = l0 == li
        a = sample_face_bilinear(pyr[li], face[m], u[m], v[m])
        nxt = min(li + 1, len(pyr) - 1)
        b = sample_face_bilinear(pyr[nxt], face[m], u[m], v[m])
        out[m] = a * (1 - t[m]) + b * t[m]
    return out


def _convolve_level(pyr, size, rho, u1, u2, shifts, base_size, threads):
    alpha = float(roughness_to_alpha(rho))
    n = len(u1)
    dirs = texel_directions(size).reshape(-1, 3)
    texel_sa = 4.0 * np.pi / (6.0 * base_size * base_size)
    out = np.empty((dirs.shape[0], 3))

    def run(sl):
        nrm = dirs[sl][:, None, :]
        # per-texel toroidal shift keeps stratification but decorrelates texels
        s1 = (u1[None] + shifts[sl, 0:1]) % 1.0
        s2 = (u2[None] + shifts[sl, 1:2]) % 1.0
        h, _ = sample_ggx(alpha, nrm, s1, s2)
        nh = np.sum(h * nrm, axis=-1)
        w_dir = 2.0 * nh[..., None] * h - nrm
        wt = np.maximum(2.0 * nh * nh - 1.0, 0.0)
        # filtered importance sampling: pdf over directions is D/4 when n = v
        pdf = ggx_ndf(alpha, nh) / 4.0
        lod = 0.5 * np.log2(np.maximum(1.0 / (n * np.maximum(pdf, 1e-30)), 1e-30) / texel_sa) + 1.0
        rad = _sample_pyramid(pyr, w_dir, lod)
        out[sl] = np.sum(rad * wt[..., None], axis=1) / np.maximum(np.sum(wt, axis=1), 1e-30)[:, None]

    chunk = max(1, 65536 // n)
    slices = [slice(i, i + chunk) for i in range(0, dirs.shape[0], chunk)]
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        list(pool.map(run, slices))
    return out.reshape(6, size, size, 3)


def _ggx_lobe_kernel(alpha, c):
    """Prefilter weight for directions with cosine ``c`` to the texel direction.

    Importance sampling half-vectors (density D/4 over directions when the
    normal equals the view) and weighting by n.w yields this kernel.
    """
    nh = np.sqrt(np.clip((1.0 + c) * 0.5, 0.0, 1.0))
    return ggx_ndf(alpha, nh) * np.maximum(c, 0.0)


def _quadrature_source_size(alpha, size, base_size):
    # source texels at most a third of the lobe width; never coarser than the output
    need = 3.0 * np.pi / (4.0 * alpha)
    src = 1 << int(np.ceil(np.log2(max(need, 1.0))))
    return int(min(base_size, max(src, size, 8)))


def _quadrature_level(pyr, size, rho, base_size, threads):
    alpha = float(roughness_to_alpha(rho))
    src_size = _quadrature_source_size(alpha, size, base_size)
    src = pyr[int(np.log2(base_size // src_size))].reshape(-1, 3)
    src_dirs = texel_directions(src_size).reshape(-1, 3)
    src_sa = texel_solid_angles(src_size).reshape(-1)
    dirs = texel_directions(size).reshape(-1, 3)
    out = np.empty((dirs.shape[0], 3))

    def run(sl):
        c = dirs[sl] @ src_dirs.T
        k = _ggx_lobe_kernel(alpha, c) * src_sa[None]
        out[sl] = (k @ src) / np.maximum(k.sum(axis=1), 1e-300)[:, None]

    chunk = max(1, (1 << 21) // src_dirs.shape[0])
    slices = [slice(i, i + chunk) for i in range(0, dirs.shape[0], chunk)]
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        list(pool.map(run, slices))
    return out.reshape(6, size, size, 3)


QUADRATURE_PAIR_BUDGET = 2e8


def prefilter(base, levels: int = 5, samples_per_texel: int = 128, seed: int = 0,
              threads: int | None = 1, method: str = "auto") -> CubeMipChain:
    """GGX-prefiltered mip chain; level 0 is the base map (rho_min).

    Each coarser level convolves the energy-preserving pooled pyramid with
    the GGX lobe of its roughness.  ``method`` picks a deterministic
    solid-angle quadrature ("quadrature"), filtered importance sampling with
    ``samples_per_texel`` directions ("sampling"), or quadrature whenever the
    texel-pair count fits the budget ("auto").
    """
    base = np.asarray(base, dtype=np.float32)
    if levels < 2:
        raise ValueError("levels must be >= 2")
    if samples_per_texel < 1:
        raise ValueError("samples_per_texel must be >= 1")
    if method not in ("auto", "quadrature", "sampling"):
        raise ValueError(f"unknown prefilter method {method!r}")
    s = base.shape[1]
    if s & (s - 1):
        raise ValueError("face size must be a power of two")
    rng = np.random.default_rng(seed)
    pyr = _pyramid(base)
    rhos = level_roughness(levels)
    out = [base.copy()]
    for li in range(1, levels):
        size = max(s >> li, 1)
        alpha = float(roughness_to_alpha(rhos[li]))
        src_size = _quadrature_source_size(alpha, size, s)
        pairs = 36.0 * size * size * src_size * src_size
        if method == "quadrature" or (method == "auto" and pairs <= QUADRATURE_PAIR_BUDGET):
            level = _quadrature_level(pyr, size, rhos[li], s, threads)
        else:
            u1, u2 = stratified_samples(samples_per_texel, rng)
            shifts = rng.random((6 * size * size, 2))
            level = _convolve_level(pyr, size, rhos[li], u1, u2, shifts, s, threads)
        out.append(level.astype(np.float32))
    return CubeMipChain(tuple(out))


def sample_mip(chain: CubeMipChain, d, rho):
    """Mipmap(d, rho): bilinear within a face, linear between bracketing levels."""
    d = np.asarray(d, dtype=float)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), d.shape[:-1])
    l0, t = _level_blend(chain.n_levels, rho)
    face, u, v = dir_to_face_uv(d)
    out = np.zeros(d.shape)
    for li in np.unique(l0):
        m = l0 == li
        a = sample_face_bilinear(chain.levels[li], face[m], u[m], v[m])
        b = sample_face_bilinear(chain.levels[li + 1], face[m], u[m], v[m])
        out[m] = a * (1 - t[m]) + b * t[m]
    return out


def _level_blend(nl, rho):
    f = (np.clip(rho, RHO_MIN, RHO_MAX) - RHO_MIN) / (RHO_MAX - RHO_MIN) * (nl - 1)
    l0 = np.minimum(np.floor(f).astype(int), nl - 2)
    return l0, (f - l0)[..., None]


def mip_level_stack(chain: CubeMipChain, d):
    """Bilinear samples of every level along ``d``; shape ``(..., levels, 3)``."""
    face, u, v = dir_to_face_uv(np.asarray(d, dtype=float))
    return np.stack([sample_face_bilinear(lv, face, u, v) for lv in chain.levels], axis=-2)


def blend_levels(stack, rho):
    """Roughness interpolation of a ``mip_level_stack``; matches ``sample_mip``."""
    rho = np.broadcast_to(np.asarray(rho, dtype=float), stack.shape[:-2])
    l0, t = _level_blend(stack.shape[-2], rho)
    a = np.take_along_axis(stack, l0[..., None, None], axis=-2)[..., 0, :]
    b = np.take_along_axis(stack, l0[..., None, None] + 1, axis=-2)[..., 0, :]
    return a * (1 - t) + b * t


def diffuse_irradiance(chain: CubeMipChain, normal):
    return sample_mip(chain, normal, RHO_MAX)


def sample_base(chain: CubeMipChain, d):
    """Unfiltered environment radiance (base level)."""
    return sample_cube(chain.levels[0], d)


def save_chain(chain: CubeMipChain, path) -> None:
    parts = [CMIP_MAGIC, bytes([CMIP_VERSION]), struct.pack("<II", chain.face_size, chain.n_levels)]
    parts += [np.ascontiguousarray(x, dtype="<f4").tobytes() for x in chain.levels]
    Path(path).write_bytes(b"".join(parts))


def load_chain(path) -> CubeMipChain:
    raw = Path(path).read_bytes()
    if raw[:4] != CMIP_MAGIC:
        raise MipFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 13 or raw[4] != CMIP_VERSION:
        raise MipFormatError(f"{path}: unsupported version")
    s, nl = struct.unpack("<II", raw[5:13])
    if s < 1 or nl < 2:
        raise MipFormatError(f"{path}: bad face size {s} or level count {nl}")
    sizes = [max(s >> i, 1) for i in range(nl)]
    need = 13 + sum(6 * k * k * 3 * 4 for k in sizes)
    if len(raw) != need:
        raise MipFormatError(f"{path}: expected {need} bytes, got {len(raw)}")
    levels, off = [], 13
    for k in sizes:
        n = 6 * k * k * 3 * 4
        levels.append(np.frombuffer(raw[off:off + n], dtype="<f4").reshape(6, k, k, 3).astype(np.float32))
        off += n
    return CubeMipChain(tuple(levels))
