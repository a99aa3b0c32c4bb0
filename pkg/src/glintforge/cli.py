"""glintforge command line: baking, rendering, relighting, oracle comparison, estimation."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .brdf import LutFormatError, bake_dfg_lut, load_lut, save_lut
from .envlight import (MipFormatError, PfmFormatError, equirect_to_cube, load_chain, load_pfm, prefilter,
                       read_pfm, save_chain, write_pfm)
from .inverse import FIELDS, ParamVector, align_channels, optimize, photometric_loss, prepare
from .mc_oracle import McConfig, error_map, path_trace_image, relative_error
from .scene import SceneSchemaError, load_camera, load_scene
from .shading import ShadingContext, render_image, tone_map_srgb

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SCHEMA = 0, 2, 3, 4
MAX_FACES = 512
AUX_SUFFIXES = (".normal.pfm", ".rough.pfm", ".opacity.pfm")
BUILTIN = "builtin:"
# parameters that never change outputs and stay out of manifests
_VOLATILE = ("threads", "func", "command", "manifest")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- helpers --------------------------------------------------------------------

def _default_seed() -> int:
    raw = os.environ.get("GLINTFORGE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(EXIT_USAGE, f"GLINTFORGE_SEED must be an integer, got {raw!r}") from None


def _resolve_input(path: str) -> Path:
    if path.startswith(BUILTIN):
        name = path[len(BUILTIN):]
        res = resources.files("glintforge") / "data" / f"{name}.json"
        if not res.is_file():
            raise CliError(EXIT_IO, f"no bundled scene named {name!r}")
        return Path(str(res))
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"{path}: no such file")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(args, out_path, inputs):
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _VOLATILE}
    doc = {
        "tool": "glintforge",
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "params": params,
        "inputs": {name: _sha256(_resolve_input(p)) for name, p in sorted(inputs.items())},
    }
    path = Path(args.manifest) if getattr(args, "manifest", None) else Path(str(out_path) + ".manifest.json")
    _write_json(path, doc)
    return path


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_png(path, image):
    from PIL import Image

    Image.fromarray(tone_map_srgb(image)).save(path, format="PNG")


def _load_ctx(args, indirect=True):
    lut = load_lut(_resolve_input(args.lut))
    env = load_chain(_resolve_input(args.env))
    return ShadingContext(env, lut, rho_t=args.rho_t, indirect=indirect, background=args.background)


def _check_rho_t(parser, args):
    if not 0.0 <= args.rho_t < 1.0:
        parser.error("--rho-t must lie in [0, 1)")


# --- commands -------------------------------------------------------------------

def cmd_bake_lut(args):
    lut = bake_dfg_lut(args.size, args.samples, args.seed, args.threads)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_lut(lut, args.out)
    _write_manifest(args, args.out, {})
    print(f"wrote {args.out} ({args.size}x{args.size}, {args.samples} samples/entry)")


def cmd_bake_env(args):
    try:
        img = load_pfm(_resolve_input(args.input))
    except ValueError as e:
        raise PfmFormatError(f"{args.input}: {e}") from None
    base = equirect_to_cube(img, args.faces)
    chain = prefilter(base, args.levels, args.samples, args.seed, args.threads, args.method)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_chain(chain, args.out)
    _write_manifest(args, args.out, {"input": args.input})
    print(f"wrote {args.out} ({args.faces}px faces, {args.levels} levels)")


def _render(args, indirect):
    sf = load_scene(_resolve_input(args.scene))
    camera = load_camera(_resolve_input(args.camera)) if args.camera else sf.camera
    ctx = _load_ctx(args, indirect)
    seed = args.seed if args.jitter else None
    res = render_image(ctx, sf.scene, camera, args.width, args.height, sf.march, seed, args.threads)
    prefix = args.out
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_pfm(prefix + ".pfm", res.rgb)
    _write_png(prefix + ".png", res.rgb)
    write_pfm(prefix + ".normal.pfm", 0.5 * (res.normal + 1.0))
    write_pfm(prefix + ".rough.pfm", res.roughness)
    write_pfm(prefix + ".opacity.pfm", res.opacity)
    _write_json(prefix + ".camera.json", camera.to_dict())
    inputs = {"scene": args.scene, "env": args.env, "lut": args.lut}
    if args.camera:
        inputs["camera"] = args.camera
    _write_manifest(args, prefix, inputs)
    print(f"wrote {prefix}.pfm and auxiliaries ({args.width}x{args.height})")


def cmd_render(args):
    _render(args, indirect=not args.no_indirect)


def cmd_relight(args):
    _render(args, indirect=True)


def cmd_compare_mc(args):
    sf = load_scene(_resolve_input(args.scene))
    ctx = _load_ctx(args, indirect=args.bounces == 2)
    w, h = args.width, args.height
    ss = render_image(ctx, sf.scene, sf.camera, w, h, sf.march, None, args.threads)
    runs = []
    for spp in sorted(set(args.spp)):
        mc, hit, var = path_trace_image(sf.scene, sf.camera, w, h, ctx.env,
                                        McConfig(spp, args.bounces, args.seed), args.threads)
        surf = hit & (ss.opacity > 1.0 - 1e-2)
        rel = relative_error(ss.rgb, mc, surf)
        err, psnr = error_map(ss.rgb, mc)
        runs.append({
            "spp": spp,
            "psnr": psnr,
            "mean_rel_error": float(rel.mean()) if rel.size else 0.0,
            "max_rel_error": float(rel.max()) if rel.size else 0.0,
            "mc_variance": float(var[surf].mean()) if surf.any() else 0.0,
            "surface_pixels": int(surf.sum()),
        })
    best = runs[-1]
    Path(args.out_error).parent.mkdir(parents=True, exist_ok=True)
    write_pfm(args.out_error, err)
    report = {k: best[k] for k in ("spp", "psnr", "mean_rel_error", "max_rel_error")}
    report.update(bounces=args.bounces, width=w, height=h, runs=runs)
    _write_json(args.report, report)
    _write_manifest(args, args.report, {"scene": args.scene, "env": args.env, "lut": args.lut})
    print(f"psnr {best['psnr']:.2f} dB, mean rel error {best['mean_rel_error']:.4f} at {best['spp']} spp")


def _view_files(directory: Path):
    if not directory.is_dir():
        raise CliError(EXIT_IO, f"{directory}: not a directory")
    views = sorted(p for p in directory.glob("*.pfm") if not p.name.endswith(AUX_SUFFIXES))
    out = []
    for p in views:
        side = p.with_name(p.name[:-len(".pfm")] + ".camera.json")
        if not side.is_file():
            raise CliError(EXIT_SCHEMA, f"view {p.name}: missing camera sidecar {side.name}")
        try:
            cam = load_camera(side)
        except SceneSchemaError as e:
            raise CliError(EXIT_SCHEMA, f"view {p.name}: {e}") from None
        out.append((p, cam))
    return out


def cmd_estimate(args):
    sf = load_scene(_resolve_input(args.scene))
    views = _view_files(Path(args.views))
    if not views:
        raise CliError(EXIT_USAGE, f"{args.views}: no views (need at least one .pfm with a camera sidecar)")
    ctx = _load_ctx(args, indirect=not args.no_indirect)
    targets = [read_pfm(p) for p, _ in views]
    data = prepare(ctx, sf.scene, [c for _, c in views], targets, sf.march, args.threads)
    n = len(sf.scene.primitives)
    reference = ParamVector.from_materials([p.material for p in sf.scene.primitives])
    init = ParamVector.uniform(n, args.init_albedo, args.init_roughness, args.init_metallic)
    free = np.ones(5 * n, dtype=bool)
    for name in args.fixed:
        cols = [0, 1, 2] if name == "albedo" else [FIELDS.index(name)]
        for c in cols:
            free[c::5] = False
    init.values[~free] = reference.values[~free]
    res = optimize(init, data, ctx, args.iters, lr=args.lr, free=free, threads=args.threads)
    aligned, scales = align_channels(res.params.albedos(), reference.albedos())
    materials = [
        {"albedo": b[:3].tolist(), "roughness": float(b[3]), "metallic": float(b[4]),
         "aligned_albedo": a.tolist()}
        for b, a in zip(res.params.blocks(), aligned)
    ]
    out = {
        "materials": materials,
        "channel_scales": scales.tolist(),
        "final_loss": photometric_loss(res.params, data, ctx),
        "iterations": res.iterations,
        "aborted": res.aborted,
        "loss_trace": res.losses,
        "views": [p.name for p, _ in views],
    }
    _write_json(args.out, out)
    inputs = {"scene": args.scene, "env": args.env, "lut": args.lut}
    inputs.update({f"view:{p.name}": str(p) for p, _ in views})
    _write_manifest(args, args.out, inputs)
    print(f"final loss {out['final_loss']:.3e} after {res.iterations} iterations")


def cmd_replay(args):
    path = _resolve_input(args.manifest_file)
    try:
        doc = json.loads(path.read_text())
        command, params = doc["command"], doc["params"]
    except (json.JSONDecodeError, KeyError) as e:
        raise CliError(EXIT_SCHEMA, f"{path}: not a glintforge manifest ({e})") from None
    for name, digest in doc.get("inputs", {}).items():
        src = params.get(name) if not name.startswith("view:") else None
        if src is not None and _sha256(_resolve_input(src)) != digest:
            raise CliError(EXIT_IO, f"input {name} ({src}) changed since the manifest was written")
    if command not in COMMANDS:
        raise CliError(EXIT_SCHEMA, f"{path}: unknown command {command!r}")
    ns = argparse.Namespace(**params, command=command, threads=args.threads, manifest=None)
    COMMANDS[command](ns)


COMMANDS = {
    "bake-lut": cmd_bake_lut,
    "bake-env": cmd_bake_env,
    "render": cmd_render,
    "relight": cmd_relight,
    "compare-mc": cmd_compare_mc,
    "estimate": cmd_estimate,
}


# --- parser ---------------------------------------------------------------------

def _positive_int(lo):
    def conv(s):
        v = int(s)
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}")
        return v
    return conv


def build_parser():
    p = argparse.ArgumentParser(prog="glintforge", description=__doc__)
    p.add_argument("--version", action="version", version=f"glintforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--threads", type=_positive_int(1), default=os.cpu_count() or 1,
                        help="worker threads (outputs do not depend on this)")
        sp.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="RNG seed (default: $GLINTFORGE_SEED or 0)")

    def shading(sp):
        sp.add_argument("--scene", required=True, help="scene JSON, or builtin:<name>")
        sp.add_argument("--env", required=True, help="prefiltered environment (.cmip)")
        sp.add_argument("--lut", required=True, help="DFG lookup table")
        sp.add_argument("--rho-t", type=float, default=0.3, help="roughness threshold for traced indirect light")
        sp.add_argument("--background", choices=("env", "black"), default="env")

    sp = sub.add_parser("bake-lut", help="bake the DFG lookup table")
    sp.add_argument("--size", type=_positive_int(2), default=64, help="table resolution (>= 2)")
    sp.add_argument("--samples", type=_positive_int(64), default=4096, help="samples per entry")
    sp.add_argument("--out", required=True)
    common(sp)

    sp = sub.add_parser("bake-env", help="prefilter an equirectangular PFM into a cube mip chain")
    sp.add_argument("--in", dest="input", required=True, help="equirectangular color PFM")
    sp.add_argument("--faces", type=_positive_int(4), default=64, help="cube face size (power of two, <= 512)")
    sp.add_argument("--levels", type=_positive_int(2), default=5, help="mip levels (>= 2)")
    sp.add_argument("--samples", type=_positive_int(1), default=128,
                    help="directions per texel when the sampled prefilter is used")
    sp.add_argument("--method", choices=("auto", "quadrature", "sampling"), default="auto")
    sp.add_argument("--out", required=True)
    common(sp)

    for name, helptext in (("render", "render a scene"), ("relight", "render under a new environment")):
        sp = sub.add_parser(name, help=helptext)
        shading(sp)
        sp.add_argument("--width", type=_positive_int(1), default=64)
        sp.add_argument("--height", type=_positive_int(1), default=64)
        sp.add_argument("--camera", help="camera JSON overriding the scene camera")
        sp.add_argument("--jitter", action="store_true", help="seeded per-ray stratum offsets")
        if name == "render":
            sp.add_argument("--no-indirect", action="store_true", help="skip secondary rays")
        sp.add_argument("--out", required=True, help="output prefix")
        common(sp)

    sp = sub.add_parser("compare-mc", help="compare split-sum against the Monte Carlo reference")
    shading(sp)
    sp.add_argument("--width", type=_positive_int(1), default=64)
    sp.add_argument("--height", type=_positive_int(1), default=64)
    sp.add_argument("--spp", type=_positive_int(1), nargs="+", default=[128, 256, 4096])
    sp.add_argument("--bounces", type=int, choices=(1, 2), default=1,
                    help="reference bounces; 2 also enables traced indirect light in the split-sum render")
    sp.add_argument("--out-error", required=True, help="per-pixel error map (PFM)")
    sp.add_argument("--report", required=True, help="JSON report")
    common(sp)

    sp = sub.add_parser("estimate", help="recover materials from rendered views")
    shading(sp)
    sp.add_argument("--views", required=True, help="directory of view PFMs with <stem>.camera.json sidecars")
    sp.add_argument("--iters", type=_positive_int(0), default=500)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--init-albedo", type=float, default=0.5)
    sp.add_argument("--init-roughness", type=float, default=0.5)
    sp.add_argument("--init-metallic", type=float, default=0.5)
    sp.add_argument("--fixed", action="append", default=[], choices=("albedo", "roughness", "metallic"),
                    help="hold a material field at the scene's value (repeatable)")
    sp.add_argument("--no-indirect", action="store_true")
    sp.add_argument("--out", required=True, help="result JSON")
    common(sp)

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.add_argument("manifest_file")
    sp.add_argument("--threads", type=_positive_int(1), default=os.cpu_count() or 1)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            cmd_replay(args)
            return EXIT_OK
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        if hasattr(args, "rho_t"):
            _check_rho_t(parser, args)
        if args.command == "bake-env":
            if args.faces & (args.faces - 1) or args.faces > MAX_FACES:
                parser.error(f"--faces must be a power of two <= {MAX_FACES}")
        COMMANDS[args.command](args)
    except CliError as e:
        print(f"glintforge: error: {e}", file=sys.stderr)
        return e.code
    except SceneSchemaError as e:
        print(f"glintforge: schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except (PfmFormatError, LutFormatError, MipFormatError, OSError) as e:
        print(f"glintforge: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
