"""Scene documents (JSON) and the pinhole camera."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
from scipy.spatial.transform import Rotation

from .brdf import Material, normalize
from .geometry import Checker, MarchConfig, Primitive, SdfScene, box, plane, sphere, torus


class SceneSchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}

CAMERA_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["position", "look_at"],
    "properties": {
        "position": _VEC3,
        "look_at": _VEC3,
        "up": _VEC3,
        "fov_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
    },
}

_MATERIAL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "albedo": {"type": "array", "items": _UNIT, "minItems": 3, "maxItems": 3},
        "roughness": _UNIT,
        "metallic": _UNIT,
        "checker": {
            "type": "object",
            "additionalProperties": False,
            "required": ["albedo"],
            "properties": {
                "albedo": {"type": "array", "items": _UNIT, "minItems": 3, "maxItems": 3},
                "scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}


def _prim(kind, required, extra):
    props = {"type": {"const": kind}, "center": _VEC3, "material": _MATERIAL, "rotation_deg": _VEC3}
    props.update(extra)
    return {"type": "object", "additionalProperties": False, "required": ["type", *required],
            "properties": props}


PRIMITIVE_SCHEMAS = {
    "sphere": _prim("sphere", ["radius"], {"radius": {"type": "number", "exclusiveMinimum": 0}}),
    "box": _prim("box", ["size"], {"size": {"type": "array", "minItems": 3, "maxItems": 3,
                                            "items": {"type": "number", "exclusiveMinimum": 0}}}),
    "plane": _prim("plane", ["normal"], {"normal": _VEC3}),
    "torus": _prim("torus", ["radii"], {"radii": {"type": "array", "minItems": 2, "maxItems": 2,
                                                  "items": {"type": "number", "exclusiveMinimum": 0}}}),
}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["camera", "primitives"],
    "properties": {
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "scale": {"type": "number", "exclusiveMinimum": 0},
        "camera": CAMERA_SCHEMA,
        "march": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "near": {"type": "number", "minimum": 0},
                "far": {"type": "number", "exclusiveMinimum": 0},
                "samples": {"type": "integer", "minimum": 2},
                "secondary_samples": {"type": "integer", "minimum": 2},
            },
        },
        "primitives": {
            "type": "array",
            "items": {"type": "object", "required": ["type"],
                      "properties": {"type": {"enum": sorted(PRIMITIVE_SCHEMAS)}}},
        },
    },
}


def _validate(doc, schema, prefix):
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = prefix + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path)
        raise SceneSchemaError(path.lstrip(".") or "$", e.message)


@dataclass(frozen=True)
class Camera:
    position: tuple = (0.0, 0.0, 3.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov_deg: float = 40.0

    def basis(self):
        fwd = normalize(np.subtract(self.look_at, self.position))
        right = normalize(np.cross(fwd, self.up))
        up = np.cross(right, fwd)
        return right, up, fwd

    def rays(self, width: int, height: int):
        """Pixel-center rays, row-major with row 0 at the top."""
        right, up, fwd = self.basis()
        tan_half = np.tan(np.radians(self.fov_deg) / 2.0)
        aspect = width / height
        x = (2.0 * (np.arange(width) + 0.5) / width - 1.0) * tan_half * aspect
        y = (1.0 - 2.0 * (np.arange(height) + 0.5) / height) * tan_half
        yy, xx = np.meshgrid(y, x, indexing="ij")
        d = xx[..., None] * right + yy[..., None] * up + fwd
        d = normalize(d.reshape(-1, 3))
        o = np.broadcast_to(np.asarray(self.position, dtype=float), d.shape).copy()
        return o, d

    def to_dict(self):
        return {"position": list(self.position), "look_at": list(self.look_at),
                "up": list(self.up), "fov_deg": self.fov_deg}


@dataclass(frozen=True, eq=False)
class SceneFile:
    scene: SdfScene
    camera: Camera
    march: MarchConfig


def parse_camera(doc, prefix="camera") -> Camera:
    _validate(doc, CAMERA_SCHEMA, prefix)
    return Camera(tuple(doc["position"]), tuple(doc["look_at"]), tuple(doc.get("up", (0, 1, 0))),
                  float(doc.get("fov_deg", 40.0)))


def _parse_primitive(doc, i) -> Primitive:
    path = f"primitives[{i}]"
    _validate(doc, PRIMITIVE_SCHEMAS[doc["type"]], path)
    m = doc.get("material", {})
    mat = Material(tuple(m.get("albedo", (0.5, 0.5, 0.5))), m.get("roughness", 0.5), m.get("metallic", 0.0))
    checker = None
    if "checker" in m:
        checker = Checker(tuple(m["checker"]["albedo"]), float(m["checker"].get("scale", 0.25)))
    rot = None
    if "rotation_deg" in doc:
        rot = Rotation.from_euler("xyz", doc["rotation_deg"], degrees=True).as_matrix()
    center = tuple(doc.get("center", (0.0, 0.0, 0.0)))
    kw = {"checker": checker, "rotation": rot}
    kind = doc["type"]
    if kind == "sphere":
        return sphere(center, doc["radius"], mat, **kw)
    if kind == "box":
        return box(center, [0.5 * s for s in doc["size"]], mat, **kw)
    if kind == "plane":
        if np.linalg.norm(doc["normal"]) == 0:
            raise SceneSchemaError(path + ".normal", "normal must be non-zero")
        return plane(center, doc["normal"], mat, **kw)
    return torus(center, doc["radii"][0], doc["radii"][1], mat, **kw)


def parse_scene(doc) -> SceneFile:
    _validate(doc, SCENE_SCHEMA, "")
    prims = [_parse_primitive(p, i) for i, p in enumerate(doc["primitives"])]
    scene = SdfScene(tuple(prims), float(doc.get("sigma", 500.0)), doc.get("scale"))
    mdoc = doc.get("march", {})
    try:
        march = MarchConfig(**mdoc)
    except ValueError as e:
        raise SceneSchemaError("march", str(e)) from None
    return SceneFile(scene, parse_camera(doc["camera"]), march)


def load_scene(path) -> SceneFile:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneSchemaError("$", f"invalid JSON: {e}") from None
    return parse_scene(doc)


def load_camera(path) -> Camera:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SceneSchemaError("$", f"invalid JSON: {e}") from None
    return parse_camera(doc, "$")
