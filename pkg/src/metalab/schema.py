"""JSON layout of model files and the validating loader."""

from __future__ import annotations

import json
import warnings
from importlib import resources
from pathlib import Path

import jsonschema

from .coeffs import check_assumptions
from .errors import AssumptionWarning, SchemaError
from .model import model_from_dict

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 2}
_MATRIX = {"type": "array", "items": _VEC, "minItems": 2}

_LINEAR = {
    "type": "object",
    "required": ["type", "matrix", "anchor"],
    "properties": {
        "type": {"const": "linear_at_point"},
        "matrix": _MATRIX,
        "anchor": _VEC,
        "radius": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "inner": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    },
    "additionalProperties": False,
}

_TERM = {
    "type": "object",
    "required": ["matrix", "anchor", "radius"],
    "properties": {
        "matrix": _MATRIX,
        "anchor": _VEC,
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "inner": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    },
    "additionalProperties": False,
}

_EXPLICIT = {
    "type": "object",
    "required": ["type", "components"],
    "properties": {
        "type": {"const": "explicit"},
        "components": {"type": "array", "items": {"type": ["string", "number"]}, "minItems": 2},
    },
    "additionalProperties": False,
}

_BLEND = {
    "type": "object",
    "required": ["type", "terms"],
    "properties": {
        "type": {"const": "blend"},
        "terms": {"type": "array", "items": _TERM, "minItems": 1},
        "background": {"oneOf": [{"type": "null"}, {"$ref": "#/$defs/simple"}]},
    },
    "additionalProperties": False,
}

MODEL_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["dimension", "surfaces", "fields"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "dimension": {"type": "integer", "minimum": 2},
        "bbox": {"type": "number", "exclusiveMinimum": 0},
        "surfaces": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["point", "circle"]},
                    "location": _VEC,
                    "center": _VEC,
                    "radius": {"type": "number", "exclusiveMinimum": 0},
                    "plane": {"type": "array", "items": _VEC, "minItems": 2, "maxItems": 2},
                    "r_chart": {"type": ["number", "null"], "exclusiveMinimum": 0},
                },
                "allOf": [
                    {"if": {"properties": {"kind": {"const": "point"}}},
                     "then": {"required": ["location"]}},
                    {"if": {"properties": {"kind": {"const": "circle"}}},
                     "then": {"required": ["center", "radius"]}},
                ],
                "additionalProperties": False,
            },
        },
        "fields": {
            "type": "object",
            "required": ["v"],
            "properties": {
                "v": {"type": "array", "items": {"$ref": "#/$defs/descriptor"}},
                "v_tilde": {"type": "array", "items": {"$ref": "#/$defs/descriptor"}},
            },
            "additionalProperties": False,
        },
        "confinement": {
            "type": "object",
            "required": ["radius", "strength"],
            "properties": {
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "strength": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
    "$defs": {
        "simple": {"oneOf": [_LINEAR, _EXPLICIT]},
        "descriptor": {"oneOf": [_LINEAR, _EXPLICIT, _BLEND]},
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(MODEL_SCHEMA)


def _pointer(path):
    parts = [str(p).replace("~", "~0").replace("/", "~1") for p in path]
    return "/" + "/".join(parts) if parts else ""


def validate_document(doc):
    """Raise :class:`SchemaError` at the deepest location of the first violation."""
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: (len(list(e.absolute_path)), e.message), reverse=True)
    if errors:
        err = errors[0]
        # oneOf failures hide the useful message in their context
        while err.context:
            err = max(err.context, key=lambda e: len(list(e.absolute_path)))
        raise SchemaError(f"{err.message}", _pointer(err.absolute_path))
    d = doc["dimension"]
    for k, s in enumerate(doc["surfaces"]):
        for key in ("location", "center"):
            if key in s and len(s[key]) != d:
                raise SchemaError(f"{key} has {len(s[key])} entries, expected {d}", f"/surfaces/{k}/{key}")
    for group in ("v", "v_tilde"):
        fields = doc["fields"].get(group)
        if fields is not None and len(fields) != d + 1:
            raise SchemaError(f"{group} needs {d + 1} descriptors (drift plus {d} noise fields), got {len(fields)}",
                              f"/fields/{group}")


def load_document(path):
    """Read and validate a model file, returning the parsed JSON."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc.msg} at line {exc.lineno} column {exc.colno}", "") from exc
    validate_document(doc)
    return doc


def model_from_document(doc):
    """Build a model from a validated document, mapping construction errors to SchemaError."""
    try:
        return model_from_dict(doc)
    except (ValueError, SyntaxError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(str(exc), "") from exc


def bundled_model_path(name):
    """Path of a model shipped with the package, by file stem or file name."""
    stem = name[:-5] if name.endswith(".json") else name
    ref = resources.files("metalab") / "models" / f"{stem}.json"
    return Path(str(ref))


def resolve_model_path(name):
    """An existing file path, or else a bundled model of that name."""
    p = Path(name)
    if p.exists():
        return p
    b = bundled_model_path(p.name)
    if b.exists():
        return b
    raise FileNotFoundError(f"no model file {name!r} and no bundled model of that name")


def parse_model(path, check=True, n_samples=1000):
    """Load, validate and build a model; optionally run the assumption checks.

    Failed checks are reported as :class:`AssumptionWarning`, not raised.

    Returns
    -------
    model : ModelSpec
    report : AssumptionReport or None
    """
    doc = load_document(resolve_model_path(path))
    model = model_from_document(doc)
    report = None
    if check:
        report = check_assumptions(model, n_samples=n_samples)
        warn_failed(report)
    return model, report


def warn_failed(report):
    """Issue one :class:`AssumptionWarning` per failed check in ``report``."""
    for key in report.failed():
        item = report.results[key]
        warnings.warn(f"assumption ({key}) fails: {item.detail}", AssumptionWarning, stacklevel=3)
