"""JSON schemas every stage output is checked against before a stage reports success."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from mangrovewatch.errors import SchemaError

_PROVENANCE = {
    "type": "object",
    "required": ["config_hash", "seed", "stage", "stage_version"],
    "properties": {
        "config_hash": {"type": "string"},
        "seed": {"type": "integer"},
        "stage": {"type": "string"},
        "stage_version": {"type": "integer"},
    },
}

_NUM_OR_NULL = {"type": ["number", "null"]}

PREPROCESS_REPORT = {
    "type": "object",
    "required": ["provenance", "year", "window_months", "water_areas_ha", "scene_counts"],
    "properties": {
        "provenance": _PROVENANCE,
        "year": {"type": "integer"},
        "window_months": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "string"}},
        "water_areas_ha": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["month", "water_ha"],
                "properties": {"month": {"type": "string"}, "water_ha": {"type": "number", "minimum": 0}},
            },
        },
        "scene_counts": {"type": "object", "additionalProperties": {"type": "integer"}},
    },
}

TILE_INDEX = {
    "type": "object",
    "required": ["version", "provenance", "count", "tiles"],
    "properties": {
        "version": {"const": 1},
        "provenance": _PROVENANCE,
        "count": {"type": "integer", "minimum": 0},
        "tiles": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image", "label", "scene_id", "row", "col", "stratum", "has_mangrove"],
            },
        },
    },
}

EVALUATION_REPORT = {
    "type": "object",
    "required": ["provenance", "confusion", "metrics"],
    "properties": {
        "provenance": _PROVENANCE,
        "confusion": {
            "type": "object",
            "required": ["tp", "fp", "fn", "tn"],
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "metrics": {
            "type": "object",
            "required": ["producer_acc", "user_acc", "f1", "iou_pos", "iou_neg", "miou"],
            "additionalProperties": _NUM_OR_NULL,
        },
    },
}

CHANGE_REPORT = {
    "type": "object",
    "required": ["provenance", "total", "carbon", "regions"],
    "properties": {
        "provenance": _PROVENANCE,
        "total": {
            "type": "object",
            "required": ["series", "annual_changes", "total_growth", "mean_annual_growth_pct"],
        },
        "carbon": {"type": "object", "required": ["area_delta_ha", "carbon_t", "co2_t"]},
        "regions": {"type": "object"},
    },
}


def validate_json(path: str | Path, schema: dict) -> dict:
    doc = json.loads(Path(path).read_text())
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{path}: {exc.message}") from exc
    return doc
