"""JSON readers and writers for libraries, measurements and dictionaries.

Formats
-------
library:       {"K": int, "N": int, "keypoints": [[[x, y, z] x N] x K]}
measurements:  {"points3d": [[x, y, z] x N]} or {"pixels": [[u, v] x N]},
               optional "weights": [w x N]
dictionary:    {"N": int, "triplets": {"i,j,m": [signs]}}; a file may also
               hold {"dictionaries": [dictionary, ...]}
shape models:  {"models": [{"keypoints": [[x, y, z] x N],
                            "normals": [[nx, ny, nz] x F], "offsets": [F],
                            "keypoint_face": [N ints]}, ...]}
annotations:   {"N": int, "views": [[[u, v] or null] x N, ...]}
All indices are 0-based.
"""

from __future__ import annotations

import json

import numpy as np

from ..core import InvalidInput, Keypoints2D, Keypoints3D, PaceError, ShapeLibrary
from ..robin import ConvexShapeModel, WindingDictionary, triplets, winding_order_2d


class ParseError(PaceError):
    def __init__(self, path, field, reason):
        super().__init__(f"{path}: field {field!r}: {reason}")
        self.path, self.field, self.reason = str(path), field, reason


def _load(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ParseError(path, "<file>", exc.strerror or str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(path, "<file>", f"invalid JSON ({exc.msg})") from exc


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _require(doc, field, path):
    if not isinstance(doc, dict) or field not in doc:
        raise ParseError(path, field, "missing")
    return doc[field]


def _array(value, field, path, shape_tail=None, dtype=float):
    try:
        a = np.asarray(value, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise ParseError(path, field, "not a numeric array") from exc
    if shape_tail is not None and (a.ndim != len(shape_tail) + 1 or any(
        t is not None and s != t for s, t in zip(a.shape[1:], shape_tail)
    )):
        raise ParseError(path, field, f"unexpected shape {a.shape}")
    return a


def _build(factory, path, field, *args):
    try:
        return factory(*args)
    except InvalidInput as exc:
        raise ParseError(path, field, str(exc)) from exc


# ---------------------------------------------------------------- library

def library_to_json(lib):
    return {"K": lib.K, "N": lib.N, "keypoints": lib.keypoints.tolist()}


def library_from_json(doc, path="<memory>"):
    kp = _array(_require(doc, "keypoints", path), "keypoints", path, (None, 3))
    if kp.ndim != 3:
        raise ParseError(path, "keypoints", "expected K lists of N points")
    for field, expected in (("K", kp.shape[0]), ("N", kp.shape[1])):
        if field in doc and doc[field] != expected:
            raise ParseError(path, field, f"is {doc[field]} but keypoints give {expected}")
    return _build(ShapeLibrary, path, "keypoints", kp)


def write_library(lib, path):
    _dump(library_to_json(lib), path)


def read_library(path):
    return library_from_json(_load(path), path)


# ----------------------------------------------------------- measurements

def measurements_to_json(meas):
    if isinstance(meas, Keypoints3D):
        doc = {"points3d": meas.points.tolist()}
    else:
        doc = {"pixels": meas.pixels.tolist()}
    doc["weights"] = meas.weights.tolist()
    return doc


def measurements_from_json(doc, path="<memory>"):
    if not isinstance(doc, dict):
        raise ParseError(path, "<root>", "expected an object")
    w = doc.get("weights")
    if w is not None:
        w = _array(w, "weights", path)
    if "points3d" in doc:
        pts = _array(doc["points3d"], "points3d", path, (3,))
        return _build(Keypoints3D, path, "points3d", pts, w)
    if "pixels" in doc:
        px = _array(doc["pixels"], "pixels", path, (2,))
        return _build(Keypoints2D, path, "pixels", px, w)
    raise ParseError(path, "points3d", "missing (or 'pixels')")


def write_measurements(meas, path):
    _dump(measurements_to_json(meas), path)


def read_measurements(path):
    return measurements_from_json(_load(path), path)


# ----------------------------------------------------------- dictionaries

def dictionary_to_json(d):
    return {
        "N": d.N,
        "triplets": {",".join(map(str, k)): sorted(d.table[k]) for k in triplets(d.N)},
    }


def dictionary_from_json(doc, path="<memory>"):
    N = _require(doc, "N", path)
    if not isinstance(N, int) or N < 3:
        raise ParseError(path, "N", "must be an integer >= 3")
    raw = _require(doc, "triplets", path)
    if not isinstance(raw, dict):
        raise ParseError(path, "triplets", "expected an object")
    table = {}
    for key, signs in raw.items():
        try:
            k = tuple(int(x) for x in key.split(","))
        except ValueError as exc:
            raise ParseError(path, f"triplets.{key}", "key must be 'i,j,m'") from exc
        if len(k) != 3 or not isinstance(signs, list):
            raise ParseError(path, f"triplets.{key}", "expected a list of signs for i,j,m")
        table[k] = set(signs)
    return _build(WindingDictionary, path, "triplets", N, table)


def write_dictionaries(dicts, path):
    _dump({"dictionaries": [dictionary_to_json(d) for d in dicts]}, path)


def read_dictionaries(path):
    doc = _load(path)
    if isinstance(doc, dict) and "dictionaries" in doc:
        items = doc["dictionaries"]
        if not isinstance(items, list):
            raise ParseError(path, "dictionaries", "expected a list")
        return [dictionary_from_json(d, f"{path}[{i}]") for i, d in enumerate(items)]
    return [dictionary_from_json(doc, path)]


# ----------------------------------------------------------- shape models

def shape_models_to_json(models, keypoints):
    return {
        "models": [
            {
                "keypoints": np.asarray(kp).tolist(),
                "normals": m.normals.tolist(),
                "offsets": m.offsets.tolist(),
                "keypoint_face": m.keypoint_face.tolist(),
            }
            for m, kp in zip(models, keypoints)
        ]
    }


def read_shape_models(path):
    """Returns a list of (ConvexShapeModel, keypoints)."""
    doc = _load(path)
    items = _require(doc, "models", path)
    if not isinstance(items, list):
        raise ParseError(path, "models", "expected a list")
    out = []
    for i, item in enumerate(items):
        where = f"models[{i}]"
        kp = _array(_require(item, "keypoints", path), f"{where}.keypoints", path, (3,))
        normals = _array(_require(item, "normals", path), f"{where}.normals", path, (3,))
        offsets = _array(_require(item, "offsets", path), f"{where}.offsets", path)
        faces = _array(_require(item, "keypoint_face", path), f"{where}.keypoint_face", path, dtype=int)
        model = _build(ConvexShapeModel, path, where, normals, offsets, faces)
        out.append((model, kp))
    return out


def read_annotations(path):
    """Returns (N, [(triplet, sign), ...]) from annotated 2D views."""
    doc = _load(path)
    N = _require(doc, "N", path)
    views = _require(doc, "views", path)
    if not isinstance(N, int) or N < 3:
        raise ParseError(path, "N", "must be an integer >= 3")
    if not isinstance(views, list):
        raise ParseError(path, "views", "expected a list")
    annotated = []
    for v, view in enumerate(views):
        if not isinstance(view, list) or len(view) != N:
            raise ParseError(path, f"views[{v}]", f"expected {N} entries")
        pts = [None if p is None else np.asarray(p, dtype=float) for p in view]
        for key in triplets(N):
            if all(pts[k] is not None for k in key):
                annotated.append((key, winding_order_2d(*(pts[k] for k in key))))
    return N, annotated


# ------------------------------------------------------------------ grids

def read_grid(path):
    """Experiment grid: {"base": {...}, "vary": {field: [values]}, "methods": [...]}

    Optional "beta" (default 0.05) and "mu_update" (default 1.4) set the
    robust estimators' threshold and GNC schedule.
    """
    doc = _load(path)
    if not isinstance(doc, dict):
        raise ParseError(path, "<root>", "expected an object")
    methods = _require(doc, "methods", path)
    if not isinstance(methods, list) or not all(isinstance(m, str) for m in methods):
        raise ParseError(path, "methods", "expected a list of method names")
    base = doc.get("base", {})
    vary = doc.get("vary", {})
    if not isinstance(base, dict):
        raise ParseError(path, "base", "expected an object")
    if not isinstance(vary, dict) or not all(isinstance(v, list) for v in vary.values()):
        raise ParseError(path, "vary", "expected an object of lists")
    beta = doc.get("beta", 0.05)
    if not isinstance(beta, (int, float)) or beta <= 0:
        raise ParseError(path, "beta", "must be a positive number")
    mu_update = doc.get("mu_update", 1.4)
    if not isinstance(mu_update, (int, float)) or mu_update <= 1:
        raise ParseError(path, "mu_update", "must be a number above 1")
    return {"base": base, "vary": vary, "methods": methods, "beta": float(beta), "mu_update": float(mu_update)}
