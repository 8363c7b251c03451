"""File formats: GeoJSON domains and regions, dataset CSVs, result JSON.

The dataset CSV schemas are fixed and documented bit-exactly:

    counts:        x,y,count[,duration]
    occupancy:     x,y,visits,detections
    presence-only: x,y
    covariates:    x,y,name,value

Headers are mandatory and must match exactly (after whitespace strip);
every malformed cell is reported with its 1-based file line number.
Numeric CSV output uses 9 significant digits; coordinate columns given
as strings are echoed verbatim.  JSON output is key-sorted so a fixed
seed yields byte-identical files across runs.
"""

import csv
import io
import json
import logging
import os

import numpy as np
from shapely.geometry import Polygon, shape

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


def format_number(v) -> str:
    """9-significant-digit numeric formatting for CSV output."""
    return "%.9g" % float(v)


# ---------------------------------------------------------------------------
# GeoJSON


def _geojson_geometries(doc, path):
    """Yield (geometry dict, properties dict) from any common GeoJSON shape."""
    t = doc.get("type")
    if t == "FeatureCollection":
        for feat in doc.get("features", []):
            yield feat.get("geometry"), feat.get("properties") or {}
    elif t == "Feature":
        yield doc.get("geometry"), doc.get("properties") or {}
    elif t in ("Polygon", "MultiPolygon"):
        yield doc, {}
    else:
        raise DataError(f"unsupported GeoJSON type {t!r}", path=path)


def load_boundary(path) -> Polygon:
    """Domain boundary: one GeoJSON Polygon, exterior (first) ring only."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"boundary file not found: {path}", path=path) from None
    except json.JSONDecodeError as e:
        raise DataError(f"boundary file is not valid JSON: {e}", path=path) from None
    geoms = list(_geojson_geometries(doc, path))
    if len(geoms) != 1:
        raise DataError(
            f"boundary file must contain exactly one geometry, found {len(geoms)}",
            path=path,
        )
    geom, _ = geoms[0]
    if geom is None or geom.get("type") != "Polygon":
        raise DataError("boundary geometry must be a Polygon", path=path)
    rings = geom.get("coordinates") or []
    if not rings:
        raise DataError("boundary polygon has no coordinate rings", path=path)
    if len(rings) > 1:
        log.warning("boundary polygon has %d rings; using the first only", len(rings))
    try:
        poly = Polygon(rings[0])
    except Exception as e:
        raise DataError(f"boundary ring is not a valid polygon: {e}", path=path) from None
    return poly


def load_regions(path, require_present=False):
    """Polygon features as (polygon, properties) pairs.

    With require_present=True every feature must carry a boolean
    `present` property (the regional-list format).
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"regions file not found: {path}", path=path) from None
    except json.JSONDecodeError as e:
        raise DataError(f"regions file is not valid JSON: {e}", path=path) from None
    out = []
    for k, (geom, props) in enumerate(_geojson_geometries(doc, path)):
        if geom is None or geom.get("type") not in ("Polygon", "MultiPolygon"):
            raise DataError(
                f"region feature {k} must be a Polygon or MultiPolygon", path=path
            )
        poly = shape(geom)
        if require_present:
            present = props.get("present")
            if not isinstance(present, bool):
                raise DataError(
                    f"region feature {k} lacks a boolean `present` property",
                    path=path,
                )
        out.append((poly, props))
    if not out:
        raise DataError("regions file contains no polygon features", path=path)
    return out


def write_regions(path, polygons, present=None):
    """Write polygons (optionally with presence flags) as a FeatureCollection."""
    features = []
    for k, poly in enumerate(polygons):
        props = {}
        if present is not None:
            props["present"] = bool(present[k])
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [
                        [[float(x), float(y)] for x, y in poly.exterior.coords]
                    ],
                },
                "properties": props,
            }
        )
    save_json(path, {"type": "FeatureCollection", "features": features})


# ---------------------------------------------------------------------------
# CSV reading


def _open_rows(path):
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}", path=path) from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("file is empty (missing header)", row=1, path=path) from None
        header = [h.strip() for h in header]
        rows = [(i + 2, row) for i, row in enumerate(reader) if row and any(row)]
    return header, rows


def _check_header(header, allowed, path):
    """allowed: list of acceptable header tuples; returns the matched one."""
    for cand in allowed:
        if header == list(cand):
            return cand
    raise DataError(
        f"header {header} does not match the documented schema "
        f"{' or '.join(','.join(c) for c in allowed)}",
        row=1,
        path=path,
    )


def _cell_float(row_no, row, j, name, path):
    raw = row[j] if j < len(row) else "<missing>"
    try:
        v = float(raw)
    except ValueError:
        raise DataError(
            f"column {name!r} is not a number: {raw!r}", row=row_no, path=path
        ) from None
    if not np.isfinite(v):
        raise DataError(f"column {name!r} is not finite", row=row_no, path=path)
    return v


def _cell_int(row_no, row, j, name, path):
    raw = row[j] if j < len(row) else "<missing>"
    try:
        v = int(raw)
    except ValueError:
        raise DataError(
            f"column {name!r} is not an integer: {raw!r}", row=row_no, path=path
        ) from None
    return v


def _check_width(row_no, row, width, path):
    if len(row) != width:
        raise DataError(
            f"expected {width} columns, found {len(row)}", row=row_no, path=path
        )


def read_po_csv(path):
    """Presence-only points: header x,y. Returns an (M, 2) array."""
    header, rows = _open_rows(path)
    _check_header(header, [("x", "y")], path)
    pts = np.empty((len(rows), 2))
    for k, (row_no, row) in enumerate(rows):
        _check_width(row_no, row, 2, path)
        pts[k, 0] = _cell_float(row_no, row, 0, "x", path)
        pts[k, 1] = _cell_float(row_no, row, 1, "y", path)
    return pts


def read_points_csv_verbatim(path):
    """x,y points plus their original cell text, for verbatim echoing."""
    header, rows = _open_rows(path)
    _check_header(header, [("x", "y")], path)
    pts = np.empty((len(rows), 2))
    raw = []
    for k, (row_no, row) in enumerate(rows):
        _check_width(row_no, row, 2, path)
        pts[k, 0] = _cell_float(row_no, row, 0, "x", path)
        pts[k, 1] = _cell_float(row_no, row, 1, "y", path)
        raw.append((row[0], row[1]))
    return pts, raw


def read_counts_csv(path):
    """Counts: header x,y,count[,duration]. Returns (sites, counts, durations)."""
    header, rows = _open_rows(path)
    matched = _check_header(header, [("x", "y", "count"), ("x", "y", "count", "duration")], path)
    has_duration = len(matched) == 4
    sites = np.empty((len(rows), 2))
    counts = np.empty(len(rows), dtype=np.int64)
    durations = np.empty(len(rows)) if has_duration else None
    for k, (row_no, row) in enumerate(rows):
        _check_width(row_no, row, len(matched), path)
        sites[k, 0] = _cell_float(row_no, row, 0, "x", path)
        sites[k, 1] = _cell_float(row_no, row, 1, "y", path)
        c = _cell_int(row_no, row, 2, "count", path)
        if c < 0:
            raise DataError("count must be nonnegative", row=row_no, path=path)
        counts[k] = c
        if has_duration:
            d = _cell_float(row_no, row, 3, "duration", path)
            if d <= 0:
                raise DataError("duration must be positive", row=row_no, path=path)
            durations[k] = d
    return sites, counts, durations


def read_occupancy_csv(path):
    """Occupancy: header x,y,visits,detections. Returns (sites, visits, detections)."""
    header, rows = _open_rows(path)
    _check_header(header, [("x", "y", "visits", "detections")], path)
    sites = np.empty((len(rows), 2))
    visits = np.empty(len(rows), dtype=np.int64)
    detections = np.empty(len(rows), dtype=np.int64)
    for k, (row_no, row) in enumerate(rows):
        _check_width(row_no, row, 4, path)
        sites[k, 0] = _cell_float(row_no, row, 0, "x", path)
        sites[k, 1] = _cell_float(row_no, row, 1, "y", path)
        n_vis = _cell_int(row_no, row, 2, "visits", path)
        n_det = _cell_int(row_no, row, 3, "detections", path)
        if n_vis < 1:
            raise DataError("visits must be >= 1", row=row_no, path=path)
        if not 0 <= n_det <= n_vis:
            raise DataError(
                "detections must lie in [0, visits]", row=row_no, path=path
            )
        visits[k] = n_vis
        detections[k] = n_det
    return sites, visits, detections


def read_covariates_csv(path):
    """Covariate observations: header x,y,name,value.

    Returns {name: (points array, values array)} preserving row order.
    """
    header, rows = _open_rows(path)
    _check_header(header, [("x", "y", "name", "value")], path)
    by_name = {}
    for row_no, row in rows:
        _check_width(row_no, row, 4, path)
        x = _cell_float(row_no, row, 0, "x", path)
        y = _cell_float(row_no, row, 1, "y", path)
        name = row[2].strip()
        if not name:
            raise DataError("covariate name is empty", row=row_no, path=path)
        v = _cell_float(row_no, row, 3, "value", path)
        by_name.setdefault(name, []).append((x, y, v))
    return {
        name: (np.array([(x, y) for x, y, _ in triples]),
               np.array([v for _, _, v in triples]))
        for name, triples in by_name.items()
    }


# ---------------------------------------------------------------------------
# CSV writing


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def write_po_csv(path, points):
    """Presence-only points; the header is written even when empty."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    _write_csv(
        path, ["x", "y"],
        [[format_number(x), format_number(y)] for x, y in pts],
    )


def write_counts_csv(path, sites, counts, durations=None):
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    if durations is None:
        rows = [
            [format_number(x), format_number(y), str(int(c))]
            for (x, y), c in zip(sites, counts)
        ]
        _write_csv(path, ["x", "y", "count"], rows)
    else:
        rows = [
            [format_number(x), format_number(y), str(int(c)), format_number(d)]
            for (x, y), c, d in zip(sites, counts, durations)
        ]
        _write_csv(path, ["x", "y", "count", "duration"], rows)


def write_occupancy_csv(path, sites, visits, detections):
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    rows = [
        [format_number(x), format_number(y), str(int(n)), str(int(d))]
        for (x, y), n, d in zip(sites, visits, detections)
    ]
    _write_csv(path, ["x", "y", "visits", "detections"], rows)


def write_predictions_csv(path, points, mean, se, species=None, coord_strings=None):
    """Prediction grid: x,y,mean,se[,species].

    coord_strings, when given, echoes input coordinate text verbatim
    instead of reformatting the parsed floats.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    header = ["x", "y", "mean", "se"] + (["species"] if species is not None else [])
    rows = []
    for k in range(len(pts)):
        if coord_strings is not None:
            x_s, y_s = coord_strings[k]
        else:
            x_s, y_s = format_number(pts[k, 0]), format_number(pts[k, 1])
        row = [
            x_s,
            y_s,
            format_number(mean[k]),
            format_number(se[k]) if se is not None else "",
        ]
        if species is not None:
            row.append(species)
        rows.append(row)
    _write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# JSON


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def save_json(path, obj):
    """Key-sorted, newline-terminated JSON; byte-stable for a fixed input."""
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=2)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}", path=path) from None
    except json.JSONDecodeError as e:
        raise DataError(f"not valid JSON: {e}", path=path) from None


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Parse and schema-validate a run configuration.

    The JSON schema ships with the package (config_schema.json); unknown
    keys are rejected at every level.
    """
    import jsonschema

    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from None
    schema_path = os.path.join(os.path.dirname(__file__), "config_schema.json")
    with open(schema_path) as fh:
        schema = json.load(fh)
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {first.message}")
    return cfg
