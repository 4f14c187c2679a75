"""CSV persistence for triplets, share tables and conjoint rows, plus a JSON
store for the remaining domain value types.

Every file starts with one ``# {json}`` metadata line carrying the format
name, dataset kind, schema version and row count, followed by a CSV header.
Floats are written with ``repr`` so a write/read round trip is lossless.
Row errors are reported with 1-based physical line numbers.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .domain import (
    ARMS, DEFAULT_CATEGORIES, PERIODS, SUM_TOL, ChoiceLabel, ChoiceTask, DomainError, EffectEstimate, PartWorth,
    Persona, Region, ShareVector, TripletRecord, TripletTable,
)
from .generation import ConjointDataset

FORMAT = "aem.dataset"
SCHEMA_VERSION = 1
KINDS = ("triplets", "shares", "conjoint")


class DatasetError(ValueError):
    """Malformed dataset file; ``problems`` lists 'line N: ...' messages."""

    def __init__(self, path: str | Path, problems: list[str]):
        self.path = str(path)
        self.problems = problems
        shown = "; ".join(problems[:10]) + (f"; ... ({len(problems)} problems)" if len(problems) > 10 else "")
        super().__init__(f"{path}: {shown}")


def _write(path: str | Path, meta: dict[str, Any], header: list[str], rows: Iterable[list[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    n = 0
    for row in rows:
        w.writerow(row)
        n += 1
    meta = {"format": FORMAT, "version": SCHEMA_VERSION, **meta, "rows": n}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write(buf.getvalue())
    return path


def read_header(path: str | Path) -> tuple[dict[str, Any], list[str], list[list[str]]]:
    """Metadata, column names and raw rows; checks format, version and row count."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or not lines[0].startswith("# "):
        raise DatasetError(path, ["line 1: missing metadata line"])
    try:
        meta = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise DatasetError(path, [f"line 1: unreadable metadata ({exc.msg})"]) from None
    if meta.get("format") != FORMAT:
        raise DatasetError(path, [f"line 1: not an {FORMAT} file"])
    if meta.get("version") != SCHEMA_VERSION:
        raise DatasetError(path, [f"line 1: schema version {meta.get('version')} is not supported (expected {SCHEMA_VERSION})"])
    if meta.get("kind") not in KINDS:
        raise DatasetError(path, [f"line 1: unknown dataset kind {meta.get('kind')!r}"])
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError(path, ["line 2: missing column header"]) from None
    rows = [r for r in reader]
    if rows and rows[-1] == []:
        rows.pop()
    if len(rows) != meta.get("rows"):
        raise DatasetError(path, [f"truncated file: {len(rows)} data rows, metadata promises {meta.get('rows')}"])
    return meta, header, rows


def _columns(path, header: list[str], needed: list[str]) -> dict[str, int]:
    missing = [c for c in needed if c not in header]
    if missing:
        raise DatasetError(path, [f"line 2: missing columns {missing}"])
    return {c: header.index(c) for c in header}


# ---------------------------------------------------------------------------
# Triplets
# ---------------------------------------------------------------------------


def write_triplets(path: str | Path, table: TripletTable) -> Path:
    meta = {
        "kind": "triplets", "n_categories": table.n_categories,
        "region_ids": list(table.region_ids), "order_ids": list(table.order_ids),
        "persona_ids": list(table.persona_ids), "treatment": [bool(t) for t in table.treatment],
    }
    arm = np.where(table.treatment, ARMS[0], ARMS[1])
    rows = (
        [table.region_ids[r], table.order_ids[o], table.persona_ids[p], arm[r], PERIODS[t], int(c)]
        for r, o, p, t, c in zip(table.region.tolist(), table.order.tolist(), table.persona.tolist(),
                                 table.period.tolist(), table.choice.tolist())
    )
    return _write(path, meta, ["region", "order", "persona", "arm", "period", "choice"], rows)


def _triplet_rows(path, meta, header, rows) -> tuple[list[tuple], list[str]]:
    """Parse triplet rows; choice is an index column or one-hot ``choice_<k>`` columns."""
    k = int(meta.get("n_categories", len(DEFAULT_CATEGORIES)))
    col = _columns(path, header, ["region", "order", "persona", "arm", "period"])
    onehot = [f"choice_{j}" for j in range(k)]
    use_onehot = "choice" not in col
    if use_onehot:
        _columns(path, header, onehot)
    problems: list[str] = []
    parsed = []
    for i, row in enumerate(rows):
        line = i + 3
        if len(row) != len(header):
            problems.append(f"line {line}: expected {len(header)} fields, found {len(row)}")
            continue
        if use_onehot:
            try:
                vec = tuple(int(row[col[c]]) for c in onehot)
            except ValueError:
                problems.append(f"line {line}: choice entries must be integers")
                continue
            if sorted(vec) != [0] * (k - 1) + [1]:
                problems.append(f"line {line}: choice {vec} not one-hot")
                continue
            c = vec.index(1)
        else:
            try:
                c = int(row[col["choice"]])
            except ValueError:
                problems.append(f"line {line}: choice {row[col['choice']]!r} is not an integer index")
                continue
            if not 0 <= c < k:
                problems.append(f"line {line}: choice index {c} outside 0..{k - 1}")
                continue
        period, arm = row[col["period"]], row[col["arm"]]
        if period not in PERIODS:
            problems.append(f"line {line}: unknown period {period!r}")
            continue
        if arm not in ARMS:
            problems.append(f"line {line}: unknown arm {arm!r}")
            continue
        parsed.append((line, row[col["region"]], row[col["order"]], row[col["persona"]], arm, period, c))
    return parsed, problems


def read_triplets(path: str | Path) -> TripletTable:
    meta, header, rows = read_header(path)
    if meta["kind"] != "triplets":
        raise DatasetError(path, [f"line 1: expected a triplets file, found {meta['kind']}"])
    parsed, problems = _triplet_rows(path, meta, header, rows)
    region_ids = tuple(meta.get("region_ids") or dict.fromkeys(p[1] for p in parsed))
    order_ids = tuple(meta.get("order_ids") or dict.fromkeys(p[2] for p in parsed))
    persona_ids = tuple(meta.get("persona_ids") or dict.fromkeys(p[3] for p in parsed))
    ri = {v: i for i, v in enumerate(region_ids)}
    oi = {v: i for i, v in enumerate(order_ids)}
    pi = {v: i for i, v in enumerate(persona_ids)}
    arm_of: dict[str, str] = {}
    cols: list[list[int]] = [[], [], [], [], []]
    for line, reg, order, persona, arm, period, c in parsed:
        if reg not in ri or order not in oi or persona not in pi:
            problems.append(f"line {line}: unknown region, order or persona id")
            continue
        if arm_of.setdefault(reg, arm) != arm:
            problems.append(f"line {line}: region {reg} listed in both arms")
            continue
        cols[0].append(ri[reg])
        cols[1].append(oi[order])
        cols[2].append(pi[persona])
        cols[3].append(PERIODS.index(period))
        cols[4].append(c)
    if problems:
        raise DatasetError(path, problems)
    if "treatment" in meta:
        treatment = np.asarray(meta["treatment"], dtype=bool)
    else:
        treatment = np.array([arm_of.get(r) == ARMS[0] for r in region_ids])
    for reg, arm in arm_of.items():
        if bool(treatment[ri[reg]]) != (arm == ARMS[0]):
            raise DatasetError(path, [f"region {reg}: arm column disagrees with metadata"])
    return TripletTable(*(np.asarray(c, dtype=np.int64) for c in cols), region_ids=region_ids, order_ids=order_ids,
                        persona_ids=persona_ids, treatment=treatment,
                        n_categories=int(meta.get("n_categories", len(DEFAULT_CATEGORIES))))


# ---------------------------------------------------------------------------
# Shares
# ---------------------------------------------------------------------------


def write_shares(
    path: str | Path,
    shares: dict[tuple[str, str], np.ndarray],
    arms: dict[str, str],
    categories: tuple[str, ...] = DEFAULT_CATEGORIES,
    label: str = "",
) -> Path:
    rows = ([region, arms[region], period] + [repr(float(v)) for v in s]
            for (region, period), s in sorted(shares.items()))
    return _write(path, {"kind": "shares", "categories": list(categories), "label": label},
                  ["region", "arm", "period"] + list(categories), rows)


def read_shares(path: str | Path) -> tuple[dict[tuple[str, str], np.ndarray], dict[str, str]]:
    """{(region, period): shares} and {region: arm}; every row must be a probability vector."""
    meta, header, rows = read_header(path)
    if meta["kind"] != "shares":
        raise DatasetError(path, [f"line 1: expected a shares file, found {meta['kind']}"])
    cats = list(meta.get("categories") or header[3:])
    col = _columns(path, header, ["region", "arm", "period"] + cats)
    out: dict[tuple[str, str], np.ndarray] = {}
    arms: dict[str, str] = {}
    problems = []
    for i, row in enumerate(rows):
        line = i + 3
        if len(row) != len(header):
            problems.append(f"line {line}: expected {len(header)} fields, found {len(row)}")
            continue
        region, arm, period = row[col["region"]], row[col["arm"]], row[col["period"]]
        try:
            s = np.array([float(row[col[c]]) for c in cats])
        except ValueError:
            problems.append(f"line {line}: non-numeric share")
            continue
        if period not in PERIODS or arm not in ARMS:
            problems.append(f"line {line}: bad period {period!r} or arm {arm!r}")
        elif not np.all(np.isfinite(s)) or np.any(s < 0):
            problems.append(f"line {line}: region {region} has negative or non-finite shares")
        elif abs(s.sum() - 1.0) > SUM_TOL:
            problems.append(f"line {line}: region {region} ({period}) shares sum to {s.sum():.6g}, not 1")
        elif arms.setdefault(region, arm) != arm:
            problems.append(f"line {line}: region {region} listed in both arms")
        elif (region, period) in out:
            problems.append(f"line {line}: duplicate row for region {region} ({period})")
        else:
            out[(region, period)] = s
    if problems:
        raise DatasetError(path, problems)
    return out, arms


def shares_array_to_dict(shares: np.ndarray, region_ids) -> dict[tuple[str, str], np.ndarray]:
    return {(rid, PERIODS[t]): np.asarray(shares[r, t], dtype=np.float64)
            for r, rid in enumerate(region_ids) for t in range(shares.shape[1])}


# ---------------------------------------------------------------------------
# Conjoint rows
# ---------------------------------------------------------------------------


def write_conjoint(path: str | Path, data: ConjointDataset, include_hidden: bool = True) -> Path:
    """One row per task. Auxiliary rows leave ``y`` empty; ``y_hidden`` is evaluation-only."""
    k, q = data.n_options, data.n_attributes
    xcols = [f"x_{i}_{j}" for i in range(k) for j in range(q)]
    header = ["task_id", "customer_id", "part"] + xcols + ["y", "z"] + (["y_hidden"] if include_hidden else [])
    meta = {"kind": "conjoint", "n_options": k, "n_attributes": q,
            "beta_population": [float(v) for v in data.beta_population]}

    def rows():
        t = 0
        for part, X, cust, y, z, hidden in (
            ("primary", data.X_primary, data.customer_primary, data.y_primary, data.z_primary, data.y_primary),
            ("aux", data.X_aux, data.customer_aux, None, data.z_aux, data.y_aux_hidden),
        ):
            for i in range(X.shape[0]):
                row = [f"T{t:06d}", int(cust[i]), part] + [repr(float(v)) for v in X[i].ravel()]
                row += ["" if y is None else int(y[i]), int(z[i])]
                if include_hidden:
                    row.append(int(hidden[i]))
                yield row
                t += 1

    return _write(path, meta, header, rows())


def read_conjoint(path: str | Path) -> ConjointDataset:
    meta, header, rows = read_header(path)
    if meta["kind"] != "conjoint":
        raise DatasetError(path, [f"line 1: expected a conjoint file, found {meta['kind']}"])
    k, q = int(meta["n_options"]), int(meta["n_attributes"])
    xcols = [f"x_{i}_{j}" for i in range(k) for j in range(q)]
    col = _columns(path, header, ["task_id", "customer_id", "part", "y", "z"] + xcols)
    hidden = "y_hidden" in col
    parts: dict[str, list] = {"primary": [], "aux": []}
    problems = []
    for i, row in enumerate(rows):
        line = i + 3
        if len(row) != len(header):
            problems.append(f"line {line}: expected {len(header)} fields, found {len(row)}")
            continue
        part = row[col["part"]]
        if part not in parts:
            problems.append(f"line {line}: unknown part {part!r}")
            continue
        try:
            x = np.array([float(row[col[c]]) for c in xcols]).reshape(k, q)
            z = int(row[col["z"]])
            y = int(row[col["y"]]) if row[col["y"]] != "" else None
            yh = int(row[col["y_hidden"]]) if hidden and row[col["y_hidden"]] != "" else None
            cust = int(row[col["customer_id"]])
        except ValueError as exc:
            problems.append(f"line {line}: {exc}")
            continue
        if not np.all(np.isfinite(x)):
            problems.append(f"line {line}: non-finite attribute values")
        for name, v in (("y", y), ("z", z), ("y_hidden", yh)):
            if v is not None and not 0 <= v <= k:
                problems.append(f"line {line}: {name} index {v} out of range 0..{k}")
        if part == "primary" and y is None:
            problems.append(f"line {line}: primary row without a human choice y")
        parts[part].append((x, y, z, yh, cust))
    if problems:
        raise DatasetError(path, problems)

    def stack(part, j, dtype):
        vals = [r[j] for r in parts[part]]
        if dtype is None:
            return np.stack(vals) if vals else np.zeros((0, k, q))
        return np.array([-1 if v is None else v for v in vals], dtype=dtype)

    return ConjointDataset(
        X_primary=stack("primary", 0, None), y_primary=stack("primary", 1, np.int64),
        z_primary=stack("primary", 2, np.int64), customer_primary=stack("primary", 4, np.int64),
        X_aux=stack("aux", 0, None), z_aux=stack("aux", 2, np.int64), customer_aux=stack("aux", 4, np.int64),
        y_aux_hidden=stack("aux", 3, np.int64), beta_population=np.asarray(meta["beta_population"]),
    )


def validate_file(path: str | Path) -> list[str]:
    """All problems found in a dataset file (empty when valid)."""
    try:
        meta, _, _ = read_header(path)
        {"triplets": read_triplets, "shares": read_shares, "conjoint": read_conjoint}[meta["kind"]](path)
    except DatasetError as exc:
        return exc.problems
    except (OSError, UnicodeDecodeError) as exc:
        return [f"cannot read file: {exc}"]
    return []


# ---------------------------------------------------------------------------
# JSON object store
# ---------------------------------------------------------------------------

OBJECT_TYPES = {cls.__name__: cls for cls in (
    ChoiceTask, ChoiceLabel, Persona, Region, TripletRecord, ShareVector, PartWorth, EffectEstimate)}


def _encode(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"array": value.tolist(), "dtype": value.dtype.str}
    if isinstance(value, tuple):
        return {"tuple": [_encode(v) for v in value]}
    if isinstance(value, dict):
        return {"dict": {str(k): _encode(v) for k, v in value.items()}}
    if isinstance(value, list):
        return [_encode(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, list):
        return [_decode(v) for v in value]
    if not isinstance(value, dict):
        return value
    if "array" in value:
        return np.array(value["array"], dtype=np.dtype(value["dtype"]))
    if "tuple" in value:
        return tuple(_decode(v) for v in value["tuple"])
    return {k: _decode(v) for k, v in value["dict"].items()}


def write_objects(path: str | Path, objects: Iterable[Any]) -> Path:
    """Persist domain value objects (any of ``OBJECT_TYPES``) as one JSON document."""
    items = []
    for obj in objects:
        name = type(obj).__name__
        if OBJECT_TYPES.get(name) is not type(obj):
            raise TypeError(f"not a storable domain type: {name}")
        fields = {f.name: _encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        items.append({"type": name, "fields": fields})
    doc = {"format": FORMAT, "kind": "objects", "schema_version": SCHEMA_VERSION, "items": items}
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_objects(path: str | Path) -> list[Any]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(path, [f"line {exc.lineno}: invalid JSON ({exc.msg})"]) from None
    if doc.get("format") != FORMAT or doc.get("kind") != "objects":
        raise DatasetError(path, ["line 1: not an object store"])
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(path, [f"line 1: unsupported schema version {doc.get('schema_version')!r}"])
    out = []
    for i, item in enumerate(doc["items"]):
        cls = OBJECT_TYPES.get(item.get("type"))
        if cls is None:
            raise DatasetError(path, [f"item {i}: unknown type {item.get('type')!r}"])
        try:
            out.append(cls(**{k: _decode(v) for k, v in item["fields"].items()}))
        except (DomainError, TypeError) as exc:
            raise DatasetError(path, [f"item {i}: {exc}"]) from None
    return out
