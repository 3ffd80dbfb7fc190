"""Instance and result files (JSON), atomic writes and run manifests."""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .errors import StructuralError
from .model import INF, AllocationGraph, Campaign, PenaltySpec, SupplyNode, TargetingPredicate, build_graph

FORMAT = "gdalloc-instance/1"


# ---------------------------------------------------------------------------
# encoding helpers
# ---------------------------------------------------------------------------


def _plain(obj):
    """Convert numpy scalars/arrays and tuples to JSON-ready values; non-finite
    floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def _num(x, what="value"):
    if isinstance(x, str):
        if x in ("inf", "Infinity"):
            return INF
        raise StructuralError(f"{what}: expected a number, got {x!r}")
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise StructuralError(f"{what}: expected a number, got {x!r}")
    return float(x)


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, exact float repr)."""
    return json.dumps(_plain(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, dumps(obj))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise StructuralError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class ResultDir:
    """Stage files in a temporary sibling directory; publish on success.

    Nothing is left at ``path`` if the block raises.
    """

    def __init__(self, path):
        self.path = Path(path)

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.path.name}.", dir=self.path.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.path.exists():
            shutil.rmtree(self.path)
        os.replace(self.tmp, self.path)
        return False


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


def _predicate_to_dict(p: TargetingPredicate):
    out = {"clauses": {k: sorted(v, key=str) for k, v in p.clauses.items()}}
    if p.ranges:
        out["ranges"] = {k: list(v) for k, v in p.ranges.items()}
    if p.date_range is not None:
        out["date_range"] = [d.isoformat() for d in p.date_range]
        out["date_attribute"] = p.date_attribute
    return out


def _predicate_from_dict(d, where):
    if d is None:
        return TargetingPredicate()
    if not isinstance(d, dict):
        raise StructuralError(f"{where}.targeting: expected an object")
    clauses = d.get("clauses", {})
    if not isinstance(clauses, dict) or not all(isinstance(v, list) for v in clauses.values()):
        raise StructuralError(f"{where}.targeting.clauses: expected name -> list of values")
    try:
        return TargetingPredicate(
            clauses,
            {k: tuple(v) for k, v in d.get("ranges", {}).items()},
            tuple(d["date_range"]) if d.get("date_range") else None,
            d.get("date_attribute", "date"),
        )
    except (TypeError, ValueError) as exc:
        raise StructuralError(f"{where}.targeting: {exc}") from exc


def instance_to_dict(supplies, campaigns, edges=None, metadata=None) -> dict:
    out = {
        "format": FORMAT,
        "supplies": [
            {"id": s.id, "weight": s.weight, "price": s.price, "attributes": dict(s.attributes)} for s in supplies
        ],
        "campaigns": [
            {
                "id": c.id,
                "demand": c.demand,
                "priority": c.priority,
                "click_value": c.click_value,
                "conversion_value": c.conversion_value,
                "penalty": [[cap, cost] for cap, cost in c.penalty.tiers],
                "targeting": _predicate_to_dict(c.targeting),
            }
            for c in campaigns
        ],
    }
    if edges is not None:
        out["edges"] = [[sid, cid, pc, pa] for sid, cid, pc, pa in edges]
    if metadata:
        out["metadata"] = metadata
    return out


def graph_edges(graph: AllocationGraph):
    sids = [s.id for s in graph.supplies]
    cids = [c.id for c in graph.campaigns]
    return [
        (sids[i], cids[j], pc, pa)
        for i, j, pc, pa in zip(
            graph.edge_supply.tolist(), graph.edge_campaign.tolist(), graph.click_prob.tolist(), graph.conv_prob.tolist()
        )
    ]


def write_instance(path, supplies, campaigns, edges=None, metadata=None):
    write_json(path, instance_to_dict(supplies, campaigns, edges, metadata))


def _field(d, key, where, default=None, required=False):
    if key not in d:
        if required:
            raise StructuralError(f"{where}: missing field '{key}'")
        return default
    return d[key]


def instance_from_dict(data):
    """``(supplies, campaigns, edges or None, metadata)`` from a parsed file."""
    if not isinstance(data, dict):
        raise StructuralError("instance: expected a top-level object")
    for key in ("supplies", "campaigns"):
        if not isinstance(data.get(key), list):
            raise StructuralError(f"instance: '{key}' must be a list")
    supplies = []
    for k, s in enumerate(data["supplies"]):
        where = f"supplies[{k}]"
        if not isinstance(s, dict):
            raise StructuralError(f"{where}: expected an object")
        attrs = _field(s, "attributes", where, {})
        if not isinstance(attrs, dict):
            raise StructuralError(f"{where}.attributes: expected an object")
        try:
            supplies.append(
                SupplyNode(
                    str(_field(s, "id", where, required=True)),
                    _num(_field(s, "weight", where, required=True), f"{where}.weight"),
                    _num(_field(s, "price", where, 0.0), f"{where}.price"),
                    attrs,
                )
            )
        except ValueError as exc:
            raise StructuralError(f"{where}: {exc}") from exc
    campaigns = []
    for k, c in enumerate(data["campaigns"]):
        where = f"campaigns[{k}]"
        if not isinstance(c, dict):
            raise StructuralError(f"{where}: expected an object")
        pen = _field(c, "penalty", where, [["inf", 1.0]])
        try:
            tiers = tuple((_num(cap, f"{where}.penalty"), _num(cost, f"{where}.penalty")) for cap, cost in pen)
            campaigns.append(
                Campaign(
                    str(_field(c, "id", where, required=True)),
                    _num(_field(c, "demand", where, required=True), f"{where}.demand"),
                    priority=_num(_field(c, "priority", where, 1.0), f"{where}.priority"),
                    click_value=_num(_field(c, "click_value", where, 0.0), f"{where}.click_value"),
                    conversion_value=_num(_field(c, "conversion_value", where, 0.0), f"{where}.conversion_value"),
                    penalty=PenaltySpec(tiers),
                    targeting=_predicate_from_dict(c.get("targeting"), where),
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, StructuralError):
                raise
            raise StructuralError(f"{where}: {exc}") from exc
    edges = None
    if "edges" in data:
        if not isinstance(data["edges"], list):
            raise StructuralError("instance: 'edges' must be a list")
        edges = []
        for k, e in enumerate(data["edges"]):
            where = f"edges[{k}]"
            if isinstance(e, dict):
                rec = (e.get("supply"), e.get("campaign"), e.get("click_prob", 0.0), e.get("conv_prob", 0.0))
            elif isinstance(e, list) and 2 <= len(e) <= 4:
                rec = tuple(e) + (0.0,) * (4 - len(e))
            else:
                raise StructuralError(f"{where}: expected [supply, campaign, click_prob?, conv_prob?]")
            if rec[0] is None or rec[1] is None:
                raise StructuralError(f"{where}: missing supply or campaign id")
            edges.append((str(rec[0]), str(rec[1]), _num(rec[2], f"{where}.click_prob"), _num(rec[3], f"{where}.conv_prob")))
    return supplies, campaigns, edges, data.get("metadata", {})


def read_instance(path):
    return instance_from_dict(read_json(path))


def load_graph(path) -> AllocationGraph:
    supplies, campaigns, edges, _ = read_instance(path)
    return build_graph(supplies, campaigns, edges)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


def duals_to_dict(graph: AllocationGraph, duals, floor_names=()) -> dict:
    return duals.as_dict(graph, floor_names)


def result_to_dict(result) -> dict:
    """Everything about a run except wall-clock times."""
    g = result.graph
    names = [f["name"] for f in result.trace.floors]
    row = result.row
    return {
        "config": result.config.as_dict(),
        "label": result.label,
        "allocation": result.allocation.to_records(g, threshold=0.0),
        "duals": duals_to_dict(g, result.duals, names),
        "metrics": {
            "F1": result.metrics[0],
            "F2": result.metrics[1],
            "F3": result.metrics[2],
            "ngd": row.ngd,
            "click": row.click,
            "ngd_click": row.ngd_click,
            "gd": row.gd,
            "click_only": row.click_only,
        },
        "objective": result.objective,
        "trace": result.trace.as_dict(),
        "feasibility": result.trim.as_dict(),
        "recovered_gamma": result.recovered_gamma,
    }


def manifest(config: dict, instance_path, seed=None, extra=None) -> dict:
    out = {
        "config": config,
        "seed": seed,
        "instance": {"path": os.path.basename(str(instance_path)), "sha256": sha256_file(instance_path)},
    }
    if extra:
        out.update(extra)
    return out


def write_result(directory, result, manifest_data=None):
    """Files of one solve inside ``directory`` (already staged)."""
    d = Path(directory)
    data = result_to_dict(result)
    write_json(d / "allocation.json", data["allocation"])
    write_json(d / "duals.json", data["duals"])
    write_json(d / "trace.json", data["trace"])
    write_json(d / "feasibility.json", data["feasibility"])
    write_json(
        d / "metrics.json",
        {"label": data["label"], "knobs": result.config.knob_values(), "objective": data["objective"],
         "recovered_gamma": data["recovered_gamma"], **data["metrics"]},
    )
    if manifest_data is not None:
        write_json(d / "manifest.json", manifest_data)
