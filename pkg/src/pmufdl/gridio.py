"""Grid description files (YAML) and placement files (JSON).

A grid file has five sections: NODES, BRANCHES, SOURCES, LOADS and
FREQUENCY.  Complex entries are written as [re, im] pairs; 3x3 matrices as
three rows of three such pairs.  Ohms for impedances, siemens for shunt
admittances, volts for EMFs, henry for Petersen inductances.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .grid import (
    Branch, GridModel, GridModelError, Grounding, Load, Node, Source,
)

BENCHMARK_RESOURCE = "benchmark17.yaml"
SCENARIOS_RESOURCE = "scenarios_benchmark.yaml"


class GridFileError(ValueError):
    """Malformed grid description file."""


def _complex_in(value, where: str) -> complex:
    try:
        re, im = value
        return complex(float(re), float(im))
    except (TypeError, ValueError):
        raise GridFileError(f"{where}: expected a [re, im] pair, got {value!r}")


def _matrix_in(value, where: str) -> np.ndarray:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise GridFileError(f"{where}: expected 3 rows")
    out = np.zeros((3, 3), dtype=complex)
    for i, row in enumerate(value):
        if not isinstance(row, (list, tuple)) or len(row) != 3:
            raise GridFileError(f"{where}: row {i} must hold 3 entries")
        for j, cell in enumerate(row):
            out[i, j] = _complex_in(cell, f"{where}[{i}][{j}]")
    return out


def _complex_out(c: complex) -> list[float]:
    return [float(np.real(c)), float(np.imag(c))]


def _matrix_out(m: np.ndarray) -> list[list[list[float]]]:
    return [[_complex_out(m[i, j]) for j in range(3)] for i in range(3)]


def _grounding_in(value, where: str) -> Grounding | None:
    if value is None:
        return None
    if not isinstance(value, dict) or "kind" not in value:
        raise GridFileError(f"{where}: grounding needs a 'kind'")
    kind = value["kind"]
    if kind == "none":
        return None
    try:
        return Grounding(kind=kind, inductance_h=value.get("inductance_h"))
    except GridModelError as exc:
        raise GridFileError(f"{where}: {exc}") from exc


def load_grid(path: str | Path) -> GridModel:
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise GridFileError(f"{path}: {exc}") from exc
    return grid_from_dict(doc, source=str(path))


def grid_from_dict(doc: Any, source: str = "<grid>") -> GridModel:
    if not isinstance(doc, dict):
        raise GridFileError(f"{source}: top level must be a mapping")
    for section in ("NODES", "BRANCHES", "FREQUENCY"):
        if section not in doc:
            raise GridFileError(f"{source}: missing section {section}")

    nodes = []
    for k, item in enumerate(doc["NODES"]):
        where = f"{source}: NODES[{k}]"
        try:
            nodes.append(Node(
                id=int(item["id"]),
                name=str(item.get("name", "")),
                monitored=bool(item.get("monitored", False)),
                kind=str(item.get("kind", "real")),
                grounding=_grounding_in(item.get("grounding"), where)))
        except (KeyError, TypeError, ValueError, GridModelError) as exc:
            raise GridFileError(f"{where}: {exc}") from exc

    branches = []
    for k, item in enumerate(doc["BRANCHES"]):
        where = f"{source}: BRANCHES[{k}]"
        try:
            branches.append(Branch(
                id=int(item["id"]),
                from_node=int(item["from"]),
                to_node=int(item["to"]),
                series_impedance=_matrix_in(item["series_impedance"],
                                            f"{where}.series_impedance"),
                shunt_from=(_matrix_in(item["shunt_admittance_from"],
                                       f"{where}.shunt_admittance_from")
                            if "shunt_admittance_from" in item else None),
                shunt_to=(_matrix_in(item["shunt_admittance_to"],
                                     f"{where}.shunt_admittance_to")
                          if "shunt_admittance_to" in item else None),
                kind=str(item.get("kind", "line")),
                fault_hypothesis_eligible=bool(
                    item.get("fault_hypothesis_eligible", True))))
        except (KeyError, TypeError, ValueError, GridModelError) as exc:
            raise GridFileError(f"{where}: {exc}") from exc

    sources = []
    for k, item in enumerate(doc.get("SOURCES", []) or []):
        where = f"{source}: SOURCES[{k}]"
        try:
            emf = [_complex_in(v, f"{where}.emf[{i}]")
                   for i, v in enumerate(item["emf"])]
            sources.append(Source(
                node=int(item["node"]), emf=np.array(emf),
                internal_impedance=_matrix_in(
                    item["internal_impedance"], f"{where}.internal_impedance")))
        except (KeyError, TypeError, ValueError, GridModelError) as exc:
            raise GridFileError(f"{where}: {exc}") from exc

    loads = []
    for k, item in enumerate(doc.get("LOADS", []) or []):
        where = f"{source}: LOADS[{k}]"
        try:
            loads.append(Load(
                node=int(item["node"]),
                delta_impedance=_matrix_in(item["delta_impedance"],
                                           f"{where}.delta_impedance")))
        except (KeyError, TypeError, ValueError, GridModelError) as exc:
            raise GridFileError(f"{where}: {exc}") from exc

    try:
        return GridModel(nodes=tuple(nodes), branches=tuple(branches),
                         sources=tuple(sources), loads=tuple(loads),
                         frequency=float(doc["FREQUENCY"]))
    except GridModelError as exc:
        raise GridFileError(f"{source}: {exc}") from exc


def grid_to_dict(grid: GridModel) -> dict:
    doc: dict[str, Any] = {"FREQUENCY": grid.frequency, "NODES": [], "BRANCHES": [],
                           "SOURCES": [], "LOADS": []}
    for nd in grid.nodes:
        item: dict[str, Any] = {"id": nd.id, "name": nd.name,
                                "monitored": nd.monitored}
        if nd.kind != "real":
            item["kind"] = nd.kind
        if nd.grounding is not None:
            g: dict[str, Any] = {"kind": nd.grounding.kind}
            if nd.grounding.inductance_h is not None:
                g["inductance_h"] = nd.grounding.inductance_h
            item["grounding"] = g
        doc["NODES"].append(item)
    for b in grid.branches:
        item = {
            "id": b.id, "from": b.from_node, "to": b.to_node,
            "kind": b.kind,
            "fault_hypothesis_eligible": b.fault_hypothesis_eligible,
            "series_impedance": _matrix_out(b.series_impedance),
        }
        if np.any(b.shunt_from):
            item["shunt_admittance_from"] = _matrix_out(b.shunt_from)
        if np.any(b.shunt_to):
            item["shunt_admittance_to"] = _matrix_out(b.shunt_to)
        doc["BRANCHES"].append(item)
    for src in grid.sources:
        doc["SOURCES"].append({
            "node": src.node,
            "emf": [_complex_out(v) for v in src.emf],
            "internal_impedance": _matrix_out(src.internal_impedance)})
    for load in grid.loads:
        doc["LOADS"].append({
            "node": load.node,
            "delta_impedance": _matrix_out(load.delta_impedance)})
    return doc


def save_grid(grid: GridModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(grid_to_dict(grid), fh, sort_keys=False,
                       default_flow_style=None)


def load_benchmark() -> GridModel:
    """The packaged 17-node two-feeder benchmark grid.

    Topology and electrical parameters are representative reconstructions of
    a Cigre-class MV network (20 kV, 50 Hz); they are not bit-faithful to
    any published dataset.  Monitored flags ship with the resolution-optimal
    placement.
    """
    ref = resources.files("pmufdl.data").joinpath(BENCHMARK_RESOURCE)
    with resources.as_file(ref) as path:
        return load_grid(path)


def benchmark_scenarios_path() -> Path:
    """Path of the packaged nine-scenario campaign file."""
    ref = resources.files("pmufdl.data").joinpath(SCENARIOS_RESOURCE)
    with resources.as_file(ref) as path:
        return Path(path)


# ---------------------------------------------------------------------------
# placement files
# ---------------------------------------------------------------------------

def save_placement(solution, path: str | Path) -> None:
    doc = {
        "gamma": list(solution.gamma),
        "node_ids": list(solution.node_ids),
        "monitored": list(solution.monitored_ids),
        "d": solution.d,
        "cost": solution.cost,
        "r": solution.r,
        "optimal": solution.optimal,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_placement_monitored(path: str | Path) -> tuple[int, ...]:
    with open(path) as fh:
        doc = json.load(fh)
    if "monitored" not in doc:
        raise GridFileError(f"{path}: placement file needs a 'monitored' list")
    return tuple(sorted(int(i) for i in doc["monitored"]))
