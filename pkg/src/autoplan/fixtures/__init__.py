"""Bundled example graphs and topologies."""
from __future__ import annotations

import json
from importlib import resources

from ..cluster import Topology
from ..graph.ir import ComputationGraph, parse_graph

GRAPHS = ("gpt_block", "transformer_2block", "mlp_2layer")
TOPOLOGIES = ("topology_8gpu",)


def fixture_path(name: str):
    return resources.files(__package__) / f"{name}.json"


def load_fixture_graph(name: str) -> ComputationGraph:
    return parse_graph(fixture_path(name).read_text())


def load_fixture_topology(name: str = "topology_8gpu") -> Topology:
    return Topology.from_dict(json.loads(fixture_path(name).read_text()))
