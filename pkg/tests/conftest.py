import os
from pathlib import Path

import numpy as np
import pytest

from megagcl import graphdata as gd

REPO_ROOT = Path(__file__).resolve().parent.parent
DATA_ROOT = Path(os.environ.get("MEGA_DATA_ROOT", REPO_ROOT / "data"))


@pytest.fixture(scope="session")
def mutag():
    return gd.parse_tu_dataset(DATA_ROOT, "MUTAG")


def write_tu_fixture(folder, name, a_lines, indicator, graph_labels,
                     node_labels=None):
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    (folder / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (folder / f"{name}_graph_indicator.txt").write_text(
        "\n".join(map(str, indicator)) + "\n")
    (folder / f"{name}_graph_labels.txt").write_text(
        "\n".join(map(str, graph_labels)) + "\n")
    if node_labels is not None:
        (folder / f"{name}_node_labels.txt").write_text(
            "\n".join(map(str, node_labels)) + "\n")
    return folder


def two_triangles(tmp_path, name="TRI", labels=(1, 2)):
    a = []
    for off in (0, 3):
        for u, v in [(1, 2), (2, 3), (1, 3)]:
            a.append(f"{off + u}, {off + v}")
            a.append(f"{off + v}, {off + u}")
    return write_tu_fixture(tmp_path, name, a,
                            indicator=[1, 1, 1, 2, 2, 2],
                            graph_labels=list(labels),
                            node_labels=[0, 1, 0, 1, 0, 1])


def ring_record(n, label, phase=0):
    edges = []
    for i in range(n):
        edges.append((i, (i + 1) % n))
    topo = gd.GraphTopology(n, gd.undirected_closure(edges, n))
    node_labels = [(i + phase) % 2 for i in range(n)]
    return gd.GraphRecord(topo, label, node_labels)


def star_record(n, label):
    edges = [(0, i) for i in range(1, n)]
    topo = gd.GraphTopology(n, gd.undirected_closure(edges, n))
    return gd.GraphRecord(topo, label, [i % 2 for i in range(n)])


def synthetic_dataset(n_per_class=12, seed=0, feature_cap=4):
    """Two visibly different families (rings vs stars), degree features."""
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_per_class):
        records.append(ring_record(int(rng.integers(4, 7)), 0))
        records.append(star_record(int(rng.integers(4, 7)), 1))
    ds = gd.Dataset(name="SYN", records=records, n_classes=2)
    return gd.build_node_features(ds, "degree-onehot", cap=feature_cap)
