"""Graph data model, TU-format ingestion, node features, batching, splits.

The TU file convention: a dataset ``NAME`` is a directory holding
``NAME_A.txt`` (comma-separated 1-indexed directed edge pairs),
``NAME_graph_indicator.txt`` (one 1-indexed graph id per node line) and
``NAME_graph_labels.txt`` (one label per graph), plus optional
``NAME_node_labels.txt`` / ``NAME_node_attributes.txt``. Whitespace around
commas and CRLF line endings are tolerated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class GraphTopology:
    """Undirected topology stored as directed pairs, both directions present.

    Self-loops are implicit (one per node, materialized at batch time).
    """

    n_nodes: int
    edges: tuple  # of (u, v) int pairs, u != v


@dataclass
class GraphRecord:
    topology: GraphTopology
    label: int
    node_labels: list | None = None
    features: np.ndarray | None = None

    @property
    def n_nodes(self):
        return self.topology.n_nodes


@dataclass
class Dataset:
    name: str
    records: list
    n_classes: int
    feature_scheme: str | None = None

    def __len__(self):
        return len(self.records)

    @property
    def feature_width(self):
        first = self.records[0].features
        return None if first is None else first.shape[1]

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.intp)


@dataclass
class GraphBatch:
    """Block-diagonal concatenation of graphs.

    ``edge_src``/``edge_dst`` hold all directed non-self edges (shifted by
    node offsets) followed by one self-loop per node, so an aligned edge
    weight vector has its non-self entries first and its self entries last.
    """

    n_graphs: int
    n_nodes: int
    offsets: np.ndarray
    graph_of_node: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    n_nonself: int
    features: np.ndarray

    @property
    def n_edges(self):
        return self.edge_src.shape[0]


@dataclass
class SplitResult:
    train: list
    val: list
    test: list
    stratified: bool


def undirected_closure(edges, n_nodes):
    """Deduplicate directed pairs, drop self-loops, add missing reverses.

    Order-preserving, so parsing is deterministic; idempotent.
    """
    seen = dict.fromkeys((int(u), int(v)) for u, v in edges
                         if int(u) != int(v))
    for u, v in list(seen):
        if (v, u) not in seen:
            seen[(v, u)] = None
    for u, v in seen:
        if not (0 <= u < n_nodes and 0 <= v < n_nodes):
            raise DataError(f"edge ({u}, {v}) outside node range 0..{n_nodes - 1}")
    return tuple(seen)


def _find_dataset_dir(root_dir, name):
    root = Path(root_dir)
    for candidate in (root / name, root):
        if (candidate / f"{name}_A.txt").exists():
            return candidate
    raise DataError(
        f"missing mandatory file {name}_A.txt under {root} (or {root / name})")


def _read_lines(path):
    return path.read_text().splitlines()


def _int_lines(path, what):
    out = []
    for i, line in enumerate(_read_lines(path), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(int(float(line)) if "." in line else int(line))
        except ValueError:
            raise DataError(f"{path.name}:{i}: non-numeric {what} line: {line!r}")
    return out


def parse_tu_dataset(root_dir, name) -> Dataset:
    """Load a TU-convention dataset into 0-indexed per-graph records.

    Graph labels are remapped to 0..n_classes-1 preserving the sorted order
    of the raw labels; the undirected closure is enforced per graph.
    """
    folder = _find_dataset_dir(root_dir, name)
    a_path = folder / f"{name}_A.txt"
    ind_path = folder / f"{name}_graph_indicator.txt"
    lab_path = folder / f"{name}_graph_labels.txt"
    for p in (ind_path, lab_path):
        if not p.exists():
            raise DataError(f"missing mandatory file {p.name} under {folder}")

    indicator = _int_lines(ind_path, "graph indicator")
    n_total = len(indicator)
    graph_ids = sorted(set(indicator))
    if graph_ids != list(range(1, len(graph_ids) + 1)):
        raise DataError(f"{ind_path.name}: graph ids are not 1..N")
    n_graphs = len(graph_ids)

    raw_labels = _int_lines(lab_path, "graph label")
    if len(raw_labels) != n_graphs:
        raise DataError(
            f"{lab_path.name}: {len(raw_labels)} labels for {n_graphs} graphs")
    label_map = {raw: i for i, raw in enumerate(sorted(set(raw_labels)))}

    node_labels = None
    nl_path = folder / f"{name}_node_labels.txt"
    if nl_path.exists():
        node_labels = _int_lines(nl_path, "node label")
        if len(node_labels) != n_total:
            raise DataError(
                f"{nl_path.name}: {len(node_labels)} labels for {n_total} nodes")
    if (folder / f"{name}_edge_labels.txt").exists():
        warnings.warn(f"{name}: edge labels present but unsupported; ignored")

    # global -> (graph, local) index bookkeeping
    graph_of = [g - 1 for g in indicator]
    local_index = np.empty(n_total, dtype=np.intp)
    counts = [0] * n_graphs
    for i, g in enumerate(graph_of):
        local_index[i] = counts[g]
        counts[g] += 1

    per_graph_edges = [[] for _ in range(n_graphs)]
    for lineno, line in enumerate(_read_lines(a_path), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            u, v = (int(p) for p in parts)
        except ValueError:
            raise DataError(f"{a_path.name}:{lineno}: non-numeric edge line: {line!r}")
        if not (1 <= u <= n_total and 1 <= v <= n_total):
            raise DataError(
                f"{a_path.name}:{lineno}: node index exceeds indicator length "
                f"({n_total} nodes): {line!r}")
        gu, gv = graph_of[u - 1], graph_of[v - 1]
        if gu != gv:
            raise DataError(
                f"{a_path.name}:{lineno}: edge ({u}, {v}) crosses graphs "
                f"{gu + 1} and {gv + 1}")
        per_graph_edges[gu].append((int(local_index[u - 1]),
                                    int(local_index[v - 1])))

    records = []
    node_cursor = 0
    for g in range(n_graphs):
        n = counts[g]
        topo = GraphTopology(n, undirected_closure(per_graph_edges[g], n))
        labels_g = None
        if node_labels is not None:
            labels_g = node_labels[node_cursor:node_cursor + n]
        node_cursor += n
        records.append(GraphRecord(topo, label_map[raw_labels[g]], labels_g))

    return Dataset(name=name, records=records, n_classes=len(label_map))


def serialize_tu_dataset(dataset: Dataset, root_dir):
    """Write a dataset back out in the TU file convention (round-trip aid)."""
    folder = Path(root_dir)
    folder.mkdir(parents=True, exist_ok=True)
    name = dataset.name
    a_lines, ind_lines, node_lines = [], [], []
    offset = 0
    for gi, rec in enumerate(dataset.records, start=1):
        for u, v in rec.topology.edges:
            a_lines.append(f"{offset + u + 1}, {offset + v + 1}")
        ind_lines.extend([str(gi)] * rec.n_nodes)
        if rec.node_labels is not None:
            node_lines.extend(str(l) for l in rec.node_labels)
        offset += rec.n_nodes
    (folder / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (folder / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (folder / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(r.label) for r in dataset.records) + "\n")
    if node_lines:
        (folder / f"{name}_node_labels.txt").write_text("\n".join(node_lines) + "\n")


def degree_sequence(topology: GraphTopology):
    """Out-degree per node over the stored directed pairs (self-loops excluded)."""
    deg = np.zeros(topology.n_nodes, dtype=np.intp)
    for u, _ in topology.edges:
        deg[u] += 1
    return deg


def build_node_features(dataset: Dataset, scheme, cap=None) -> Dataset:
    """Attach one-hot node features.

    ``node-label-onehot``: width = number of distinct node labels in the
    dataset. ``degree-onehot``: width = cap + 1, degree d mapped to
    min(d, cap).
    """
    if scheme == "node-label-onehot":
        if any(r.node_labels is None for r in dataset.records):
            raise DataError(
                f"{dataset.name}: node-label-onehot requires node labels")
        vocab = sorted({l for r in dataset.records for l in r.node_labels})
        index = {l: i for i, l in enumerate(vocab)}
        width = len(vocab)
        descr = "node-label-onehot"

        def featurize(rec):
            x = np.zeros((rec.n_nodes, width))
            x[np.arange(rec.n_nodes), [index[l] for l in rec.node_labels]] = 1.0
            return x

    elif scheme == "degree-onehot":
        if cap is None or cap < 1:
            raise ConfigError("degree-onehot requires cap >= 1")
        width = cap + 1
        descr = f"degree-onehot(cap={cap})"

        def featurize(rec):
            deg = np.minimum(degree_sequence(rec.topology), cap)
            x = np.zeros((rec.n_nodes, width))
            x[np.arange(rec.n_nodes), deg] = 1.0
            return x

    else:
        raise ConfigError(f"unknown feature scheme: {scheme!r}")

    records = [replace(r, features=featurize(r)) for r in dataset.records]
    return replace(dataset, records=records, feature_scheme=descr)


def batch_graphs(records) -> GraphBatch:
    """Concatenate graphs block-diagonally.

    The global edge list holds every directed non-self edge shifted by its
    graph's node offset, then one self-loop per node.
    """
    if not records:
        raise DataError("cannot batch an empty record list")
    widths = {r.features.shape[1] if r.features is not None else None
              for r in records}
    if None in widths or len(widths) != 1:
        raise DataError(f"feature width mismatch across batch: {widths}")

    offsets = np.zeros(len(records), dtype=np.intp)
    total = 0
    for i, rec in enumerate(records):
        offsets[i] = total
        total += rec.n_nodes

    graph_of_node = np.empty(total, dtype=np.intp)
    src, dst = [], []
    for i, rec in enumerate(records):
        off = offsets[i]
        graph_of_node[off:off + rec.n_nodes] = i
        for u, v in rec.topology.edges:
            src.append(off + u)
            dst.append(off + v)
    n_nonself = len(src)
    src.extend(range(total))
    dst.extend(range(total))

    return GraphBatch(
        n_graphs=len(records),
        n_nodes=total,
        offsets=offsets,
        graph_of_node=graph_of_node,
        edge_src=np.asarray(src, dtype=np.intp),
        edge_dst=np.asarray(dst, dtype=np.intp),
        n_nonself=n_nonself,
        features=np.concatenate([r.features for r in records], axis=0),
    )


def _largest_remainder(n, fractions):
    ideal = [n * f for f in fractions]
    base = [math.floor(x) for x in ideal]
    rem = [(x - b, -i) for i, (x, b) in enumerate(zip(ideal, base))]
    for _ in range(n - sum(base)):
        j = -max(rem)[1]
        base[j] += 1
        rem[j] = (-1.0, -j)
    return base


def split_dataset(dataset: Dataset, seed, fractions=SPLIT_FRACTIONS) -> SplitResult:
    """Label-stratified, disjoint, exhaustive split, deterministic per seed.

    Classes with fewer than 3 graphs force an unstratified split, flagged on
    the result.
    """
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be positive and sum to 1: {fractions}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    targets = _largest_remainder(n, fractions)

    by_class = {}
    for i, rec in enumerate(dataset.records):
        by_class.setdefault(rec.label, []).append(i)

    if min(len(v) for v in by_class.values()) < 3:
        perm = rng.permutation(n)
        a, b = targets[0], targets[0] + targets[1]
        return SplitResult(sorted(perm[:a].tolist()),
                           sorted(perm[a:b].tolist()),
                           sorted(perm[b:].tolist()), stratified=False)

    labels = sorted(by_class)
    shuffled = {c: rng.permutation(by_class[c]).tolist() for c in labels}
    alloc = {c: _largest_remainder(len(by_class[c]), fractions) for c in labels}

    # largest-remainder rounding per class can drift from the global bucket
    # targets by a few graphs; migrate one at a time from the most-overfull
    # bucket, taking from the class most overfilled there
    def totals():
        return [sum(alloc[c][b] for c in labels) for b in range(3)]

    cur = totals()
    while cur != targets:
        over = max(range(3), key=lambda b: cur[b] - targets[b])
        under = min(range(3), key=lambda b: cur[b] - targets[b])

        def gain(c):
            n_c = len(by_class[c])
            surplus = alloc[c][over] - n_c * fractions[over]
            deficit = n_c * fractions[under] - alloc[c][under]
            return surplus + deficit

        donor = max((c for c in labels if alloc[c][over] > 0), key=gain)
        alloc[donor][over] -= 1
        alloc[donor][under] += 1
        cur = totals()

    buckets = ([], [], [])
    for c in labels:
        a, b, _ = alloc[c]
        pool = shuffled[c]
        buckets[0].extend(pool[:a])
        buckets[1].extend(pool[a:a + b])
        buckets[2].extend(pool[a + b:])
    return SplitResult(sorted(buckets[0]), sorted(buckets[1]),
                       sorted(buckets[2]), stratified=True)
