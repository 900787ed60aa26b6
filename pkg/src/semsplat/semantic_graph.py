"""Temporal label-consistency graph over per-frame segment masks.

Each segmented mask becomes a node carrying its frame index, written label,
and unit descriptor.  Edges connect nodes from different frames within a
temporal window whose descriptors are similar (cosine >= tau).  A node's
consistency score is the fraction of its neighbors that agree with its
label; nodes scoring <= 2/3 have their edges cut, and the surviving edges
are grouped into clusters by transitive closure.  Each cluster votes a
canonical label (majority, ties to the smallest id), and outlier masks are
pulled onto the canonical label of whichever cluster their descriptor
matches.  Relabeling only the disagreeing minority keeps the pass
idempotent: a second application changes nothing.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import one_hot_encode, rle_decode
from .errors import InvalidArgumentError

SIMILARITY_TAU = 0.8
TEMPORAL_WINDOW = 8
SCORE_PRUNE_THRESHOLD = 2.0 / 3.0


@dataclass
class MaskNode:
    frame_index: int
    mask_id: int
    label: int
    feature: np.ndarray
    rle: list = field(default_factory=list)

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(self.feature)
        if norm == 0.0:
            raise InvalidArgumentError("mask descriptor must be non-zero")
        self.feature = self.feature / norm


@dataclass
class ConsistencyGraph:
    nodes: list
    adjacency: list            # adjacency[i] = sorted neighbor indices
    tau: float
    window: int

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    def neighbors(self, i: int):
        return self.adjacency[i]


def nodes_from_features(features, frame_indices=None) -> list:
    """Flatten per-frame feature records into graph nodes."""
    if frame_indices is None:
        frame_indices = range(len(features))
    nodes = []
    for frame, records in zip(frame_indices, features):
        for rec in records:
            nodes.append(MaskNode(frame, rec.mask_id, int(rec.label),
                                  rec.embedding, list(rec.rle)))
    return nodes


def build_graph(nodes, window: int = TEMPORAL_WINDOW,
                tau: float = SIMILARITY_TAU) -> ConsistencyGraph:
    if window < 1:
        raise InvalidArgumentError("window must be at least 1")
    n = len(nodes)
    adjacency = [[] for _ in range(n)]
    if n:
        feats = np.stack([node.feature for node in nodes])
        frames = np.array([node.frame_index for node in nodes])
        sims = feats @ feats.T
        for i in range(n):
            for j in range(i + 1, n):
                if frames[i] == frames[j]:
                    continue
                if abs(int(frames[i]) - int(frames[j])) > window:
                    continue
                if sims[i, j] >= tau:
                    adjacency[i].append(j)
                    adjacency[j].append(i)
    return ConsistencyGraph(list(nodes), adjacency, tau, window)


def consistency_score(graph: ConsistencyGraph, i: int) -> float:
    neighbors = graph.adjacency[i]
    if not neighbors:
        return 1.0
    label = graph.nodes[i].label
    agree = sum(1 for j in neighbors if graph.nodes[j].label == label)
    return agree / len(neighbors)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass
class ClusterResult:
    scores: np.ndarray          # per node
    surviving: np.ndarray       # per node: kept its edges
    cluster_of: np.ndarray      # per node: dense cluster id
    members: list               # per cluster: sorted node indices
    canonical_label: list       # per cluster

    @property
    def cluster_count(self) -> int:
        return len(self.members)


def _majority_label(labels) -> int:
    counts = Counter(labels)
    best = max(counts.values())
    return min(lab for lab, cnt in counts.items() if cnt == best)


def cluster(graph: ConsistencyGraph,
            threshold: float = SCORE_PRUNE_THRESHOLD) -> ClusterResult:
    """Cut edges at low-consistency nodes, then take connected components."""
    n = graph.node_count
    scores = np.array([consistency_score(graph, i) for i in range(n)])
    surviving = scores > threshold
    uf = _UnionFind(n)
    for i in range(n):
        if not surviving[i]:
            continue
        for j in graph.adjacency[i]:
            if j > i and surviving[j]:
                uf.union(i, j)
    roots = [uf.find(i) for i in range(n)]
    order = sorted(set(roots))
    dense = {root: k for k, root in enumerate(order)}
    cluster_of = np.array([dense[r] for r in roots])
    members = [[] for _ in order]
    for i, k in enumerate(cluster_of):
        members[k].append(i)
    canonical = [_majority_label([graph.nodes[i].label for i in group])
                 for group in members]
    return ClusterResult(scores, surviving, cluster_of, members, canonical)


def cluster_prototypes(graph: ConsistencyGraph, result: ClusterResult) -> list:
    """Unit mean descriptor of each cluster's canonically-labeled members."""
    prototypes = []
    for group, label in zip(result.members, result.canonical_label):
        voters = [i for i in group if graph.nodes[i].label == label]
        feats = np.stack([graph.nodes[i].feature for i in (voters or group)])
        mean = feats.mean(axis=0)
        norm = np.linalg.norm(mean)
        prototypes.append(mean / norm if norm > 0 else mean)
    return prototypes


def relabel_frames(graph: ConsistencyGraph, result: ClusterResult,
                   label_images: dict) -> tuple:
    """Rewrite outlier mask labels toward cluster-canonical labels.

    ``label_images`` maps frame index to a label image; a copied dict with
    copied images comes back, alongside ``(node, old, new)`` assignments.
    A member of a multi-mask cluster adopts the canonical label when its
    descriptor still matches the cluster prototype; a singleton (incl. a
    pruned node) adopts the best-matching multi-mask cluster's label.
    """
    updated = {frame: img.copy() for frame, img in label_images.items()}
    prototypes = cluster_prototypes(graph, result)
    multi = [k for k, group in enumerate(result.members) if len(group) > 1]
    assignments = []
    for i, node in enumerate(graph.nodes):
        k = int(result.cluster_of[i])
        new_label = None
        if len(result.members[k]) > 1:
            if (node.label != result.canonical_label[k]
                    and node.feature @ prototypes[k] > graph.tau):
                new_label = result.canonical_label[k]
        elif multi:
            sims = [(node.feature @ prototypes[m], m) for m in multi]
            best_sim, best = max(sims, key=lambda t: (t[0], -t[1]))
            if best_sim > graph.tau and result.canonical_label[best] != node.label:
                new_label = result.canonical_label[best]
        if new_label is None:
            continue
        assignments.append((i, node.label, new_label))
        if node.frame_index in updated and node.rle:
            img = updated[node.frame_index]
            mask = rle_decode(node.rle, img.shape)
            img[mask] = new_label
    return updated, assignments


def semantic_consistency_loss(rendered_semantic: np.ndarray,
                              labels: np.ndarray) -> float:
    """L1 gap between rendered channel mass and the one-hot label target."""
    rendered_semantic = np.asarray(rendered_semantic, dtype=np.float64)
    target = one_hot_encode(labels, rendered_semantic.shape[2])
    return float(np.abs(rendered_semantic - target).sum())


def cluster_report(graph: ConsistencyGraph, result: ClusterResult) -> str:
    lines = []
    for k, group in enumerate(result.members):
        frames = [graph.nodes[i].frame_index for i in group]
        lines.append(f"cluster {k}: size {len(group)}, "
                     f"label {result.canonical_label[k]}, "
                     f"frames {min(frames)}-{max(frames)}")
    return "\n".join(lines)
