"""Three-layer prompt parsing tree.

The tree stores one token matrix per node: a single shared root, one
intermediate node per part count (1..n_max), and one leaf per class hanging
under the intermediate that matches the class's part count. Construction,
leaf insertion, path retrieval, pairwise distances, and a bit-exact JSON
round trip live here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConflictError, NotFoundError, RangeError

KIND_SHARED = "instrument_shared"
KIND_PART = "part_shared"
KIND_DISTINCT = "instrument_distinct"

TREE_FORMAT_VERSION = 1

TOKEN_INIT_SCALE = 0.02


@dataclass
class PromptPartition:
    """One tree node: an (n_tokens, embed_dim) float64 token matrix plus its role.

    ``part_count`` is set for part-shared intermediates, ``class_id`` for
    class-distinct leaves; the shared root carries neither.
    """

    node_id: int
    kind: str
    tokens: np.ndarray
    part_count: int | None = None
    class_id: str | None = None


@dataclass
class ParsingTree:
    """Undirected three-layer tree of prompt partitions.

    ``nodes`` maps node id to partition; ``edges`` holds unordered id pairs
    stored as sorted tuples. Node ids are assigned in insertion order (root 0,
    intermediates 1..n_max, leaves afterwards) so serialized trees and every
    matrix derived from the vertex order are reproducible.
    """

    nodes: dict[int, PromptPartition]
    edges: set[tuple[int, int]]
    n_max: int
    n_tokens: int
    embed_dim: int
    episode: int = 1
    _next_id: int = field(default=0, repr=False)

    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def root(self) -> PromptPartition:
        return self.nodes[0]

    def intermediate(self, part_count: int) -> PromptPartition:
        for node in self.nodes.values():
            if node.kind == KIND_PART and node.part_count == part_count:
                return node
        raise NotFoundError(f"no intermediate node for part count {part_count}")

    def leaves(self) -> list[PromptPartition]:
        return [n for n in self.nodes.values() if n.kind == KIND_DISTINCT]

    def class_ids(self) -> list[str]:
        return sorted(n.class_id for n in self.leaves())

    def class_node(self, class_id: str) -> PromptPartition:
        for node in self.leaves():
            if node.class_id == class_id:
                return node
        raise NotFoundError(f"unknown class {class_id!r}")

    def has_class(self, class_id: str) -> bool:
        return any(n.class_id == class_id for n in self.leaves())

    def neighbors(self, node_id: int) -> list[int]:
        if node_id not in self.nodes:
            raise NotFoundError(f"unknown node {node_id}")
        out = []
        for a, b in self.edges:
            if a == node_id:
                out.append(b)
            elif b == node_id:
                out.append(a)
        return sorted(out)

    def depth(self, node_id: int) -> int:
        node = self.nodes.get(node_id)
        if node is None:
            raise NotFoundError(f"unknown node {node_id}")
        return {KIND_SHARED: 0, KIND_PART: 1, KIND_DISTINCT: 2}[node.kind]

    def parent_id(self, node_id: int) -> int | None:
        """Id of the neighbor one layer up, or None for the root."""
        d = self.depth(node_id)
        if d == 0:
            return None
        for nb in self.neighbors(node_id):
            if self.depth(nb) == d - 1:
                return nb
        raise NotFoundError(f"node {node_id} has no parent edge")

    def copy(self) -> "ParsingTree":
        nodes = {
            i: PromptPartition(n.node_id, n.kind, n.tokens.copy(), n.part_count, n.class_id)
            for i, n in self.nodes.items()
        }
        return ParsingTree(
            nodes=nodes,
            edges=set(self.edges),
            n_max=self.n_max,
            n_tokens=self.n_tokens,
            embed_dim=self.embed_dim,
            episode=self.episode,
            _next_id=self._next_id,
        )


def _edge(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def _init_tokens(rng: np.random.Generator, n_tokens: int, embed_dim: int) -> np.ndarray:
    return rng.uniform(-TOKEN_INIT_SCALE, TOKEN_INIT_SCALE, size=(n_tokens, embed_dim))


def new_tree(
    n_max: int,
    n_tokens: int,
    embed_dim: int,
    class_specs: list[tuple[str, int]],
    rng_seed: int,
) -> ParsingTree:
    """Build a fresh tree: root, n_max intermediates, one leaf per class spec.

    Token matrices are drawn node by node, in insertion order, from a single
    generator seeded with ``rng_seed``, so the same arguments always produce
    the same tree.
    """
    if n_max < 1:
        raise RangeError(f"n_max must be >= 1, got {n_max}")
    if n_tokens < 1 or embed_dim < 1:
        raise RangeError("n_tokens and embed_dim must be >= 1")

    rng = np.random.default_rng(rng_seed)
    nodes: dict[int, PromptPartition] = {}
    edges: set[tuple[int, int]] = set()

    nodes[0] = PromptPartition(0, KIND_SHARED, _init_tokens(rng, n_tokens, embed_dim))
    for k in range(1, n_max + 1):
        nodes[k] = PromptPartition(
            k, KIND_PART, _init_tokens(rng, n_tokens, embed_dim), part_count=k
        )
        edges.add(_edge(0, k))

    tree = ParsingTree(
        nodes=nodes,
        edges=edges,
        n_max=n_max,
        n_tokens=n_tokens,
        embed_dim=embed_dim,
        _next_id=n_max + 1,
    )
    seen: set[str] = set()
    for class_id, part_count in class_specs:
        if class_id in seen:
            raise ConflictError(f"duplicate class {class_id!r} in class_specs")
        seen.add(class_id)
        _attach_leaf(tree, class_id, part_count, _init_tokens(rng, n_tokens, embed_dim))
    return tree


def _attach_leaf(tree: ParsingTree, class_id: str, part_count: int, tokens: np.ndarray) -> int:
    if not 1 <= part_count <= tree.n_max:
        raise RangeError(
            f"part_count {part_count} outside [1, {tree.n_max}] for class {class_id!r}"
        )
    if tree.has_class(class_id):
        raise ConflictError(f"class {class_id!r} already has a leaf")
    node_id = tree._next_id
    tree._next_id += 1
    tree.nodes[node_id] = PromptPartition(
        node_id, KIND_DISTINCT, tokens, part_count=part_count, class_id=class_id
    )
    tree.edges.add(_edge(tree.intermediate(part_count).node_id, node_id))
    return node_id


def insert_leaf(tree: ParsingTree, class_id: str, part_count: int, rng_seed: int) -> int:
    """Insert a freshly initialized leaf for a new class; returns its node id.

    Grows the node and edge sets by exactly one each and never touches any
    existing token matrix.
    """
    rng = np.random.default_rng(rng_seed)
    tokens = _init_tokens(rng, tree.n_tokens, tree.embed_dim)
    return _attach_leaf(tree, class_id, part_count, tokens)


def path_for_class(tree: ParsingTree, class_id: str) -> list[PromptPartition]:
    """Root-to-leaf node list [shared, part-shared, class leaf] for a class."""
    leaf = tree.class_node(class_id)
    parent = tree.nodes[tree.parent_id(leaf.node_id)]
    return [tree.root(), parent, leaf]


def tree_distance(tree: ParsingTree, a: int, b: int) -> int:
    """Edge count of the unique path between two nodes.

    Uses the fixed three-layer structure: distance is depth(a) + depth(b)
    minus twice the depth of the lowest common ancestor.
    """
    if a not in tree.nodes:
        raise NotFoundError(f"unknown node {a}")
    if b not in tree.nodes:
        raise NotFoundError(f"unknown node {b}")
    if a == b:
        return 0
    path_a = _path_to_root(tree, a)
    path_b = _path_to_root(tree, b)
    ancestors_a = {n: i for i, n in enumerate(path_a)}
    for j, n in enumerate(path_b):
        if n in ancestors_a:
            return ancestors_a[n] + j
    raise NotFoundError("tree is disconnected")  # unreachable on valid trees


def _path_to_root(tree: ParsingTree, node_id: int) -> list[int]:
    path = [node_id]
    cur = node_id
    while (parent := tree.parent_id(cur)) is not None:
        path.append(parent)
        cur = parent
    return path


def validate(tree: ParsingTree) -> None:
    """Check every structural invariant; raises ValueError on violation."""
    roots = [n for n in tree.nodes.values() if n.kind == KIND_SHARED]
    if len(roots) != 1 or roots[0].node_id != 0:
        raise ValueError("tree must have exactly one shared root with id 0")
    parts = sorted(
        n.part_count for n in tree.nodes.values() if n.kind == KIND_PART
    )
    if parts != list(range(1, tree.n_max + 1)):
        raise ValueError(f"intermediate part counts {parts} != 1..{tree.n_max}")
    if len(tree.edges) != len(tree.nodes) - 1:
        raise ValueError("edge count must equal node count - 1")

    class_ids = [n.class_id for n in tree.leaves()]
    if len(class_ids) != len(set(class_ids)):
        raise ValueError("duplicate class ids among leaves")

    # Connectivity plus layer adjacency by traversal from the root.
    seen = {0}
    frontier = [0]
    while frontier:
        nxt = []
        for node in frontier:
            for nb in tree.neighbors(node):
                if nb not in seen:
                    seen.add(nb)
                    nxt.append(nb)
        frontier = nxt
    if seen != set(tree.nodes):
        raise ValueError("tree is not connected")

    for node in tree.leaves():
        parent = tree.nodes[tree.parent_id(node.node_id)]
        if parent.kind != KIND_PART or parent.part_count != node.part_count:
            raise ValueError(
                f"leaf {node.class_id!r} must hang under the {node.part_count}-part node"
            )
    for node in tree.nodes.values():
        if node.tokens.shape != (tree.n_tokens, tree.embed_dim):
            raise ValueError(f"node {node.node_id} token shape {node.tokens.shape}")
        if not np.isfinite(node.tokens).all():
            raise ValueError(f"node {node.node_id} has non-finite tokens")


def to_document(tree: ParsingTree) -> dict:
    """Versioned JSON-ready document; float64 tokens stored row-major."""
    nodes = []
    for node_id in tree.node_ids():
        node = tree.nodes[node_id]
        entry: dict = {
            "id": node.node_id,
            "kind": node.kind,
            "tokens": [float(x) for x in node.tokens.ravel(order="C")],
        }
        if node.part_count is not None:
            entry["part_count"] = node.part_count
        if node.class_id is not None:
            entry["class_id"] = node.class_id
        nodes.append(entry)
    return {
        "version": TREE_FORMAT_VERSION,
        "n_max": tree.n_max,
        "u": tree.n_tokens,
        "b": tree.embed_dim,
        "episode": tree.episode,
        "nodes": nodes,
        "edges": sorted([list(e) for e in tree.edges]),
    }


def from_document(doc: dict) -> ParsingTree:
    if doc.get("version") != TREE_FORMAT_VERSION:
        raise ValueError(f"unsupported tree document version {doc.get('version')!r}")
    n_tokens, embed_dim = doc["u"], doc["b"]
    nodes: dict[int, PromptPartition] = {}
    for entry in doc["nodes"]:
        tokens = np.array(entry["tokens"], dtype=np.float64).reshape(n_tokens, embed_dim)
        nodes[entry["id"]] = PromptPartition(
            node_id=entry["id"],
            kind=entry["kind"],
            tokens=tokens,
            part_count=entry.get("part_count"),
            class_id=entry.get("class_id"),
        )
    tree = ParsingTree(
        nodes=nodes,
        edges={_edge(a, b) for a, b in doc["edges"]},
        n_max=doc["n_max"],
        n_tokens=n_tokens,
        embed_dim=embed_dim,
        episode=doc.get("episode", 1),
        _next_id=max(nodes) + 1 if nodes else 0,
    )
    validate(tree)
    return tree


def to_json(tree: ParsingTree) -> str:
    return json.dumps(to_document(tree), sort_keys=True)


def from_json(text: str) -> ParsingTree:
    return from_document(json.loads(text))
