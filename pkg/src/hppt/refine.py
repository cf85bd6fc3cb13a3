"""Self-reflection refinement of the prompt tree.

After a new class's leaf is trained, the tree is re-rooted at that leaf and
turned into the decay-weighted directed graph. Node token matrices are
flattened into a feature matrix, propagated through the symmetrized
transition operator and a learnable square map, and written back through a
per-node coupling equal to each node's incoming edge weight in the decay
adjacency. The coupling is what makes stability quantitative: a node at tree
distance d from the new leaf can move by at most decay^d times the size of
its propagated update, so distant (old-class) knowledge stays put while the
new leaf's parent absorbs most of the new information.

The learnable map is optimized by plain gradient descent with halving
backtracking, so the refinement loss never increases across accepted steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DivergenceError, RangeError
from .graph import orient_and_weight, propagation_matrix, stationary_distribution, transition_matrix
from .model import ToyModel, _class_batch, _loss_and_grads_from_prompts
from .tree import ParsingTree

MIN_BACKTRACK_LR = 1e-12


@dataclass
class RefineConfig:
    decay: float = 0.05
    teleport: float = 0.001
    learning_rate: float = 0.5
    steps: int = 8
    max_samples: int = 32  # refinement batch cap over the episode's samples


@dataclass
class RefineState:
    """Everything the refinement objective needs, indexed by vertex order."""

    theta: np.ndarray  # (u*b, u*b)
    node_features: np.ndarray  # (|V|, u*b), row i flattens vertex_order[i]
    vertex_order: list[int]
    coupling: np.ndarray  # (|V|,) incoming edge weight per vertex, 0 at the root
    p_sym: np.ndarray  # (|V|, |V|) symmetrized propagation operator
    config: RefineConfig = field(default_factory=RefineConfig)


def prepare_state(tree: ParsingTree, new_class: str, config: RefineConfig) -> RefineState:
    """Build the propagation operator and feature matrix rooted at a class leaf."""
    leaf = tree.class_node(new_class)
    g = orient_and_weight(tree, leaf.node_id, config.decay)
    t = transition_matrix(g, config.teleport)
    pi = stationary_distribution(t)
    p_sym = propagation_matrix(t, pi)
    features = np.stack([tree.nodes[i].tokens.ravel(order="C") for i in g.vertex_order])
    side = tree.n_tokens * tree.embed_dim
    return RefineState(
        theta=np.eye(side),
        node_features=features,
        vertex_order=g.vertex_order,
        coupling=g.adjacency.sum(axis=0),
        p_sym=p_sym,
        config=config,
    )


def propagate_features(state: RefineState, p_sym: np.ndarray) -> np.ndarray:
    """One propagation pass: p_sym @ node_features @ theta."""
    f = state.node_features
    if p_sym.shape != (f.shape[0], f.shape[0]):
        raise DimensionError(f"operator shape {p_sym.shape} vs {f.shape[0]} vertices")
    if state.theta.shape != (f.shape[1], f.shape[1]):
        raise DimensionError(f"theta shape {state.theta.shape} vs feature width {f.shape[1]}")
    return p_sym @ f @ state.theta


def refined_features(state: RefineState) -> np.ndarray:
    """Coupled residual write-back: F + C (p_sym F theta - F), C from the adjacency."""
    f = state.node_features
    return f + state.coupling[:, None] * (propagate_features(state, state.p_sym) - f)


def _reflection_loss_and_grad(
    model: ToyModel,
    tree: ParsingTree,
    state: RefineState,
    batches: dict[str, tuple[np.ndarray, np.ndarray]],
    theta: np.ndarray,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    """Summed per-class BCE with partitions replaced by the refined features."""
    f = state.node_features
    refined = f + state.coupling[:, None] * (state.p_sym @ f @ theta - f)
    row = {node_id: i for i, node_id in enumerate(state.vertex_order)}
    u, b = tree.n_tokens, tree.embed_dim

    total = 0.0
    d_refined = np.zeros_like(refined) if want_grad else None
    for class_id in sorted(batches):
        path = [tree.root(), tree.nodes[tree.parent_id(tree.class_node(class_id).node_id)],
                tree.class_node(class_id)]
        depth_nodes = {
            depth: (node.node_id, refined[row[node.node_id]].reshape(u, b))
            for depth, node in zip(model.insert_depths, path)
        }
        loss, grads = _loss_and_grads_from_prompts(
            model, depth_nodes, batches[class_id], class_id, need_layer_grads=False
        )
        total += loss
        if want_grad:
            for node_id, g in grads.prompts.items():
                d_refined[row[node_id]] += g.ravel(order="C")
    if not want_grad:
        return total, None
    d_theta = (state.p_sym @ f).T @ (state.coupling[:, None] * d_refined)
    return total, d_theta


def self_reflect(
    tree: ParsingTree,
    new_class: str,
    episode_data,
    model: ToyModel,
    config: RefineConfig,
    trace=None,
) -> ParsingTree:
    """Refine every partition around a freshly trained class leaf.

    Returns a new tree with identical topology whose token matrices are the
    coupled propagated features after optimizing the propagation map on the
    classes covered by ``episode_data``. The input tree is not modified.
    ``trace``, when given, receives one dict per accepted step.
    """
    work = tree.copy()
    state = prepare_state(work, new_class, config)

    data = list(episode_data)[: config.max_samples]
    data_classes = sorted(
        {c for sample in data for c in sample.masks}
        & {leaf.class_id for leaf in work.leaves()}
        & set(model.heads)
    )
    batches = {c: _class_batch(data, c) for c in data_classes}

    theta = state.theta
    loss, grad = _reflection_loss_and_grad(model, work, state, batches, theta, want_grad=True)
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise DivergenceError(
            "refinement loss is non-finite at initialization; try a smaller learning_rate"
        )
    if trace is not None:
        state.theta = theta
        trace({"step": 0, "loss": float(loss),
               "max_displacement": float(np.abs(refined_features(state) - state.node_features).max())})

    lr = config.learning_rate
    for step in range(1, config.steps + 1):
        accepted = False
        while lr >= MIN_BACKTRACK_LR:
            candidate = theta - lr * grad
            cand_loss, _ = _reflection_loss_and_grad(
                model, work, state, batches, candidate, want_grad=False
            )
            if np.isfinite(cand_loss) and cand_loss <= loss:
                theta = candidate
                loss = cand_loss
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
        _, grad = _reflection_loss_and_grad(model, work, state, batches, theta, want_grad=True)
        if trace is not None:
            state.theta = theta
            trace({"step": step, "loss": float(loss),
                   "max_displacement": float(np.abs(refined_features(state) - state.node_features).max())})

    state.theta = theta
    final = refined_features(state)
    u, b = work.n_tokens, work.embed_dim
    for i, node_id in enumerate(state.vertex_order):
        np.copyto(work.nodes[node_id].tokens, final[i].reshape(u, b))
    return work


def finite_difference_check(state: RefineState, loss_fn, epsilon: float) -> float:
    """Max relative error between analytic and central-difference theta gradients.

    ``loss_fn(theta)`` must return (loss, gradient). Every entry of theta is
    perturbed; the relative error denominator is floored at 1e-6 so entries
    whose true gradient is exactly zero do not divide by noise.
    """
    if epsilon <= 0:
        raise RangeError(f"epsilon must be positive, got {epsilon}")
    theta = state.theta
    _, grad = loss_fn(theta)
    worst = 0.0
    for i in range(theta.shape[0]):
        for j in range(theta.shape[1]):
            bump = np.zeros_like(theta)
            bump[i, j] = epsilon
            hi, _ = loss_fn(theta + bump)
            lo, _ = loss_fn(theta - bump)
            fd = (hi - lo) / (2 * epsilon)
            err = abs(fd - grad[i, j]) / max(abs(fd), abs(grad[i, j]), 1e-6)
            worst = max(worst, err)
    return worst


def reflection_objective(
    model: ToyModel, tree: ParsingTree, state: RefineState, episode_data
):
    """Bind the refinement objective into a loss_fn(theta) -> (loss, grad)."""
    data = list(episode_data)[: state.config.max_samples]
    data_classes = sorted(
        {c for sample in data for c in sample.masks}
        & {leaf.class_id for leaf in tree.leaves()}
        & set(model.heads)
    )
    batches = {c: _class_batch(data, c) for c in data_classes}

    def loss_fn(theta: np.ndarray):
        return _reflection_loss_and_grad(model, tree, state, batches, theta, want_grad=True)

    return loss_fn
