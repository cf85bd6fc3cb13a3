"""Miniature prompt-tuned segmenter.

A frozen random projection stands in for the image encoder. The decoder is a
stack of residual per-pixel affine maps; at three chosen depths the feature
map cross-attends to the shared, part-shared, and class-distinct prompt
partitions of the parsing tree. One linear-logistic head per class produces
per-pixel probabilities, fused by thresholded argmax.

All gradients are hand-derived reverse-mode through this fixed graph; there
is no general autodiff. Training state lives in plain numpy arrays updated
in place, which keeps frozen-parameter audits byte-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    ArgumentError,
    DimensionError,
    DivergenceError,
    NotFoundError,
    RangeError,
)
from .tree import ParsingTree, PromptPartition, insert_leaf, path_for_class

PROB_CLAMP = 1e-7

CHECKPOINT_VERSION = 1
LABEL_GRID_MAGIC = b"LGRD"


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------


@dataclass
class DecoderLayer:
    weight: np.ndarray  # (b, b)
    bias: np.ndarray  # (b,)


@dataclass
class SegHead:
    weight: np.ndarray  # (b,)
    bias: np.ndarray  # (1,)


ENCODER_FREQ_SCALE = 6.0


@dataclass
class ToyModel:
    """Frozen random-feature encoder plus trainable decoder stack and heads.

    The encoder is a seeded random projection with a fixed cosine readout
    (random Fourier features of the pixel channels); a bare linear projection
    of three channels cannot tell one class's color cone from another's, so
    the fixed cosine is what gives the frozen encoder usable features.
    """

    encoder_proj: np.ndarray  # (in_channels, b), frozen
    encoder_phase: np.ndarray  # (b,), frozen
    layers: list[DecoderLayer]
    insert_depths: tuple[int, int, int]  # 1-based layer indices, strictly increasing
    heads: dict[str, SegHead]
    embed_dim: int
    in_channels: int = 3
    frozen: dict[str, bool] = field(default_factory=dict)


def new_model(
    embed_dim: int,
    n_layers: int,
    insert_depths: tuple[int, int, int],
    seed: int,
    in_channels: int = 3,
) -> ToyModel:
    l1, l2, l3 = insert_depths
    if not (1 <= l1 < l2 < l3 <= n_layers):
        raise RangeError(f"insert depths {insert_depths} must satisfy 1 <= l1 < l2 < l3 <= {n_layers}")
    rng = np.random.default_rng(seed)
    encoder_proj = rng.normal(0.0, ENCODER_FREQ_SCALE, size=(in_channels, embed_dim))
    encoder_phase = rng.uniform(0.0, 2 * np.pi, size=embed_dim)
    layers = [
        DecoderLayer(
            weight=rng.normal(0.0, 0.05, size=(embed_dim, embed_dim)),
            bias=np.zeros(embed_dim),
        )
        for _ in range(n_layers)
    ]
    return ToyModel(
        encoder_proj=encoder_proj,
        encoder_phase=encoder_phase,
        layers=layers,
        insert_depths=insert_depths,
        heads={},
        embed_dim=embed_dim,
        in_channels=in_channels,
        frozen={"encoder": True},
    )


def ensure_head(model: ToyModel, class_id: str) -> SegHead:
    """Create a zero head for a class on first sight (logistic(0) = 0.5)."""
    if class_id not in model.heads:
        model.heads[class_id] = SegHead(weight=np.zeros(model.embed_dim), bias=np.zeros(1))
    return model.heads[class_id]


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


@dataclass
class FeatureMap:
    features: np.ndarray  # (N, b)
    height: int
    width: int


@dataclass
class MaskPrediction:
    per_class_prob: dict[str, np.ndarray]
    fused_labels: np.ndarray  # (N,) int, 0 = background
    class_order: list[str]  # label k >= 1 means class_order[k - 1]


@lru_cache(maxsize=16)
def positional_encoding(height: int, width: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding of (row, col), truncated to ``dim``."""
    row_dim = (dim + 1) // 2
    col_dim = dim - row_dim
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")

    def table(coord: np.ndarray, size: int) -> np.ndarray:
        if size == 0:
            return np.zeros((height * width, 0))
        out = np.zeros((height * width, size))
        flat = coord.ravel().astype(np.float64)
        for i in range(size):
            freq = 1.0 / (10000.0 ** (2 * (i // 2) / size))
            out[:, i] = np.sin(flat * freq) if i % 2 == 0 else np.cos(flat * freq)
        return out

    pe = np.concatenate([table(rows, row_dim), table(cols, col_dim)], axis=1)
    pe.flags.writeable = False
    return pe


@lru_cache(maxsize=8)
def _tiled_encoding(s: int, height: int, width: int, dim: int) -> np.ndarray:
    tiled = np.tile(positional_encoding(height, width, dim), (s, 1))
    tiled.flags.writeable = False
    return tiled


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_attention_layer(fmap: FeatureMap, partition: PromptPartition) -> FeatureMap:
    """Pixels attend to prompt tokens; the attended tokens are added residually.

    Keys are the position-encoded features, queries per pixel, values the
    tokens themselves: F' = F + softmax((F + pe) P^T / sqrt(b)) P. A zero
    partition therefore leaves the feature map bit-identical.
    """
    f = fmap.features
    p = partition.tokens
    if f.ndim != 2 or p.ndim != 2 or f.shape[1] != p.shape[1]:
        raise DimensionError(f"feature shape {f.shape} and token shape {p.shape} do not conform")
    pe = positional_encoding(fmap.height, fmap.width, f.shape[1])
    if pe.shape[0] != f.shape[0]:
        raise DimensionError(f"{f.shape[0]} pixels vs {fmap.height}x{fmap.width} grid")
    attn = _softmax((f + pe) @ p.T / np.sqrt(f.shape[1]))
    return FeatureMap(features=f + attn @ p, height=fmap.height, width=fmap.width)


def _forward_batch(
    model: ToyModel,
    prompts_by_depth: dict[int, np.ndarray],
    images: np.ndarray,  # (S, C, H, W)
    head: SegHead,
    keep_cache: bool = False,
):
    """Batched forward pass; returns (probs (S, N), cache) for the backward.

    Samples are flattened into one (S*N, b) matrix so every contraction is a
    single GEMM; the loss averages over samples and pixels jointly, which is
    the same mean.
    """
    s, c, h, w = images.shape
    if c != model.in_channels:
        raise DimensionError(f"expected {model.in_channels} channels, got {c}")
    n = h * w
    x = np.ascontiguousarray(images.transpose(0, 2, 3, 1)).reshape(s * n, c)
    f = np.cos(x @ model.encoder_proj + model.encoder_phase)
    pe_tiled = _tiled_encoding(s, h, w, model.embed_dim)
    cache = {"layers": [], "x": x} if keep_cache else None
    for depth, layer in enumerate(model.layers, start=1):
        f_in = f
        g = f_in + f_in @ layer.weight + layer.bias
        entry = {"f_in": f_in, "g": g, "depth": depth} if keep_cache else None
        if depth in prompts_by_depth:
            p = prompts_by_depth[depth]
            k = g + pe_tiled
            attn = _softmax(k @ p.T / np.sqrt(model.embed_dim))
            f = g + attn @ p
            if keep_cache:
                entry.update({"k": k, "attn": attn, "p": p})
        else:
            f = g
        if keep_cache:
            cache["layers"].append(entry)
    z = f @ head.weight + head.bias
    probs = _sigmoid(z).reshape(s, n)
    if keep_cache:
        cache.update({"f_out": f, "probs": probs, "shape": (s, n)})
    return probs, cache


def _path_prompts(model: ToyModel, tree: ParsingTree, class_id: str):
    """Map insert depth -> (node_id, tokens) along the class's tree path."""
    path = path_for_class(tree, class_id)
    return {
        depth: (node.node_id, node.tokens)
        for depth, node in zip(model.insert_depths, path)
    }


def hierarchical_forward(
    model: ToyModel, tree: ParsingTree, image: np.ndarray, class_id: str
) -> np.ndarray:
    """Per-pixel probability vector for one class on one (C, H, W) image."""
    if class_id not in model.heads:
        raise NotFoundError(f"model has no head for class {class_id!r}")
    prompts = {d: tokens for d, (_, tokens) in _path_prompts(model, tree, class_id).items()}
    probs, _ = _forward_batch(model, prompts, image[None], model.heads[class_id])
    return probs[0]


def batch_probabilities(
    model: ToyModel, tree: ParsingTree, images: np.ndarray, class_id: str
) -> np.ndarray:
    """Per-pixel probabilities (S, N) for one class over a stack of images."""
    if class_id not in model.heads:
        raise NotFoundError(f"model has no head for class {class_id!r}")
    prompts = {d: tokens for d, (_, tokens) in _path_prompts(model, tree, class_id).items()}
    probs, _ = _forward_batch(model, prompts, images, model.heads[class_id])
    return probs


# ---------------------------------------------------------------------------
# Loss and hand-derived gradients
# ---------------------------------------------------------------------------


@dataclass
class Gradients:
    prompts: dict[int, np.ndarray]  # node_id -> (u, b)
    head_weight: np.ndarray
    head_bias: np.ndarray
    layers: list[tuple[np.ndarray, np.ndarray]]  # (d_weight, d_bias) per decoder layer

    def add(self, other: "Gradients") -> None:
        for node_id, g in other.prompts.items():
            if node_id in self.prompts:
                self.prompts[node_id] = self.prompts[node_id] + g
            else:
                self.prompts[node_id] = g
        self.head_weight = self.head_weight + other.head_weight
        self.head_bias = self.head_bias + other.head_bias
        self.layers = [
            (dw1 + dw2, db1 + db2)
            for (dw1, db1), (dw2, db2) in zip(self.layers, other.layers)
        ]


def bce_loss(probs: np.ndarray, targets: np.ndarray) -> float:
    """Binary cross-entropy, probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(targets * np.log(p) + (1.0 - targets) * np.log1p(-p)))


def loss_and_gradients(
    model: ToyModel,
    tree: ParsingTree,
    batch: tuple[np.ndarray, np.ndarray],
    class_id: str,
) -> tuple[float, Gradients]:
    """Mean per-pixel BCE for one class over a batch, with all gradients.

    ``batch`` is (images (S, C, H, W), masks (S, H, W)). Gradients cover the
    three path partitions (keyed by node id), the class head, and every
    decoder layer; the encoder projection is frozen by construction.
    """
    return _loss_and_grads_from_prompts(
        model, _path_prompts(model, tree, class_id), batch, class_id
    )


def _loss_and_grads_from_prompts(
    model: ToyModel,
    depth_nodes: dict[int, tuple[int, np.ndarray]],
    batch: tuple[np.ndarray, np.ndarray],
    class_id: str,
    need_layer_grads: bool = True,
) -> tuple[float, Gradients]:
    """Loss/gradient core over explicit (node_id, tokens) prompt bindings."""
    images, masks = batch
    if images.shape[0] == 0:
        raise ArgumentError("batch must contain at least one sample")
    if images.shape[0] != masks.shape[0] or images.shape[2:] != masks.shape[1:]:
        raise DimensionError(f"images {images.shape} vs masks {masks.shape}")
    head = model.heads.get(class_id)
    if head is None:
        raise NotFoundError(f"model has no head for class {class_id!r}")

    prompts = {d: tokens for d, (_, tokens) in depth_nodes.items()}
    probs, cache = _forward_batch(model, prompts, images, head, keep_cache=True)

    s, n = cache["shape"]
    y = masks.reshape(s, n).astype(np.float64)
    p = probs
    loss = bce_loss(p, y)

    interior = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    g_z = (np.where(interior, p - y, 0.0) / (s * n)).reshape(s * n)

    f_out = cache["f_out"]
    g_head_w = g_z @ f_out
    g_head_b = np.array([g_z.sum()])
    g_f = np.outer(g_z, head.weight)

    scale = 1.0 / np.sqrt(model.embed_dim)
    g_prompts_by_depth: dict[int, np.ndarray] = {}
    g_layers: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    for entry in reversed(cache["layers"]):
        if "attn" in entry:
            attn, k, p_tok = entry["attn"], entry["k"], entry["p"]
            g_attn = g_f @ p_tok.T
            g_p = attn.T @ g_f
            g_logits = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
            g_p += (g_logits.T @ k) * scale
            g_g = g_f + g_logits @ p_tok * scale
            g_prompts_by_depth[entry["depth"]] = g_p
        else:
            g_g = g_f
        layer = model.layers[entry["depth"] - 1]
        if need_layer_grads:
            g_layers[entry["depth"] - 1] = (
                entry["f_in"].T @ g_g,
                g_g.sum(axis=0),
            )
        else:
            g_layers[entry["depth"] - 1] = (None, None)
        g_f = g_g + g_g @ layer.weight.T

    g_prompts = {
        depth_nodes[d][0]: g for d, g in g_prompts_by_depth.items()
    }
    grads = Gradients(
        prompts=g_prompts,
        head_weight=g_head_w,
        head_bias=g_head_b,
        layers=g_layers,
    )
    return loss, grads


# ---------------------------------------------------------------------------
# Fusion and prediction
# ---------------------------------------------------------------------------


def fuse(predictions: dict[str, np.ndarray], tau: float) -> np.ndarray:
    """Thresholded argmax over per-class probability vectors.

    A pixel gets the class with the highest probability if that probability
    exceeds ``tau``, else background (0). Ties go to the smallest class id.
    Returned labels index ``sorted(predictions)`` starting at 1.
    """
    if not predictions:
        raise ArgumentError("prediction map is empty")
    if not 0.0 <= tau <= 1.0:
        raise RangeError(f"tau must lie in [0, 1], got {tau}")
    order = sorted(predictions)
    lengths = {predictions[c].shape for c in order}
    if len(lengths) != 1:
        raise DimensionError(f"probability vectors disagree in shape: {lengths}")
    stacked = np.stack([predictions[c] for c in order])  # (K, N)
    best = stacked.argmax(axis=0)  # first max wins: smallest class id
    best_val = stacked.max(axis=0)
    return np.where(best_val > tau, best + 1, 0).astype(np.int64)


def predict(
    model: ToyModel,
    tree: ParsingTree,
    image: np.ndarray,
    class_ids: list[str],
    tau: float,
) -> MaskPrediction:
    per_class = {c: hierarchical_forward(model, tree, image, c) for c in class_ids}
    return MaskPrediction(
        per_class_prob=per_class,
        fused_labels=fuse(per_class, tau),
        class_order=sorted(class_ids),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1.0
    steps_first: int = 80
    steps_new: int = 90
    batch_size: int = 8
    momentum: float = 0.85
    clip_norm: float = 0.3
    decoder_decay: float = 0.002  # per-step shrink on decoder weights while they train
    iou_threshold: float = 0.6
    tau: float = 0.5


class Momentum:
    """SGD with heavy-ball momentum and global-norm clipping, in place.

    Deliberately not an adaptive method: per-parameter rescaling would let a
    cold full stack train as fast as a warm prompt-plus-head pair, hiding the
    speedup that inherited knowledge is supposed to buy. The global clip only
    bounds the overall step, it does not re-balance parameters.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 momentum: float = 0.85, clip_norm: float = 1.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.clip_norm > 0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = self.clip_norm / total if total > self.clip_norm else 1.0
        else:
            scale = 1.0
        for name, g in grads.items():
            if name not in self.params:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * scale * g
            self.params[name] += v


def _binary_iou(pred: np.ndarray, target: np.ndarray) -> float:
    inter = np.logical_and(pred, target).sum()
    union = np.logical_or(pred, target).sum()
    return 1.0 if union == 0 else float(inter / union)


def _class_batch(samples, class_id: str) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float64)
    h, w = images.shape[2:]
    masks = np.stack(
        [s.masks.get(class_id, np.zeros((h, w), dtype=bool)) for s in samples]
    )
    return images, masks


def _param_names(grads: Gradients, class_id: str, train_decoder: bool) -> dict[str, np.ndarray]:
    named = {f"node:{nid}": g for nid, g in grads.prompts.items()}
    named[f"head_w:{class_id}"] = grads.head_weight
    named[f"head_b:{class_id}"] = grads.head_bias
    if train_decoder:
        for i, (dw, db) in enumerate(grads.layers):
            named[f"layer_w:{i}"] = dw
            named[f"layer_b:{i}"] = db
    return named


def _train_loop(
    model: ToyModel,
    tree: ParsingTree,
    samples,
    class_ids: list[str],
    trainable: dict[str, np.ndarray],
    steps: int,
    config: TrainConfig,
    train_decoder: bool,
    measure_classes: list[str],
    shuffle_seed: int = 0,
) -> dict:
    """Shared minibatch loop for the joint and per-class objectives.

    Minibatches walk a seeded per-epoch shuffle (a fixed visiting order
    resonates with the optimizer and stalls convergence). Training IoU of
    every class in ``measure_classes`` is measured on the full sample list
    after each step to locate the first threshold crossing.
    """
    opt = Momentum(trainable, config.learning_rate, config.momentum, config.clip_norm)
    n = len(samples)
    batch = min(config.batch_size, n)
    steps_to_threshold: dict[str, int | None] = {c: None for c in measure_classes}
    losses: list[float] = []
    full = {c: _class_batch(samples, c) for c in set(class_ids) | set(measure_classes)}
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((shuffle_seed, n, steps)))
    order = shuffle_rng.permutation(n)

    for step in range(steps):
        lo = (step * batch) % n
        idx = [int(order[(lo + i) % n]) for i in range(batch)]
        if lo + batch >= n:
            order = shuffle_rng.permutation(n)
        step_loss = 0.0
        grads: dict[str, np.ndarray] = {}
        for c in class_ids:
            images, masks = full[c]
            loss, g = loss_and_gradients(model, tree, (images[idx], masks[idx]), c)
            step_loss += loss
            for name, arr in _param_names(g, c, train_decoder).items():
                if name in grads:
                    grads[name] = grads[name] + arr
                else:
                    grads[name] = arr
        if not np.isfinite(step_loss):
            raise DivergenceError(
                f"training loss became non-finite at step {step}; try a smaller learning_rate"
            )
        opt.step(grads)
        if train_decoder and config.decoder_decay > 0:
            # Decay keeps the shared affine stack close to identity so class
            # knowledge accumulates in prompts and heads; an unconstrained
            # decoder warps feature space against later, unseen classes.
            for layer in model.layers:
                layer.weight *= 1.0 - config.decoder_decay
        losses.append(step_loss)
        for c in measure_classes:
            if steps_to_threshold[c] is not None:
                continue
            images, masks = full[c]
            depth_prompts = {
                d: t for d, (_, t) in _path_prompts(model, tree, c).items()
            }
            probs, _ = _forward_batch(model, depth_prompts, images, model.heads[c])
            flat_masks = masks.reshape(masks.shape[0], -1)
            if _binary_iou(probs > config.tau, flat_masks) >= config.iou_threshold:
                steps_to_threshold[c] = step + 1
    return {
        "steps": steps,
        "initial_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "losses": losses,
        "steps_to_threshold": steps_to_threshold,
    }


def train_episode(
    model: ToyModel,
    tree: ParsingTree,
    episode,
    taxonomy,
    config: TrainConfig,
    part_counts: dict[str, int] | None = None,
    refine_config=None,
    mode: str = "auto",
    leaf_seed: int = 0,
    trace=None,
) -> dict:
    """Run one training episode in place on ``model`` and ``tree``.

    ``mode`` selects the objective:
      auto                 first episode trains everything jointly, later
                           episodes train only new leaves and new heads and
                           then refine the tree per new class
      joint                joint objective regardless of index
      incremental_finetune joint objective over the current label space with
                           nothing frozen (sequential fine-tuning baseline)

    Returns a report with per-phase losses and threshold crossings.
    """
    classes = sorted(episode.label_space)
    if mode == "auto":
        mode = "joint" if episode.index == 1 else "incremental_frozen"

    if mode in ("joint", "incremental_finetune"):
        for c in classes:
            ensure_head(model, c)
            if not tree.has_class(c):
                if part_counts is None or c not in part_counts:
                    raise NotFoundError(f"part count unknown for new class {c!r}")
                insert_leaf(tree, c, part_counts[c], leaf_seed + _stable_offset(c))
        trainable: dict[str, np.ndarray] = {}
        for node_id in tree.node_ids():
            trainable[f"node:{node_id}"] = tree.nodes[node_id].tokens
        for c in classes:
            trainable[f"head_w:{c}"] = model.heads[c].weight
            trainable[f"head_b:{c}"] = model.heads[c].bias
        for i, layer in enumerate(model.layers):
            trainable[f"layer_w:{i}"] = layer.weight
            trainable[f"layer_b:{i}"] = layer.bias
        steps = config.steps_first if mode == "joint" else config.steps_new
        report = _train_loop(
            model, tree, episode.samples, classes, trainable, steps, config,
            train_decoder=True, measure_classes=classes,
            shuffle_seed=leaf_seed + episode.index,
        )
        if mode == "joint":
            model.frozen["decoder"] = True
            for c in classes:
                model.frozen[f"head:{c}"] = True
        return {"mode": mode, "episode": episode.index, "classes": {"joint": report}}

    if mode != "incremental_frozen":
        raise ArgumentError(f"unknown training mode {mode!r}")

    from . import refine as refine_mod  # local import to avoid a cycle

    new_classes = sorted(taxonomy.new)
    per_class: dict[str, dict] = {}
    for c in new_classes:
        if part_counts is None or c not in part_counts:
            raise NotFoundError(f"part count unknown for new class {c!r}")
        insert_leaf(tree, c, part_counts[c], leaf_seed + _stable_offset(c))
        ensure_head(model, c)
        leaf = tree.class_node(c)
        trainable = {
            f"node:{leaf.node_id}": leaf.tokens,
            f"head_w:{c}": model.heads[c].weight,
            f"head_b:{c}": model.heads[c].bias,
        }
        before = snapshot_parameters(model, tree)
        report = _train_loop(
            model, tree, episode.samples, [c], trainable, config.steps_new, config,
            train_decoder=False, measure_classes=[c],
            shuffle_seed=leaf_seed + _stable_offset(c),
        )
        after = snapshot_parameters(model, tree)
        violations = [
            name for name, blob in before.items()
            if name not in trainable and after[name] != blob
        ]
        report["frozen_ok"] = not violations
        report["frozen_violations"] = violations
        if refine_config is not None:
            refined = refine_mod.self_reflect(
                tree, c, episode.samples, model, refine_config, trace=trace
            )
            for node_id, node in refined.nodes.items():
                np.copyto(tree.nodes[node_id].tokens, node.tokens)
        per_class[c] = report
    tree.episode = episode.index
    return {"mode": mode, "episode": episode.index, "classes": per_class}


def _stable_offset(class_id: str) -> int:
    # Deterministic per-class seed offset, independent of hash randomization.
    return sum(ord(ch) * (31**i) for i, ch in enumerate(class_id)) % 100003


def snapshot_parameters(model: ToyModel, tree: ParsingTree | None = None) -> dict[str, bytes]:
    """Byte-level snapshot of every parameter, for freeze audits."""
    snap = {
        "encoder": model.encoder_proj.tobytes(),
        "encoder_phase": model.encoder_phase.tobytes(),
    }
    for i, layer in enumerate(model.layers):
        snap[f"layer_w:{i}"] = layer.weight.tobytes()
        snap[f"layer_b:{i}"] = layer.bias.tobytes()
    for c, head in model.heads.items():
        snap[f"head_w:{c}"] = head.weight.tobytes()
        snap[f"head_b:{c}"] = head.bias.tobytes()
    if tree is not None:
        for node_id, node in tree.nodes.items():
            snap[f"node:{node_id}"] = node.tokens.tobytes()
    return snap


# ---------------------------------------------------------------------------
# Checkpoint and raw label grids
# ---------------------------------------------------------------------------


def to_checkpoint(model: ToyModel) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "embed_dim": model.embed_dim,
        "in_channels": model.in_channels,
        "insert_depths": list(model.insert_depths),
        "encoder_proj": [float(x) for x in model.encoder_proj.ravel()],
        "encoder_phase": [float(x) for x in model.encoder_phase],
        "layers": [
            {
                "weight": [float(x) for x in layer.weight.ravel()],
                "bias": [float(x) for x in layer.bias],
            }
            for layer in model.layers
        ],
        "heads": {
            c: {"weight": [float(x) for x in h.weight], "bias": float(h.bias[0])}
            for c, h in sorted(model.heads.items())
        },
        "frozen": dict(sorted(model.frozen.items())),
    }


def from_checkpoint(doc: dict) -> ToyModel:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    b = doc["embed_dim"]
    in_channels = doc["in_channels"]
    model = ToyModel(
        encoder_proj=np.array(doc["encoder_proj"]).reshape(in_channels, b),
        encoder_phase=np.array(doc["encoder_phase"]),
        layers=[
            DecoderLayer(
                weight=np.array(entry["weight"]).reshape(b, b),
                bias=np.array(entry["bias"]),
            )
            for entry in doc["layers"]
        ],
        insert_depths=tuple(doc["insert_depths"]),
        heads={
            c: SegHead(weight=np.array(h["weight"]), bias=np.array([h["bias"]]))
            for c, h in doc["heads"].items()
        },
        embed_dim=b,
        in_channels=in_channels,
        frozen=dict(doc["frozen"]),
    )
    return model


def save_checkpoint(model: ToyModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_checkpoint(model), fh, sort_keys=True)


def load_checkpoint(path) -> ToyModel:
    with open(path) as fh:
        return from_checkpoint(json.load(fh))


def write_label_grid(labels: np.ndarray) -> bytes:
    """Pack a 2-D integer label grid: magic, u32 H, u32 W, u16 row-major labels."""
    if labels.ndim != 2:
        raise DimensionError(f"label grid must be 2-D, got shape {labels.shape}")
    h, w = labels.shape
    body = labels.astype("<u2").tobytes(order="C")
    return LABEL_GRID_MAGIC + struct.pack("<II", h, w) + body


def read_label_grid(blob: bytes) -> np.ndarray:
    if blob[:4] != LABEL_GRID_MAGIC:
        raise ValueError("not a label grid blob (bad magic)")
    h, w = struct.unpack("<II", blob[4:12])
    flat = np.frombuffer(blob[12:], dtype="<u2")
    if flat.size != h * w:
        raise DimensionError(f"label grid payload {flat.size} != {h}x{w}")
    return flat.reshape(h, w).copy()
