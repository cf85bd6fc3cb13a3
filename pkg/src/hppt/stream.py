"""Deterministic synthetic class-incremental streams.

Classes are long, slim instruments assembled from a shared part vocabulary:
each class chains its parts along a random direction from the image border
and ends in a class-distinct tip. Classes that share parts therefore share
pixel statistics, which is what makes shared-knowledge transfer measurable
downstream. Masks are exact and pixel-disjoint within a sample.

Everything is a pure function of (config, seed): part vocabulary and class
signatures derive from the seed alone, per-sample draws from (seed, episode,
split), so train and eval splits see the same classes with different frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, RangeError
from .model import read_label_grid, write_label_grid

IMAGE_BLOB_MAGIC = b"IMGB"

_SPLIT_CODES = {"train": 1, "eval": 2}
_SPEC_TAG = 90001

# Default two-episode arrangement: seven first-episode instruments, five of
# which persist, plus two second-episode newcomers. Part counts follow the
# instrument anatomy (needle drivers and forceps have 3 parts, scissors and
# clip appliers 2, probes and suction tools 1).
DEFAULT_PART_COUNTS = {
    "VS": 3, "GR": 3, "PF": 3, "BF": 3, "UP": 1, "LND": 3, "MCS": 2,
    "SI": 1, "CA": 2,
}
# Any two classes share at most one part, so cross-class ambiguity stays
# bounded while the shared-knowledge premise holds.
DEFAULT_PART_IDS = {
    "VS": [0, 1, 2], "GR": [0, 3, 4], "PF": [1, 3, 5], "BF": [2, 4, 6],
    "LND": [0, 5, 6], "MCS": [1, 4], "CA": [2, 5], "UP": [3], "SI": [6],
}
DEFAULT_EPISODES = [
    ["VS", "GR", "PF", "BF", "UP", "LND", "MCS"],
    ["PF", "BF", "UP", "LND", "MCS", "SI", "CA"],
]


@dataclass
class PartSpec:
    part_id: int
    shape: str  # capsule | ellipse | rect
    hue: np.ndarray  # (3,) unit color direction shared by every class using the part
    freq: tuple[float, float]
    width_scale: float


@dataclass
class ClassSpec:
    class_id: str
    part_count: int
    part_ids: list[int]
    tip_shape: str
    tip_color: np.ndarray
    tip_radius: float
    phase: float
    brightness: float = 1.0  # per-class magnitude band
    hue: np.ndarray = None  # (3,) unit class color direction


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    masks: dict[str, np.ndarray]  # class_id -> (H, W) bool, pairwise disjoint


@dataclass
class Episode:
    index: int
    samples: list[Sample]
    label_space: set[str]
    part_counts: dict[str, int] = field(default_factory=dict)


@dataclass
class Taxonomy:
    new: set[str]
    regular: set[str]
    old: set[str]


@dataclass
class StreamConfig:
    episodes: int = 2
    layout: str = "surgical_pair"  # surgical_pair | rotating | explicit
    class_lists: list[list[str]] | None = None
    part_counts: dict[str, int] | None = None
    classes_per_episode: int = 7
    carryover: int = 5
    height: int = 32
    width: int = 32
    samples_per_episode: int = 64
    seed: int = 0
    split: str = "train"
    n_max: int = 3
    vocab_size: int = 7
    noise: float = 0.05
    presence: float = 0.6
    clutter: int = 6  # instrument-colored background blobs per frame


def taxonomy(label_spaces: list[set[str]], t: int) -> Taxonomy:
    """New / regular / old class sets at episode t (1-based).

    New classes were never seen before t, regular ones appear in every
    episode up to t, and old ones are seen classes that are neither. At t=1
    the new and regular sets coincide by definition.
    """
    if not 1 <= t <= len(label_spaces):
        raise RangeError(f"t must lie in [1, {len(label_spaces)}], got {t}")
    current = set(label_spaces[t - 1])
    seen_before: set[str] = set().union(*label_spaces[: t - 1]) if t > 1 else set()
    regular = set(label_spaces[0])
    for space in label_spaces[1:t]:
        regular &= set(space)
    new = current - seen_before
    old = (seen_before | current) - regular - new
    return Taxonomy(new=new, regular=regular, old=old)


# ---------------------------------------------------------------------------
# Layout and spec construction
# ---------------------------------------------------------------------------


def episode_class_lists(config: StreamConfig) -> list[list[str]]:
    if config.episodes < 1:
        raise ConfigError("need at least one episode")
    if config.layout == "surgical_pair":
        if config.episodes != 2:
            raise ConfigError("surgical_pair layout is a two-episode arrangement")
        return [list(ep) for ep in DEFAULT_EPISODES]
    if config.layout == "explicit":
        if not config.class_lists or len(config.class_lists) != config.episodes:
            raise ConfigError("explicit layout needs class_lists matching episode count")
        return [list(ep) for ep in config.class_lists]
    if config.layout == "rotating":
        if config.classes_per_episode < 1:
            raise ConfigError("classes_per_episode must be >= 1")
        if config.episodes > 1 and config.carryover < 1:
            raise ConfigError("rotating layout with several episodes needs carryover >= 1, "
                              "otherwise the regular set is empty")
        if config.carryover > config.classes_per_episode:
            raise ConfigError("carryover cannot exceed classes_per_episode")
        lists = []
        fresh = config.classes_per_episode - config.carryover
        counter = 0
        first = [f"c{counter + i:02d}" for i in range(config.classes_per_episode)]
        counter += config.classes_per_episode
        lists.append(first)
        for _ in range(1, config.episodes):
            nxt = first[: config.carryover] + [f"c{counter + i:02d}" for i in range(fresh)]
            counter += fresh
            lists.append(nxt)
        return lists
    raise ConfigError(f"unknown layout {config.layout!r}")


def _palette(i: int, jitter: float) -> np.ndarray:
    angle = 2.399963 * i + jitter  # golden-angle spacing keeps colors spread out
    return 0.55 + 0.4 * np.array(
        [np.sin(angle), np.sin(angle + 2.094), np.sin(angle + 4.189)]
    )


_GRAY = np.ones(3) / np.sqrt(3.0)
# Orthonormal basis of the plane orthogonal to the gray axis.
_CHROMA_U = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
_CHROMA_V = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)


def _hue_at(angle: float) -> np.ndarray:
    """Unit color direction at a chroma-ring angle; channels stay nonnegative
    because the chroma radius never exceeds the gray component."""
    hue = 0.866 * _GRAY + 0.5 * (np.cos(angle) * _CHROMA_U + np.sin(angle) * _CHROMA_V)
    return hue / np.linalg.norm(hue)


def _part_hue(i: int, jitter: float) -> np.ndarray:
    return _hue_at(2.399963 * i + jitter)  # golden-angle spacing


def build_vocabulary(config: StreamConfig) -> list[PartSpec]:
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _SPEC_TAG, 1)))
    shapes = ["capsule", "ellipse", "rect"]
    vocab = []
    for i in range(config.vocab_size):
        vocab.append(
            PartSpec(
                part_id=i,
                shape=shapes[i % 3],
                hue=_part_hue(i, rng.uniform(0, 0.5)),
                freq=(rng.uniform(0.5, 1.8), rng.uniform(0.5, 1.8)),
                width_scale=rng.uniform(0.85, 1.25),
            )
        )
    return vocab


def _banding_stride(n: int) -> int:
    """Stride through brightness bands, coprime to n and near n/2, so classes
    adjacent on the hue ring always land several bands apart."""
    if n <= 2:
        return 1
    best = 1
    for k in range(2, n):
        if np.gcd(k, n) == 1 and min(k, n - k) > min(best, n - best):
            best = k
    return best


def _class_signatures(class_order: list[str], rng) -> dict[str, tuple[float, np.ndarray]]:
    """(brightness band, unit hue) per class: hues evenly spread on the chroma
    ring, bands interleaved by a coprime stride so hue-adjacent classes sit in
    distant bands."""
    n = len(class_order)
    ring = rng.permutation(n)
    jitter = rng.uniform(0, 2 * np.pi)
    # Band floor stays well above the background brightness so the dimmest
    # class never shades into the scene.
    bands = np.linspace(0.52, 1.0, n) if n > 1 else np.array([0.8])
    stride = _banding_stride(n)
    out = {}
    for i, c in enumerate(class_order):
        pos = int(ring[i])
        out[c] = (
            float(bands[(stride * pos) % n]),
            _hue_at(2 * np.pi * pos / n + jitter),
        )
    return out


def build_class_specs(config: StreamConfig) -> dict[str, ClassSpec]:
    lists = episode_class_lists(config)
    all_classes = sorted({c for ep in lists for c in ep})
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _SPEC_TAG, 2)))
    part_counts = dict(DEFAULT_PART_COUNTS) if config.layout == "surgical_pair" else {}
    if config.part_counts:
        part_counts.update(config.part_counts)
    tip_shapes = ["ellipse", "rect", "capsule"]

    chosen_parts: dict[str, list[int]] = {}
    counts: dict[str, int] = {}
    for class_id in all_classes:
        count = part_counts.get(class_id)
        if count is None:
            count = int(rng.integers(1, config.n_max + 1))
        if not 1 <= count <= config.n_max:
            raise ConfigError(f"part count {count} for {class_id!r} outside [1, {config.n_max}]")
        if count > config.vocab_size:
            raise ConfigError(f"part count {count} exceeds vocabulary size {config.vocab_size}")
        if config.layout == "surgical_pair" and class_id in DEFAULT_PART_IDS:
            chosen_parts[class_id] = list(DEFAULT_PART_IDS[class_id])
        else:
            chosen_parts[class_id] = sorted(
                rng.choice(config.vocab_size, size=count, replace=False).tolist()
            )
        counts[class_id] = count

    signatures = _class_signatures(all_classes, rng)
    specs: dict[str, ClassSpec] = {}
    for class_id in all_classes:
        brightness, hue = signatures[class_id]
        specs[class_id] = ClassSpec(
            class_id=class_id,
            part_count=counts[class_id],
            part_ids=chosen_parts[class_id],
            tip_shape=tip_shapes[int(rng.integers(3))],
            tip_color=brightness * hue,  # tip shows the pure class hue
            tip_radius=rng.uniform(2.2, 3.0),
            phase=rng.uniform(0, 2 * np.pi),
            brightness=brightness,
            hue=hue,
        )
    return specs


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _grid(h: int, w: int):
    return np.mgrid[0:h, 0:w].astype(np.float64)


def _capsule_mask(ys, xs, a, b, r):
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((ys - a[0]) * ab[0] + (xs - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dy = ys - (a[0] + t * ab[0])
    dx = xs - (a[1] + t * ab[1])
    return dy * dy + dx * dx <= r * r


def _frame_coords(ys, xs, center, direction):
    dy, dx = direction
    u = (ys - center[0]) * dy + (xs - center[1]) * dx
    v = -(ys - center[0]) * dx + (xs - center[1]) * dy
    return u, v


def _ellipse_mask(ys, xs, center, direction, ax_long, ax_short):
    u, v = _frame_coords(ys, xs, center, direction)
    return (u / ax_long) ** 2 + (v / ax_short) ** 2 <= 1.0


def _rect_mask(ys, xs, center, direction, half_len, half_w):
    u, v = _frame_coords(ys, xs, center, direction)
    return (np.abs(u) <= half_len) & (np.abs(v) <= half_w)


def _segment_mask(shape, ys, xs, a, b, r):
    center = (a + b) / 2
    length = float(np.hypot(*(b - a))) or 1.0
    direction = (b - a) / length
    if shape == "capsule":
        return _capsule_mask(ys, xs, a, b, r)
    if shape == "ellipse":
        return _ellipse_mask(ys, xs, center, direction, length / 2 + 0.3 * r, r)
    return _rect_mask(ys, xs, center, direction, length / 2, r)


def _render_instrument(rng, h, w, spec: ClassSpec, vocab: list[PartSpec]):
    ys, xs = _grid(h, w)
    for _ in range(8):
        side = int(rng.integers(4))
        along = rng.uniform(0.2, 0.8)
        if side == 0:
            start = np.array([1.5, along * w])
        elif side == 1:
            start = np.array([h - 2.5, along * w])
        elif side == 2:
            start = np.array([along * h, 1.5])
        else:
            start = np.array([along * h, w - 2.5])
        to_center = np.array([h / 2, w / 2]) - start
        base = np.arctan2(to_center[0], to_center[1])
        angle = base + rng.uniform(-0.5, 0.5)
        direction = np.array([np.sin(angle), np.cos(angle)])
        reach = min(h, w) * rng.uniform(0.5, 0.75)
        seg_len = reach / (spec.part_count + 0.8)
        width = rng.uniform(1.7, 2.5)

        mask = np.zeros((h, w), dtype=bool)
        color = np.zeros((3, h, w))
        cursor = start.copy()
        for part_id in spec.part_ids:
            part = vocab[part_id]
            end = cursor + direction * seg_len
            seg = _segment_mask(part.shape, ys, xs, cursor, end, width * part.width_scale)
            texture = 0.96 + 0.04 * np.sin(
                part.freq[0] * xs + part.freq[1] * ys + spec.phase
            )
            # Pixel direction mixes a little of the shared part hue into the
            # dominant class hue; magnitude is the class band. The part weight
            # is kept small so distinct (class, part) combinations never
            # collide in color space.
            mix = 0.22 * part.hue + 0.78 * spec.hue
            mix /= np.linalg.norm(mix)
            paint = seg & ~mask
            color[:, paint] = (spec.brightness * mix)[:, None] * texture[paint]
            mask |= seg
            cursor = end
        tip_center = cursor + direction * spec.tip_radius * 0.8
        tip = _segment_mask(
            spec.tip_shape, ys, xs, tip_center - direction * spec.tip_radius,
            tip_center + direction * spec.tip_radius, spec.tip_radius,
        )
        color[:, tip] = spec.tip_color[:, None] * (
            0.85 + 0.15 * np.sin(2.2 * xs + 1.7 * ys + spec.phase)
        )[tip]
        mask |= tip
        if mask.sum() >= 12:
            return mask, color
    # Fallback: centered instrument, used only when border draws degenerate.
    center = np.array([h / 2, w / 2])
    tip = _capsule_mask(ys, xs, center, center, max(3.0, spec.tip_radius))
    color = np.zeros((3, h, w))
    color[:, tip] = spec.tip_color[:, None]
    return tip, color


def _render_sample(rng, config: StreamConfig, present: list[str],
                   specs: dict[str, ClassSpec], vocab: list[PartSpec]) -> Sample:
    h, w = config.height, config.width
    ys, xs = _grid(h, w)
    image = np.empty((3, h, w))
    base = 0.12 + 0.05 * xs / w + 0.03 * ys / h
    image[:] = base
    occupied = np.zeros((h, w), dtype=bool)
    masks: dict[str, np.ndarray] = {}
    for class_id in [present[i] for i in rng.permutation(len(present))]:
        mask, color = _render_instrument(rng, h, w, specs[class_id], vocab)
        mask = mask & ~occupied
        occupied |= mask
        image[:, mask] = color[:, mask]
        masks[class_id] = mask
    # Instrument-colored clutter (labeled background): separating instruments
    # from look-alike debris is the shared skill an experienced pipeline
    # carries into new episodes.
    for _ in range(config.clutter):
        center = np.array([rng.uniform(2, h - 2), rng.uniform(2, w - 2)])
        angle = rng.uniform(0, 2 * np.pi)
        direction = np.array([np.sin(angle), np.cos(angle)])
        length = rng.uniform(1.5, 4.5)
        blob = _capsule_mask(ys, xs, center - direction * length / 2,
                             center + direction * length / 2, rng.uniform(0.8, 1.6))
        blob &= ~occupied
        color = rng.uniform(0.45, 1.0) * _hue_at(rng.uniform(0, 2 * np.pi))
        image[:, blob] = color[:, None]
    image += rng.normal(0.0, config.noise, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=image.astype(np.float32), masks=masks)


def generate_stream(config: StreamConfig) -> list[Episode]:
    """Materialize every episode of the configured stream, bit-reproducibly."""
    if config.split not in _SPLIT_CODES:
        raise ConfigError(f"unknown split {config.split!r}")
    if config.samples_per_episode < 1:
        raise ConfigError("samples_per_episode must be >= 1")
    lists = episode_class_lists(config)
    specs = build_class_specs(config)
    vocab = build_vocabulary(config)
    episodes = []
    for t, classes in enumerate(lists, start=1):
        rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, t, _SPLIT_CODES[config.split]))
        )
        samples = []
        for _ in range(config.samples_per_episode):
            flags = rng.random(len(classes)) < config.presence
            if not flags.any():
                flags[int(rng.integers(len(classes)))] = True
            present = [c for c, f in zip(classes, flags) if f]
            samples.append(_render_sample(rng, config, present, specs, vocab))
        episodes.append(
            Episode(
                index=t,
                samples=samples,
                label_space=set(classes),
                part_counts={c: specs[c].part_count for c in classes},
            )
        )
    return episodes


# ---------------------------------------------------------------------------
# Manifest and binary export
# ---------------------------------------------------------------------------


def manifest(config: StreamConfig, episodes: list[Episode]) -> dict:
    return {
        "version": 1,
        "seed": config.seed,
        "split": config.split,
        "layout": config.layout,
        "height": config.height,
        "width": config.width,
        "noise": config.noise,
        "episodes": [
            {
                "index": ep.index,
                "classes": sorted(ep.label_space),
                "part_counts": {c: ep.part_counts[c] for c in sorted(ep.part_counts)},
                "samples": len(ep.samples),
            }
            for ep in episodes
        ],
    }


def write_image_blob(image: np.ndarray) -> bytes:
    import struct

    c, h, w = image.shape
    return IMAGE_BLOB_MAGIC + struct.pack("<III", c, h, w) + image.astype("<f4").tobytes()


def read_image_blob(blob: bytes) -> np.ndarray:
    import struct

    if blob[:4] != IMAGE_BLOB_MAGIC:
        raise ValueError("not an image blob (bad magic)")
    c, h, w = struct.unpack("<III", blob[4:16])
    return np.frombuffer(blob[16:], dtype="<f4").reshape(c, h, w).copy()


def save_stream(episodes: list[Episode], config: StreamConfig, out_dir) -> None:
    """Write manifest.json plus per-sample image blobs and label grids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest(config, episodes), fh, sort_keys=True, indent=1)
    for ep in episodes:
        order = sorted(ep.label_space)
        for i, sample in enumerate(ep.samples):
            (out / f"ep{ep.index}_img{i:04d}.bin").write_bytes(write_image_blob(sample.image))
            labels = np.zeros(sample.image.shape[1:], dtype=np.int64)
            for k, class_id in enumerate(order, start=1):
                if class_id in sample.masks:
                    labels[sample.masks[class_id]] = k
            (out / f"ep{ep.index}_lbl{i:04d}.bin").write_bytes(write_label_grid(labels))


def load_stream(in_dir) -> tuple[list[Episode], dict]:
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        doc = json.load(fh)
    episodes = []
    for entry in doc["episodes"]:
        order = entry["classes"]
        samples = []
        for i in range(entry["samples"]):
            image = read_image_blob((src / f"ep{entry['index']}_img{i:04d}.bin").read_bytes())
            labels = read_label_grid((src / f"ep{entry['index']}_lbl{i:04d}.bin").read_bytes())
            masks = {
                class_id: labels == k
                for k, class_id in enumerate(order, start=1)
                if (labels == k).any()
            }
            samples.append(Sample(image=image, masks=masks))
        episodes.append(
            Episode(
                index=entry["index"],
                samples=samples,
                label_space=set(order),
                part_counts=dict(entry["part_counts"]),
            )
        )
    return episodes, doc
