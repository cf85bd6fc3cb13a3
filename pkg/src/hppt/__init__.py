"""Hierarchical prompt-tree class-incremental segmentation, desk scale.

The package is organized around the incremental-learning loop: a prompt
parsing tree (`tree`) feeds a toy prompt-tuned segmenter (`model`); after a
new class trains, the tree is refined through directed-graph propagation
(`graph`, `refine`); synthetic streams (`stream`) and transfer metrics
(`metrics`) make the whole loop measurable; `harness` and `cli` orchestrate
experiments and baselines.
"""

from .errors import (
    ArgumentError,
    ConfigError,
    ConflictError,
    ConvergenceError,
    DegeneracyError,
    DimensionError,
    DivergenceError,
    HpptError,
    IncompatibilityError,
    MissingDataError,
    NotFoundError,
    RangeError,
)
from .graph import (
    OrientedGraph,
    StationaryDist,
    TransitionMatrix,
    orient_and_weight,
    propagation_matrix,
    stationary_distribution,
    transition_matrix,
)
from .metrics import IoUTable, bwt, fwt, iou, majority_vote_part_count
from .model import (
    FeatureMap,
    MaskPrediction,
    ToyModel,
    cross_attention_layer,
    fuse,
    hierarchical_forward,
    loss_and_gradients,
    new_model,
    train_episode,
)
from .refine import RefineConfig, RefineState, finite_difference_check, propagate_features, self_reflect
from .stream import Episode, StreamConfig, Taxonomy, generate_stream, taxonomy
from .tree import (
    ParsingTree,
    PromptPartition,
    insert_leaf,
    new_tree,
    path_for_class,
    tree_distance,
)

__version__ = "0.1.0"
