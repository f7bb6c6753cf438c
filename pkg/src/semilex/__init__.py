"""semilex: membership checking for words built from noisy real-world tokens.

A learned recognizer maps imperfect tokens (handwritten digits, detected
object components) onto a formal alphabet; symbolic rules decide whether the
whole word belongs to the language, and the two layers assist each other
through similarity/dissimilarity integrity constraints.

Two complete instantiations ship with the package: handwritten-board
validation (:mod:`semilex.sudoku`) and component-based cycle identification
(:mod:`semilex.objects`).
"""

__version__ = "0.1.0"

from ._kernels import NUMBA_ENABLED, backend_name
from .core import (
    COMPONENTS,
    DIGITS,
    SUDOKU_DIGITS,
    Alphabet,
    CandidateGraph,
    ConstraintRule,
    IntegrityConstraintSet,
    Token,
    Violation,
    assignment_satisfies,
    build_candidate_graph,
)
from .dataset_io import (
    BoardImage,
    Box,
    Detection,
    DetectionFile,
    GridSpec,
    LabeledImageSet,
    load_board,
    load_detections,
    load_idx,
    save_idx,
    segment_board,
)
from .nn import Model, TrainConfig, embed, evaluate, forward, init_model, load_model, save_model, train
from .objects import (
    ComponentPairSample,
    ObjectRuleSet,
    ObjectVerdict,
    classify,
    inrange,
    iterative_search,
    learn_range,
    normalized_distance,
    verify_detections,
)
from .sudoku import (
    Board,
    BoardConsistency,
    Verdict,
    board_from_text,
    board_to_text,
    solve,
    sudoku_constraints,
    tag_cells,
    valid,
    validate_handwritten,
)
from .support import (
    INCOMPARABLE,
    EmbeddingIndex,
    SupportMap,
    build_index,
    global_support,
    global_support_batch,
    is_globally_consistent,
    is_locally_consistent,
    load_index,
    local_support,
    save_index,
)

__all__ = [
    "__version__",
    "NUMBA_ENABLED",
    "backend_name",
    # core
    "Alphabet", "DIGITS", "SUDOKU_DIGITS", "COMPONENTS", "Token",
    "CandidateGraph", "build_candidate_graph", "ConstraintRule",
    "IntegrityConstraintSet", "Violation", "assignment_satisfies",
    # nn
    "Model", "TrainConfig", "init_model", "train", "forward", "embed",
    "evaluate", "save_model", "load_model",
    # dataset io
    "LabeledImageSet", "load_idx", "save_idx", "GridSpec", "BoardImage",
    "segment_board", "load_board", "Box", "Detection", "DetectionFile",
    "load_detections",
    # support metrics
    "SupportMap", "EmbeddingIndex", "build_index", "global_support",
    "global_support_batch", "local_support", "INCOMPARABLE",
    "is_globally_consistent", "is_locally_consistent", "save_index", "load_index",
    # sudoku
    "Board", "board_from_text", "board_to_text", "valid", "tag_cells",
    "solve", "validate_handwritten", "sudoku_constraints", "BoardConsistency",
    "Verdict",
    # objects
    "ObjectRuleSet", "ComponentPairSample", "normalized_distance", "inrange",
    "learn_range", "iterative_search", "classify", "verify_detections",
    "ObjectVerdict",
]
