"""Handwritten-board validation: tag cells, check the rules, repair by search.

The flow on one board image: every cell token is classified by the CNN; a
cell keeps its predicted digit only when the digit's global support clears
the acceptance bound, otherwise it becomes blank.  A fully tagged board that
already satisfies the placement rules is accepted outright.  Otherwise the
blank cells' candidate digits (support above the lower bound) form a
bipartite candidate graph and a depth-first backtracking search looks for an
assignment that satisfies the placement rules and the local-consistency
constraint: a solved cell must not look too different from the board's other
cells carrying the same digit.

High-confidence cells are never revisited by the search; when they are
mutually contradictory the verdict is NotSolvable and the audit trail shows
the contradiction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import descriptors as desc
from .core import (
    SUDOKU_DIGITS,
    CandidateGraph,
    ConstraintRule,
    IntegrityConstraintSet,
    Token,
    Violation,
    assignment_satisfies,
    build_candidate_graph,
)
from .dataset_io import BoardImage
from .errors import InputError, PreconditionError
from .nn import Model, forward_batch
from .support import (
    INCOMPARABLE,
    EmbeddingIndex,
    SupportMap,
    global_support_batch,
    is_locally_consistent,
    local_support,
)

BLANK = 0

OUTCOME_CLEAN = "NoAmbiguities"
OUTCOME_CORRECTED = "CorrectedBoard"
OUTCOME_UNSOLVABLE = "NotSolvable"

__all__ = [
    "BLANK",
    "OUTCOME_CLEAN",
    "OUTCOME_CORRECTED",
    "OUTCOME_UNSOLVABLE",
    "Board",
    "board_from_text",
    "board_to_text",
    "valid",
    "is_placement_legal",
    "BoardConsistency",
    "sudoku_constraints",
    "tag_cells",
    "solve",
    "validate_handwritten",
    "CellAudit",
    "Verdict",
]


@dataclass
class Board:
    """9x9 digit grid; 0 is blank.  Provenance tracks how each cell was set."""

    grid: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        if self.grid.shape != (9, 9):
            raise InputError(f"grid must be 9x9, got {self.grid.shape}")
        if self.grid.min() < 0 or self.grid.max() > 9:
            raise InputError("cells must be blank (0) or digits 1..9")
        if self.provenance is None:
            self.provenance = np.where(self.grid == BLANK, "", "given").astype("<U9")
        else:
            self.provenance = np.asarray(self.provenance, dtype="<U9")
            if self.provenance.shape != (9, 9):
                raise InputError("provenance must be 9x9")

    def blanks(self) -> list:
        rows, cols = np.nonzero(self.grid == BLANK)
        return list(zip(rows.tolist(), cols.tolist()))

    def copy(self) -> "Board":
        return Board(self.grid.copy(), self.provenance.copy())


def board_from_text(text: str) -> Board:
    """Parse the 9-lines-of-9-characters format; '.' marks a blank."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 9 or any(len(ln) != 9 for ln in lines):
        raise InputError("board text must be 9 lines of 9 characters")
    grid = np.zeros((9, 9), dtype=np.int64)
    for i, ln in enumerate(lines):
        for j, ch in enumerate(ln):
            if ch == ".":
                continue
            if ch not in "123456789":
                raise InputError(f"bad character {ch!r} at row {i + 1}, column {j + 1}")
            grid[i, j] = int(ch)
    return Board(grid)


def board_to_text(board: Board) -> str:
    return "\n".join(
        "".join("." if d == BLANK else str(d) for d in row) for row in board.grid
    )


def valid(board) -> bool:
    """Do all rows, columns and 3x3 boxes hold the digits 1..9 exactly once?

    The board must be complete; blanks raise :class:`PreconditionError`.
    """
    grid = board.grid if isinstance(board, Board) else np.asarray(board, dtype=np.int64)
    if (grid == BLANK).any():
        raise PreconditionError("valid() requires a complete board (no blanks)")
    want = frozenset(range(1, 10))
    for i in range(9):
        if set(grid[i, :].tolist()) != want or set(grid[:, i].tolist()) != want:
            return False
    for bi in range(3):
        for bj in range(3):
            if set(grid[3 * bi:3 * bi + 3, 3 * bj:3 * bj + 3].ravel().tolist()) != want:
                return False
    return True


def is_placement_legal(grid: np.ndarray, row: int, col: int, digit: int) -> bool:
    """Would placing ``digit`` at (row, col) collide with a filled cell?"""
    for j in range(9):
        if j != col and grid[row, j] == digit:
            return False
    for i in range(9):
        if i != row and grid[i, col] == digit:
            return False
    bi, bj = 3 * (row // 3), 3 * (col // 3)
    for i in range(bi, bi + 3):
        for j in range(bj, bj + 3):
            if (i, j) != (row, col) and grid[i, j] == digit:
                return False
    return True


class BoardConsistency:
    """Local-support oracle over one board's cell images (descriptors cached)."""

    def __init__(self, board_image: BoardImage, descriptor_fn=desc.extract):
        self._cells = board_image.cells
        self._descriptor_fn = descriptor_fn
        self._cache: dict = {}

    def descriptor(self, pos) -> desc.LocalDescriptor:
        if pos not in self._cache:
            i, j = pos
            self._cache[pos] = self._descriptor_fn(self._cells[i, j])
        return self._cache[pos]

    def consistency(self, pos, peers):
        """Mean matched-feature distance of ``pos`` against peer cells."""
        if not peers:
            return INCOMPARABLE
        return local_support(self.descriptor(pos), [self.descriptor(p) for p in peers])

    def pair_distance(self, a, b):
        return self.consistency(a, [b])


def _position(token_id: int):
    return divmod(token_id, 9)


def _board_consistency_rule(tolerance: float) -> ConstraintRule:
    """Every solved cell must sit within tolerance of all same-digit cells.

    ``metrics`` must be a :class:`BoardConsistency` paired with a base grid
    exposed as ``metrics.base_grid`` (set by :func:`solve`); without metrics
    the rule passes vacuously.
    """

    def check(word, assignment, metrics):
        if metrics is None:
            return []
        base = getattr(metrics, "base_grid", None)
        found = []
        for token_id in sorted(assignment):
            pos = _position(token_id)
            digit = assignment[token_id]
            peers = [
                _position(t) for t in sorted(assignment)
                if t != token_id and assignment[t] == digit
            ]
            if base is not None:
                rows, cols = np.nonzero(base == digit)
                peers.extend(p for p in zip(rows.tolist(), cols.tolist()) if p != pos)
            if not peers:
                continue
            value = metrics.consistency(pos, sorted(set(peers)))
            if not is_locally_consistent(value, tolerance):
                found.append(Violation(rule="local-consistency", tokens=(token_id,)))
        return found

    return ConstraintRule(name="local-consistency", kind="dissimilarity", check=check)


def sudoku_constraints(candidate_threshold: float = 0.10, accept_threshold: float = 0.80,
                       neighbor_count: int = 1000,
                       consistency_tolerance: float = 10.0) -> IntegrityConstraintSet:
    """The board's integrity-constraint set with its four tuning parameters."""
    return IntegrityConstraintSet(
        similarity=(),
        dissimilarity=(_board_consistency_rule(consistency_tolerance),),
        candidate_threshold=candidate_threshold,
        accept_threshold=accept_threshold,
        neighbor_count=neighbor_count,
        consistency_tolerance=consistency_tolerance,
    )


def tag_cells(board_image: BoardImage, model: Model, index: EmbeddingIndex,
              accept_threshold: float = 0.80, neighbor_count: int | None = None):
    """Tag every cell or blank it.

    A cell keeps the CNN's predicted digit only when that digit's global
    support reaches ``accept_threshold`` (and the digit is a legal board
    symbol; a predicted 0 always blanks).  Returns the board and a support
    map per cell; empty cells get an empty map.
    """
    positions = [(i, j) for i in range(9) for j in range(9) if not board_image.empty[i, j]]
    grid = np.zeros((9, 9), dtype=np.int64)
    provenance = np.full((9, 9), "empty", dtype="<U9")
    supports: dict = {}
    for i in range(9):
        for j in range(9):
            supports[(i, j)] = SupportMap()
    if positions:
        images = np.stack([board_image.cells[i, j] for i, j in positions])
        probs, embeddings = forward_batch(model, images)
        maps = global_support_batch(index, embeddings, neighbor_count)
        predicted = probs.argmax(axis=1)
        for pos, digit, smap in zip(positions, predicted.tolist(), maps):
            supports[pos] = smap
            provenance[pos] = "predicted"
            if digit in SUDOKU_DIGITS and smap.get(digit) >= accept_threshold:
                grid[pos] = digit
            else:
                grid[pos] = BLANK
    return Board(grid, provenance), supports


@dataclass(frozen=True)
class CellAudit:
    row: int
    col: int
    digit: int | None
    provenance: str
    confidence: float
    support: dict
    local_value: object = None  # float, "incomparable", or None when not computed
    violations: tuple = ()

    def to_json(self) -> dict:
        return {
            "row": self.row,
            "col": self.col,
            "digit": self.digit,
            "provenance": self.provenance,
            "confidence": self.confidence,
            "support": {str(k): v for k, v in sorted(self.support.items())},
            "local": self.local_value,
            "violations": list(self.violations),
        }


@dataclass
class Verdict:
    outcome: str
    board: Board
    cells: tuple = ()
    notes: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        # Soundness: a corrected board is by definition a valid one.
        if self.outcome == OUTCOME_CORRECTED:
            assert valid(self.board), "corrected board failed validity"

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "outcome": self.outcome,
            "board": self.board.grid.tolist(),
            "board_text": board_to_text(self.board),
            "cells": [c.to_json() for c in self.cells],
            "notes": list(self.notes),
            "params": dict(sorted(self.params.items())),
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


def solve(board: Board, graph: CandidateGraph, rules: IntegrityConstraintSet,
          metrics: BoardConsistency | None = None,
          supports: dict | None = None) -> Verdict:
    """Assign every blank cell a candidate digit so the whole board is valid.

    Depth-first backtracking: cells are tried in ascending candidate-count
    order (fail-first, ties row-major), candidate digits in descending
    support (ties by smaller digit).  With ``metrics`` every tentative digit
    is checked for local consistency against the already-determined same-digit
    cells, and a complete assignment is re-checked against the full rule set
    before being accepted.
    """
    base = board.copy()
    targets = base.blanks()
    supports = supports or {}

    token_ids = [i * 9 + j for i, j in targets]
    unmappable = [t for t in token_ids if not graph.candidates(t)]
    if metrics is not None:
        metrics.base_grid = base.grid.copy()

    def verdict(outcome, final: Board, notes=()):
        return Verdict(outcome=outcome, board=final, notes=tuple(notes),
                       cells=_audits(final, supports, metrics, rules))

    if unmappable:
        cells = ", ".join(f"({r + 1},{c + 1})" for r, c in map(_position, unmappable))
        return verdict(OUTCOME_UNSOLVABLE, base,
                       notes=(f"unmappable cells with no candidate digit: {cells}",))

    order = sorted(targets, key=lambda pos: (len(graph.candidates(pos[0] * 9 + pos[1])), pos))
    grid = base.grid.copy()
    assignment: dict = {}
    word = tuple(Token(ident=t) for t in token_ids)

    def candidates_for(pos):
        edges = graph.candidates(pos[0] * 9 + pos[1])
        return [sym for sym, _ in sorted(edges, key=lambda e: (-e[1], e[0]))]

    def consistent_here(pos, digit) -> bool:
        if metrics is None:
            return True
        peers = [p for p in zip(*np.nonzero(grid == digit)) if p != pos]
        if not peers:
            return True
        value = metrics.consistency(pos, [tuple(map(int, p)) for p in peers])
        return is_locally_consistent(value, rules.consistency_tolerance)

    hooks = rules.search_hooks()

    def hooks_allow() -> bool:
        return all(not hook.check(word, assignment, metrics) for hook in hooks)

    def search(depth: int) -> bool:
        if depth == len(order):
            return valid(grid) and assignment_satisfies(word, assignment, rules, metrics).ok
        pos = order[depth]
        for digit in candidates_for(pos):
            if not is_placement_legal(grid, pos[0], pos[1], digit):
                continue
            if not consistent_here(pos, digit):
                continue
            grid[pos] = digit
            assignment[pos[0] * 9 + pos[1]] = digit
            if hooks_allow() and search(depth + 1):
                return True
            grid[pos] = BLANK
            del assignment[pos[0] * 9 + pos[1]]
        return False

    if not targets:
        if valid(grid):
            return verdict(OUTCOME_CLEAN, base)
        return verdict(OUTCOME_UNSOLVABLE, base,
                       notes=("no blanks to repair and the fixed cells violate the rules",))

    if search(0):
        solved = Board(grid, base.provenance.copy())
        for pos in targets:
            solved.provenance[pos] = "solved"
        return verdict(OUTCOME_CORRECTED, solved)
    return verdict(OUTCOME_UNSOLVABLE, base,
                   notes=("no candidate assignment satisfies the rules",))


def _audits(final: Board, supports: dict, metrics: BoardConsistency | None,
            rules: IntegrityConstraintSet) -> tuple:
    audits = []
    for i in range(9):
        for j in range(9):
            digit = int(final.grid[i, j])
            smap = supports.get((i, j), SupportMap())
            local_value = None
            violations: tuple = ()
            if metrics is not None and digit != BLANK and final.provenance[i, j] == "solved":
                peers = [
                    (r, c)
                    for r, c in zip(*np.nonzero(final.grid == digit))
                    if (r, c) != (i, j)
                ]
                value = metrics.consistency((i, j), [(int(r), int(c)) for r, c in peers])
                local_value = "incomparable" if value is INCOMPARABLE else value
                if not is_locally_consistent(value, rules.consistency_tolerance):
                    violations = ("local-consistency",)
            audits.append(CellAudit(
                row=i,
                col=j,
                digit=None if digit == BLANK else digit,
                provenance=str(final.provenance[i, j]),
                confidence=float(smap.get(digit)) if digit != BLANK else 0.0,
                support=dict(smap.weights),
                local_value=local_value,
                violations=violations,
            ))
    return tuple(audits)


def validate_handwritten(board_image: BoardImage, model: Model, index: EmbeddingIndex,
                         rules: IntegrityConstraintSet | None = None) -> Verdict:
    """Full pipeline on one board image; returns the three-way verdict.

    Composes cell tagging, the all-tagged shortcut, candidate-graph
    construction over the blanks, and the backtracking repair.
    """
    if rules is None:
        rules = sudoku_constraints()
    board, supports = tag_cells(
        board_image, model, index,
        accept_threshold=rules.accept_threshold,
        neighbor_count=rules.neighbor_count,
    )
    params = {
        "accept_threshold": rules.accept_threshold,
        "candidate_threshold": rules.candidate_threshold,
        "neighbor_count": rules.neighbor_count,
        "consistency_tolerance": rules.consistency_tolerance,
    }
    metrics = BoardConsistency(board_image)
    blanks = board.blanks()
    if not blanks:
        metrics.base_grid = board.grid.copy()
        if valid(board):
            v = Verdict(outcome=OUTCOME_CLEAN, board=board,
                        cells=_audits(board, supports, metrics, rules))
        else:
            v = Verdict(outcome=OUTCOME_UNSOLVABLE, board=board,
                        cells=_audits(board, supports, metrics, rules),
                        notes=("all cells tagged confidently but the board breaks the rules",))
        v.params = params
        return v

    graph = build_candidate_graph(
        {i * 9 + j: supports[(i, j)] for i, j in blanks},
        rules.candidate_threshold,
        SUDOKU_DIGITS,
    )
    v = solve(board, graph, rules, metrics=metrics, supports=supports)
    v.params = params
    return v
