"""Reusable vocabulary for reasoning over noisy real-world tokens.

A word is a sequence of tokens (images, detections, ...) that should map onto
symbols of a finite alphabet.  Ambiguous tokens get several candidate symbols;
the candidate graph records every (token, symbol) pairing whose recognition
confidence clears a lower bound.  Integrity constraints then restrict which
joint assignments are acceptable: similarity rules may support candidates
during search, dissimilarity rules reject assignments that map visibly
different tokens to the same symbol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

from .errors import InputError, ParameterError

__all__ = [
    "Alphabet",
    "DIGITS",
    "SUDOKU_DIGITS",
    "COMPONENTS",
    "Token",
    "CandidateGraph",
    "build_candidate_graph",
    "Violation",
    "ConstraintRule",
    "IntegrityConstraintSet",
    "ConstraintVerdict",
    "assignment_satisfies",
    "same_symbol_dissimilarity",
]


@dataclass(frozen=True)
class Alphabet:
    """Finite ordered set of distinct symbol identifiers."""

    symbols: tuple

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if not self.symbols:
            raise InputError("alphabet must be non-empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise InputError("alphabet symbols must be distinct")

    def __contains__(self, symbol) -> bool:
        return symbol in self.symbols

    def __iter__(self):
        return iter(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def index(self, symbol) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise InputError(f"{symbol!r} is not in the alphabet") from None


DIGITS = Alphabet(tuple(range(10)))
SUDOKU_DIGITS = Alphabet(tuple(range(1, 10)))
COMPONENTS = Alphabet(("wheel", "seat", "frame", "handlebar"))


@dataclass(frozen=True)
class Token:
    """One observed token: an opaque payload plus its ordinal within the word."""

    ident: int
    payload: Any = None


@dataclass(frozen=True)
class CandidateGraph:
    """Bipartite token/symbol graph; an edge carries the recognition confidence.

    ``adjacency`` maps every token id (including unmappable ones, with an
    empty tuple) to (symbol, confidence) pairs in alphabet order.  All edge
    confidences are >= the ``threshold`` used at construction.
    """

    tokens: tuple
    symbols: tuple
    adjacency: Mapping[int, tuple]
    threshold: float

    def candidates(self, token_id: int) -> tuple:
        return self.adjacency.get(token_id, ())

    def confidence(self, token_id: int, symbol) -> float:
        for sym, conf in self.candidates(token_id):
            if sym == symbol:
                return conf
        return 0.0

    def unmappable(self) -> tuple:
        return tuple(t for t in self.tokens if not self.adjacency[t])

    def edge_count(self) -> int:
        return sum(len(v) for v in self.adjacency.values())


def build_candidate_graph(support_maps: Mapping[int, Any], threshold: float,
                          alphabet: Alphabet) -> CandidateGraph:
    """Connect each token to every alphabet symbol supported at >= threshold.

    ``support_maps`` maps token id to a SupportMap (anything with a
    ``weights`` mapping).  Tokens whose support nowhere reaches the threshold
    stay in the graph with empty adjacency so callers can tell "unmappable"
    from "absent".
    """
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {threshold}")
    adjacency = {}
    for token_id in sorted(support_maps):
        weights = support_maps[token_id].weights
        edges = tuple(
            (sym, float(weights[sym]))
            for sym in alphabet
            if sym in weights and weights[sym] >= threshold
        )
        adjacency[token_id] = edges
    return CandidateGraph(
        tokens=tuple(sorted(support_maps)),
        symbols=tuple(alphabet),
        adjacency=adjacency,
        threshold=threshold,
    )


@dataclass(frozen=True)
class Violation:
    rule: str
    tokens: tuple


@dataclass(frozen=True)
class ConstraintRule:
    """Named predicate over (word, assignment, metrics).

    ``check`` returns the violations it found (empty when satisfied).  ``kind``
    is "similarity" (usable as in-search support) or "dissimilarity"
    (evaluated on complete assignments).
    """

    name: str
    kind: str
    check: Callable[[Sequence[Token], Mapping[int, Any], Any], Sequence[Violation]]


@dataclass(frozen=True)
class IntegrityConstraintSet:
    """Rule collection plus the thresholds the rules are parameterised by."""

    similarity: tuple = ()
    dissimilarity: tuple = ()
    candidate_threshold: float = 0.10  # minimum support for a candidate edge
    accept_threshold: float = 0.80     # support needed to fix a tag outright
    neighbor_count: int = 1000         # k used by the global-support metric
    consistency_tolerance: float = 10.0  # max admissible local inconsistency

    def __post_init__(self):
        if not (0.0 <= self.candidate_threshold <= self.accept_threshold <= 1.0):
            raise ParameterError(
                "need 0 <= candidate_threshold <= accept_threshold <= 1, got "
                f"{self.candidate_threshold} / {self.accept_threshold}"
            )
        if self.neighbor_count < 1:
            raise ParameterError(f"neighbor_count must be >= 1, got {self.neighbor_count}")
        if self.consistency_tolerance < 0:
            raise ParameterError(
                f"consistency_tolerance must be >= 0, got {self.consistency_tolerance}"
            )

    def all_rules(self) -> tuple:
        return self.similarity + self.dissimilarity

    def search_hooks(self) -> tuple:
        """Rules a solver may evaluate on partial assignments to prune early.

        Similarity rules only: dissimilarity rules are defined over complete
        assignments.  A hook is called with the assignment made so far and
        must judge only the tokens it contains.
        """
        return self.similarity


@dataclass(frozen=True)
class ConstraintVerdict:
    ok: bool
    violations: tuple


def assignment_satisfies(word: Sequence[Token], assignment: Mapping[int, Any],
                         rules: IntegrityConstraintSet, metrics: Any = None) -> ConstraintVerdict:
    """Evaluate every rule against a complete assignment.

    Deterministic and independent of token enumeration order: violations come
    back sorted by (rule name, token ids).
    """
    violations = []
    for rule in rules.all_rules():
        violations.extend(rule.check(word, assignment, metrics))
    violations.sort(key=lambda v: (v.rule, v.tokens))
    return ConstraintVerdict(ok=not violations, violations=tuple(violations))


def same_symbol_dissimilarity(distance: Callable[[Any, Any], Any], tolerance: float,
                              name: str = "same-symbol-dissimilarity") -> ConstraintRule:
    """Rule: two tokens assigned the same symbol must not look too different.

    ``distance`` compares two token payloads; a comparable result above
    ``tolerance`` is a violation naming both tokens.  Incomparable results
    (None or a non-numeric sentinel) pass: absence of matched features is not
    evidence of dissimilarity.
    """

    def check(word, assignment, metrics):
        by_id = {t.ident: t for t in word}
        by_symbol: dict = {}
        for token_id in sorted(assignment):
            by_symbol.setdefault(assignment[token_id], []).append(token_id)
        found = []
        for symbol in by_symbol:
            ids = by_symbol[symbol]
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    d = distance(by_id[ids[i]].payload, by_id[ids[j]].payload)
                    if isinstance(d, (int, float)) and d > tolerance:
                        found.append(Violation(rule=name, tokens=(ids[i], ids[j])))
        return found

    return ConstraintRule(name=name, kind="dissimilarity", check=check)
