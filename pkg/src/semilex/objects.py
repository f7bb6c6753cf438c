"""Component-based cycle identification over ingested detection proposals.

A cycle class is decided by first-order rules over the accepted components:
the wheel count must match the class exactly (one/two/three for
uni/bi/tricycle), there must be exactly one frame, and the frame must sit
spatially within a range of every wheel, where the admissible range per
component pair is learned from training metadata.  Distances are normalised
by the image size, so the range check doubles as a uniqueness check:
coincident boxes are the same physical component.

If the proposals above the objectness threshold do not cover the components
the target class needs, the threshold decays in fixed steps down to a floor,
masking already-accepted regions (IoU overlap) while re-searching.  After the
rules fire, same-name components are compared pairwise with the
matched-feature distance metric; components that look too different from
their peers are flagged inconsistent and excluded before the class cardinality
is read off.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from . import descriptors as desc
from .dataset_io import Box, Detection, DetectionFile, load_image
from .errors import ConfigurationError, ParameterError
from .support import INCOMPARABLE, is_locally_consistent, local_support

CLASS_WHEELS = {"unicycle": 1, "bicycle": 2, "tricycle": 3}
CLASS_NAMES = ("unicycle", "bicycle", "tricycle")

DEFAULT_THRESHOLD = 0.40
DEFAULT_DECAY = 0.1
DEFAULT_FLOOR = 0.2
DEFAULT_MASK_IOU = 0.5

__all__ = [
    "CLASS_WHEELS",
    "CLASS_NAMES",
    "ObjectRuleSet",
    "ComponentPairSample",
    "normalized_distance",
    "inrange",
    "box_iou",
    "learn_range",
    "iterative_search",
    "CropConsistency",
    "ComponentFlag",
    "ObjectVerdict",
    "classify",
    "verify_detections",
]


def _pair_key(name_a: str, name_b: str) -> tuple:
    return tuple(sorted((name_a, name_b)))


@dataclass(frozen=True)
class ObjectRuleSet:
    """Cardinality rules plus learned distance ranges per component pair.

    ``ranges`` maps a sorted name pair to (min_distance, max_distance) in
    normalised units.  Wheel counts identify the class; every class requires
    exactly one frame (for unicycles a seat may stand in when no frame was
    detected, an extrapolation documented in the README).
    """

    ranges: dict = field(default_factory=dict)
    wheel_counts: dict = field(default_factory=lambda: dict(CLASS_WHEELS))

    def __post_init__(self):
        normalised = {}
        for key, (lo, hi) in self.ranges.items():
            if lo > hi:
                raise ConfigurationError(f"range for {key} has min {lo} > max {hi}")
            normalised[_pair_key(*key)] = (float(lo), float(hi))
        object.__setattr__(self, "ranges", normalised)

    def range_for(self, name_a: str, name_b: str):
        return self.ranges.get(_pair_key(name_a, name_b))


# Permissive fallback used when no ranges were learned: any separation counts,
# but coincident components are still rejected as duplicates.
DEFAULT_RANGES = {
    ("wheel", "wheel"): (0.05, math.sqrt(2.0)),
    ("frame", "wheel"): (0.02, math.sqrt(2.0)),
    ("seat", "wheel"): (0.02, math.sqrt(2.0)),
}


@dataclass(frozen=True)
class ComponentPairSample:
    """One training observation of two components in one image."""

    name_a: str
    center_a: tuple
    name_b: str
    center_b: tuple
    width: float
    height: float

    @property
    def distance(self) -> float:
        dx = (self.center_a[0] - self.center_b[0]) / self.width
        dy = (self.center_a[1] - self.center_b[1]) / self.height
        return math.hypot(dx, dy)


def normalized_distance(a: Detection, b: Detection, width: float, height: float) -> float:
    """Center distance with each axis normalised by the image size; in [0, sqrt(2)]."""
    if width <= 0 or height <= 0:
        raise ParameterError("image dimensions must be positive")
    dx = (a.box.cx - b.box.cx) / width
    dy = (a.box.cy - b.box.cy) / height
    return math.hypot(dx, dy)


def inrange(a: Detection, b: Detection, width: float, height: float, limits) -> bool:
    """Closed-interval range check on the normalised distance.

    A positive minimum makes coincident detections fail, which is what keeps
    accepted components unique.
    """
    lo, hi = limits
    if lo > hi:
        raise ParameterError(f"range has min {lo} > max {hi}")
    return lo <= normalized_distance(a, b, width, height) <= hi


def box_iou(a: Box, b: Box) -> float:
    ax0, ax1 = a.cx - a.bw / 2, a.cx + a.bw / 2
    ay0, ay1 = a.cy - a.bh / 2, a.cy + a.bh / 2
    bx0, bx1 = b.cx - b.bw / 2, b.cx + b.bw / 2
    by0, by1 = b.cy - b.bh / 2, b.cy + b.bh / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.bw * a.bh + b.bw * b.bh - inter
    return inter / union


def learn_range(samples, required_pairs=(("wheel", "wheel"), ("frame", "wheel"))) -> dict:
    """Min/max observed normalised distance per component pair.

    Raises :class:`ConfigurationError` listing any required pair that has no
    sample.
    """
    ranges: dict = {}
    for s in samples:
        key = _pair_key(s.name_a, s.name_b)
        d = s.distance
        if key in ranges:
            lo, hi = ranges[key]
            ranges[key] = (min(lo, d), max(hi, d))
        else:
            ranges[key] = (d, d)
    missing = [_pair_key(*p) for p in required_pairs if _pair_key(*p) not in ranges]
    if missing:
        raise ConfigurationError(
            "no training samples for component pair(s): " + ", ".join(map(str, missing))
        )
    return ranges


def _required_counts(target_class: str) -> dict:
    if target_class not in CLASS_WHEELS:
        raise ParameterError(f"unknown target class {target_class!r}")
    return {"wheel": CLASS_WHEELS[target_class], "frame": 1}


def iterative_search(detections: DetectionFile, initial_threshold: float = DEFAULT_THRESHOLD,
                     decay: float = DEFAULT_DECAY, floor: float = DEFAULT_FLOOR,
                     required: dict | None = None, mask_iou: float = DEFAULT_MASK_IOU) -> tuple:
    """Accept proposals by decaying objectness threshold until the parts are found.

    Pass 1 accepts every proposal scoring at least ``initial_threshold`` (in
    descending score order, skipping proposals that overlap an accepted one by
    more than ``mask_iou``).  While the ``required`` component counts are not
    yet covered and the threshold can drop by ``decay`` without falling below
    ``floor``, it does, and qualifying non-overlapping proposals are accepted.
    Returns the accepted detections, best score first.
    """
    if not (0.0 < floor <= initial_threshold <= 1.0):
        raise ParameterError(
            f"need 0 < floor <= initial_threshold <= 1, got {floor} / {initial_threshold}"
        )
    if decay <= 0:
        raise ParameterError(f"decay must be positive, got {decay}")
    if required is None:
        required = _required_counts("bicycle")

    ordered = sorted(enumerate(detections.proposals), key=lambda it: (-it[1].score, it[0]))
    taken: list = []  # indices into ordered

    def have_all() -> bool:
        counts: dict = {}
        for i in taken:
            name = ordered[i][1].name
            counts[name] = counts.get(name, 0) + 1
        return all(counts.get(name, 0) >= need for name, need in required.items())

    def sweep(threshold: float):
        for i, (_, det) in enumerate(ordered):
            if i in taken or det.score < threshold:
                continue
            if any(box_iou(det.box, ordered[j][1].box) > mask_iou for j in taken):
                continue
            taken.append(i)

    sweep(initial_threshold)
    step = 0
    while not have_all():
        nxt = round(initial_threshold - (step + 1) * decay, 9)
        if nxt < floor - 1e-9:
            break
        step += 1
        sweep(nxt)
    return tuple(ordered[i][1] for i in sorted(taken))


class CropConsistency:
    """Pairwise appearance comparison over detection crop images.

    Descriptor sets are extracted lazily and cached per crop path.  Detections
    without a crop (or with an unreadable one) are incomparable.
    """

    def __init__(self, descriptor_fn=desc.extract):
        self._descriptor_fn = descriptor_fn
        self._cache: dict = {}

    def descriptor(self, det: Detection):
        if det.crop is None:
            return None
        if det.crop not in self._cache:
            try:
                image = load_image(det.crop)
            except OSError:
                self._cache[det.crop] = None
            else:
                self._cache[det.crop] = self._descriptor_fn(image)
        return self._cache[det.crop]

    def consistency(self, det: Detection, peers):
        mine = self.descriptor(det)
        others = [self.descriptor(p) for p in peers]
        if mine is None or any(o is None for o in others) or not others:
            return INCOMPARABLE
        return local_support(mine, others)


@dataclass(frozen=True)
class ComponentFlag:
    detection: Detection
    status: str  # "consistent" | "inconsistent" | "unverified"

    def to_json(self) -> dict:
        return {
            "name": self.detection.name,
            "score": self.detection.score,
            "box": dict(self.detection.box._asdict()),
            "status": self.status,
        }


@dataclass(frozen=True)
class ObjectVerdict:
    object_class: str  # "unicycle" | "bicycle" | "tricycle" | "none"
    components: tuple
    rule_trace: tuple

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "class": self.object_class,
            "components": [c.to_json() for c in self.components],
            "rule_trace": list(self.rule_trace),
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


def _dissimilarity_filter(group, metrics, tolerance: float, trace: list):
    """Greedy peeling: repeatedly flag the worst outlier above tolerance.

    Returns (consistent, inconsistent, verified).  With two equally distant
    members the lower-scoring one is flagged: the learned detector's own
    confidence is the only remaining evidence.
    """
    if metrics is None:
        return list(group), [], False
    if any(metrics.descriptor(det) is None for det in group):
        return list(group), [], False
    kept = list(group)
    flagged = []
    while len(kept) >= 2:
        values = []
        for det in kept:
            v = metrics.consistency(det, [p for p in kept if p is not det])
            values.append(v)
        offenders = [
            (v, i) for i, v in enumerate(values)
            if not is_locally_consistent(v, tolerance)
        ]
        if not offenders:
            break
        worst = max(offenders, key=lambda vi: (vi[0], kept[vi[1]].score * -1, vi[1]))
        det = kept.pop(worst[1])
        flagged.append(det)
        trace.append(
            f"dissimilarity: {det.name} at ({det.box.cx:g},{det.box.cy:g}) "
            f"flagged inconsistent (local support {worst[0]:.2f} > {tolerance:g})"
        )
    return kept, flagged, True


def classify(accepted, rules: ObjectRuleSet, width: float, height: float,
             metrics: CropConsistency | None = None,
             consistency_tolerance: float = 10.0) -> ObjectVerdict:
    """Decide the cycle class of an accepted component set.

    Same-name components are first filtered for mutual appearance consistency
    (skipped, and marked unverified, when crops are unavailable); the class is
    then read off the consistent components: exact wheel cardinality, exactly
    one frame, frame within the learned range of every wheel, wheels pairwise
    within their own range.
    """
    trace: list = []
    by_name: dict = {}
    for det in accepted:
        by_name.setdefault(det.name, []).append(det)

    flags: dict = {}
    verified_all = True
    for name in sorted(by_name):
        group = by_name[name]
        if len(group) >= 2:
            kept, flagged, verified = _dissimilarity_filter(
                group, metrics, consistency_tolerance, trace)
            verified_all = verified_all and verified
        else:
            kept, flagged = group, []
            verified = metrics is not None and all(
                metrics.descriptor(d) is not None for d in group)
        status_kept = "consistent" if (metrics is not None and verified) else "unverified"
        for det in kept:
            flags[id(det)] = ComponentFlag(det, status_kept)
        for det in flagged:
            flags[id(det)] = ComponentFlag(det, "inconsistent")
        by_name[name] = kept

    wheels = by_name.get("wheel", [])
    frames = by_name.get("frame", [])
    seats = by_name.get("seat", [])

    def pair_ok(a, b) -> bool:
        limits = rules.range_for(a.name, b.name)
        if limits is None:
            limits = DEFAULT_RANGES.get(_pair_key(a.name, b.name), (1e-9, math.sqrt(2.0)))
        return inrange(a, b, width, height, limits)

    object_class = "none"
    n_wheels = len(wheels)
    trace.append(f"wheel count {n_wheels}, frame count {len(frames)}")

    wheel_class = None
    for cls, need in rules.wheel_counts.items():
        if n_wheels == need:
            wheel_class = cls
            break
    if wheel_class is None:
        trace.append("no class matches the wheel cardinality")
    else:
        trace.append(f"wheel cardinality matches {wheel_class}")
        anchors = frames
        anchor_name = "frame"
        if not anchors and wheel_class == "unicycle" and seats:
            anchors = seats
            anchor_name = "seat"
            trace.append("no frame detected; seat stands in for the unicycle check")
        if len(anchors) != 1:
            trace.append(f"need exactly one {anchor_name}, found {len(anchors)}")
        else:
            anchor = anchors[0]
            wheels_ok = all(pair_ok(anchor, w) for w in wheels)
            trace.append(
                f"{anchor.name} within range of all wheels: {'yes' if wheels_ok else 'no'}")
            pairs_ok = all(
                pair_ok(wheels[i], wheels[j])
                for i in range(len(wheels))
                for j in range(i + 1, len(wheels))
            )
            if n_wheels > 1:
                trace.append(
                    f"wheels pairwise distinct and in range: {'yes' if pairs_ok else 'no'}")
            if wheels_ok and pairs_ok:
                object_class = wheel_class

    if metrics is None or not verified_all:
        trace.append("appearance consistency unverified (no component crops)")

    components = tuple(flags[id(det)] for det in accepted)
    verdict = ObjectVerdict(object_class=object_class, components=components,
                            rule_trace=tuple(trace))
    # Cardinality soundness: the reported class must match the consistent set.
    if verdict.object_class != "none":
        assert len(wheels) == rules.wheel_counts[verdict.object_class]
    return verdict


def verify_detections(detections: DetectionFile, rules: ObjectRuleSet | None = None,
                      target_class: str = "bicycle",
                      initial_threshold: float = DEFAULT_THRESHOLD,
                      decay: float = DEFAULT_DECAY, floor: float = DEFAULT_FLOOR,
                      mask_iou: float = DEFAULT_MASK_IOU,
                      consistency_tolerance: float = 10.0) -> ObjectVerdict:
    """Search-then-classify pipeline for one detection file.

    The threshold decay hunts for the parts the target class needs; the final
    class is still read off whatever components were actually accepted.
    """
    if rules is None:
        rules = ObjectRuleSet(ranges=dict(DEFAULT_RANGES))
    accepted = iterative_search(
        detections,
        initial_threshold=initial_threshold,
        decay=decay,
        floor=floor,
        required=_required_counts(target_class),
        mask_iou=mask_iou,
    )
    metrics = CropConsistency() if any(d.crop for d in accepted) else None
    return classify(accepted, rules, detections.width, detections.height,
                    metrics=metrics, consistency_tolerance=consistency_tolerance)
