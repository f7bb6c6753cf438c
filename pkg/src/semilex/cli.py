"""Command-line surface: train, validate, support, verify-object.

Exit codes are a stable contract: 0 success/accepted, 1 semantic rejection
(board not solvable, object class none), 2 input error, 3 internal error.
All JSON output carries ``"schema": 1`` and echoes the effective parameters
so verdicts can be reproduced.

``SEMILEX_DATA_DIR`` names a directory searched for input files given as
bare relative paths that do not exist locally.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import __version__
from .dataset_io import GridSpec, load_board, load_detections, load_idx, load_image
from .errors import SemilexError, TrainingError
from .nn import TrainConfig, evaluate, forward, load_model, save_model, train
from .objects import (
    DEFAULT_DECAY,
    DEFAULT_FLOOR,
    DEFAULT_THRESHOLD,
    ObjectRuleSet,
    verify_detections,
)
from .sudoku import OUTCOME_UNSOLVABLE, sudoku_constraints, validate_handwritten
from .support import (
    INCOMPARABLE,
    build_index,
    global_support,
    load_index,
    local_support,
    save_index,
)

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3


def _resolve(path: str) -> Path:
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    base = os.environ.get("SEMILEX_DATA_DIR")
    if base:
        candidate = Path(base) / p
        if candidate.exists():
            return candidate
    return p


def _emit(doc: dict, out: str | None):
    text = json.dumps(doc, sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        click.echo(text)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.version_option(version=__version__, prog_name="semilex")
def main():
    """Decide membership of words built from noisy tokens in rule-defined languages."""


@main.command("train")
@click.option("--images", required=True, help="IDX image file (optionally .gz).")
@click.option("--labels", required=True, help="IDX label file (optionally .gz).")
@click.option("--test-images", default=None, help="IDX test images for the accuracy summary.")
@click.option("--test-labels", default=None, help="IDX test labels.")
@click.option("--model", "model_out", required=True, help="Output path for the model file.")
@click.option("--index", "index_out", required=True, help="Output path for the embedding index.")
@click.option("--epochs", default=3, show_default=True)
@click.option("--lr", "learning_rate", default=0.05, show_default=True)
@click.option("--batch", "batch_size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--limit", default=0, show_default=True,
              help="Train on at most this many images (0 = all).")
@click.option("--k", "neighbor_count", default=1000, show_default=True,
              help="Default neighbour count stored in the index.")
@click.option("--out", default=None, help="Write the summary JSON here instead of stdout.")
def cmd_train(images, labels, test_images, test_labels, model_out, index_out,
              epochs, learning_rate, batch_size, seed, limit, neighbor_count, out):
    """Train the digit model and build its embedding index."""
    try:
        dataset = load_idx(_resolve(images), _resolve(labels))
        if limit:
            dataset = dataset.subset(slice(0, limit))
        cfg = TrainConfig(epochs=epochs, learning_rate=learning_rate,
                          batch_size=batch_size, seed=seed)
        model = train(dataset, cfg)
        index = build_index(model, dataset, k_default=min(neighbor_count, len(dataset)))
        save_model(model, model_out)
        save_index(index, index_out)
        summary = {
            "schema": 1,
            "params": {"epochs": epochs, "learning_rate": learning_rate,
                       "batch_size": batch_size, "seed": seed, "k": index.k_default},
            "trained_on": len(dataset),
            "loss_history": list(model.loss_history),
            "model": str(model_out),
            "index": str(index_out),
        }
        if test_images and test_labels:
            test_set = load_idx(_resolve(test_images), _resolve(test_labels))
            summary["test_accuracy"] = evaluate(model, test_set)
        _emit(summary, out)
    except FileNotFoundError as exc:
        _fail(EXIT_INPUT, str(exc))
    except TrainingError as exc:
        _fail(EXIT_INTERNAL, str(exc))
    except SemilexError as exc:
        _fail(EXIT_INPUT, str(exc))
    sys.exit(EXIT_OK)


def _grid_from_flags(cell, origin, pitch, tail) -> GridSpec:
    return GridSpec(cell_size=cell, origin=origin, pitch=pitch, tail=tail)


@main.command("validate")
@click.option("--model", "model_path", required=True)
@click.option("--index", "index_path", required=True)
@click.option("--board", "boards", required=True, multiple=True,
              help="Board image, or directory of r{i}c{j}.png cells (repeatable).")
@click.option("--c-h", "accept_threshold", default=0.80, show_default=True,
              help="Support needed to accept a predicted digit outright.")
@click.option("--c-l", "candidate_threshold", default=0.10, show_default=True,
              help="Support needed for a candidate edge.")
@click.option("--k", "neighbor_count", default=0, show_default="index default",
              type=int, help="Neighbour count for global support.")
@click.option("--epsilon", "consistency_tolerance", default=10.0, show_default=True,
              help="Maximum admissible local-support distance.")
@click.option("--grid-cell", default=28, show_default=True)
@click.option("--grid-origin", default=0, show_default=True)
@click.option("--grid-pitch", default=None, type=int)
@click.option("--grid-tail", default=0, show_default=True)
@click.option("--jobs", default=1, show_default=True,
              help="Validate multiple boards concurrently.")
@click.option("--out", default=None, help="Write verdict JSON here instead of stdout.")
def cmd_validate(model_path, index_path, boards, accept_threshold, candidate_threshold,
                 neighbor_count, consistency_tolerance, grid_cell, grid_origin,
                 grid_pitch, grid_tail, jobs, out):
    """Validate handwritten board image(s); exit 1 when any is not solvable."""
    try:
        model = load_model(_resolve(model_path))
        index = load_index(_resolve(index_path))
        k = neighbor_count or index.k_default
        rules = sudoku_constraints(
            candidate_threshold=candidate_threshold,
            accept_threshold=accept_threshold,
            neighbor_count=k,
            consistency_tolerance=consistency_tolerance,
        )
        grid = _grid_from_flags(grid_cell, grid_origin, grid_pitch, grid_tail)
        board_images = [load_board(_resolve(b), grid) for b in boards]
    except FileNotFoundError as exc:
        _fail(EXIT_INPUT, str(exc))
    except SemilexError as exc:
        _fail(EXIT_INPUT, str(exc))

    def run(board_image):
        return validate_handwritten(board_image, model, index, rules)

    try:
        if jobs > 1 and len(board_images) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=jobs) as pool:
                verdicts = list(pool.map(run, board_images))
        else:
            verdicts = [run(b) for b in board_images]
    except SemilexError as exc:
        _fail(EXIT_INPUT, str(exc))

    docs = [v.to_json() for v in verdicts]
    _emit(docs[0] if len(docs) == 1 else {"schema": 1, "verdicts": docs}, out)
    if any(v.outcome == OUTCOME_UNSOLVABLE for v in verdicts):
        sys.exit(EXIT_REJECTED)
    sys.exit(EXIT_OK)


@main.command("support")
@click.option("--model", "model_path", required=True)
@click.option("--index", "index_path", required=True)
@click.option("--image", "image_path", required=True, help="One 28x28 cell image.")
@click.option("--k", "neighbor_count", default=0, type=int, show_default="index default")
@click.option("--peers", multiple=True,
              help="Peer token images for the local-support diagnostic (repeatable).")
@click.option("--epsilon", "consistency_tolerance", default=10.0, show_default=True)
@click.option("--out", default=None)
def cmd_support(model_path, index_path, image_path, neighbor_count, peers,
                consistency_tolerance, out):
    """Print the support map (and optional local-support diagnostics) for one token."""
    try:
        model = load_model(_resolve(model_path))
        index = load_index(_resolve(index_path))
        image = load_image(_resolve(image_path))
        k = neighbor_count or index.k_default
        probs, embedding = forward(model, image)
        smap = global_support(index, embedding, k)
        doc = {
            "schema": 1,
            "params": {"k": k, "epsilon": consistency_tolerance},
            "predicted": int(probs.argmax()),
            "support": {str(sym): w for sym, w in sorted(smap.weights.items(), key=lambda kv: str(kv[0]))},
        }
        if peers:
            peer_images = [load_image(_resolve(p)) for p in peers]
            value = local_support(image, peer_images)
            doc["local"] = "incomparable" if value is INCOMPARABLE else value
            if value is not INCOMPARABLE:
                doc["locally_consistent"] = bool(value <= consistency_tolerance)
        _emit(doc, out)
    except FileNotFoundError as exc:
        _fail(EXIT_INPUT, str(exc))
    except SemilexError as exc:
        _fail(EXIT_INPUT, str(exc))
    sys.exit(EXIT_OK)


@main.command("verify-object")
@click.option("--detections", "detections_path", required=True,
              help="Detection-proposal JSON file.")
@click.option("--ranges", "ranges_path", default=None,
              help="JSON file of learned ranges: {\"frame-wheel\": [min, max], ...}.")
@click.option("--target", default="bicycle", show_default=True,
              type=click.Choice(["unicycle", "bicycle", "tricycle"]),
              help="Class whose required parts drive the threshold decay.")
@click.option("--threshold", default=DEFAULT_THRESHOLD, show_default=True,
              help="Initial objectness threshold.")
@click.option("--decay", default=DEFAULT_DECAY, show_default=True)
@click.option("--floor", default=DEFAULT_FLOOR, show_default=True)
@click.option("--epsilon", "consistency_tolerance", default=10.0, show_default=True)
@click.option("--out", default=None)
def cmd_verify_object(detections_path, ranges_path, target, threshold, decay, floor,
                      consistency_tolerance, out):
    """Run the cycle-identification rules on a detection file; exit 1 on class none."""
    try:
        dfile = load_detections(_resolve(detections_path))
        rules = None
        if ranges_path:
            raw = json.loads(Path(_resolve(ranges_path)).read_text())
            ranges = {tuple(key.split("-")): tuple(value) for key, value in raw.items()}
            rules = ObjectRuleSet(ranges=ranges)
        verdict = verify_detections(
            dfile, rules,
            target_class=target,
            initial_threshold=threshold,
            decay=decay,
            floor=floor,
            consistency_tolerance=consistency_tolerance,
        )
        doc = verdict.to_json()
        doc["params"] = {"target": target, "threshold": threshold, "decay": decay,
                         "floor": floor, "epsilon": consistency_tolerance}
        _emit(doc, out)
    except FileNotFoundError as exc:
        _fail(EXIT_INPUT, str(exc))
    except SemilexError as exc:
        _fail(EXIT_INPUT, str(exc))
    sys.exit(EXIT_REJECTED if verdict.object_class == "none" else EXIT_OK)


if __name__ == "__main__":
    main()
