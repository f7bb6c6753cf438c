"""File-boundary contracts: IDX pairs, board segmentation, detection JSON."""

import gzip
import json
import os
import struct
from pathlib import Path

import numpy as np
import pytest

import synthdigits as sd
from semilex.dataset_io import (
    GridSpec,
    LabeledImageSet,
    load_board_dir,
    load_detections,
    load_idx,
    save_idx,
    save_image,
    segment_board,
)
from semilex.errors import (
    ConsistencyError,
    FormatError,
    GeometryError,
    InputError,
    SchemaError,
)


def write_idx_pair(tmp_path, images_u8, labels_u8):
    """Hand-written IDX bytes, independent of save_idx."""
    n, rows, cols = images_u8.shape
    img_path = tmp_path / "imgs.idx"
    lbl_path = tmp_path / "lbls.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + images_u8.tobytes())
    lbl_path.write_bytes(struct.pack(">II", 0x00000801, n) + bytes(labels_u8))
    return img_path, lbl_path


def test_hand_built_two_image_fixture(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    img_path, lbl_path = write_idx_pair(tmp_path, images, [3, 7])
    data = load_idx(img_path, lbl_path)
    assert len(data) == 2
    assert data.labels.tolist() == [3, 7]
    np.testing.assert_array_equal(np.round(data.images * 255).astype(np.uint8), images)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0


def test_idx_roundtrip_is_bitwise(tmp_path):
    images, labels = sd.make_dataset(3, seed=1)
    data = LabeledImageSet(sd.quantize(images), labels)
    save_idx(data, tmp_path / "i.idx", tmp_path / "l.idx")
    back = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    np.testing.assert_array_equal(back.images, data.images)
    np.testing.assert_array_equal(back.labels, data.labels)


def test_idx_gzip_transparent(tmp_path):
    images = np.zeros((1, 28, 28), dtype=np.uint8)
    raw_img = struct.pack(">IIII", 0x00000803, 1, 28, 28) + images.tobytes()
    raw_lbl = struct.pack(">II", 0x00000801, 1) + bytes([5])
    (tmp_path / "i.idx.gz").write_bytes(gzip.compress(raw_img))
    (tmp_path / "l.idx.gz").write_bytes(gzip.compress(raw_lbl))
    data = load_idx(tmp_path / "i.idx.gz", tmp_path / "l.idx.gz")
    assert data.labels.tolist() == [5]


def test_wrong_magic_is_a_format_error(tmp_path):
    img_path, lbl_path = write_idx_pair(
        tmp_path, np.zeros((1, 28, 28), dtype=np.uint8), [1])
    blob = img_path.read_bytes()
    img_path.write_bytes(struct.pack(">I", 0x00000801) + blob[4:])
    with pytest.raises(FormatError, match="0x00000803"):
        load_idx(img_path, lbl_path)


def test_truncated_file_names_the_byte_offset(tmp_path):
    img_path, lbl_path = write_idx_pair(
        tmp_path, np.zeros((2, 28, 28), dtype=np.uint8), [1, 2])
    blob = img_path.read_bytes()
    img_path.write_bytes(blob[:500])
    with pytest.raises(FormatError, match="offset 500"):
        load_idx(img_path, lbl_path)


def test_count_mismatch_is_a_consistency_error(tmp_path):
    img_path, _ = write_idx_pair(tmp_path, np.zeros((2, 28, 28), dtype=np.uint8), [1, 2])
    lbl3 = tmp_path / "three.idx"
    lbl3.write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([1, 2, 3]))
    with pytest.raises(ConsistencyError):
        load_idx(img_path, lbl3)


def test_labeled_set_validation():
    with pytest.raises(ConsistencyError):
        LabeledImageSet(np.zeros((2, 28, 28)), np.zeros(3, dtype=int))
    with pytest.raises(InputError):
        LabeledImageSet(np.full((1, 28, 28), 2.0), np.zeros(1, dtype=int))
    with pytest.raises(InputError):
        LabeledImageSet(np.zeros((1, 28, 28)), np.array([11]))


# ---------------------------------------------------------------------------
# board segmentation
# ---------------------------------------------------------------------------


def test_tiled_board_segments_bitwise(solved_grid, writer):
    cells = sd.board_cells(solved_grid, writer, seed=4)
    board = segment_board(sd.tile_board(cells), GridSpec())
    np.testing.assert_array_equal(board.cells, cells)
    assert not board.empty.any()


def test_blank_white_image_gives_81_empty_cells():
    board = segment_board(np.ones((252, 252)), GridSpec())
    assert board.empty.all()
    np.testing.assert_allclose(board.cells, 0.0)  # polarity normalised


def test_board_with_gridlines_and_declared_margins(solved_grid, writer):
    # 279x279: a 3-pixel line before every cell, none after the last.
    cells = sd.board_cells(solved_grid, writer, seed=5)
    img = np.zeros((279, 279))
    for r in range(9):
        for c in range(9):
            y, x = 3 + r * 31, 3 + c * 31
            img[y:y + 28, x:x + 28] = cells[r, c]
    board = segment_board(img, GridSpec(cell_size=28, origin=3, pitch=31))
    assert img.shape == (279, 279)
    np.testing.assert_array_equal(board.cells, cells)


def test_non_divisible_dimensions_raise_geometry_error():
    with pytest.raises(GeometryError, match="grid spans"):
        segment_board(np.zeros((250, 250)), GridSpec())


def test_margin_gridline_layout(solved_grid, writer):
    # 2*3 + 9*28 + 8*2 = 274 per side.
    spec = GridSpec.with_margins(cell_size=28, margin=3, gridline=2)
    assert spec.span() == 274
    cells = sd.board_cells(solved_grid, writer, seed=8)
    img = np.zeros((274, 274))
    for r in range(9):
        for c in range(9):
            y, x = 3 + r * 30, 3 + c * 30
            img[y:y + 28, x:x + 28] = cells[r, c]
    board = segment_board(img, spec)
    np.testing.assert_array_equal(board.cells, cells)


def test_board_directory_loader(tmp_path, solved_grid, writer):
    cells = sd.board_cells(solved_grid, writer, seed=6)
    for r in range(9):
        for c in range(9):
            save_image(tmp_path / f"r{r + 1}c{c + 1}.png", cells[r, c])
    board = load_board_dir(tmp_path)
    np.testing.assert_array_equal(board.cells, cells)

    os.remove(tmp_path / "r5c5.png")
    with pytest.raises(InputError, match="r5c5"):
        load_board_dir(tmp_path)


def test_segmentation_resamples_larger_cells(solved_grid, writer):
    cells = sd.board_cells(solved_grid, writer, seed=7)
    big = np.kron(sd.tile_board(cells), np.ones((2, 2)))  # 504x504, 56px cells
    board = segment_board(big, GridSpec(cell_size=56))
    assert board.cells.shape == (9, 9, 28, 28)
    assert not board.empty.any()


# ---------------------------------------------------------------------------
# detection files
# ---------------------------------------------------------------------------


def _detections_doc(proposals, w=400, h=300):
    return {"image": {"w": w, "h": h}, "proposals": proposals}


def _proposal(name, score, cx=100.0, cy=100.0, bw=50.0, bh=50.0):
    return {"name": name, "score": score,
            "box": {"cx": cx, "cy": cy, "bw": bw, "bh": bh}}


def test_detections_happy_path(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(_detections_doc([
        _proposal("wheel", 0.9, 100, 200),
        _proposal("wheel", 0.8, 300, 200),
        _proposal("frame", 0.7, 200, 150),
    ])))
    dfile = load_detections(path)
    assert dfile.width == 400 and dfile.height == 300
    assert [d.name for d in dfile.proposals] == ["wheel", "wheel", "frame"]


def test_detections_sorted_by_descending_score(tmp_path):
    scores = [0.41, 0.93, 0.2, 0.77, 0.5]
    path = tmp_path / "d.json"
    path.write_text(json.dumps(_detections_doc(
        [_proposal("wheel", s, 50 + 60 * i, 100) for i, s in enumerate(scores)])))
    dfile = load_detections(path)
    assert [d.score for d in dfile.proposals] == sorted(scores, reverse=True)


def test_unknown_component_name_is_a_schema_error(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(_detections_doc([_proposal("engine", 0.9)])))
    with pytest.raises(SchemaError, match="engine"):
        load_detections(path)


def test_score_outside_unit_interval_is_a_schema_error(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(_detections_doc([_proposal("wheel", 1.2)])))
    with pytest.raises(SchemaError, match="score"):
        load_detections(path)


def test_box_outside_image_is_a_schema_error(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(_detections_doc([_proposal("wheel", 0.5, cx=390.0, bw=50.0)])))
    with pytest.raises(SchemaError, match="bounds"):
        load_detections(path)


def test_crop_paths_resolve_relative_to_the_json(tmp_path):
    doc = _detections_doc([dict(_proposal("wheel", 0.9), crop="crops/w.png")])
    path = tmp_path / "d.json"
    path.write_text(json.dumps(doc))
    dfile = load_detections(path)
    assert dfile.proposals[0].crop == str((tmp_path / "crops" / "w.png").resolve())


MNIST_HINT = "set SEMILEX_DATA_DIR to a directory holding the standard IDX files"


def _mnist_paths():
    base = os.environ.get("SEMILEX_DATA_DIR")
    if not base:
        return None
    pairs = {}
    for key, stem in (("train_images", "train-images-idx3-ubyte"),
                      ("train_labels", "train-labels-idx1-ubyte"),
                      ("test_images", "t10k-images-idx3-ubyte"),
                      ("test_labels", "t10k-labels-idx1-ubyte")):
        for suffix in ("", ".gz"):
            cand = Path(base) / (stem + suffix)
            if cand.exists():
                pairs[key] = cand
                break
        else:
            return None
    return pairs


def test_standard_train_pair_has_60000_items():
    paths = _mnist_paths()
    if paths is None:
        pytest.skip(f"MNIST IDX files not available; {MNIST_HINT}")
    data = load_idx(paths["train_images"], paths["train_labels"])
    assert len(data) == 60_000
