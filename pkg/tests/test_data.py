import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from inpaintloc import data
from inpaintloc.data import (
    MaskGrid,
    MalformedRecordError,
    ManifestNotFoundError,
    MissingFileError,
    MissingMaskError,
    NonBinaryMaskError,
    NonZeroRealMaskError,
    PredictionMap,
    load_manifest,
    load_mask,
    nearest_resize,
    save_mask,
)


def _png(path, arr, mode="L"):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)
    return path


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


@pytest.fixture
def files(tmp_path):
    for name in ("b", "a"):
        _png(tmp_path / f"{name}.png", np.zeros((8, 8, 3)), "RGB")
        _png(tmp_path / f"{name}_m.png", np.full((8, 8), 255))
    return tmp_path


def _rec(name, **kw):
    r = {"image_path": f"{name}.png", "mask_path": f"{name}_m.png", "label": "fake",
         "generator": "ldm", "split": "train"}
    r.update(kw)
    return r


def test_manifest_two_fakes_sorted(files):
    m = load_manifest(_write(files / "m.jsonl", [_rec("b"), _rec("a")]))
    assert len(m) == 2
    assert [s.image_path.name for s in m.samples] == ["a.png", "b.png"]
    assert m.root == files.resolve()


def test_manifest_load_is_deterministic(files):
    p = _write(files / "m.jsonl", [_rec("b"), _rec("a")])
    assert load_manifest(p).samples == load_manifest(p).samples


def test_fake_without_mask_rejected(files):
    rec = _rec("a")
    del rec["mask_path"]
    with pytest.raises(MissingMaskError, match="missing mask"):
        load_manifest(_write(files / "m.jsonl", [rec]))


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestNotFoundError):
        load_manifest(tmp_path / "nope.jsonl")


@pytest.mark.parametrize("line", [
    "not json",
    "[1, 2]",
    json.dumps({"image_path": "a.png", "label": "fake", "generator": "x"}),
    json.dumps({**_rec("a"), "extra": 1}),
    json.dumps(_rec("a", label="maybe")),
    json.dumps(_rec("a", split="dev")),
    json.dumps(_rec("a", generator="")),
])
def test_malformed_records(files, line):
    (files / "m.jsonl").write_text(line + "\n")
    with pytest.raises(MalformedRecordError):
        load_manifest(files / "m.jsonl")


def test_missing_image_file(files):
    with pytest.raises(MissingFileError):
        load_manifest(_write(files / "m.jsonl", [_rec("zzz", mask_path="a_m.png")]))


def test_real_sample_with_nonzero_mask(files):
    with pytest.raises(NonZeroRealMaskError):
        load_manifest(_write(files / "m.jsonl", [_rec("a", label="real")]))


def test_real_sample_without_mask_gets_zero_grid(files):
    rec = _rec("a", label="real")
    del rec["mask_path"]
    m = load_manifest(_write(files / "m.jsonl", [rec]))
    grid = data.sample_mask(m.samples[0])
    assert grid.shape == (8, 8) and not grid.values.any()


def test_non_binary_mask_rejected_unless_binarized(tmp_path):
    _png(tmp_path / "img.png", np.zeros((1, 3, 3)), "RGB")
    _png(tmp_path / "mask.png", [[0, 127, 255]])
    _write(tmp_path / "m.jsonl", [{"image_path": "img.png", "mask_path": "mask.png", "label": "fake",
                                   "generator": "p2", "split": "test"}])
    with pytest.raises(NonBinaryMaskError, match="non-binary mask"):
        load_manifest(tmp_path / "m.jsonl")
    assert len(load_manifest(tmp_path / "m.jsonl", binarize=True)) == 1
    # threshold 128: 127 stays authentic
    assert load_mask(tmp_path / "mask.png", binarize=True).values.tolist() == [[0, 0, 1]]


def test_load_mask_identity_and_constant(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 2, (256, 256)) * 255
    _png(tmp_path / "m.png", arr)
    assert np.array_equal(load_mask(tmp_path / "m.png", (256, 256)).values, arr // 255)
    _png(tmp_path / "ones.png", np.full((512, 512), 255))
    big = load_mask(tmp_path / "ones.png", (256, 256))
    assert big.shape == (256, 256) and big.values.all()


def test_checkerboard_nearest_matches_index_oracle(tmp_path):
    board = (np.indices((4, 4)).sum(0) % 2) * 255
    board[0, 1] = 0  # break symmetry so a wrong index choice would show
    _png(tmp_path / "c.png", board)
    got = load_mask(tmp_path / "c.png", (2, 2)).values
    expected = np.array([[board[i * 4 // 2, j * 4 // 2] // 255 for j in range(2)] for i in range(2)])
    assert np.array_equal(got, expected)


def test_bilinear_mask_resize_refused(tmp_path):
    _png(tmp_path / "m.png", np.zeros((4, 4)))
    with pytest.raises(data.ValidationError):
        load_mask(tmp_path / "m.png", (2, 2), resize_rule="bilinear")


def test_unreadable_and_empty(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(data.UnreadableImageError):
        load_mask(tmp_path / "bad.png")
    with pytest.raises(data.EmptyImageError):
        MaskGrid(np.zeros((0, 3)))


def test_prediction_map_bounds():
    with pytest.raises(data.ValidationError):
        PredictionMap(np.array([[0.5, 1.5]]))
    with pytest.raises(data.ValidationError):
        PredictionMap(np.array([[np.nan]]))


def test_prediction_png_quantization(tmp_path):
    p = PredictionMap(np.array([[0.0, 0.5, 1.0, 0.2]]))
    raw = np.asarray(Image.open(data.save_prediction(p, tmp_path / "p.png")))
    assert raw.tolist() == [[0, 128, 255, 51]]


masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


@settings(max_examples=40, deadline=None)
@given(masks)
def test_mask_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "m.png"
    m = MaskGrid(values)
    save_mask(m, path)
    assert load_mask(path) == m
    # idempotent at the same size
    save_mask(load_mask(path, m.shape), path)
    assert load_mask(path, m.shape) == m


@settings(max_examples=40, deadline=None)
@given(masks, st.integers(1, 20), st.integers(1, 20))
def test_nearest_resize_stays_binary(values, h, w):
    out = nearest_resize(values, (h, w))
    assert out.shape == (h, w)
    assert set(np.unique(out)) <= {0, 1}


def test_write_manifest_round_trip(files, tmp_path):
    m = load_manifest(_write(files / "m.jsonl", [_rec("b"), _rec("a")]))
    out = data.write_manifest(m.samples, files / "sub" / "copy.jsonl")
    again = load_manifest(out)
    assert again.samples == m.samples
