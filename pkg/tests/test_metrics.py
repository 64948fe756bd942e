from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from inpaintloc.data import (
    DimensionMismatchError,
    MaskGrid,
    PredictionMap,
    Sample,
    ValidationError,
    load_manifest,
    save_mask,
    write_manifest,
)
from inpaintloc.metrics import (
    CrossGenMatrix,
    aggregate_id_ood,
    average_precision,
    build_cross_matrix,
    dataset_iou,
    iou,
    read_matrix_csv,
    write_matrix_csv,
)
from oracles import ap_bruteforce, id_ood_twopass, iou_bruteforce, mean_foldleft


def _manifest(tmp_path, masks, name="m", generator="g"):
    samples = []
    for i, m in enumerate(masks):
        img = tmp_path / name / f"img{i}.png"
        img.parent.mkdir(parents=True, exist_ok=True)
        from inpaintloc.data import save_rgb

        save_rgb(np.zeros(m.shape + (3,), np.uint8), img)
        mp = save_mask(MaskGrid(m.astype(np.uint8)), tmp_path / name / f"mask{i}.png")
        samples.append(Sample(img, "fake", generator, "test", mp))
    return load_manifest(write_manifest(samples, tmp_path / name / "manifest.jsonl"))


# --- iou ---------------------------------------------------------------------

def test_iou_identity_and_disjoint():
    gt = np.zeros((4, 4)); gt[1:3, 1:3] = 1
    assert iou(gt.astype(float), gt) == 1.0
    assert iou(np.zeros((4, 4)), gt) == 0.0
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_iou_three_sevenths():
    pred = np.zeros((4, 4)); gt = np.zeros((4, 4))
    pred[0, 0:3] = pred[1, 0:3] = 0.9        # 6 positives
    gt[1, 0:3] = 1; gt[3, 3] = 1              # 4 positives, 3 shared
    assert iou(pred, gt) == pytest.approx(3 / 7)


def test_iou_threshold_is_strict():
    gt = np.ones((2, 2))
    assert iou(np.full((2, 2), 0.5), gt) == 0.0
    assert iou(np.full((2, 2), 0.5000001), gt) == 1.0


def test_iou_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        iou(np.zeros((4, 4)), np.zeros((4, 5)))


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(0, 1)), arrays(np.uint8, (5, 6), elements=st.integers(0, 1)))
def test_iou_matches_bruteforce(pred, gt):
    assert iou(pred, gt) == pytest.approx(iou_bruteforce(pred, gt), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(0, 1)), arrays(np.uint8, (4, 7), elements=st.integers(0, 1)),
       st.randoms())
def test_iou_invariances(pred, gt, rnd):
    binary = (pred > 0.5).astype(np.uint8)
    # symmetric in the binarised prediction and the ground truth
    assert iou(binary.astype(float), gt) == pytest.approx(iou(gt.astype(float), binary))
    # monotone rescaling that keeps the 0.5 partition
    squashed = np.where(pred > 0.5, 0.5 + (pred - 0.5) ** 2 + 1e-9, pred ** 3 * 0.5)
    assert iou(squashed, gt) == iou(pred, gt)
    # the same pixel permutation applied to both sides
    perm = list(range(pred.size)); rnd.shuffle(perm)
    assert iou(pred.ravel()[perm], gt.ravel()[perm]) == pytest.approx(iou(pred, gt))


# --- dataset_iou ---------------------------------------------------------------

def test_dataset_iou_mean_of_two(tmp_path):
    gt = np.zeros((5, 2), np.uint8); gt[:, 0] = 1
    m = _manifest(tmp_path, [gt, gt])
    p1 = np.zeros((5, 2), np.float32); p1[:2, 0] = 1       # 2 / 5
    p2 = np.zeros((5, 2), np.float32); p2[:3, 0] = 1       # 3 / 5
    preds = {m.samples[0].image_path: PredictionMap(p1), m.samples[1].image_path: PredictionMap(p2)}
    assert dataset_iou(preds, m) == pytest.approx(50.0)


def test_dataset_iou_single_image_and_missing(tmp_path):
    gt = np.zeros((4, 4), np.uint8); gt[:2] = 1
    m = _manifest(tmp_path, [gt])
    pred = np.zeros((4, 4), np.float32); pred[:1] = 1
    assert dataset_iou({m.samples[0].image_path: PredictionMap(pred)}, m) == pytest.approx(50.0)
    with pytest.raises(ValidationError):
        dataset_iou({}, m)


def test_dataset_iou_ten_images_foldleft(tmp_path, rng):
    masks = [(rng.random((8, 8)) < rng.uniform(0.1, 0.6)).astype(np.uint8) for _ in range(10)]
    m = _manifest(tmp_path, masks)
    preds = {s.image_path: PredictionMap(rng.random((8, 8)).astype(np.float32)) for s in m.samples}
    by_path = dict(zip([s.image_path for s in m.samples], masks))
    # manifest order is path order, so pair masks through the mask files
    from inpaintloc.data import sample_mask

    oracle = mean_foldleft(iou_bruteforce(preds[s.image_path].values, sample_mask(s, (8, 8)).values)
                           for s in m.samples)
    assert dataset_iou(preds, m) == pytest.approx(100 * oracle)
    assert len(by_path) == 10


def test_all_ones_predictor_closed_form(tmp_path, rng):
    masks = [(rng.random((6, 6)) < 0.3).astype(np.uint8) for _ in range(5)]
    masks = [m if m.any() else np.eye(6, dtype=np.uint8) for m in masks]
    m = _manifest(tmp_path, masks)
    preds = {s.image_path: PredictionMap(np.ones((6, 6), np.float32)) for s in m.samples}
    expected = 100 * np.mean([mk.mean() for mk in masks])
    assert dataset_iou(preds, m) == pytest.approx(expected)


def test_gt_resized_to_prediction(tmp_path):
    gt = np.zeros((8, 8), np.uint8); gt[:4] = 1
    m = _manifest(tmp_path, [gt])
    pred = np.zeros((4, 4), np.float32); pred[:2] = 1
    assert dataset_iou({m.samples[0].image_path: PredictionMap(pred)}, m) == 100.0


# --- aggregates ----------------------------------------------------------------

def test_aggregate_examples():
    s = aggregate_id_ood(CrossGenMatrix(("a", "b", "c", "d"), 100 * np.eye(4)))
    assert (s.id_iou, s.ood_iou) == (100.0, 0.0)
    diag = [70.1, 65.3, 68.0, 68.2]
    off = np.full((4, 4), 32.6)
    off[0, 1], off[1, 0] = 30.0, 35.2
    np.fill_diagonal(off, diag)
    s = aggregate_id_ood(off)
    assert s.id_iou == pytest.approx(67.9) and s.ood_iou == pytest.approx(32.6)


def test_aggregate_errors():
    with pytest.raises(ValidationError):
        aggregate_id_ood(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        aggregate_id_ood(np.zeros((1, 1)))
    with pytest.raises(ValidationError):
        CrossGenMatrix(("a", "b"), np.full((2, 2), 101.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6).flatmap(lambda g: arrays(np.float64, (g, g), elements=st.floats(0, 100))), st.randoms())
def test_aggregate_oracle_and_permutation(m, rnd):
    s = aggregate_id_ood(m)
    i, o = id_ood_twopass(m)
    assert s.id_iou == pytest.approx(i) and s.ood_iou == pytest.approx(o)
    perm = list(range(len(m))); rnd.shuffle(perm)
    p = aggregate_id_ood(m[np.ix_(perm, perm)])
    assert p.id_iou == pytest.approx(s.id_iou) and p.ood_iou == pytest.approx(s.ood_iou)


# --- average precision ---------------------------------------------------------

def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1, 0.2], ["fake", "fake", "real", "real"]) == 1.0
    assert average_precision([0.9, 0.1], ["real", "fake"]) == 0.5
    # ranks: pos, neg, pos -> 1*0.5 + (2/3)*0.5
    assert average_precision([3, 2, 1], [1, 0, 1]) == pytest.approx(0.5 + 1 / 3)
    # all tied: precision is the base rate
    assert average_precision([1, 1, 1, 1], [1, 0, 0, 0]) == 0.25


def test_ap_degenerate():
    with pytest.raises(ValidationError, match="degenerate"):
        average_precision([0.1, 0.2], ["fake", "fake"])
    with pytest.raises(ValidationError):
        average_precision([0.1], ["maybe"])


label_lists = st.lists(st.booleans(), min_size=2, max_size=12).filter(lambda y: 0 < sum(y) < len(y))


@settings(max_examples=200, deadline=None)
@given(label_lists, st.data())
def test_ap_matches_bruteforce(labels, data):
    scores = data.draw(st.lists(st.integers(0, 5).map(lambda v: v / 5), min_size=len(labels), max_size=len(labels)))
    ap = average_precision(scores, labels)
    assert ap == pytest.approx(ap_bruteforce(scores, labels), abs=1e-12)
    assert 0.0 <= ap <= 1.0


@settings(max_examples=100, deadline=None)
@given(label_lists, st.data(), st.randoms())
def test_ap_invariances(labels, data, rnd):
    ints = data.draw(st.lists(st.integers(-50, 50), min_size=len(labels), max_size=len(labels)))
    scores = np.array(ints) / 10.0
    ap = average_precision(scores, labels)
    assert average_precision(np.exp(scores) * 3 + 1, labels) == pytest.approx(ap, abs=1e-12)
    perm = list(range(len(labels))); rnd.shuffle(perm)
    assert average_precision(scores[perm], [labels[i] for i in perm]) == pytest.approx(ap, abs=1e-12)


# --- cross matrix --------------------------------------------------------------

def _const(value):
    return lambda manifest: {s.image_path: PredictionMap(np.full((4, 4), value, np.float32)) for s in manifest.samples}


def test_cross_matrix_single(tmp_path):
    gt = np.zeros((4, 4), np.uint8); gt[:, :1] = 1
    m = _manifest(tmp_path, [gt], "a", "a")
    mat = build_cross_matrix({"a": _const(1.0)}, {"a": m})
    assert mat.values.shape == (1, 1) and mat.values[0, 0] == pytest.approx(25.0)


def test_cross_matrix_two_constant_predictors(tmp_path):
    ga = np.zeros((4, 4), np.uint8); ga[:2] = 1          # half the image
    gb = np.zeros((4, 4), np.uint8); gb[0, 0] = 1        # one pixel
    ma, mb = _manifest(tmp_path, [ga], "a", "a"), _manifest(tmp_path, [gb], "b", "b")
    mat = build_cross_matrix({"a": _const(1.0), "b": _const(0.0)}, {"a": ma, "b": mb}, workers=2)
    np.testing.assert_allclose(mat.values, [[50.0, 100 / 16], [0.0, 0.0]])
    assert mat.generators == ("a", "b")


def test_cross_matrix_missing(tmp_path):
    gt = np.ones((4, 4), np.uint8)
    m = _manifest(tmp_path, [gt], "a", "a")
    with pytest.raises(ValidationError):
        build_cross_matrix({"a": _const(1.0), "b": _const(1.0)}, {"a": m})
    with pytest.raises(ValidationError):
        build_cross_matrix({"a": tmp_path / "nope.zip"}, {"a": m})


def test_matrix_csv_round_trip(tmp_path):
    mat = CrossGenMatrix(("sd", "lama"), np.array([[67.9, 12.5], [30.25, 80.0]]))
    back = read_matrix_csv(write_matrix_csv(mat, tmp_path / "m.csv"))
    assert back.generators == mat.generators
    np.testing.assert_allclose(back.values, mat.values)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "train\\test,sd,lama"


def test_matrix_csv_malformed(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("train\\test,a,b\na,1,x\nb,1,2\n")
    with pytest.raises(ValidationError):
        read_matrix_csv(p)
    p.write_text("train\\test,a,b\na,1,2\n")
    with pytest.raises(ValidationError):
        read_matrix_csv(p)
