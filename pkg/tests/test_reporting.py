import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from inpaintloc.data import PredictionMap, ValidationError
from inpaintloc.metrics import CrossGenMatrix, IdOodSummary
from inpaintloc.reporting import (
    decoder_table,
    markdown_table,
    matrix_table,
    overlay,
    plot_cross_matrix,
    plot_id_ood,
    plot_sweep,
    read_sweep_csv,
)


def test_heatmap_annotations(tmp_path):
    m = CrossGenMatrix(("a", "b"), np.array([[67.94, 12.0], [30.26, 99.96]]))
    labels = plot_cross_matrix(m, tmp_path / "h.png", "title")
    assert labels == ["67.9", "12.0", "30.3", "100.0"]
    assert [float(x) for x in labels] == pytest.approx(m.values.ravel(), abs=0.05 + 1e-9)
    assert Image.open(tmp_path / "h.png").size[0] > 0


def test_single_cell_heatmap(tmp_path):
    labels = plot_cross_matrix(CrossGenMatrix(("sd",), np.array([[42.0]])), tmp_path / "one.png")
    assert labels == ["42.0"]


def test_id_ood_and_sweep_plots(tmp_path):
    plot_id_ood({"vit": IdOodSummary(67.9, 32.6), "rn": IdOodSummary(50.0, 20.0)}, tmp_path / "b.png")
    (tmp_path / "s.csv").write_text("name,id_iou,ood_iou,backbone\nL7,40,20,vit\nL21,67.9,32.6,vit\nL3,50,10,rn50\n")
    rows = read_sweep_csv(tmp_path / "s.csv")
    plot_sweep(rows, tmp_path / "s.png")
    assert (tmp_path / "b.png").is_file() and (tmp_path / "s.png").is_file()
    (tmp_path / "bad.csv").write_text("name,id\nL1,3\n")
    with pytest.raises(ValidationError):
        read_sweep_csv(tmp_path / "bad.csv")


def test_tables():
    assert markdown_table(["a", "b"], [[1, 2]]) == "| a | b |\n|---|---|\n| 1 | 2 |\n"
    t = decoder_table([{"name": "linear", "id_iou": 40.0, "ood_iou": 20.0},
                       {"name": "conv-20", "id_iou": 67.9, "ood_iou": 32.6}])
    assert "| linear | 1,025 | 40.0 | 20.0 |" in t
    assert "| conv-20 | 52.2M | 67.9 | 32.6 |" in t
    mt = matrix_table(CrossGenMatrix(("a", "b"), np.array([[80.0, 20.0], [40.0, 60.0]])))
    assert "ID IoU 70.0 / OOD IoU 30.0" in mt


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (12, 10), elements=st.floats(0, 1, width=32)), st.floats(0.05, 0.95),
       st.integers(0, 2**31 - 1))
def test_overlay_marks_exactly_the_positive_pixels(pred, threshold, seed):
    img = np.random.default_rng(seed).integers(0, 255, (12, 10, 3), dtype=np.uint8)
    img[..., 1] = np.maximum(img[..., 1], 1)  # no pixel is already pure red
    out = overlay(img, PredictionMap(pred), threshold)
    changed = np.any(out != img, axis=-1)
    assert np.array_equal(changed, pred > threshold)


def test_overlay_size_mismatch():
    with pytest.raises(ValidationError):
        overlay(np.zeros((4, 4, 3), np.uint8), PredictionMap(np.zeros((5, 4), np.float32)))
