import numpy as np
import pytest

from punet.errors import DimensionError
from punet.evaluation import EvalMatrix
from punet.model import PUNet, UNetConfig
from punet.pipeline import AblationReport
from punet.report import (
    BOTH_COLOR,
    GT_COLOR,
    PPMFormatError,
    PRED_COLOR,
    contour,
    params_summary,
    plot_ablation,
    plot_matrix,
    prompt_ratio,
    read_ppm,
    render_overlay,
    write_ablation_report,
    write_ppm,
)


def test_ppm_bytes_and_roundtrip(tmp_path):
    img = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    path = write_ppm(tmp_path / "a.ppm", img)
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n3 2\n255\n") and len(raw) == 11 + 18
    np.testing.assert_array_equal(read_ppm(path), img)


def test_ppm_reader_accepts_comments(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03")
    np.testing.assert_array_equal(read_ppm(p), [[[1, 2, 3]]])


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n000", b"P6\n1 1\n65535\n" + b"\0" * 6, b"P6\n2 2\n255\n\0\0\0"])
def test_ppm_rejects(tmp_path, blob):
    p = tmp_path / "bad.ppm"
    p.write_bytes(blob)
    with pytest.raises(PPMFormatError):
        read_ppm(p)


def test_contour_of_square():
    m = np.zeros((6, 6), np.uint8)
    m[1:5, 1:5] = 1
    c = contour(m)
    assert c.sum() == 12 and not c[2:4, 2:4].any()


def test_overlay_identical_masks_coincide(tmp_path):
    rng = np.random.default_rng(0)
    mask = np.zeros((12, 10, 2), np.uint8)
    mask[2:9, 2:8, 0] = 1
    mask[4:7, 3:6, 1] = 1
    img = rng.random((12, 10, 3)).astype(np.float32)
    out = render_overlay(img, mask, mask, tmp_path / "o.ppm")
    assert out.shape == (12, 10, 3)
    drawn = np.all(out == BOTH_COLOR, axis=-1)
    assert not np.any(np.all(out == GT_COLOR, axis=-1)) and not np.any(np.all(out == PRED_COLOR, axis=-1))
    np.testing.assert_array_equal(drawn, contour(mask[..., 0]) | contour(mask[..., 1]))
    np.testing.assert_array_equal(read_ppm(tmp_path / "o.ppm"), out)


def test_overlay_distinct_colors():
    gt = np.zeros((8, 8), np.uint8)
    gt[1:7, 1:7] = 1
    pred = np.zeros((8, 8), np.uint8)
    pred[2:5, 2:5] = 1
    out = render_overlay(np.zeros((8, 8)), pred, gt)
    assert np.all(out[1, 1] == GT_COLOR) and np.all(out[2, 2] == PRED_COLOR)


def test_overlay_shape_mismatch():
    with pytest.raises(DimensionError):
        render_overlay(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5)))


def test_params_summary_default():
    model = PUNet(UNetConfig(), seed=0)
    text = params_summary(model)
    rows = {line.split(",")[0]: line.split(",") for line in text.splitlines()[1:]}
    n, total, ratio = prompt_ratio(model)
    assert rows["prompt"][1] == str(n) and ratio <= 0.01
    assert rows["reference"][3] == f"{0.10 / 29.94:.6f}"
    assert rows["full"][1] == rows["full"][2]
    # the summary leaves freeze flags untouched
    assert not any(p.frozen for _, p in model.params.items())


def test_figures_and_ablation_files(tmp_path):
    m = EvalMatrix(["a", "b"], ["x", "y"], np.array([[0.9, 0.5], [np.nan, 0.7]]), np.full((2, 2), 0.6))
    assert plot_matrix(m, tmp_path / "m.png").stat().st_size > 0
    rep = AblationReport("insertion locations", ["down", "up", "both"], [0, 1], "mv", {"down": [0.5, 0.6], "up": [0.6, 0.6], "both": [0.7, 0.8]}, ["both", "up", "down"])
    files = write_ablation_report(tmp_path, rep, {"t": m})
    assert [f.name for f in files] == ["ablation_locations.csv", "ablation_locations.md", "ablation_locations.png"]
    lines = files[0].read_text().splitlines()
    assert len(lines) == 4 and lines[0] == "variant,metric,mean,std,seed0,seed1"
    assert "holds" in files[1].read_text()
    assert plot_ablation(rep, tmp_path / "b.png").exists()


def test_ablation_flags_deviation():
    rep = AblationReport("x", ["down", "up", "both"], [0], "m", {"down": [0.9], "up": [0.5], "both": [0.7]}, ["both", "up", "down"])
    assert not rep.ordering_holds() and "DEVIATES" in rep.summary()
