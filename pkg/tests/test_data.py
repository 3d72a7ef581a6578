from __future__ import annotations

import numpy as np
import pytest

from pmelm.data import (
    DEFAULT_DESIGN,
    DesignSpec,
    PanelDataset,
    build_design,
    load_panel,
    write_panel,
)
from pmelm.errors import (
    DuplicatePeriod,
    EmptyDesign,
    MissingColumn,
    NegativeCount,
    NonIntegerCount,
    SubjectWithMissingPeriods,
)
from pmelm.simulate import GenSpec, generate

HEADER = "id,trt,base,age,y1,y2,y3,y4\n"


def _write(tmp_path, text, name="p.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_identical_baselines_center_to_zero(tmp_path):
    path = _write(tmp_path, HEADER + "1,0,4,30,0,0,0,0\n2,1,4,25,1,1,1,1\n")
    panel = load_panel(path)
    assert panel.m == 2
    np.testing.assert_array_equal(panel.lbase, [0.0, 0.0])
    assert abs(panel.lage.mean()) < 1e-10


def test_missing_column(tmp_path):
    path = _write(tmp_path, "id,base,age,y1,y2,y3,y4\n1,4,30,0,0,0,0\n")
    with pytest.raises(MissingColumn, match="trt"):
        load_panel(path)


@pytest.mark.parametrize(
    "row, exc",
    [
        ("1,0,4,30,1.5,0,0,0", NonIntegerCount),
        ("1,0,4,30,-1,0,0,0", NegativeCount),
        ("1,0,4,30,1,,0,0", SubjectWithMissingPeriods),
        ("1,0,4,30,1,2,3", SubjectWithMissingPeriods),
    ],
)
def test_malformed_rows(tmp_path, row, exc):
    with pytest.raises(exc):
        load_panel(_write(tmp_path, HEADER + row + "\n"))


def test_duplicate_subject_rows(tmp_path):
    path = _write(tmp_path, HEADER + "1,0,4,30,0,0,0,0\n1,0,4,30,1,1,1,1\n")
    with pytest.raises(DuplicatePeriod):
        load_panel(path)


def test_generated_panel_round_trips(tmp_path):
    panel = generate(GenSpec(sigma1=0.5, seed=3))
    path = tmp_path / "gen.csv"
    write_panel(panel, path)
    back = load_panel(path)
    assert back == panel
    assert back.m == 59
    assert path.read_bytes().count(b"\r") == 0


def test_centering_holds_for_generated_panels():
    for seed in range(5):
        panel = generate(GenSpec(sigma1=1.0, seed=seed))
        assert abs(panel.lbase.mean()) < 1e-10
        assert abs(panel.lage.mean()) < 1e-10
        assert len(panel.lbase) == len(panel.lage) == panel.m


def test_zero_baseline_is_finite():
    panel = PanelDataset([1, 2], [0, 1], [0, 8], [20, 30], [[0] * 4, [1] * 4])
    assert np.all(np.isfinite(panel.lbase))


def test_panel_is_immutable(clean_panel):
    with pytest.raises(ValueError):
        clean_panel.y[0, 0] = 5


def test_design_spec_validation():
    with pytest.raises(EmptyDesign):
        DesignSpec(())
    with pytest.raises(ValueError):
        DesignSpec(("trt", "intercept"))
    with pytest.raises(ValueError):
        DesignSpec(("intercept", "trt", "trt"))
    assert DesignSpec(("intercept", "lbase×trt")).terms == ("intercept", "lbase:trt")
    assert DEFAULT_DESIGN.p == 5


def test_intercept_only_design():
    panel = PanelDataset([1, 2, 3], [0, 1, 0], [4, 5, 6], [20, 30, 40], np.zeros((3, 4)))
    d = build_design(panel, DesignSpec(("intercept",)))
    assert d.X.shape == (12, 1)
    np.testing.assert_array_equal(d.X, 1.0)
    Z = d.Z.toarray()
    assert Z.shape == (12, 3)
    np.testing.assert_array_equal(Z.sum(axis=1), 1.0)
    np.testing.assert_array_equal(Z.T @ Z, np.diag([4, 4, 4]))


def test_trt_column_layout():
    panel = PanelDataset([1, 2], [0, 1], [4, 4], [20, 30], np.zeros((2, 4)))
    d = build_design(panel, DesignSpec(("intercept", "trt")))
    np.testing.assert_array_equal(d.X[:, 1], [0, 0, 0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(d.subject_index, [0, 0, 0, 0, 1, 1, 1, 1])


def test_default_design_interaction_column(clean_panel):
    d = build_design(clean_panel)
    assert d.X.shape == (236, 5)
    lbase, trt, inter = d.X[:, 1], d.X[:, 2], d.X[:, 3]
    np.testing.assert_array_equal(inter, lbase * trt)


def test_design_permutation_covariance(clean_panel, rng):
    perm = rng.permutation(clean_panel.m)
    a = build_design(clean_panel)
    b = build_design(clean_panel.subset(perm))
    # centering is permutation invariant, so row blocks just move
    np.testing.assert_allclose(b.Xb, a.Xb[perm], rtol=0, atol=1e-14)
    np.testing.assert_array_equal(b.Yb, a.Yb[perm])
