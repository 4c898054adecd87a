import logging

import numpy as np
import pytest

from metaformer.errors import ContractError, ShapeError, ValidationError
from metaformer.meta import MetaRecord, MetaSchema
from metaformer.model import MetaFormer, preset
from metaformer.viz import (grid_coordinates, read_pgm, report_rows, spatial_prediction_grid,
                            token_similarity_report, write_csv_matrix, write_pgm)

TEXT = ("text", {"vocab": 20, "max_len": 6, "word_dim": 8})


@pytest.fixture(scope="module")
def geo_model():
    return MetaFormer(preset("tiny", meta=MetaSchema.from_kinds("geo", "datetime"), num_classes=3), seed=0)


@pytest.fixture(scope="module")
def text_model():
    return MetaFormer(preset("tiny", meta=MetaSchema.from_kinds("geo", TEXT), num_classes=3), seed=0)


def test_grid_coordinates():
    lats, lons = grid_coordinates(2, 4)
    assert lats.tolist() == [45.0, -45.0]
    assert lons.tolist() == [-135.0, -45.0, 45.0, 135.0]
    with pytest.raises(ValidationError):
        grid_coordinates(0, 3)


@pytest.mark.parametrize("mode", ["mean", "blank", "zero-vision"])
def test_spatial_grid_shape_and_range(geo_model, mode, rng):
    image = rng.standard_normal((3, 64, 64)) if mode == "mean" else None
    g = spatial_prediction_grid(geo_model, 1, 5, 7, month=4, hour=10, image=image, image_mode=mode, chunk=8)
    assert g.shape == (5, 7)
    assert np.all(np.isfinite(g)) and np.all((g >= 0) & (g <= 1))
    assert np.ptp(g) > 0  # location actually changes the prediction


def test_spatial_grid_chunking_invariant(geo_model):
    a = spatial_prediction_grid(geo_model, 0, 4, 6, image_mode="blank", chunk=5)
    b = spatial_prediction_grid(geo_model, 0, 4, 6, image_mode="blank", chunk=100)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_spatial_grid_errors(geo_model):
    no_geo = MetaFormer(preset("tiny", meta=MetaSchema.from_kinds("datetime"), num_classes=3), seed=0)
    with pytest.raises(ContractError):
        spatial_prediction_grid(no_geo, 0, 2, 2)
    with pytest.raises(ValidationError):
        spatial_prediction_grid(geo_model, 3, 2, 2)
    with pytest.raises(ShapeError):
        spatial_prediction_grid(geo_model, 0, 2, 2, image=np.zeros((3, 32, 32)))


def test_full_vision_ranking_sorted(text_model, rng):
    image = rng.standard_normal((3, 64, 64))
    rec = MetaRecord(geo=(10, 10), text=[[1, 2, 3, 4]])
    m = text_model.config.grid(4)
    rep = token_similarity_report(text_model, image, rec, k_vision=m * m, k_word=3)
    assert sorted(rep.vision_indices) == list(range(m * m))
    assert all(a >= b for a, b in zip(rep.vision_scores, rep.vision_scores[1:]))
    assert len(rep.word_indices) == 3 and all(0 <= i < 4 for i in rep.word_indices)
    assert rep.word_attention.shape == (4, m, m)
    np.testing.assert_allclose(rep.word_attention.reshape(4, -1).sum(-1) <= 1 + 1e-9, True)
    assert all(-1 - 1e-12 <= s <= 1 + 1e-12 for s in rep.vision_scores + rep.word_scores)


def test_rankings_stable_across_forwards(text_model, rng):
    image = rng.standard_normal((3, 64, 64))
    rec = MetaRecord(geo=(-20, 50), text=[[5, 6, 7, 8, 9]])
    a = token_similarity_report(text_model, image, rec, stage=3)
    b = token_similarity_report(text_model, image, rec, stage=3)
    assert a.vision_indices == b.vision_indices and a.word_indices == b.word_indices
    assert a.vision_scores == b.vision_scores
    assert len(a.vision_indices) == 5 and a.grid == text_model.config.grid(3)


def test_k_clamped_with_warning(text_model, rng, caplog):
    with caplog.at_level(logging.WARNING):
        rep = token_similarity_report(text_model, rng.standard_normal((3, 64, 64)),
                                      MetaRecord(text=[[1, 2]]), k_vision=500, k_word=9)
    assert len(rep.vision_indices) == text_model.config.grid(4) ** 2
    assert len(rep.word_indices) == 2
    assert "clamping" in caplog.text


def test_similarity_needs_class_token(rng):
    gap = MetaFormer(preset("tiny", class_token_mode="gap", num_classes=3), seed=0)
    with pytest.raises(ContractError):
        token_similarity_report(gap, rng.standard_normal((3, 64, 64)))


def test_report_rows(text_model, rng):
    rep = token_similarity_report(text_model, rng.standard_normal((3, 64, 64)), MetaRecord(text=[[1, 2, 3]]), stage=3)
    rows = report_rows(rep)
    assert [r["kind"] for r in rows] == ["vision"] * 5 + ["word"] * 3


def test_pgm_and_csv_writers(tmp_path):
    m = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "m.pgm", m, 0.0, 1.0)
    assert read_pgm(tmp_path / "m.pgm").tolist() == [[0, 128], [255, 64]]
    write_pgm(tmp_path / "flat.pgm", np.ones((2, 3)))
    assert read_pgm(tmp_path / "flat.pgm").shape == (2, 3)
    write_csv_matrix(tmp_path / "m.csv", m)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "m.csv", delimiter=","), m)
    with pytest.raises(ShapeError):
        write_pgm(tmp_path / "bad.pgm", np.zeros(3))
