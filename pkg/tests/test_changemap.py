import json
import warnings

import numpy as np
import pytest

from changekit.changemap import (intensity_map, make_change_product,
                                 make_histogram, otsu_threshold, pick_threshold,
                                 rosin_threshold, save_product)
from changekit.errors import InputError, ParameterError, ShapeError
from changekit.model import build_model, save_teacher_checkpoint, TeacherBundle
from changekit.quantizer import GumbelQuantizer, QuantizerConfig
from changekit.selfcheck import otsu_bruteforce, random_histogram, rosin_bruteforce

from conftest import tiny_model_cfg


class TestIntensity:
    def test_identical_unit_features_score_zero(self):
        f = np.zeros((3, 4, 4))
        f[0] = 1.0
        assert np.allclose(intensity_map(f, f.copy()), 0.0)

    def test_orthogonal_features_score_one(self):
        f1 = np.zeros((2, 3, 3))
        f2 = np.zeros((2, 3, 3))
        f1[0] = 1.0
        f2[1] = 1.0
        assert np.allclose(intensity_map(f1, f2), 1.0)

    def test_antipodal_features_score_two(self):
        f = np.zeros((2, 3, 3))
        f[0] = 1.0
        assert np.allclose(intensity_map(f, -f), 2.0)

    def test_zero_vectors_score_one(self):
        f1 = np.zeros((2, 2, 2))
        f2 = np.ones((2, 2, 2))
        assert np.allclose(intensity_map(f1, f2), 1.0)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        f1 = rng.normal(size=(4, 5, 5))
        f2 = rng.normal(size=(4, 5, 5))
        assert np.allclose(intensity_map(f1, f2), intensity_map(f2, f1))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            intensity_map(np.zeros((2, 3, 3)), np.zeros((2, 4, 4)))


class TestRosin:
    def test_decaying_fixture_matches_oracle(self):
        counts = np.array([100, 50, 25, 12, 6, 3, 1, 0, 0, 1])
        edges = np.linspace(0.0, 1.0, 11)
        assert rosin_threshold(counts, edges) == rosin_bruteforce(counts, edges)

    def test_geometric_decay_matches_oracle(self):
        counts = (1000.0 * 2.0 ** -np.arange(16)).astype(np.int64)
        edges = np.linspace(0.0, 2.0, 17)
        assert rosin_threshold(counts, edges) == rosin_bruteforce(counts, edges)

    def test_degenerate_peak_at_tail(self):
        counts = np.array([1, 2, 4, 9])
        edges = np.linspace(0.0, 1.0, 5)
        with pytest.warns(UserWarning, match="degenerate"):
            th = rosin_threshold(counts, edges)
        assert th == edges[4]

    def test_single_occupied_bin(self):
        counts = np.array([0, 7, 0, 0])
        edges = np.linspace(0.0, 1.0, 5)
        with pytest.warns(UserWarning, match="degenerate"):
            th = rosin_threshold(counts, edges)
        assert th == edges[2]  # upper edge of the occupied bin

    def test_rejects_tiny_or_empty(self):
        with pytest.raises(ParameterError):
            rosin_threshold(np.array([1, 2]), np.linspace(0, 1, 3))
        with pytest.raises(InputError):
            rosin_threshold(np.zeros(5), np.linspace(0, 1, 6))

    def test_random_histograms_match_oracle(self):
        rng = np.random.default_rng(21)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for _ in range(150):
                counts, edges = random_histogram(rng)
                assert rosin_threshold(counts, edges) == \
                    rosin_bruteforce(counts, edges)


class TestOtsu:
    def test_equal_delta_masses_pick_midpoint(self):
        counts = np.zeros(10, dtype=np.int64)
        counts[2] = 10   # center 0.25
        counts[7] = 10   # center 0.75
        edges = np.linspace(0.0, 1.0, 11)
        th = otsu_threshold(counts, edges)
        assert th == otsu_bruteforce(counts, edges)
        assert 0.25 < th <= 0.75
        assert th == edges[5]  # canonical middle boundary

    def test_two_spikes_four_bins(self):
        counts = np.array([10, 0, 0, 10])
        edges = np.linspace(0.0, 1.0, 5)
        th = otsu_threshold(counts, edges)
        assert th == otsu_bruteforce(counts, edges)
        assert th == 0.5

    def test_uniform_counts(self):
        for bins in (8, 9):
            counts = np.full(bins, 5, dtype=np.int64)
            edges = np.linspace(0.0, 1.0, bins + 1)
            assert otsu_threshold(counts, edges) == otsu_bruteforce(counts, edges)

    def test_single_occupied_bin_rejected(self):
        counts = np.zeros(6, dtype=np.int64)
        counts[3] = 11
        with pytest.raises(InputError):
            otsu_threshold(counts, np.linspace(0, 1, 7))

    def test_random_histograms_match_oracle(self):
        rng = np.random.default_rng(22)
        for _ in range(150):
            counts, edges = random_histogram(rng)
            if np.count_nonzero(counts) < 2:
                continue
            assert otsu_threshold(counts, edges) == otsu_bruteforce(counts, edges)


def test_pick_threshold_dispatch():
    counts = np.array([100, 50, 10, 5, 1])
    edges = np.linspace(0, 1, 6)
    assert pick_threshold(counts, edges, "rosin") == rosin_threshold(counts, edges)
    assert pick_threshold(counts, edges, "otsu") == otsu_threshold(counts, edges)
    assert pick_threshold(counts, edges, "fixed", fixed=0.7) == 0.7
    with pytest.raises(ParameterError):
        pick_threshold(counts, edges, "fixed")
    with pytest.raises(ParameterError):
        pick_threshold(counts, edges, "nonsense")


def test_make_histogram_constant_input():
    counts, edges = make_histogram(np.zeros(100), bins=8)
    assert counts[0] == 100
    assert counts[1:].sum() == 0
    assert edges[0] == 0.0


def test_binarization_monotone_in_threshold():
    rng = np.random.default_rng(1)
    intensity = rng.uniform(0, 2, size=(16, 16))
    prev = None
    for th in np.linspace(0, 2, 9):
        binary = intensity > th
        if prev is not None:
            assert not (binary & ~prev).any()  # raising threshold never adds True
        prev = binary


@pytest.fixture(scope="module")
def untrained_bundle():
    cfg = tiny_model_cfg()
    model = build_model(cfg)
    quantizer = GumbelQuantizer(QuantizerConfig(feature_dim=cfg.feature_dim,
                                                num_entries=16, seed=1))
    model.eval()
    quantizer.eval()
    return TeacherBundle(model=model, quantizer=quantizer)


class TestMakeChangeProduct:
    def test_identical_images_all_false(self, untrained_bundle):
        rng = np.random.default_rng(2)
        img = rng.random((3, 16, 16)).astype(np.float32)
        prod = make_change_product(untrained_bundle, img, img.copy(), method="rosin")
        assert np.allclose(prod.intensity, 0.0, atol=1e-6)
        assert prod.threshold > 0
        assert not prod.binary.any()
        assert prod.logvar is None

    def test_fixed_threshold_above_range_all_false(self, untrained_bundle):
        rng = np.random.default_rng(3)
        a = rng.random((3, 16, 16)).astype(np.float32)
        b = rng.random((3, 16, 16)).astype(np.float32)
        prod = make_change_product(untrained_bundle, a, b, method="fixed",
                                   fixed_threshold=2.1)
        assert not prod.binary.any()
        assert prod.method == "fixed"

    def test_dim_mismatch_rejected(self, untrained_bundle):
        a = np.zeros((3, 16, 16), np.float32)
        b = np.zeros((3, 16, 20), np.float32)
        with pytest.raises(ShapeError):
            make_change_product(untrained_bundle, a, b)

    def test_gating_requires_student(self, untrained_bundle):
        img = np.random.default_rng(4).random((3, 16, 16)).astype(np.float32)
        with pytest.raises(ParameterError):
            make_change_product(untrained_bundle, img, img, gate_uncertainty=True)

    def test_quantized_feature_source(self, untrained_bundle):
        rng = np.random.default_rng(5)
        a = rng.random((3, 16, 16)).astype(np.float32)
        b = rng.random((3, 16, 16)).astype(np.float32)
        prod = make_change_product(untrained_bundle, a, b, feature_source="quantized")
        assert prod.intensity.shape == (16, 16)

    def test_loads_from_checkpoint_path(self, untrained_bundle, tmp_path):
        path = tmp_path / "t.pt"
        save_teacher_checkpoint(path, untrained_bundle.model,
                                untrained_bundle.quantizer)
        img = np.random.default_rng(6).random((3, 16, 16)).astype(np.float32)
        prod = make_change_product(path, img, img.copy())
        assert not prod.binary.any()


def test_save_product_writes_rasters_and_reports(tmp_path, untrained_bundle):
    rng = np.random.default_rng(7)
    a = rng.random((3, 16, 16)).astype(np.float32)
    b = rng.random((3, 16, 16)).astype(np.float32)
    prod = make_change_product(untrained_bundle, a, b)
    save_product(prod, tmp_path)
    assert (tmp_path / "intensity.ckr").exists()
    assert (tmp_path / "binary.ckr").exists()
    report = (tmp_path / "report.txt").read_text()
    assert "threshold" in report
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["method"] == "rosin"
    assert summary["threshold"] == prod.threshold
    assert summary["histogram_bins"] == 256


def test_trained_teacher_detects_planted_change(trained_teacher, gate_scenes):
    from changekit.metrics import confusion, scores

    scene = gate_scenes[0]
    prod = make_change_product(trained_teacher.bundle, scene.pre, scene.post,
                               method="rosin")
    s = scores(confusion(prod.binary, scene.change_mask))
    assert s["kappa"] > 0.0, s
