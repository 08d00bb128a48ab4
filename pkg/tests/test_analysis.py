import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deltalearn import build_model
from deltalearn.analysis import (conv_filter_distances, larger_distance_fraction,
                                 normalize_activation_map, param_distance_report,
                                 write_distance_csv)
from deltalearn.errors import ContractError

from conftest import tiny_layers


class TestNormalizeActivationMap:
    def test_direct_formula(self):
        out = normalize_activation_map([[0.0, 5.0], [10.0, 5.0]])
        assert out.tolist() == [[0.0, 0.5], [1.0, 0.5]]

    def test_constant_map_becomes_zeros(self):
        assert np.array_equal(normalize_activation_map(np.full((3, 3), 2.5)),
                              np.zeros((3, 3)))

    def test_range_is_unit_interval(self, rng):
        out = normalize_activation_map(rng.standard_normal((6, 7)))
        assert out.min() == 0.0 and out.max() == 1.0

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (3, 4),
                      elements=st.floats(-100, 100, allow_nan=False)))
    def test_idempotent(self, arr):
        once = normalize_activation_map(arr)
        twice = normalize_activation_map(once)
        assert np.abs(once - twice).max() <= 1e-12


class TestDistances:
    def test_identical_models_have_zero_distances(self):
        a = build_model(tiny_layers(), (3, 8, 8), seed=1)
        b = build_model(tiny_layers(), (3, 8, 8), seed=1)
        for dists in conv_filter_distances(a, b).values():
            assert np.array_equal(dists, np.zeros_like(dists))

    def test_single_perturbed_filterct(self, rng):
        a = build_model(tiny_layers(), (3, 8, 8), seed=1)
        b = build_model(tiny_layers(), (3, 8, 8), seed=1)
        v = rng.standard_normal(b.params["conv3.weight"].data[2].shape)
        b.params["conv3.weight"].data[2] += v
        dists = conv_filter_distances(a, b)
        assert abs(dists["conv3"][2] - np.linalg.norm(v)) < 1e-12
        assert np.array_equal(np.delete(dists["conv3"], 2),
                              np.zeros(len(dists["conv3"]) - 1))
        assert np.array_equal(dists["conv0"], np.zeros_like(dists["conv0"]))

    def test_matches_flat_norm_oracle(self, rng):
        a = build_model(tiny_layers(), (3, 8, 8), seed=1)
        b = build_model(tiny_layers(), (3, 8, 8), seed=1)
        for name in ("conv0.weight", "conv3.weight"):
            b.params[name].data += rng.standard_normal(b.params[name].data.shape)
        dists = conv_filter_distances(a, b)
        for layer in ("conv0", "conv3"):
            wa = a.params[f"{layer}.weight"].data
            wb = b.params[f"{layer}.weight"].data
            for j in range(wa.shape[0]):
                expected = float(np.sqrt(((wb[j] - wa[j]).reshape(-1) ** 2).sum()))
                assert abs(dists[layer][j] - expected) <= 1e-12

    def test_sign_symmetric(self, rng):
        base = build_model(tiny_layers(), (3, 8, 8), seed=1)
        plus = build_model(tiny_layers(), (3, 8, 8), seed=1)
        minus = build_model(tiny_layers(), (3, 8, 8), seed=1)
        v = rng.standard_normal(base.params["conv0.weight"].data.shape)
        plus.params["conv0.weight"].data += v
        minus.params["conv0.weight"].data -= v
        dp = conv_filter_distances(base, plus)["conv0"]
        dm = conv_filter_distances(base, minus)["conv0"]
        assert np.allclose(dp, dm, atol=1e-12)

    def test_layout_mismatch_raises(self):
        a = build_model(tiny_layers(), (3, 8, 8), seed=1)
        c = build_model([tiny_layers()[0], tiny_layers()[1], tiny_layers()[5],
                         tiny_layers()[6]], (3, 8, 8), seed=1)
        with pytest.raises(ContractError):
            conv_filter_distances(a, c)

    def test_report_groups_and_sorts_descending(self, rng):
        a = build_model(tiny_layers(), (3, 8, 8), seed=1)
        b = build_model(tiny_layers(), (3, 8, 8), seed=1)
        for name in ("conv0.weight", "conv3.weight"):
            b.params[name].data += rng.standard_normal(b.params[name].data.shape)
        report = param_distance_report(a, b, grouping={"conv0": "early",
                                                       "conv3": "late"})
        assert set(report) == {"early", "late"}
        for rows in report.values():
            values = [r[2] for r in rows]
            assert values == sorted(values, reverse=True)

    def test_fraction_counts_pairwise_wins(self, rng):
        base = build_model(tiny_layers(), (3, 8, 8), seed=1)
        far = build_model(tiny_layers(), (3, 8, 8), seed=1)
        near = build_model(tiny_layers(), (3, 8, 8), seed=1)
        for name in ("conv0.weight", "conv3.weight"):
            step = rng.standard_normal(far.params[name].data.shape)
            far.params[name].data += step
            near.params[name].data += 0.01 * step
        assert larger_distance_fraction(base, far, near) == 1.0
        assert larger_distance_fraction(base, near, far) == 0.0

    def test_csv_roundtrip(self, rng, tmp_path):
        a = build_model(tiny_layers(), (3, 8, 8), seed=1)
        b = build_model(tiny_layers(), (3, 8, 8), seed=2)
        report = param_distance_report(a, b)
        path = tmp_path / "d.csv"
        write_distance_csv(report, path)
        import csv
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["group", "rank", "layer", "filter", "distance"]
        assert len(rows) == 1 + sum(len(v) for v in report.values())
        parsed = [float(r[4]) for r in rows[1:]]
        flat = [d for v in report.values() for _, _, d in v]
        assert sorted(parsed) == sorted(flat)
