import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdlab.data import DataConfig, generate_pairs
from bdlab.diagnostics import (
    collect_batch_diagnostics,
    combined_norm_check,
    cosine,
    cosine_value,
    make_record,
    null_calibration,
    summarize_records,
    synthetic_diagnostics,
    synthetic_vectors,
    write_records_csv,
)
from bdlab.dpo import GENERATION, UNDERSTANDING
from bdlab.errors import DomainError
from bdlab.model import ModelConfig, init_model
from bdlab.vectors import GradientVector

from helpers import perturbed_state, random_pair, tiny_config


def v(*xs):
    return GradientVector.from_parts([("x", np.asarray(xs, dtype=float))])


class TestCosine:
    def test_examples(self):
        assert cosine_value(v(1, 0), v(0, 1)) == 0.0
        assert cosine_value(v(1, 1), v(1, 0)) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
        assert cosine_value(v(3, -2), v(3, -2)) == pytest.approx(1.0)

    def test_zero_norm_flag(self):
        assert cosine(v(0, 0), v(1, 0)) == (0.0, True)
        assert cosine(v(1e-13, 0), v(1, 0)) == (0.0, True)

    def test_mismatch(self):
        with pytest.raises(DomainError):
            cosine(v(1, 0), GradientVector.from_parts([("y", [1.0, 0.0])]))

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_symmetry_and_scale(self, seed, k):
        rng = np.random.default_rng(seed)
        a, b = v(*rng.standard_normal(5)), v(*rng.standard_normal(5))
        c = cosine_value(a, b)
        assert -1.0 <= c <= 1.0
        assert cosine_value(b, a) == pytest.approx(c, abs=1e-12)
        assert cosine_value(a * k, b) == pytest.approx(c, abs=1e-12)

    def test_random_null(self):
        rng = np.random.default_rng(11)
        d = 4096
        cs = np.array([cosine_value(v(*rng.standard_normal(d)), v(*rng.standard_normal(d))) for _ in range(1000)])
        assert abs(cs.mean()) <= 3 * (1 / math.sqrt(d)) / math.sqrt(1000)
        assert cs.std() == pytest.approx(1 / math.sqrt(d), rel=0.1)


class TestNormCheck:
    def test_rho_one_tenth(self):
        c = combined_norm_check(0.1, 0.0)
        assert c.exact_relative_increase == pytest.approx(0.0049876, abs=1e-7)
        assert c.quadratic_approx == pytest.approx(0.005)
        assert c.angle_deviation_rad == pytest.approx(0.09967, abs=1e-5)
        assert c.angle_deviation_deg == pytest.approx(5.71, abs=0.01)

    def test_parallel_doubles(self):
        assert combined_norm_check(1.0, 1.0).exact_relative_increase == pytest.approx(1.0)
        assert combined_norm_check(1.0, 1.0).angle_deviation_rad == 0.0

    def test_seven_b_ratio(self):
        c = combined_norm_check(0.073, 0.0)
        assert c.exact_relative_increase == pytest.approx(math.sqrt(1 + 0.073**2) - 1, rel=1e-12)
        assert c.exact_relative_increase == pytest.approx(0.0026610, abs=1e-7)
        assert c.quadratic_approx == pytest.approx(0.0026645, abs=1e-7)

    @settings(max_examples=200)
    @given(st.floats(1e-6, 0.1))
    def test_quadratic_bound(self, rho):
        c = combined_norm_check(rho, 0.0)
        assert abs(c.exact_relative_increase - rho**2 / 2) <= rho**4
        assert c.angle_deviation_rad == pytest.approx(math.atan(rho), rel=1e-12)

    @settings(max_examples=100)
    @given(st.floats(1e-3, 10), st.floats(-1, 1))
    def test_matches_vector_geometry(self, rho, cos):
        (gu, gg), = synthetic_vectors(1, dim=8, rho=rho, cos=cos, n_layers=1)
        c = combined_norm_check(rho, cos)
        total = gu.values + gg.values
        assert np.linalg.norm(total) / gg.norm - 1 == pytest.approx(c.exact_relative_increase, abs=1e-9)
        ang = math.acos(np.clip(total @ gg.values / (np.linalg.norm(total) * gg.norm), -1, 1))
        assert ang == pytest.approx(c.angle_deviation_rad, abs=1e-6)

    def test_rejects_nonpositive_rho(self):
        with pytest.raises(DomainError):
            combined_norm_check(0.0, 0.0)


class TestSynthetic:
    def test_constructed_ratio_and_cosine(self):
        run = synthetic_diagnostics(50, dim=256, rho=0.073, cos=0.0, seed=3)
        assert abs(np.mean([r.cos for r in run.records])) <= 1e-12
        assert all(r.rho == pytest.approx(0.073, rel=1e-12) for r in run.records)

    def test_nonzero_cosine(self):
        run = synthetic_diagnostics(10, dim=64, rho=2.0, cos=-0.4)
        assert all(r.cos == pytest.approx(-0.4, abs=1e-12) for r in run.records)

    def test_inter_task_null_in_synthetic_mode(self):
        run = synthetic_diagnostics(200, seed=0)
        rep = null_calibration(run.records, run.intra_u, run.intra_g)
        assert rep.inter_vs_zero.p > 0.05


class TestCollect:
    def test_zero_batches(self):
        st_ = init_model(tiny_config())
        run = collect_batch_diagnostics(st_, [], [], 0)
        assert run.records == []

    def test_fresh_init_flags_every_a_segment(self):
        cfg = tiny_config()
        st_ = init_model(cfg)
        rng = np.random.default_rng(0)
        du = [random_pair(cfg, rng, UNDERSTANDING) for _ in range(4)]
        dg = [random_pair(cfg, rng, GENERATION) for _ in range(4)]
        run = collect_batch_diagnostics(st_, du, dg, 6)
        assert len(run.records) == 6 and len(run.intra_u) == 5
        for r in run.records:
            assert set(r.layer_cos) == {"lora_A.0", "lora_A.1", "lora_B.0", "lora_B.1"}
            assert r.layer_zero["lora_A.0"] and r.layer_zero["lora_A.1"]

    def test_heads_flag(self):
        cfg = tiny_config()
        st_ = perturbed_state(cfg, np.random.default_rng(1))
        rng = np.random.default_rng(0)
        du = [random_pair(cfg, rng, UNDERSTANDING)]
        dg = [random_pair(cfg, rng, GENERATION)]
        with_heads = collect_batch_diagnostics(st_, du, dg, 1, include_heads=True).records[0]
        assert "head_g.weight" in with_heads.layer_cos
        # the understanding loss never reaches the generation head
        assert with_heads.layer_zero["head_g.weight"]

    def test_token_count_drives_ratio(self):
        ratios = []
        for n in (16, 64):
            mc = ModelConfig(hidden_dim=8, trunk_layers=2, text_vocab=16, code_vocab=16, gen_tokens=n, rng_seed=0)
            st_ = perturbed_state(mc, np.random.default_rng(0), scale=0.2)
            du = generate_pairs(DataConfig.understanding(pair_count=10, response_length_min=8, response_length_max=8, context_length=4), mc)
            dg = generate_pairs(DataConfig.generation(pair_count=10, context_length=4), mc)
            run = collect_batch_diagnostics(st_, du, dg, 10)
            ratios.append(np.mean([r.norm_g / r.norm_u for r in run.records]))
        assert ratios[1] > ratios[0]


class TestCalibration:
    def test_hand_welch(self):
        recs = [make_record(i, v(1.0, 0.0), v(c, 1.0)) for i, c in enumerate([0.0, 0.0])]
        rep = null_calibration(recs, [1.0, 2.0, 3.0], [1.0, 2.0])
        assert rep.inter_vs_zero.t == 0.0 and rep.inter_vs_zero.p == 1.0
        rep = null_calibration(
            [make_record(i, v(1.0, 0.0), v(1.0, math.sqrt(1 / c**2 - 1))) for i, c in enumerate([0.2, 0.3, 0.4])],
            [0.1, 0.2, 0.3],
            [0.1, 0.2],
        )
        assert rep.intra_u_vs_inter.t == pytest.approx(-1.2247, abs=1e-4)
        assert rep.intra_u_vs_inter.df == pytest.approx(4.0)
        assert rep.d_intra_u == pytest.approx(-1.0)

    def test_insufficient(self):
        with pytest.raises(DomainError):
            null_calibration([make_record(0, v(1, 0), v(0, 1))], [0.1, 0.2], [0.1, 0.2])


def test_csv_and_summary(tmp_path):
    run = synthetic_diagnostics(3, dim=8, rho=0.1, cos=0.0)
    zero = make_record(3, GradientVector.zeros_like(run.records and synthetic_vectors(1, dim=8)[0][0]), synthetic_vectors(1, dim=8)[0][1])
    path = tmp_path / "d.csv"
    write_records_csv(path, run.records + [zero])
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 4
    assert list(rows[0])[:8] == ["index", "cos", "norm_u", "norm_g", "rho", "norm_increase_exact", "norm_increase_quadratic", "angle_deg"]
    assert float(rows[0]["norm_increase_exact"]) == pytest.approx(0.0049876, abs=1e-7)
    assert rows[3]["norm_increase_exact"] == "nan"
    summary = summarize_records(run.records)
    json.dumps(summary)
