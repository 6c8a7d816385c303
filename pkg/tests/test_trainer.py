import math

import numpy as np
import pytest

from bdlab.balancing import GRAD_WEIGHTED, STRATEGIES, BalancingConfig
from bdlab.data import DataConfig, generate_pairs
from bdlab.dpo import GENERATION, LN2, UNDERSTANDING
from bdlab.errors import ConfigError, DomainError, NonFiniteError
from bdlab.model import ModelConfig, init_model, reseed_adapters
from bdlab.trainer import (
    TRAJECTORY_COLUMNS,
    AdamW,
    PairCursor,
    TrainConfig,
    clip_gradient,
    config_echo,
    cosine_lr,
    evaluate,
    read_trajectory,
    separate_adapter_eval,
    soup_interpolate,
    train,
    write_trajectory,
)
from bdlab.vectors import GradientVector

MC = ModelConfig(hidden_dim=8, trunk_layers=2, text_vocab=16, code_vocab=24, gen_tokens=12, rng_seed=3)


@pytest.fixture(scope="module")
def datasets():
    u = generate_pairs(DataConfig.understanding(pair_count=30, response_length_min=6, response_length_max=10, context_length=4), MC)
    g = generate_pairs(DataConfig.generation(pair_count=10, context_length=4), MC)
    return {UNDERSTANDING: u, GENERATION: g}


def cfg(strategy="naive_joint", steps=30, **kw):
    return TrainConfig(steps=steps, lr=5e-3, balancing=BalancingConfig(strategy=strategy, recompute_interval=10), **kw)


class TestSchedule:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
        assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_cosine_out_of_range(self):
        with pytest.raises(DomainError):
            cosine_lr(101, 100, 1.0)

    def test_cosine_monotone(self):
        lrs = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestClip:
    def g(self, *xs):
        return GradientVector.from_parts([("x", np.asarray(xs, dtype=float))])

    def test_scales_down(self):
        out = clip_gradient(self.g(2.0, 0.0), 1.0)
        assert out.values.tolist() == [1.0, 0.0] and out.norm == 1.0

    def test_identity_below(self):
        g = self.g(0.3, 0.4)
        assert clip_gradient(g, 1.0) is g

    def test_contract(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert clip_gradient(self.g(*rng.standard_normal(5) * 10), 1.0).norm <= 1.0 + 1e-12


class TestAdamW:
    def test_first_step_is_sign(self):
        opt = AdamW(1, eps=0.0, weight_decay=0.0)
        assert opt.step(np.array([0.0]), np.array([0.5]), 0.1)[0] == pytest.approx(-0.1, rel=1e-12)

    def test_zero_gradient_no_decay(self):
        opt = AdamW(2, weight_decay=0.0)
        p = np.array([1.0, -2.0])
        assert np.array_equal(opt.step(p, np.zeros(2), 0.1), p)

    def test_decoupled_decay(self):
        opt = AdamW(1, weight_decay=0.01)
        assert opt.step(np.array([1.0]), np.zeros(1), 0.1)[0] == pytest.approx(0.999, abs=1e-15)

    def test_moments_persist(self):
        opt = AdamW(1, eps=0.0, weight_decay=0.0)
        p = opt.step(np.array([0.0]), np.array([1.0]), 0.1)
        p = opt.step(p, np.array([-1.0]), 0.1)
        m = 0.9 * 0.1 - 0.1
        v = 0.999 * 0.001 + 0.001
        want = -0.1 - 0.1 * (m / (1 - 0.81)) / math.sqrt(v / (1 - 0.999**2))
        assert p[0] == pytest.approx(want, rel=1e-12)

    def test_per_coordinate_lr(self):
        opt = AdamW(2, eps=0.0, weight_decay=0.0)
        out = opt.step(np.zeros(2), np.array([1.0, 1.0]), np.array([0.1, 0.002]))
        assert out.tolist() == pytest.approx([-0.1, -0.002])

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            AdamW(1).step(np.zeros(1), np.array([np.nan]), 0.1)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(clip_norm=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    assert config_echo(TrainConfig())["large_model_lr"] == 1e-6


def test_cursor_visits_every_pair_each_epoch(datasets):
    cur = PairCursor(datasets[GENERATION], np.random.default_rng(0))
    for _ in range(3):
        seen = sorted(cur.next()[0] for _ in range(10))
        assert seen == list(range(10))


class TestTrain:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_step_zero_sits_on_the_floor(self, datasets, strategy):
        res = train(init_model(MC), datasets, cfg(strategy, steps=2))
        p0 = res.trajectory[0]
        assert p0.loss_u == LN2 and p0.loss_g == LN2
        assert p0.loss_combined == pytest.approx(LN2, abs=1e-15)
        assert len(res.trajectory) == 2

    def test_deterministic(self, datasets):
        a = train(init_model(MC), datasets, cfg("pcgrad"))
        b = train(init_model(MC), datasets, cfg("pcgrad"))
        assert [p.row() for p in a.trajectory] == [p.row() for p in b.trajectory]
        assert np.array_equal(a.state.flat_trainable(), b.state.flat_trainable())

    def test_reference_untouched(self, datasets):
        st = init_model(MC)
        ref = {k: v.copy() for k, v in st.reference.items()}
        train(st, datasets, cfg("naive_joint"))
        assert all(np.array_equal(ref[k], st.reference[k]) for k in ref)
        assert st.frozen_matches_reference()

    def test_understanding_only_leaves_generation_head(self, datasets):
        st = init_model(MC)
        head = st.params["head_g.weight"].copy()
        res = train(st, datasets, cfg("understanding_only", weight_decay=0.0))
        assert np.array_equal(st.params["head_g.weight"], head)
        assert res.trajectory[-1].loss_u < LN2

    def test_data_order_independent_of_strategy(self, datasets):
        a = train(init_model(MC), datasets, cfg("understanding_only", steps=1))
        b = train(init_model(MC), datasets, cfg("naive_joint", steps=1))
        assert a.trajectory[0].norm_u == b.trajectory[0].norm_u
        assert a.trajectory[0].norm_g == b.trajectory[0].norm_g

    def test_grad_weighted_flat_before_interval(self, datasets):
        res = train(init_model(MC), datasets, cfg(GRAD_WEIGHTED, steps=25))
        assert all(p.w_u == 0.5 for p in res.trajectory[:10])
        assert res.trajectory[10].w_u != 0.5
        assert all(abs(p.w_u + p.w_g - 1) < 1e-12 for p in res.trajectory)

    def test_missing_dataset(self, datasets):
        with pytest.raises(DomainError):
            train(init_model(MC), {UNDERSTANDING: datasets[UNDERSTANDING]}, cfg("generation_only"))

    def test_trajectory_roundtrip(self, datasets, tmp_path):
        res = train(init_model(MC), datasets, cfg("length_normalized", steps=5))
        path = tmp_path / "t.csv"
        write_trajectory(path, res.trajectory)
        assert path.read_text().splitlines()[0] == ",".join(TRAJECTORY_COLUMNS)
        back = read_trajectory(path)
        assert [p.row() for p in back] == [p.row() for p in res.trajectory]


@pytest.fixture(scope="module")
def endpoints(datasets):
    su = train(init_model(MC), datasets, cfg("understanding_only")).state
    sg = train(init_model(MC), datasets, cfg("generation_only")).state
    return su, sg


class TestPosthoc:
    def test_soup_endpoints_bit_exact(self, endpoints):
        su, sg = endpoints
        for lam, want in ((0.0, su), (1.0, sg)):
            out = soup_interpolate(su, sg, lam)
            assert all(np.array_equal(out.params[k], want.params[k]) for k in want.params)

    def test_soup_midpoint(self, endpoints):
        su, sg = endpoints
        mid = soup_interpolate(su, sg, 0.5)
        for k in su.trainable:
            assert np.allclose(mid.params[k], (su.params[k] + sg.params[k]) / 2, rtol=0, atol=1e-15)
        assert np.array_equal(mid.params["trunk_w.0"], su.params["trunk_w.0"])

    def test_soup_base_mismatch(self, endpoints):
        su, _ = endpoints
        other = init_model(ModelConfig(**{**MC.__dict__, "rng_seed": 99}))
        with pytest.raises(DomainError):
            soup_interpolate(su, other, 0.5)
        reseeded = reseed_adapters(init_model(MC), 7)
        soup_interpolate(su, reseeded, 0.5)

    def test_composite_is_bit_exact(self, endpoints, datasets):
        su, sg = endpoints
        pairs = datasets[UNDERSTANDING][:5] + datasets[GENERATION][:4]
        comp = separate_adapter_eval(su, sg, pairs)
        eu, eg = evaluate(su, pairs), evaluate(sg, pairs)
        assert comp.deployable is False and "non-deployable" in comp.label
        for k, v in comp.metrics.items():
            assert v == (eu if k.startswith("u_") else eg)[k]

    def test_composite_of_equal_states(self, endpoints, datasets):
        su, _ = endpoints
        pairs = datasets[UNDERSTANDING][:3] + datasets[GENERATION][:3]
        assert separate_adapter_eval(su, su, pairs).metrics == evaluate(su, pairs)

    def test_evaluate_with_cached_refs(self, endpoints, datasets):
        from bdlab.dpo import reference_logprobs

        su, _ = endpoints
        pairs = datasets[UNDERSTANDING][:4]
        refs = [reference_logprobs(su, p) for p in pairs]
        assert evaluate(su, pairs, refs=refs) == evaluate(su, pairs)
        with pytest.raises(DomainError):
            evaluate(su, pairs, refs=refs[:2])
