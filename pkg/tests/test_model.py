import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstock import model as gm
from fedstock import nn
from fedstock.errors import ConfigError, EmptySequenceError, IndexingError
from fedstock.model import Instance, ModelConfig, Prediction

from conftest import fd_grad, rel_err

SMALL = ModelConfig(d_e=3, d_h=4, head_hidden=5, category_cardinalities=(2, 3, 2))


def randomize(params, rng, scale=0.5):
    for p in params:
        p.value[...] = rng.normal(0, scale, p.shape)
    return params


def random_instance(rng, config, T):
    return Instance(
        x=rng.uniform(0, 1, (T, config.d_n)),
        m=rng.integers(0, 2, (T, 1)),
        c=[int(rng.integers(v)) for v in config.category_cardinalities],
        y=rng.uniform(0, 1, config.horizon),
    )


def zero_params(config):
    ps = gm.init_params(config, 0)
    for p in ps:
        p.value[...] = 0.0
    return ps


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.d_n, cfg.d_m, cfg.d_e, cfg.d_h, cfg.horizon) == (4, 1, 16, 64, 3)
        assert cfg.n_categories == 4
        assert cfg.feature_names == ("sex", "breed", "state", "nrm_region")

    @pytest.mark.parametrize("field", ["d_n", "d_e", "d_h", "horizon", "head_hidden"])
    def test_dimensions_positive(self, field):
        with pytest.raises(ConfigError, match=field):
            ModelConfig(**{field: 0})

    def test_round_trip(self):
        cfg = ModelConfig(d_h=8, category_cardinalities=(2, 2))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestHeadPartition:
    def test_head_is_exactly_the_two_final_layers(self):
        ps = gm.init_params(ModelConfig(), 0)
        heads = [n for n in ps.names() if ps.part(n) is nn.Part.HEAD]
        assert heads == ["head.w1", "head.b1", "head.w2", "head.b2"]
        assert len(ps.select(nn.Part.BODY)) + len(heads) == len(ps)

    def test_initialization_ranges(self):
        cfg = ModelConfig()
        ps = gm.init_params(cfg, 3)
        assert np.all(np.abs(ps["embed.sex"].value) <= 0.1)
        assert np.all(ps["num.b"].value == 0) and np.all(ps["head.b2"].value == 0)
        assert np.all(np.abs(ps["gru.u_reset"].value) <= 1 / math.sqrt(cfg.d_h))
        assert np.all(np.abs(ps["head.w1"].value) <= 1 / math.sqrt(cfg.d_fused))
        again = gm.init_params(cfg, 3)
        assert all(again[n].value.tobytes() == ps[n].value.tobytes() for n in ps.names())


class TestEmbedStatic:
    def test_concatenates_selected_rows(self):
        cfg = ModelConfig(d_e=2, category_cardinalities=(2, 2))
        ps = gm.init_params(cfg, 0)
        ps[gm.embedding_name(cfg, 0)].value[1] = [1, 2]
        ps[gm.embedding_name(cfg, 1)].value[0] = [3, 4]
        np.testing.assert_array_equal(gm.embed_static([1, 0], ps, cfg), [1, 2, 3, 4])

    def test_deterministic(self):
        ps = gm.init_params(SMALL, 1)
        a, b = gm.embed_static([1, 2, 0], ps, SMALL), gm.embed_static([1, 2, 0], ps, SMALL)
        assert a.tobytes() == b.tobytes()

    def test_default_width(self):
        cfg = ModelConfig()
        assert gm.embed_static([0, 0, 0, 0], gm.init_params(cfg, 0), cfg).shape == (64,)

    def test_out_of_range_names_feature(self):
        cfg = ModelConfig()
        with pytest.raises(IndexingError, match="breed"):
            gm.embed_static([0, 9, 0, 0], gm.init_params(cfg, 0), cfg)


class TestEncodeSequence:
    def test_single_step_is_one_gru_cell(self, rng):
        ps = randomize(gm.init_params(SMALL, 0), rng)
        x, m = rng.normal(size=(1, 4)), np.array([[1.0]])
        z = np.concatenate([nn.linear(x[0], ps["num.w"], ps["num.b"]), m[0]])
        expected, _ = nn.gru_cell(z, np.zeros(SMALL.d_h), gm._gru(ps))
        np.testing.assert_allclose(gm.encode_sequence(x, m, ps), expected, rtol=1e-13, atol=1e-15)

    def test_zero_params_give_zero_state(self, rng):
        ps = zero_params(SMALL)
        h = gm.encode_sequence(rng.normal(size=(6, 4)), np.ones((6, 1)), ps)
        np.testing.assert_array_equal(h, 0.0)

    def test_matches_scripted_cell_loop(self, rng):
        ps = randomize(gm.init_params(SMALL, 0), rng)
        x, m = rng.normal(size=(5, 4)), rng.integers(0, 2, (5, 1)).astype(float)
        h = np.zeros(SMALL.d_h)
        for t in range(5):
            z = np.concatenate([ps["num.w"].value @ x[t] + ps["num.b"].value, m[t]])
            h, _ = nn.gru_cell(z, h, gm._gru(ps))
        np.testing.assert_allclose(gm.encode_sequence(x, m, ps), h, rtol=1e-12, atol=1e-14)

    def test_empty_sequence(self):
        with pytest.raises(EmptySequenceError):
            gm.encode_sequence(np.zeros((0, 4)), np.zeros((0, 1)), gm.init_params(SMALL, 0))


class TestPredict:
    def test_shape_contract(self, rng):
        cfg = ModelConfig(horizon=5, d_h=8, head_hidden=8)
        pred = gm.predict(random_instance(rng, cfg, 7), gm.init_params(cfg, 0), cfg)
        assert pred.mu.shape == (5,) and pred.log_var.shape == (5,)

    def test_zero_params(self, rng):
        pred = gm.predict(random_instance(rng, SMALL, 4), zero_params(SMALL), SMALL)
        np.testing.assert_array_equal(pred.mu, 0.0)
        np.testing.assert_array_equal(pred.log_var, 0.0)

    def test_matches_manual_composition(self, rng):
        ps = randomize(gm.init_params(SMALL, 0), rng)
        inst = random_instance(rng, SMALL, 6)
        h = gm.encode_sequence(inst.x, inst.m, ps)
        e = gm.embed_static(inst.c, ps, SMALL)
        fused = np.concatenate([h, e])
        hidden = np.maximum(ps["head.w1"].value @ fused + ps["head.b1"].value, 0)
        o = ps["head.w2"].value @ hidden + ps["head.b2"].value
        pred = gm.predict(inst, ps, SMALL)
        np.testing.assert_allclose(pred.mu, o[:3], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(pred.log_var, np.clip(o[3:], -10, 10), rtol=1e-12, atol=1e-14)

    def test_reversing_time_changes_output(self, rng):
        ps = randomize(gm.init_params(SMALL, 0), rng)
        inst = random_instance(rng, SMALL, 6)
        rev = Instance(inst.x[::-1], inst.m[::-1], inst.c, inst.y)
        assert not np.allclose(gm.predict(inst, ps, SMALL).mu, gm.predict(rev, ps, SMALL).mu)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_log_var_always_clamped(self, seed):
        rng = np.random.default_rng(seed)
        ps = randomize(gm.init_params(SMALL, 0), rng, scale=float(rng.uniform(0.1, 20)))
        pred = gm.predict(random_instance(rng, SMALL, int(rng.integers(1, 8))), ps, SMALL)
        assert np.all((pred.log_var >= -10) & (pred.log_var <= 10))


class TestNLL:
    def test_perfect_unit_variance(self):
        assert gm.nll_loss(Prediction(np.array([1.0, 2.0]), np.zeros(2)), [1.0, 2.0]) == 0.0

    def test_single_horizon(self):
        assert gm.nll_loss(Prediction(np.zeros(1), np.zeros(1)), [1.0]) == 0.5

    def test_two_horizons_hand_case(self):
        loss = gm.nll_loss(Prediction(np.zeros(2), np.array([0.0, math.log(4)])), [1.0, 2.0])
        assert abs(loss - (2 + math.log(4)) / 4) < 1e-12
        assert abs(loss - 0.8466) < 1e-4

    def test_minimized_at_mu_equal_y(self, rng):
        y, lv = rng.normal(size=4), rng.normal(size=4)
        _, dmu, _ = gm.nll_terms(y.copy(), lv, y)
        np.testing.assert_array_equal(dmu, 0.0)
        for delta in (1e-3, -1e-3):
            assert gm.nll_loss(Prediction(y + delta, lv), y) > gm.nll_loss(Prediction(y, lv), y)


def end_to_end_grad_error(config, inst, ps):
    ps.zero_grad()
    gm.loss_and_grad(ps, config, [inst])

    def f():
        return gm.nll_loss(gm.predict(inst, ps, config), inst.y)

    return max(rel_err(p.grad, fd_grad(f, p.value)) for p in ps)


@pytest.mark.parametrize("T", [1, 2, 5, 23])
def test_end_to_end_gradient(T, rng):
    ps = randomize(gm.init_params(SMALL, 0), rng)
    assert end_to_end_grad_error(SMALL, random_instance(rng, SMALL, T), ps) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_end_to_end_gradient_random_configs(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        d_n=int(rng.integers(1, 4)), d_e=int(rng.integers(1, 4)), d_h=int(rng.integers(1, 5)),
        horizon=int(rng.integers(1, 4)), head_hidden=int(rng.integers(1, 5)),
        category_cardinalities=tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 3)))),
    )
    ps = randomize(gm.init_params(cfg, 0), rng, 0.4)
    inst = random_instance(rng, cfg, int(rng.choice([1, 3, 23])))
    assert end_to_end_grad_error(cfg, inst, ps) < 1e-4


def test_batch_gradient_is_mean_of_instance_gradients(rng):
    ps = randomize(gm.init_params(SMALL, 0), rng)
    insts = [random_instance(rng, SMALL, T) for T in (3, 3, 5)]
    ps.zero_grad()
    batch_loss = gm.loss_and_grad(ps, SMALL, insts)
    batch = {p.name: p.grad.copy() for p in ps}
    total = {p.name: np.zeros_like(p.value) for p in ps}
    losses = []
    for inst in insts:
        ps.zero_grad()
        losses.append(gm.loss_and_grad(ps, SMALL, [inst]))
        for p in ps:
            total[p.name] += p.grad / 3
    assert abs(batch_loss - np.mean(losses)) < 1e-12
    for name in total:
        np.testing.assert_allclose(batch[name], total[name], rtol=1e-10, atol=1e-13)


def test_float32_option_runs():
    cfg = ModelConfig(d_e=3, d_h=4, head_hidden=4, dtype="float32")
    ps = gm.init_params(cfg, 0)
    assert ps["gru.w_update"].value.dtype == np.float32
    inst = random_instance(np.random.default_rng(0), cfg, 4)
    assert np.isfinite(gm.loss_and_grad(ps, cfg, [inst]))


class TestForecasts:
    def test_point_forecast_is_mu(self):
        pred = Prediction(np.array([1.0, 2.0, 3.0]), np.array([5.0, -3.0, 0.0]))
        np.testing.assert_array_equal(gm.point_forecast(pred), [1, 2, 3])
        other = Prediction(pred.mu, np.zeros(3))
        np.testing.assert_array_equal(gm.point_forecast(pred), gm.point_forecast(other))

    def test_tiny_variance_samples_near_mean(self):
        pred = Prediction(np.array([0.3, 0.5]), np.full(2, -10.0))
        draws = gm.sample_forecast(pred, np.random.default_rng(0), size=1000)
        assert np.all(np.abs(draws - pred.mu) < 5 * math.exp(-5))

    def test_seeded_draws_reproducible(self):
        pred = Prediction(np.zeros(3), np.zeros(3))
        a = gm.sample_forecast(pred, np.random.default_rng(7))
        b = gm.sample_forecast(pred, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_monte_carlo_moments(self):
        pred = Prediction(np.zeros(1), np.zeros(1))
        draws = gm.sample_forecast(pred, np.random.default_rng(1), size=10_000)[:, 0]
        assert abs(draws.mean()) < 0.05
        assert abs(draws.var() - 1.0) < 0.1

    def test_point_forecast_equals_sample_mean(self):
        pred = Prediction(np.array([0.2, -1.0, 3.0]), np.zeros(3))
        draws = gm.sample_forecast(pred, np.random.default_rng(2), size=100_000)
        np.testing.assert_allclose(draws.mean(axis=0), gm.point_forecast(pred), atol=0.05)
