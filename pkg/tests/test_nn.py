import numpy as np
import pytest
from hypothesis import given, strategies as st

from pathxva.nn import (Head, MlpParams, TrainConfig, TrainingDivergence, batch_loss, empirical_var_es,
                        es_labels, forward, init_mlp, load_heads, loss_and_gradient, nn_regress,
                        param_count, save_heads, softplus, tail_labels)


def fd_check(dims, kind, seed, alpha=0.85, h=1e-6):
    """Largest relative deviation between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    p = init_mlp(dims, seed)
    p.flat[...] += 0.1 * rng.normal(size=p.flat.size)
    x = rng.normal(size=(24, dims[0]))
    out = forward(p, x)
    # keep residuals away from the pinball kink so the loss is smooth locally
    y = out + np.where(rng.random(24) < 0.5, -1.0, 1.0) * (0.5 + rng.random(24))
    _, g = loss_and_gradient(p, x, y, kind, alpha)
    num = np.empty_like(p.flat)
    for k in range(p.flat.size):
        q = p.copy()
        q.flat[k] += h
        up = batch_loss(q, x, y, kind, alpha)
        q.flat[k] -= 2 * h
        down = batch_loss(q, x, y, kind, alpha)
        num[k] = (up - down) / (2 * h)
    return float(np.max(np.abs(num - g.flat)) / max(np.max(np.abs(num)), 1e-12))


class TestInitAndForward:
    def test_parameter_count_for_benchmark_width(self):
        expected = 36 * 38 + 38 + 38 * 1 + 1
        assert expected == 1445
        assert param_count((36, 38, 1)) == expected
        assert init_mlp((36, 38, 1), 0).flat.size == expected

    def test_same_seed_same_parameters(self):
        a, b = init_mlp((5, 7, 1), 42), init_mlp((5, 7, 1), 42)
        assert np.array_equal(a.flat, b.flat)
        assert not np.array_equal(a.flat, init_mlp((5, 7, 1), 43).flat)

    def test_he_variance(self):
        p = init_mlp((1024, 1024, 1), 1)
        assert abs(p.weights[0].var() / (2 / 1024) - 1) < 0.2
        assert np.all(p.biases[0] == 0) and np.all(p.biases[1] == 0)

    @pytest.mark.parametrize("dims", [(3, 0, 1), (0, 4, 1), (3, 4, 2), (3,)])
    def test_invalid_dims_rejected(self, dims):
        with pytest.raises(ValueError):
            init_mlp(dims, 0)

    def test_zero_weights_give_output_bias(self):
        p = init_mlp((4, 6, 6, 1), 0)
        p.flat[...] = 0.0
        p.biases[-1][...] = 2.5
        x = np.random.default_rng(0).normal(size=(9, 4))
        assert np.array_equal(forward(p, x), np.full(9, 2.5))

    def test_softplus_values(self):
        assert softplus(np.array(0.0)) == np.log(2.0)
        with np.errstate(over="raise", invalid="raise"):
            big = softplus(np.array([1000.0, -1000.0]))
        assert big[0] == 1000.0 and 0.0 <= big[1] < 1e-300

    def test_nan_input_rejected(self):
        p = init_mlp((2, 3, 1), 0)
        with pytest.raises(ValueError):
            forward(p, np.array([[0.0, np.nan]]))

    def test_feature_dim_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_mlp((2, 3, 1), 0), np.zeros((4, 3)))


class TestGradients:
    @given(seed=st.integers(0, 10_000), kind=st.sampled_from(["ls", "qle"]),
           width=st.integers(1, 6), depth=st.integers(1, 2))
    def test_gradients_match_finite_differences(self, seed, kind, width, depth):
        dims = (3, *([width] * depth), 1)
        assert fd_check(dims, kind, seed) < 1e-5

    def test_pinball_subgradient_zero_at_kink(self):
        p = init_mlp((2, 3, 1), 0)
        p.flat[...] = 0.0
        x = np.zeros((4, 2))
        # residual exactly zero: only the (1 - alpha) drift remains
        _, g = loss_and_gradient(p, x, np.zeros(4), "qle", 0.9)
        assert np.isclose(g.biases[-1][0], 0.1)


class TestRegression:
    def test_constant_labels(self):
        x = np.random.default_rng(0).normal(size=(2048, 3))
        head = nn_regress(x, np.full(2048, 5.0), TrainConfig(batch_size=256, epochs=2))
        assert np.max(np.abs(head(x) - 5.0)) < 1e-2

    def test_quantile_of_independent_labels(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(16384, 2))
        y = rng.normal(size=16384)
        cfg = TrainConfig(loss="qle", alpha=0.85, batch_size=1024, epochs=32, learning_rate=1e-2,
                          lr_schedule="linear")
        out = nn_regress(x, y, cfg)(x)
        q = np.sort(y)[int(np.ceil(0.85 * len(y))) - 1]
        assert abs(out.mean() - q) < 0.05
        assert out.std() < 0.05

    def test_learns_smooth_function(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, size=(8192, 2))
        f = np.sin(2 * x[:, 0]) + x[:, 1] ** 2
        y = f + 0.1 * rng.normal(size=8192)
        cfg = TrainConfig(batch_size=256, epochs=40, learning_rate=1e-2, lr_schedule="linear")
        head = nn_regress(x, y, cfg)
        assert np.sqrt(np.mean((head(x) - f) ** 2)) < 0.05
        assert head.train_loss == pytest.approx(np.mean((head(x) - y) ** 2))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(1024, 3)), rng.normal(size=1024)
        cfg = TrainConfig(batch_size=128, epochs=3, seed=9)
        assert np.array_equal(nn_regress(x, y, cfg).params.flat, nn_regress(x, y, cfg).params.flat)

    def test_warm_start_copies_init(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(256, 3)), rng.normal(size=256)
        init = init_mlp((3, 38, 1), 123)
        before = init.flat.copy()
        cfg = TrainConfig(batch_size=256, epochs=1, learning_rate=1e-300, dtype="float64")
        head = nn_regress(x, y, cfg, init=init)
        # a learning rate of 1e-300 only perturbs parameters that start at zero
        assert np.allclose(head.params.flat, before, rtol=0, atol=1e-290)
        assert np.array_equal(init.flat, before)
        assert head.params.flat is not init.flat

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            nn_regress(np.zeros((10, 2)), np.zeros(10), TrainConfig(batch_size=64))

    def test_divergence_reported(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(512, 3))
        cfg = TrainConfig(optimizer="sgd", learning_rate=1e6, batch_size=128, epochs=4)
        with pytest.raises(TrainingDivergence, match="epoch 0"):
            nn_regress(x, 100 * x[:, 0] ** 3, cfg)

    @pytest.mark.parametrize("kw", [dict(alpha=0.5), dict(alpha=1.0), dict(epochs=0),
                                    dict(learning_rate=0.0), dict(loss="l1"), dict(optimizer="rms"),
                                    dict(es_mode="x"), dict(lr_schedule="cosine")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_heads_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=(512, 3)), rng.normal(size=512)
        heads = [nn_regress(x, y, TrainConfig(batch_size=128, epochs=1, seed=s)) for s in range(2)]
        heads[0].meta = {"step": 4, "target": "fva"}
        save_heads(tmp_path / "h", heads, meta={"config_hash": "abc"})
        back = load_heads(tmp_path / "h")
        assert len(back) == 2 and back[0].meta == {"step": 4, "target": "fva"}
        for a, b in zip(heads, back):
            assert np.array_equal(a(x), b(x))
            assert a.train_loss == b.train_loss


class TestTailLabels:
    def test_all_below_var_give_zero(self):
        y = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(es_labels(y, y + 1, 0.85), np.zeros(3))

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 0.2])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            es_labels(np.zeros(2), np.zeros(2), alpha)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            es_labels(np.zeros(3), np.zeros(2), 0.9)

    def test_unconditional_mean_matches_tail_mean(self):
        rng = np.random.default_rng(6)
        y = rng.standard_t(5, size=200_000)
        alpha = 0.85
        var, es = empirical_var_es(y, alpha)
        srt = np.sort(y)
        tail = srt[int(np.ceil(alpha * len(y))) - 1:]
        assert es == pytest.approx(tail.mean(), rel=1e-12)
        est = es_labels(y, np.full_like(y, var), alpha).mean()
        assert abs(est - tail.mean()) < 5 * y.std() / np.sqrt(len(y)) / (1 - alpha)

    def test_centered_and_literal_share_target(self):
        rng = np.random.default_rng(7)
        y = rng.normal(size=100_000)
        var = np.full_like(y, 1.0364)
        a = tail_labels(y, var, 0.85, "centered").mean()
        b = tail_labels(y, var, 0.85, "indicator").mean()
        assert abs(a - b) < 0.03

    @given(seed=st.integers(0, 2**31))
    def test_es_above_var_and_mean(self, seed):
        y = np.random.default_rng(seed).normal(size=500)
        var, es = empirical_var_es(y, 0.85)
        assert es >= var >= y.mean()

    @given(seed=st.integers(0, 2**31), alpha=st.floats(0.51, 0.99))
    def test_empirical_es_lipschitz(self, seed, alpha):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=300)
        b = a + rng.normal(scale=rng.uniform(0.01, 2), size=300)
        ea, eb = empirical_var_es(a, alpha)[1], empirical_var_es(b, alpha)[1]
        assert abs(ea - eb) <= np.mean(np.abs(a - b)) / (1 - alpha) + 1e-12

    @given(seed=st.integers(0, 2**31), alpha=st.floats(0.55, 0.95))
    def test_pinball_minimised_at_empirical_quantile(self, seed, alpha):
        y = np.random.default_rng(seed).normal(size=101)
        grid = np.linspace(-4, 4, 4001)
        obj = [np.mean(np.maximum(y - v, 0) + (1 - alpha) * v) for v in grid]
        q = np.sort(y)[int(np.ceil(alpha * len(y))) - 1]
        best = np.min(obj)
        at_q = np.mean(np.maximum(y - q, 0) + (1 - alpha) * q)
        assert at_q <= best + 1e-12
