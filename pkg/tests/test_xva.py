import numpy as np
import pytest
from hypothesis import given, strategies as st

from pathxva.market import simulate_defaults
from pathxva.nn import TrainConfig, load_heads, save_heads
from pathxva.xva import (XvaConfig, collect_heads, compute_cva, explicit_from_heads, funding_term,
                         fva_label, kva_label, loss_increment, settlement, solve_xva, solve_xva_explicit,
                         solve_xva_picard, xva_driver)

from conftest import small_cube, small_model_dict, with_arrays

QUICK = TrainConfig(epochs=2, batch_size=256, learning_rate=1e-2)


@pytest.fixture(scope="module")
def base_cube():
    return small_cube(small_model_dict(n_clients=2), theta=4, n_outer=512, n_inner=4, seed=21)


def flat_credit_cube(cube, lam, n_inner_seed=0):
    """One client, unit exposure, no discounting, constant default intensity."""
    n1 = cube.grid.n + 1
    P = cube.n_outer
    hazard = np.broadcast_to(lam * cube.grid.times[None, :, None], (P, n1, 1)).copy()
    return with_arrays(cube, mtm=np.ones((P, n1, 1)), discount=np.ones((P, n1)), cum_hazard=hazard,
                       default_index=simulate_defaults(hazard, cube.n_inner, 77 + n_inner_seed))


class TestElementaryMaps:
    @given(seed=st.integers(0, 2**31), t=st.floats(0, 5), hurdle=st.floats(0, 0.3))
    def test_driver_matches_transcription(self, seed, t, hurdle):
        rng = np.random.default_rng(seed)
        S, C = 7, 3
        y = rng.normal(size=(S, 2))
        rho, spread, cva = rng.normal(size=S), rng.uniform(0, 0.05, S), rng.normal(size=S)
        alive, mtm = (rng.random((S, C)) < 0.7).astype(float), rng.normal(size=(S, C))
        got = xva_driver(t, y, rho, spread, alive, mtm, cva, hurdle)
        for s in range(S):
            exposure = sum(alive[s, c] * mtm[s, c] for c in range(C))
            capital = max(rho[s], np.exp(hurdle * t) * y[s, 1])
            f1 = spread[s] * max(exposure - cva[s] - y[s, 0] - capital, 0.0)
            f2 = hurdle * max(np.exp(-hurdle * t) * rho[s], y[s, 1])
            # the positive part cancels large terms, so compare against their scale
            scale = abs(exposure) + abs(cva[s]) + abs(y[s, 0]) + abs(capital)
            assert abs(got[s, 0] - f1) <= 1e-14 * spread[s] * scale
            assert got[s, 1] == pytest.approx(f2, rel=1e-14, abs=1e-300)

    def test_labels(self):
        d, f, k, cap = np.array([0.99]), np.array([2.0]), np.array([3.0]), np.array([5.0])
        assert fva_label(d, f, np.array([0.1]))[0] == pytest.approx(0.99 * 2.0 + 0.1)
        assert kva_label(d, 0.25, 0.1, k, cap)[0] == pytest.approx(np.exp(-0.025) * 0.99 * (3.0 + 0.025 * 5.0))

    def test_funding_and_settlement(self):
        alive = np.array([[1.0, 0.0]])
        mtm = np.array([[10.0, 50.0]])
        assert funding_term(0.5, np.array([0.02]), alive, mtm, np.array([1.0]), np.array([2.0]),
                            np.array([3.0]))[0] == pytest.approx(0.5 * 0.02 * 4.0)
        assert funding_term(0.5, np.array([0.02]), alive, mtm, np.array([9.0]), np.array([2.0]),
                            np.array([3.0]))[0] == 0.0
        assert settlement(np.array([[-4.0, 6.0]]), np.array([[1.0, 1.0]]))[0] == 6.0

    def test_loss_increment_zero_when_nothing_moves(self):
        z = np.zeros(4)
        assert np.array_equal(loss_increment(np.ones(4), z, z, z, z, z, z), z)

    @given(seed=st.integers(0, 2**31))
    def test_deflated_increments_telescope(self, seed):
        rng = np.random.default_rng(seed)
        n = 9
        beta = np.cumprod(np.r_[1.0, rng.uniform(1.0, 1.02, n)])
        cva, fva = np.r_[rng.uniform(0, 5, n), 0.0], np.r_[rng.uniform(0, 5, n), 0.0]
        settled, fund = rng.uniform(0, 3, n), rng.uniform(0, 0.1, n)
        total = sum(beta[i] * loss_increment(beta[i + 1] / beta[i], cva[i], cva[i + 1], settled[i],
                                             fva[i], fva[i + 1], fund[i]) for i in range(n))
        expected = -cva[0] - fva[0] + sum(beta[i + 1] * settled[i] + beta[i] * fund[i] for i in range(n))
        assert total == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("kw", [dict(alpha=0.5), dict(hurdle_rate=-1), dict(picard_iters=0),
                                    dict(scheme="implicit"), dict(cva_mode="x")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            XvaConfig(**kw)


class TestCva:
    @pytest.mark.parametrize("mode", ["intensity", "indicator"])
    def test_flat_credit_closed_form(self, base_cube, mode):
        lam = 0.2
        cube = flat_credit_cube(base_cube, lam)
        res = compute_cva(cube, XvaConfig(cva_mode=mode), QUICK)
        T = cube.grid.horizon
        se = res.labels0.std() / np.sqrt(len(res.labels0))
        assert abs(res.cva0 - (1 - np.exp(-lam * T))) < 4 * max(se, 1e-12)

    def test_intensity_labels_have_lower_variance(self, base_cube):
        cube = flat_credit_cube(base_cube, 0.2)
        a = compute_cva(cube, XvaConfig(cva_mode="intensity"), QUICK)
        b = compute_cva(cube, XvaConfig(cva_mode="indicator"), QUICK)
        assert a.labels0.var() < b.labels0.var()
        assert abs(a.cva0 - b.cva0) < 4 * np.sqrt((a.labels0.var() + b.labels0.var()) / len(a.labels0))

    def test_zero_intensity_gives_zero_cva(self, base_cube):
        cube = flat_credit_cube(base_cube, 0.0)
        res = compute_cva(cube, XvaConfig(), QUICK)
        assert np.all(res.values == 0.0)


class TestDegenerate:
    def test_zero_funding_spread(self, base_cube):
        d = np.array(base_cube.diffusions)
        d[..., -1] = 0.0
        cube = with_arrays(base_cube, diffusions=d)
        for scheme in ("explicit", "picard"):
            surf = solve_xva(cube, XvaConfig(scheme=scheme, picard_iters=2), QUICK)[-1]
            assert np.max(np.abs(surf.fva)) < 1e-6

    def test_zero_hurdle_rate(self, base_cube):
        for scheme in ("explicit", "picard"):
            surf = solve_xva(base_cube, XvaConfig(scheme=scheme, hurdle_rate=0.0, picard_iters=2), QUICK)[-1]
            assert np.max(np.abs(surf.kva)) < 1e-6

    def test_first_picard_iterate_has_no_kva(self, base_cube):
        cva = compute_cva(base_cube, XvaConfig(), QUICK)
        first = solve_xva_picard(base_cube, cva, XvaConfig(scheme="picard", picard_iters=1), QUICK)[0]
        assert np.all(first.kva == 0.0)
        assert first.time0["FVA"] > 0


@pytest.fixture(scope="module")
def explicit_run(tiny_default_cube):
    cfg = XvaConfig()
    train = TrainConfig(epochs=24, batch_size=128, learning_rate=1e-2, lr_schedule="linear")
    cva = compute_cva(tiny_default_cube, cfg, train)
    return cfg, cva, solve_xva_explicit(tiny_default_cube, cva, cfg, train)


class TestStructure:
    def test_capital_dominates_var_and_kva_nonnegative(self, explicit_run, tiny_default_cube):
        # pathwise shares are regression noise at 256 paths; the acceptance suite measures them
        _, _, surf = explicit_run
        n = tiny_default_cube.grid.n
        for i in range(1, n):
            assert surf.ec[i].mean() >= surf.var[i].mean()
            assert surf.kva[i].mean() >= 0
        assert np.all(surf.fva[n] == 0) and np.all(surf.kva[n] == 0)
        assert surf.time0["EC"] >= 0 and surf.time0["KVA"] >= 0

    def test_heads_roundtrip(self, explicit_run, tiny_default_cube, tmp_path):
        cfg, cva, surf = explicit_run
        save_heads(tmp_path / "heads", collect_heads(cva, [surf]))
        cva2, surf2 = explicit_from_heads(tiny_default_cube, load_heads(tmp_path / "heads"), surf.time0, cfg)
        for name in ("fva", "kva", "var", "ec"):
            assert np.array_equal(getattr(surf2, name), getattr(surf, name)), name
        assert np.array_equal(cva2.values, cva.values)

    def test_missing_heads_reported(self, explicit_run, tiny_default_cube):
        cfg, cva, surf = explicit_run
        heads = [h for h in collect_heads(cva, [surf]) if h.meta["target"] != "kva"]
        with pytest.raises(ValueError, match="kva"):
            explicit_from_heads(tiny_default_cube, heads, surf.time0, cfg)

    def test_profile_rows(self, explicit_run):
        _, _, surf = explicit_run
        rows = surf.profile_rows(theta=3)
        assert {r["metric"] for r in rows} == {"CVA", "FVA", "KVA", "EC"}
        assert all(r["scheme"] == "explicit" for r in rows)
