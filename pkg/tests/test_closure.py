import math

import numpy as np
import pytest
from scipy.stats import binom, norm

from exactlms.closure import (
    ClosureCapExceeded,
    count_equations,
    derive_model,
    mean_weight_functionals,
    mse_functional,
)
from exactlms.config import MomentOrderError, make_config, moment_order_bound, preset_scenario
from exactlms.model import load_model, model_to_dict, save_model
from exactlms.montecarlo import TrialPlan, run
from exactlms.numerics import iterate, steady_state


def random_case(rng):
    """A (1,2,1) setup with arbitrary b, tail, noise variance and moment table."""
    b0, b1 = rng.uniform(-1.5, 1.5, 2)
    wbar = rng.uniform(-2, 2)
    g = {0: 1.0}
    for n in range(2, moment_order_bound(1, 2, 1, 2) + 1, 2):
        g[n] = g[n - 2] * rng.uniform(n - 1.5, n + 1.5)
    cfg = make_config(1, 2, 1, [b0, b1], [rng.uniform(-2, 2), wbar], 0.1,
                      rng.uniform(0, 0.5), "custom", custom_moments=g)
    return cfg, b0, b1, wbar, g


def row_of(model, name, beta):
    i = model.index_of(name)
    A = model.transition(beta).toarray()
    return {str(model.variables[j]): A[i, j] for j in np.flatnonzero(A[i])}, model.forcing(beta)[i]


def close(got: dict, want: dict, rel=1e-12):
    want = {k: v for k, v in want.items() if v != 0}
    assert set(got) == set(want)
    for k in want:
        assert got[k] == pytest.approx(want[k], rel=rel, abs=1e-14)


W = "E[wt0(k)]"
U2W = "E[u^2(k-1) wt0(k)]"
W2 = "E[wt0^2(k)]"
U2W2 = "E[u^2(k-1) wt0^2(k)]"
U11W = "E[u(k-1) u(k-2) wt0(k)]"
U4W2 = "E[u^4(k-1) wt0^2(k)]"
U4W = "E[u^4(k-1) wt0(k)]"
U31W = "E[u^3(k-1) u(k-2) wt0(k)]"


def test_first_order_121_variables():
    cfg = preset_scenario("config1", 1, 2, 1)
    model = derive_model(cfg, 1)
    assert [str(v) for v in model.variables] == [W, U2W]


@pytest.mark.parametrize("seed", range(5))
def test_first_order_121_matches_printed_matrices(seed):
    rng = np.random.default_rng(seed)
    cfg, b0, b1, wbar, g = random_case(rng)
    model = derive_model(cfg, 1)
    beta = rng.uniform(0.001, 0.5)
    A = model.transition(beta).toarray()
    b = model.forcing(beta)
    A_ref = np.array([
        [1 - beta * b0**2 * g[2], -beta * b1**2],
        [g[2] - beta * b0**2 * g[4], -beta * b1**2 * g[2]],
    ])
    b_ref = np.array([-beta * b0 * b1 * wbar * g[2], -beta * b0 * b1 * wbar * g[2] ** 2])
    np.testing.assert_allclose(A, A_ref, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(b, b_ref, rtol=1e-12, atol=1e-15)
    assert model.A2.nnz == 0 and not np.any(model.f2)


def test_second_order_121_variables():
    model = derive_model(preset_scenario("config1", 1, 2, 1), 2)
    assert sorted(str(v) for v in model.variables) == sorted(
        [W2, U2W2, U2W, W, U11W, U4W2, U4W, U31W]
    )
    assert str(model.variables[0]) == W2


@pytest.mark.parametrize("seed", range(5))
def test_second_order_121_matches_printed_recursions(seed):
    rng = np.random.default_rng(100 + seed)
    cfg, b0, b1, wb, g = random_case(rng)
    s2 = cfg.noise_variance
    model = derive_model(cfg, 2)
    be = rng.uniform(0.001, 0.5)

    got, const = row_of(model, W2, be)
    close(got, {
        W2: b0**4 * be**2 * g[4] + 1 - 2 * b0**2 * g[2] * be,
        U2W2: 6 * b0**2 * be**2 * b1**2 * g[2] - 2 * b1**2 * be,
        U2W: 6 * b0**3 * be**2 * wb * b1 * g[2] - 2 * b0 * wb * be * b1,
        U11W: 6 * b0**2 * be**2 * b1**2 * wb * g[2] - 2 * b1**2 * wb * be,
        U4W2: b1**4 * be**2,
        U4W: 2 * b1**3 * be**2 * b0 * wb,
        U31W: 2 * b1**4 * be**2 * wb,
    })
    want = (b0**4 * wb**2 * g[2] ** 2 + b0**2 * wb**2 * b1**2 * g[4]
            + b1**2 * wb**2 * b0**2 * g[2] ** 2 + b1**4 * wb**2 * g[2] ** 2
            + b0**2 * s2 * g[2] + b1**2 * s2 * g[2]) * be**2
    assert const == pytest.approx(want, rel=1e-12)

    got, const = row_of(model, U11W, be)
    close(got, {U2W: -2 * b0 * b1 * be * g[2]})
    assert const == pytest.approx(-b0**2 * wb * be * g[2] ** 2, rel=1e-12)

    got, const = row_of(model, U31W, be)
    close(got, {U2W: -2 * b0 * b1 * be * g[4]})
    assert const == pytest.approx(-b0**2 * wb * be * g[4] * g[2], rel=1e-12)

    got, const = row_of(model, U4W, be)
    close(got, {U2W: -b1**2 * be * g[4], W: g[4] - b0**2 * be * g[6]})
    assert const == pytest.approx(-b0 * wb * be * b1 * g[4] * g[2], rel=1e-12)

    got, const = row_of(model, U4W2, be)
    close(got, {
        W2: b0**4 * be**2 * g[8] + g[4] - 2 * b0**2 * g[6] * be,
        U2W2: 6 * b0**2 * be**2 * b1**2 * g[6] - 2 * b1**2 * be * g[4],
        U2W: 6 * b0**3 * be**2 * wb * b1 * g[6] - 2 * b0 * wb * be * b1 * g[4],
        U11W: 6 * b0**2 * be**2 * b1**2 * wb * g[6] - 2 * b1**2 * wb * be * g[4],
        U4W2: b1**4 * be**2 * g[4],
        U4W: 2 * b1**3 * be**2 * b0 * wb * g[4],
        U31W: 2 * b1**4 * be**2 * wb * g[4],
    })


def test_white_sufficient_order_first_order():
    cfg = make_config(1, 1, 0, [1.0], [1.0], 0.1, 0.01)
    model = derive_model(cfg, 1)
    assert model.dim == 1
    assert model.transition(0.1).toarray() == pytest.approx(np.array([[0.9]]))
    assert model.forcing(0.1) == pytest.approx([0.0])


@pytest.mark.parametrize("n,m,p", [(1, 1, 2), (2, 1, 3), (3, 1, 1)])
def test_white_input_forcing_is_zero(n, m, p):
    model = derive_model(preset_scenario("config1", n, m, p), 1)
    assert not np.any(model.f0) and not np.any(model.f1) and not np.any(model.f2)


@pytest.mark.parametrize(
    "n,m,count",
    [(1, 1, 1), (1, 2, 2), (1, 3, 7), (2, 2, 12), (2, 3, 55), (3, 2, 74), (4, 2, 451), (3, 4, 2003)],
)
def test_first_order_counts(n, m, count):
    assert count_equations(n, m, 1, 1) == count


@pytest.mark.parametrize("n,m", [(1, 3), (2, 2), (3, 2)])
def test_first_order_count_independent_of_p(n, m):
    assert len({count_equations(n, m, p, 1) for p in range(4)}) == 1


def test_second_order_counts():
    assert count_equations(1, 2, 1, 2) == 8
    assert count_equations(1, 6, 1, 2) == 33752


def test_count_matches_model_dimension():
    for n, m, p, order in [(2, 2, 1, 1), (2, 2, 2, 2), (1, 3, 1, 2)]:
        cfg = preset_scenario("config1", n, m, p)
        assert derive_model(cfg, order).dim == count_equations(n, m, p, order)


def test_cap():
    with pytest.raises(ClosureCapExceeded) as info:
        count_equations(3, 3, 1, 2, cap=100)
    assert info.value.reached > 100
    with pytest.raises(ClosureCapExceeded):
        derive_model(preset_scenario("config1", 2, 2, 1), 2, cap=10)


def test_moment_order_unavailable():
    cfg = make_config(1, 2, 1, [1.0, 0.5], [1.0, 1.0], 0.1, 0.0, moment_order=4)
    with pytest.raises(MomentOrderError):
        derive_model(cfg, 2)


def test_determinism():
    cfg = preset_scenario("config2", 2, 2, 2, distribution="laplacian")
    a, b = derive_model(cfg, 2), derive_model(cfg, 2)
    assert model_to_dict(a) == model_to_dict(b)


@pytest.mark.parametrize("n,m,p", [(1, 2, 1), (2, 2, 2), (2, 3, 1)])
def test_first_order_variables_embedded_in_second(n, m, p):
    cfg = preset_scenario("config1", n, m, p)
    first = {v.key for v in derive_model(cfg, 1).variables}
    second = {v.key for v in derive_model(cfg, 2).variables}
    assert first <= second


def test_beta_degree_bounds():
    cfg = preset_scenario("config1", 2, 2, 1)
    assert derive_model(cfg, 1).beta_degree() == (1, 1)
    assert derive_model(cfg, 2).beta_degree()[0] <= 2
    assert derive_model(cfg, 2).beta_degree()[1] <= 2


def test_mse_functional_121():
    b0, b1, wb, s2 = 0.8, -0.6, 1.7, 0.03
    cfg = make_config(1, 2, 1, [b0, b1], [1.0, wb], 0.1, s2)
    model = derive_model(cfg, 2)
    out = model.outputs["mse"]
    coeffs = {str(model.variables[j]): out.row[j] for j in np.flatnonzero(out.row)}
    close(coeffs, {W2: b0**2, U2W2: b1**2, U2W: 2 * b0 * b1 * wb, U11W: 2 * b1**2 * wb})
    assert out.constant_at(0.3) == pytest.approx((b0**2 + b1**2) * wb**2 + s2, rel=1e-14)


def test_mse_functional_zero_deviation_is_noise_floor():
    cfg = make_config(2, 2, 0, [1.0, 0.4], [1.0, 2.0], 0.1, 0.07)
    model = derive_model(cfg, 2)
    assert model.outputs["mse"].evaluate(np.zeros(model.dim), 0.1) == pytest.approx(0.07)


def test_mse_functional_white_two_taps():
    cfg = make_config(2, 1, 0, [1.0], [1.0, 1.0], 0.1, 0.02)
    model = derive_model(cfg, 2)
    out = mse_functional(cfg, model)
    coeffs = {str(model.variables[j]): out.row[j] for j in np.flatnonzero(out.row)}
    assert coeffs == {"E[wt0^2(k)]": 1.0, "E[u^2(k-1) wt1^2(k)]": 1.0}
    assert out.constant == (0.02, 0.0, 0.0)


def test_mse_functional_frozen_deviation_against_sampling():
    # e(k) with a fixed deviation vector, averaged over sampled inputs
    cfg = make_config(2, 1, 0, [1.0], [1.0, 1.0], 0.1, 0.02)
    model = derive_model(cfg, 2)
    wt = np.array([0.3, -0.7])
    y = np.array([np.prod([wt[i] ** q for i, q in v.w_part]) *
                  np.prod([cfg.moments.gamma(p) for _, p in v.u_part]) for v in model.variables])
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1_000_000, 2))
    e = x @ wt + rng.standard_normal(1_000_000) * math.sqrt(0.02)
    se = (e**2).std() / 1000
    assert abs(model.outputs["mse"].evaluate(y, 0.1) - (e**2).mean()) < 3 * se


def test_mean_weight_functionals():
    cfg = preset_scenario("config1", 1, 2, 1)
    model = derive_model(cfg, 1)
    y = np.zeros(model.dim)
    y[model.index_of(W)] = 0.25
    assert model.outputs["mean_w_0"].evaluate(y, 0.1) == pytest.approx(0.75)
    assert len(mean_weight_functionals(cfg, model)) == 1


def test_white_input_mean_converges_to_plant():
    cfg = make_config(2, 1, 1, [1.0], [0.5, -1.0, 2.0], 0.05, 0.01)
    out = steady_state(derive_model(cfg, 1), 0.05)
    assert out["mean_w_0"] == pytest.approx(0.5, abs=1e-12)
    assert out["mean_w_1"] == pytest.approx(-1.0, abs=1e-12)


def test_initial_state():
    cfg = make_config(1, 2, 1, [1.0, 0.5], [2.0, 1.0], 0.1, 0.0, "laplacian")
    model = derive_model(cfg, 2)
    assert model.initial[model.index_of(U4W2)] == 6.0 * 4.0
    assert model.initial[model.index_of(U31W)] == 0.0
    assert model.initial[model.index_of(W)] == 2.0


def test_model_export_round_trip(tmp_path):
    cfg = preset_scenario("config1", 1, 3, 1)
    model = derive_model(cfg, 2)
    path = tmp_path / "model.json"
    save_model(model, path)
    back = load_model(path)
    assert model_to_dict(back) == model_to_dict(model)
    text = path.read_text()
    save_model(back, path)
    assert path.read_text() == text


@pytest.mark.parametrize("n,m,p", [(1, 1, 1), (1, 2, 1), (2, 1, 1)])
def test_model_agrees_with_simulation(n, m, p):
    beta = 0.03
    cfg = preset_scenario("config1", n, m, p, beta=beta)
    model = derive_model(cfg, 2)
    traj = iterate(model, beta, 199)
    res = run(TrialPlan(cfg, 1_000_000, 200, seed=7))
    assert res.diverged_trials == 0
    checks = [(traj.outputs["mse"], res.mse, res.standard_error_mse)]
    for i in range(n):
        checks.append((traj.outputs[f"mean_w_{i}"], res.mean_weights[:, i], res.standard_error_weights[:, i]))
    z = []
    for model_curve, mc, se in checks:
        exact = se == 0
        assert np.all(np.abs(model_curve - mc)[exact] <= 1e-12)
        z.append((model_curve - mc)[~exact] / se[~exact])
    z = np.concatenate(z)
    # every point within 3 SE would fail a correct model ~40% of the time over
    # hundreds of points; bound the exceedances by the binomial 99.9% quantile
    allowed = binom.ppf(0.999, len(z), 2 * norm.sf(3.0))
    assert np.sum(np.abs(z) > 3) <= allowed
    assert np.abs(z).max() < 4.5
    assert abs(z.mean()) < 4 / math.sqrt(len(z)) * 3
