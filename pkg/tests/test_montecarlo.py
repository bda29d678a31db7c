import math

import numpy as np
import pytest

from exactlms.closure import derive_model
from exactlms.config import ConfigError, make_config, preset_scenario
from exactlms.montecarlo import (
    SimulationResult,
    TrialPlan,
    block_rng,
    divergence_probability,
    run,
    sample,
)
from exactlms.numerics import iterate


def test_zero_fixed_point():
    cfg = make_config(2, 2, 1, [1.0, -0.9], [0.0, 0.0, 0.0], 0.1, 0.0)
    res = run(TrialPlan(cfg, 500, 50, seed=3))
    assert not res.mean_weights.any()
    assert not res.mse.any()
    assert res.diverged_trials == 0 and res.trials_completed == 500


def test_white_single_tap_matches_first_order_model():
    beta = 1e-3
    cfg = make_config(1, 1, 0, [1.0], [1.0], beta, 0.01)
    res = run(TrialPlan(cfg, 100_000, 501, seed=11))
    traj = iterate(derive_model(cfg, 1), beta, 500)
    for k in (10, 100, 500):
        diff = abs(res.mean_weights[k, 0] - traj.outputs["mean_w_0"][k])
        assert diff <= 3 * res.standard_error_weights[k, 0]


def test_small_step_asymptotes_are_ordered():
    cfg = preset_scenario("config1", 3, 2, 2, beta=0.004)
    res = run(TrialPlan(cfg, 2000, 3000, seed=5))
    final = res.mean_weights[-1]
    assert final[0] > final[1] > final[2]
    assert np.min(np.diff(final[::-1])) > 0.1


@pytest.mark.parametrize("dist,fourth", [("gaussian-unit", 3.0), ("laplacian-unit", 6.0)])
def test_sampler_moments(dist, fourth):
    x = sample(dist, block_rng(17, 0), 10_000_000)
    assert abs(x.mean()) < 3e-3
    assert x.var() == pytest.approx(1.0, rel=0.01)
    assert np.mean(x**4) == pytest.approx(fourth, rel=0.02)


def test_sampler_rejects_unknown():
    with pytest.raises(ConfigError):
        sample("cauchy", block_rng(0, 0), 3)


def test_determinism_across_workers():
    cfg = preset_scenario("config2", 2, 2, 2, beta=0.1)
    plan = TrialPlan(cfg, 3000, 40, seed=123, block_size=500)
    a = run(plan)
    b = run(plan, workers=4)
    for field in ("mean_weights", "mse", "standard_error_mse", "standard_error_weights"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert a.diverged_trials == b.diverged_trials


def test_seed_changes_result():
    cfg = preset_scenario("config1", 1, 2, 1, beta=0.05)
    a = run(TrialPlan(cfg, 1000, 10, seed=1))
    b = run(TrialPlan(cfg, 1000, 10, seed=2))
    assert not np.array_equal(a.mse, b.mse)


def test_standard_error_scaling():
    cfg = preset_scenario("config1", 1, 2, 1, beta=0.05)
    a = run(TrialPlan(cfg, 20_000, 100, seed=9))
    b = run(TrialPlan(cfg, 40_000, 100, seed=9))
    ratio = np.median(b.standard_error_mse[1:] / a.standard_error_mse[1:])
    assert ratio == pytest.approx(1 / math.sqrt(2), rel=0.2)


def test_diverged_trials_are_excluded():
    cfg = preset_scenario("config1", 1, 2, 1, beta=0.35, distribution="laplacian")
    res = run(TrialPlan(cfg, 4000, 300, seed=4))
    assert 0 < res.diverged_trials < 4000
    assert res.trials_completed + res.diverged_trials == 4000
    assert np.all(np.isfinite(res.mse)) and np.all(res.mse >= 0)
    assert np.all(np.abs(res.mean_weights) <= 10)


def test_divergence_probability_extremes_and_monotone():
    cfg = preset_scenario("config1", 1, 2, 1)
    table = divergence_probability(cfg, [0.01, 0.2, 0.3, 0.4, 1.5], 10_000, 1000, seed=1)
    probs = [p for _, p in table]
    assert probs[0] == 0.0
    assert probs[-1] == 1.0
    assert all(b >= a - 0.02 for a, b in zip(probs, probs[1:]))


def test_plan_validation():
    cfg = preset_scenario("config1", 1, 1, 0)
    for kw in (dict(trials=0), dict(iterations=0), dict(divergence_threshold=0.0), dict(seed=-1)):
        args = dict(cfg=cfg, trials=10, iterations=10)
        args.update(kw)
        with pytest.raises(ConfigError):
            TrialPlan(**args)


def test_custom_distribution_cannot_be_simulated():
    cfg = make_config(1, 1, 0, [1.0], [1.0], 0.1, 0.0, "custom", custom_moments={2: 1.0, 4: 2.0})
    with pytest.raises(ConfigError):
        run(TrialPlan(cfg, 10, 10))


def test_result_properties():
    res = SimulationResult(np.zeros((3, 1)), np.zeros(3), 1, 3, np.zeros(3))
    assert res.iterations == 3
    assert res.divergence_fraction == 0.25
