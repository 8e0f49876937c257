import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from starbench import autodiff as ad
from starbench.attacks import (ITERATIVE, METHODS, PROBE_SCALE, AttackConfigError, AttackSpec, attack_loss,
                               benchmark_specs, loss_gradient, norm_of, project, run_attack)
from starbench.nets import GaussianPolicy


@pytest.fixture(scope="module")
def policy():
    return GaussianPolicy(5, 2, hidden=(16, 16), log_std_init=-0.5, rng=np.random.default_rng(0))


def linear_policy(obs_dim=4, act_dim=2, seed=0):
    """Mean is linear in the state, so the kl loss is a convex quadratic in eta."""
    pi = GaussianPolicy(obs_dim, act_dim, hidden=(), rng=np.random.default_rng(seed))
    pi.params["l0.w"][...] = np.random.default_rng(seed + 1).normal(size=(obs_dim, act_dim))
    return pi


@pytest.mark.parametrize("eta,norm,eps,expected", [
    ((3.0, 4.0), "l2", 1.0, (0.6, 0.8)),
    ((0.01, -0.02), "linf", 0.025, (0.01, -0.02)),
    ((0.1, -0.1), "linf", 0.025, (0.025, -0.025)),
    ((0.1, 0.1), "l2", 1.0, (0.1, 0.1)),
])
def test_project_examples(eta, norm, eps, expected):
    np.testing.assert_allclose(project(np.array(eta), norm, eps), expected, rtol=0, atol=1e-15)


def test_kl_loss_zero_at_clean_state(policy):
    s = np.random.default_rng(1).normal(size=5)
    assert float(attack_loss(policy, s, s, "kl").data) == 0.0


def test_neglogprob_at_clean_state_is_minus_peak_density(policy):
    s = np.random.default_rng(1).normal(size=5)
    expected = float(np.sum(policy.log_std().data)) + 0.5 * 2 * math.log(2 * math.pi)
    assert float(attack_loss(policy, s, s, "neglogprob").data) == pytest.approx(expected, abs=1e-13)


@pytest.mark.parametrize("kind", ["neglogprob", "kl"])
def test_loss_gradient_matches_finite_differences(policy, kind):
    rng = np.random.default_rng(2)
    s = rng.normal(size=5)
    x = s + 0.3 * rng.normal(size=5)
    err = ad.check_gradients(lambda v: attack_loss(policy, s, v, kind), x)
    assert err < 1e-4


def test_constant_policy_gives_zero_fgsm():
    pi = GaussianPolicy(3, 2, hidden=(4,), rng=np.random.default_rng(0))
    for k in pi.params:
        if k != "log_std":
            pi.params[k][...] = 0.0
    eta = run_attack(AttackSpec("fgsm", 0.1), pi, np.ones(3), np.random.default_rng(0)).eta
    np.testing.assert_array_equal(eta, np.zeros(3))


def test_fgsm_linf_is_full_budget_sign(policy):
    s = np.random.default_rng(3).normal(size=5)
    z = np.random.default_rng(4).standard_normal(5)
    eta = run_attack(AttackSpec("fgsm", 0.1), policy, s, np.random.default_rng(0), probe_noise=z).eta
    g = loss_gradient(policy, s, s + PROBE_SCALE * z, "neglogprob")
    np.testing.assert_array_equal(eta, 0.1 * np.sign(g))


def test_fgsm_l2_is_normalized_gradient(policy):
    s = np.random.default_rng(3).normal(size=5)
    z = np.random.default_rng(4).standard_normal(5)
    eta = run_attack(AttackSpec("fgsm", 0.5, "l2"), policy, s, np.random.default_rng(0), probe_noise=z).eta
    g = loss_gradient(policy, s, s + PROBE_SCALE * z, "neglogprob")
    np.testing.assert_allclose(eta, 0.5 * g / np.linalg.norm(g), atol=1e-15)


def test_fgsm_equals_one_step_pgd_without_start(policy):
    s = np.random.default_rng(5).normal(size=(4, 5))
    a = run_attack(AttackSpec("fgsm", 0.2), policy, s, np.random.default_rng(9)).eta
    b = run_attack(AttackSpec("pgd", 0.2, steps=1, init_scale=0.0), policy, s, np.random.default_rng(9)).eta
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("method", METHODS)
def test_deterministic_given_seed(policy, method):
    spec = AttackSpec(method, 0.1, steps=1 if method in ("fgsm", "random") else 5)
    s = np.random.default_rng(6).normal(size=5)
    a = run_attack(spec, policy, s, np.random.default_rng(42)).eta
    b = run_attack(spec, policy, s, np.random.default_rng(42)).eta
    np.testing.assert_array_equal(a, b)


def test_kl_pgd_iterates_are_monotone_on_convex_surrogate():
    pi = linear_policy()
    s = np.random.default_rng(7).normal(size=4)
    losses = []
    for k in range(1, 11):
        spec = AttackSpec("tpgd", 0.3, steps=k, step_size=0.03)
        eta = run_attack(spec, pi, s, np.random.default_rng(0), probe_scale=0.0).eta
        losses.append(float(attack_loss(pi, s, s + eta, "kl").data))
    assert all(b >= a - 1e-15 for a, b in zip(losses, losses[1:]))
    assert losses[-1] > losses[0]


def test_random_is_uniform_in_box(policy):
    eta = run_attack(AttackSpec("random", 0.5), policy, np.zeros((4000, 5)), np.random.default_rng(0)).eta
    assert np.abs(eta).max() <= 0.5
    assert abs(eta.mean()) < 0.01 and abs(eta.var() - 0.25 / 3) < 0.005


def test_batched_rows_are_independent_of_batch_order(policy):
    s = np.random.default_rng(9).normal(size=(3, 5))
    spec = AttackSpec("fgsm", 0.1)
    z = np.random.default_rng(1).standard_normal((3, 5))
    full = run_attack(spec, policy, s, np.random.default_rng(0), probe_noise=z).eta
    one = run_attack(spec, policy, s[1], np.random.default_rng(0), probe_noise=z[1]).eta
    np.testing.assert_array_equal(full[1], one)


@pytest.mark.parametrize("kwargs", [
    {"method": "nope", "epsilon": 0.1}, {"method": "fgsm", "epsilon": 0.0},
    {"method": "fgsm", "epsilon": 0.1, "steps": 10}, {"method": "random", "epsilon": 0.1, "steps": 2},
    {"method": "pgd", "epsilon": 0.1, "norm": "l1"}, {"method": "pgd", "epsilon": 0.1, "steps": 0},
    {"method": "pgd", "epsilon": 0.1, "loss": "ce"}, {"method": "eotpgd", "epsilon": 0.1, "eot_samples": 0},
])
def test_spec_validation(kwargs):
    with pytest.raises(AttackConfigError):
        AttackSpec(**kwargs)


def test_spec_defaults_and_round_trip():
    spec = AttackSpec("pgd", 0.1, steps=10)
    assert spec.alpha == pytest.approx(0.01) and spec.loss_kind == "neglogprob"
    assert AttackSpec("tpgd", 0.1, steps=2).loss_kind == "kl"
    assert AttackSpec("rfgsm", 0.1, steps=2).start_scale == 0.05
    assert AttackSpec.from_dict(spec.to_dict()) == spec
    assert spec.with_epsilon(0.3).epsilon == 0.3


def test_benchmark_spec_layout():
    specs = benchmark_specs(0.1)
    assert [s.method for s in specs[:2]] == ["random", "fgsm"]
    assert len(specs) == 2 + 2 * len(ITERATIVE)
    assert [s.steps for s in specs[2:4]] == [10, 20]


def test_non_finite_state_rejected(policy):
    with pytest.raises(AttackConfigError):
        run_attack(AttackSpec("fgsm", 0.1), policy, np.full(5, np.nan), np.random.default_rng(0))


@settings(max_examples=150, deadline=None)
@given(method=st.sampled_from(METHODS), norm=st.sampled_from(["linf", "l2"]),
       eps=st.floats(1e-3, 2.0), steps=st.integers(1, 6), seed=st.integers(0, 2**31 - 1),
       scale=st.floats(0.1, 20.0))
def test_budget_property(policy, method, norm, eps, steps, seed, scale):
    n = 1 if method in ("fgsm", "random") else steps
    spec = AttackSpec(method, eps, norm, steps=n)
    rng = np.random.default_rng(seed)
    s = scale * rng.normal(size=(3, 5))
    eta = run_attack(spec, policy, s, rng).eta
    assert np.all(norm_of(eta, norm) <= eps + 1e-9)
