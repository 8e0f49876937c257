import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from starbench.attacks import AttackSpec, run_attack
from starbench.envs import make_env
from starbench.nets import ConfigError, GaussianPolicy, RunningMeanStd, ValueNet, Victim
from starbench.ppo import Trajectory, compute_gae
from starbench.star import (StarAgent, StarBatch, StarConfig, StarEpisode, StarError, mask_log_likelihood,
                            mask_objective, run_star_episode, star_perturb, star_policy_update, star_returns,
                            star_value_update, train_star)


@pytest.fixture(scope="module")
def victim_policy():
    return GaussianPolicy(4, 2, hidden=(16,), rng=np.random.default_rng(0))


def agent_for(obs_dim=4, **cfg):
    return StarAgent(obs_dim, StarConfig(**{"epsilon": 0.2, "mask_hidden": (8,), "value_hidden": (8,), **cfg}),
                     seed=0)


class ZeroValue:
    def __call__(self, s):
        s = np.asarray(s)
        return np.zeros(s.shape[:-1]) if s.ndim > 1 else 0.0


@pytest.mark.parametrize("kwargs", [{"alpha": 0.0}, {"alpha": 1.5}, {"beta": 1.0}, {"beta": 0.0},
                                    {"epsilon": 0.0}, {"entropy_sign": "other"}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        StarConfig(**kwargs)


def test_zero_gradient_gives_zero_perturbation():
    pi = GaussianPolicy(4, 2, hidden=(4,), rng=np.random.default_rng(0))
    for k in pi.params:
        if k != "log_std":
            pi.params[k][...] = 0.0
    sample = star_perturb(agent_for(), pi, np.ones(4), np.random.default_rng(0))
    np.testing.assert_array_equal(sample.eta, np.zeros(4))


def test_full_mask_spends_beta_epsilon(victim_policy):
    agent = agent_for(beta=0.75)
    agent.mask_net.params["l1.b"][...] = 60.0
    sample = star_perturb(agent, victim_policy, np.ones(4), np.random.default_rng(0))
    np.testing.assert_array_equal(sample.mask, np.ones(4))
    np.testing.assert_array_equal(np.abs(sample.eta), np.full(4, 0.75 * 0.2))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), beta=st.floats(0.01, 0.99), eps=st.floats(1e-3, 2.0),
       bias=st.floats(-5, 5), deterministic=st.booleans())
def test_budget_property(victim_policy, seed, beta, eps, bias, deterministic):
    agent = agent_for(beta=beta, epsilon=eps)
    rng = np.random.default_rng(seed)
    agent.mask_net.params["l1.b"][...] = bias + rng.normal(size=4)
    eta = star_perturb(agent, victim_policy, rng.normal(size=(5, 4)), rng, deterministic).eta
    assert np.max(np.abs(eta)) <= max(beta, 1 - beta) * eps


def test_half_beta_matches_half_budget_fgsm_bit_exactly(victim_policy):
    rng = np.random.default_rng(3)
    s = rng.normal(size=(8, 4))
    z = rng.standard_normal((8, 4))
    agent = agent_for(beta=0.5, epsilon=0.3)
    agent.mask_net.params["l1.b"][...] = rng.normal(size=4)
    star = star_perturb(agent, victim_policy, s, np.random.default_rng(1), probe_noise=z).eta
    fgsm = run_attack(AttackSpec("fgsm", 0.15), victim_policy, s, np.random.default_rng(2), probe_noise=z).eta
    assert np.array_equal(star, fgsm)


def test_eval_mask_is_deterministic(victim_policy):
    agent = agent_for()
    agent.mask_net.params["l1.w"][...] = np.random.default_rng(0).normal(size=(8, 4))
    s = np.random.default_rng(1).normal(size=(3, 4))
    z = np.zeros((3, 4))
    a = star_perturb(agent, victim_policy, s, np.random.default_rng(0), True, z)
    b = star_perturb(agent, victim_policy, s, np.random.default_rng(5), True, z)
    np.testing.assert_array_equal(a.eta, b.eta)


def test_mask_log_likelihood_array_and_graph_agree():
    p = np.array([[0.2, 0.7, 0.5]])
    b = np.array([[1.0, 1.0, 0.0]])
    expected = np.log(0.2) + np.log(0.7) + np.log(0.5)
    assert mask_log_likelihood(p, b)[0] == pytest.approx(expected)
    from starbench import autodiff as ad
    assert mask_log_likelihood(ad.Var(p), b).data[0] == pytest.approx(expected)


def _episode(rewards, terminal, states=None, final=None):
    T = len(rewards)
    ep = StarEpisode()
    ep.states = list(states if states is not None else np.zeros((T, 1)))
    ep.rewards = list(rewards)
    ep.masks = ep.directions = ep.actions = list(np.zeros((T, 1)))
    ep.final_state = final if final is not None else np.zeros(1)
    ep.terminal, ep.complete = terminal, True
    return ep


def test_returns_with_zero_value():
    ep = star_returns(_episode([1.0, 1.0], True), ZeroValue(), 0.5)
    assert ep.returns[0] == 1.5 and ep.advantages[0] == 1.5 and ep.returns[1] == 1.0


def test_single_step_bootstraps_final_value():
    value = lambda s: np.asarray(s)[..., 0] * 2.0
    ep = star_returns(_episode([0.5], False, states=np.array([[1.0]]), final=np.array([3.0])), value, 0.9)
    assert ep.returns[0] == pytest.approx(0.5 + 0.9 * 6.0)
    assert ep.advantages[0] == pytest.approx(0.5 + 0.9 * 6.0 - 2.0)


def test_incomplete_episode_rejected():
    ep = _episode([1.0], True)
    ep.complete = False
    with pytest.raises(StarError):
        star_returns(ep, ZeroValue(), 0.9)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 50), gamma=st.floats(0.0, 0.999), terminal=st.booleans(), seed=st.integers(0, 2**31 - 1))
def test_returns_equal_gae_lambda_one(T, gamma, terminal, seed):
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(T + 1, 3))
    rewards = rng.normal(size=T)
    value = ValueNet(3, (8,), rng)
    ep = star_returns(_episode(rewards, terminal, states[:-1], states[-1]), value, gamma)
    adv, ret = compute_gae(Trajectory(states, rewards, terminal), gamma, 1.0, value)
    np.testing.assert_allclose(ep.advantages, adv, rtol=0, atol=1e-10)
    np.testing.assert_allclose(ep.returns, ret, rtol=0, atol=1e-10)


def _batch(agent, victim_policy, n=64, seed=0, adv=None):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, 4))
    sample = star_perturb(agent, victim_policy, s, rng)
    return StarBatch(s, sample.mask, sample.direction, victim_policy.act(s), rng.normal(size=n),
                     rng.normal(size=n) if adv is None else adv)


def test_value_update_zero_loss_at_fit(victim_policy):
    agent = agent_for()
    batch = _batch(agent, victim_policy)
    batch.returns = agent.adv_value(batch.states)
    before = {k: v.copy() for k, v in agent.adv_value.params.items()}
    assert star_value_update(agent, batch) == pytest.approx(0.0, abs=1e-20)
    for k in before:
        np.testing.assert_allclose(agent.adv_value.params[k], before[k], atol=1e-12)


def test_value_update_overfits_fixed_batch(victim_policy):
    agent = agent_for(lr=1e-2)
    batch = _batch(agent, victim_policy)
    batch.returns = np.full(len(batch), 3.0) + 0.1 * np.random.default_rng(1).normal(size=len(batch))
    losses = [star_value_update(agent, batch) for _ in range(100)]
    assert np.mean(losses[-10:]) < 0.1 * np.mean(losses[:10])


def test_zero_advantage_zero_alpha_gives_zero_gradient(victim_policy):
    agent = agent_for()
    agent.config.alpha = 0.0  # outside the validated range on purpose: isolates the policy-gradient term
    batch = _batch(agent, victim_policy, adv=np.zeros(64))
    before = {k: v.copy() for k, v in agent.mask_net.params.items()}
    star_policy_update(agent, victim_policy, batch)
    for k in before:
        np.testing.assert_array_equal(agent.mask_net.params[k], before[k])


def test_positive_advantages_raise_taken_mask_likelihood(victim_policy):
    # uncentered scaling: with centering, an all-positive batch is no longer all-positive
    agent = agent_for(center_advantages=False)
    agent.config.alpha = 0.0
    agent.mask_net.params["l1.w"][...] = np.random.default_rng(4).normal(size=(8, 4))
    batch = _batch(agent, victim_policy, adv=np.random.default_rng(5).uniform(0.5, 2.0, 64))
    ll = lambda: mask_log_likelihood(agent.mask_net.probs(batch.states).data, batch.masks).mean()
    before = ll()
    star_policy_update(agent, victim_policy, batch)
    assert ll() > before


def test_regularizer_alone_lowers_mask_entropy(victim_policy):
    agent = agent_for(alpha=1.0, lr=1e-2)
    batch = _batch(agent, victim_policy, adv=np.zeros(64))

    def entropy():
        p = agent.mask_net.probs(batch.states).data
        return float(-np.mean(p * np.log(p) + (1 - p) * np.log(1 - p)))
    before = entropy()
    for _ in range(5):
        star_policy_update(agent, victim_policy, batch)
    assert entropy() < before


def test_entropy_sign_switch_flips_regularizer(victim_policy):
    a, b = agent_for(alpha=1.0), agent_for(alpha=1.0, entropy_sign="max_entropy")
    batch = _batch(a, victim_policy, adv=np.zeros(64))
    assert float(mask_objective(a, victim_policy, batch).data) == pytest.approx(
        -float(mask_objective(b, victim_policy, batch).data))


def _victim(env, seed=0):
    pi = GaussianPolicy(env.obs_dim, env.act_dim, hidden=(16,), rng=np.random.default_rng(seed))
    return Victim(pi, RunningMeanStd(env.obs_dim))


def test_zero_episodes_leave_agent_unchanged():
    env = make_env("pointgoal")
    agent = agent_for(env.obs_dim)
    before = {k: v.copy() for k, v in agent.mask_net.params.items()}
    agent, curve = train_star(agent, _victim(env), env, 0)
    assert curve == []
    for k in before:
        np.testing.assert_array_equal(agent.mask_net.params[k], before[k])


def test_episode_records_adversary_rewards_and_skips_prior_step():
    env = make_env("balancer", max_steps=30)
    victim = _victim(env)
    ep = run_star_episode(agent_for(env.obs_dim), victim, env, np.random.default_rng(0))
    assert ep.complete and len(ep) == env.t - 1
    assert np.max(np.abs(np.asarray(ep.etas))) <= 0.75 * 0.2


def test_training_is_deterministic_and_finite():
    env = make_env("pointgoal", max_steps=60)
    runs = []
    for _ in range(2):
        agent, curve = train_star(agent_for(env.obs_dim), _victim(env), env, 4, seed=3)
        runs.append((agent.mask_net.params["l1.w"].copy(), [c.adv_reward for c in curve]))
        # the first episode only warms up the value net, so no losses are reported for it
        assert np.isnan(curve[0].value_loss)
        assert all(np.isfinite(c.value_loss) for c in curve[1:])
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_checkpoint_round_trip(tmp_path, victim_policy):
    agent = agent_for(beta=0.6)
    agent.mask_net.params["l1.b"][...] = [0.5, -0.5, 1.0, 0.0]
    back = StarAgent.load(agent.save(tmp_path / "star.npz"))
    assert back.config.beta == 0.6 and back.config.mask_hidden == (8,)
    s = np.ones((2, 4))
    np.testing.assert_array_equal(back.mask_net.probs(s).data, agent.mask_net.probs(s).data)
    with pytest.raises(ConfigError):
        from starbench.nets import save_checkpoint
        StarAgent.load(save_checkpoint(tmp_path / "x.npz", {"policy": victim_policy}))
