"""Shared oracles and generators for the test suite."""

import numpy as np

from popo.gap import EmpiricalModel, TabularMDP, TabularPolicy, empirical_model


def make_random_mdp(rng, n_states=5, n_actions=2, n_rewards=3, gamma=0.9,
                    reward_scale=1.0) -> TabularMDP:
    p = rng.dirichlet(np.ones(n_states * n_rewards), size=(n_states, n_actions))
    p = p.reshape(n_states, n_actions, n_states, n_rewards)
    rewards = reward_scale * rng.uniform(-1.0, 1.0, size=n_rewards)
    rho0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(p=p, reward_support=rewards, rho0=rho0, gamma=gamma)


def make_random_policy(rng, n_states, n_actions) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


def value_iteration(mdp: TabularMDP, policy: TabularPolicy, tol=1e-12, max_iters=200_000):
    """Independent fixed-point oracle for exact policy evaluation."""
    r_sa = np.einsum("sakr,r->sa", mdp.p, mdp.reward_support)
    r_pi = np.einsum("sa,sa->s", policy.probs, r_sa)
    p_pi = np.einsum("sa,sak->sk", policy.probs, mdp.p.sum(axis=3))
    v = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        v_next = r_pi + mdp.gamma * p_pi @ v
        if np.max(np.abs(v_next - v)) < tol:
            return v_next
        v = v_next
    raise RuntimeError("value iteration did not converge")


def sample_transitions(mdp: TabularMDP, rng, per_pair: int) -> np.ndarray:
    """i.i.d. draws of (s', r) for every (s, a), per_pair samples each."""
    rows = []
    n_out = mdp.n_states * mdp.n_rewards
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            flat = mdp.p[s, a].reshape(-1)
            draws = rng.choice(n_out, size=per_pair, p=flat)
            s2, r = np.divmod(draws, mdp.n_rewards)
            rows.append(np.column_stack([np.full(per_pair, s), np.full(per_pair, a), r, s2]))
    return np.concatenate(rows, axis=0)


def model_from_true(mdp: TabularMDP) -> EmpiricalModel:
    """EmpiricalModel whose p_hat equals the true p bitwise (full coverage)."""
    covered = np.ones((mdp.n_states, mdp.n_actions), dtype=bool)
    counts = np.ones(mdp.p.shape, dtype=np.int64)  # placeholder; p_hat is what matters
    return EmpiricalModel(counts=counts, p_hat=mdp.p.copy(), covered=covered)


def one_state_mdp(true_reward=1.0, gamma=0.5) -> tuple[TabularMDP, TabularPolicy]:
    """1 state, 1 action, deterministic self-loop; reward support [r, 0]."""
    p = np.zeros((1, 1, 1, 2))
    p[0, 0, 0, 0] = 1.0
    mdp = TabularMDP(p=p, reward_support=np.array([true_reward, 0.0]),
                     rho0=np.array([1.0]), gamma=gamma)
    return mdp, TabularPolicy(np.array([[1.0]]))


def dataset_model(transitions, mdp: TabularMDP) -> EmpiricalModel:
    return empirical_model(np.asarray(transitions), mdp.n_states, mdp.n_actions, mdp.n_rewards)
