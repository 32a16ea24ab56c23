"""Tabular estimation-gap analyzer.

Quantifies how far the value function computed under a dataset's empirical
transition model sits from the true value: delta(s) = V(s) - V_D(s), both by
direct subtraction of exact policy evaluations and through the Bellman-like
recursion delta = b + gamma * P_pi * delta, whose agreement the tests verify.

Rewards are restricted to a declared finite support so joint (s', r)
distributions are finite tensors; transitions are integer rows
(s, a, reward_index, s_next).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from popo.errors import CoverageError

_ATOL = 1e-12


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP with joint next-state/reward distribution p[s, a, s', r]."""

    p: np.ndarray  # [S, A, S, R] probabilities over (s', r)
    reward_support: np.ndarray  # [R] reward values
    rho0: np.ndarray  # [S] initial state distribution
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))
        object.__setattr__(self, "reward_support", np.asarray(self.reward_support, dtype=np.float64))
        object.__setattr__(self, "rho0", np.asarray(self.rho0, dtype=np.float64))
        if self.p.ndim != 4 or self.p.shape[0] != self.p.shape[2]:
            raise ValueError(f"p must have shape [S, A, S, R], got {self.p.shape}")
        if self.p.shape[3] != self.reward_support.shape[0]:
            raise ValueError("last axis of p must match reward_support length")
        if np.any(self.p < 0):
            raise ValueError("transition probabilities must be nonnegative")
        row_sums = self.p.sum(axis=(2, 3))
        if not np.allclose(row_sums, 1.0, rtol=0, atol=_ATOL):
            bad = np.argwhere(np.abs(row_sums - 1.0) > _ATOL)
            raise ValueError(f"p rows must sum to 1; offending (s,a): {bad[:5].tolist()}")
        if abs(float(self.rho0.sum()) - 1.0) > _ATOL or np.any(self.rho0 < 0):
            raise ValueError("rho0 must be a probability distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.p.shape[0]

    @property
    def n_actions(self) -> int:
        return self.p.shape[1]

    @property
    def n_rewards(self) -> int:
        return self.p.shape[3]


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # [S, A]

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 2:
            raise ValueError("policy must be an [S, A] matrix")
        if np.any(self.probs < 0):
            raise ValueError("policy probabilities must be nonnegative")
        if not np.allclose(self.probs.sum(axis=1), 1.0, rtol=0, atol=_ATOL):
            raise ValueError("policy rows must sum to 1")


@dataclass(frozen=True)
class EmpiricalModel:
    """Count-based transition model of a dataset, with a coverage mask."""

    counts: np.ndarray  # [S, A, S, R] nonnegative integers
    p_hat: np.ndarray  # [S, A, S, R]; rows of uncovered (s, a) are all zero
    covered: np.ndarray  # [S, A] bool

    @property
    def uncovered_pairs(self) -> list[tuple[int, int]]:
        return [tuple(ix) for ix in np.argwhere(~self.covered)]


@dataclass(frozen=True)
class GapReport:
    v_true: np.ndarray
    v_dataset: np.ndarray
    delta_direct: np.ndarray
    delta_recursive: np.ndarray
    max_abs_discrepancy: float

    def to_dict(self) -> dict:
        return {
            "V_true": self.v_true.tolist(),
            "V_dataset": self.v_dataset.tolist(),
            "delta_direct": self.delta_direct.tolist(),
            "delta_recursive": self.delta_recursive.tolist(),
            "max_abs_discrepancy": self.max_abs_discrepancy,
        }


def empirical_model(transitions: np.ndarray, n_states: int, n_actions: int, n_rewards: int) -> EmpiricalModel:
    """Count (s, a, r_index, s') rows and normalize per (s, a).

    p_hat(s', r | s, a) = N(s, a, s', r) / sum N(s, a, ., .) where counts exist;
    (s, a) pairs with no samples are flagged uncovered, never silently used.
    """
    transitions = np.asarray(transitions, dtype=np.int64).reshape(-1, 4)
    counts = np.zeros((n_states, n_actions, n_states, n_rewards), dtype=np.int64)
    if transitions.size:
        s, a, r, s2 = transitions.T
        for name, col, hi in (("state", s, n_states), ("action", a, n_actions),
                              ("reward index", r, n_rewards), ("next state", s2, n_states)):
            if np.any(col < 0) or np.any(col >= hi):
                bad = int(col[(col < 0) | (col >= hi)][0])
                raise ValueError(f"{name} {bad} outside [0, {hi})")
        np.add.at(counts, (s, a, s2, r), 1)
    totals = counts.sum(axis=(2, 3))
    covered = totals > 0
    p_hat = np.zeros(counts.shape, dtype=np.float64)
    safe = np.where(covered, totals, 1)[:, :, None, None]
    p_hat = counts / safe
    p_hat[~covered] = 0.0
    return EmpiricalModel(counts=counts, p_hat=p_hat, covered=covered)


def _policy_reward_and_kernel(p: np.ndarray, rewards: np.ndarray, policy: TabularPolicy):
    """r_pi[s] and P_pi[s, s'] of a joint (s', r) tensor under a policy."""
    # expected immediate reward per (s, a), then policy-average
    r_sa = np.einsum("sakr,r->sa", p, rewards)
    r_pi = np.einsum("sa,sa->s", policy.probs, r_sa)
    p_sas = p.sum(axis=3)
    p_pi = np.einsum("sa,sak->sk", policy.probs, p_sas)
    return r_pi, p_pi


def _solve_bellman(r_pi: np.ndarray, p_pi: np.ndarray, gamma: float) -> np.ndarray:
    n = r_pi.shape[0]
    try:
        return np.linalg.solve(np.eye(n) - gamma * p_pi, r_pi)
    except np.linalg.LinAlgError as exc:  # unreachable for gamma < 1, kept as a guard
        raise ValueError(f"Bellman system is singular: {exc}") from exc


def exact_value(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Unique solution of V = r_pi + gamma * P_pi V under the true model."""
    _check_shapes(mdp, policy)
    r_pi, p_pi = _policy_reward_and_kernel(mdp.p, mdp.reward_support, policy)
    return _solve_bellman(r_pi, p_pi, mdp.gamma)


def _check_shapes(mdp: TabularMDP, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} != (S, A) = {(mdp.n_states, mdp.n_actions)}"
        )


def _check_coverage(model: EmpiricalModel, policy: TabularPolicy, absorb_uncovered: bool) -> None:
    needed = policy.probs > 0
    missing = needed & ~model.covered
    if missing.any() and not absorb_uncovered:
        raise CoverageError([tuple(ix) for ix in np.argwhere(missing)])


def _dataset_value(mdp: TabularMDP, model: EmpiricalModel, policy: TabularPolicy,
                   absorb_uncovered: bool) -> np.ndarray:
    """Exact policy evaluation under p_hat.

    With absorb_uncovered, an uncovered (s, a) behaves as a zero-reward
    self-loop (an explicitly labeled extension; Theorem-level p_D is undefined
    there).
    """
    _check_coverage(model, policy, absorb_uncovered)
    r_pi, p_pi = _policy_reward_and_kernel(model.p_hat, mdp.reward_support, policy)
    if absorb_uncovered:
        weight_uncovered = np.einsum("sa,sa->s", policy.probs, (~model.covered).astype(np.float64))
        p_pi = p_pi + np.diag(weight_uncovered)  # self-loop mass, reward 0
    return _solve_bellman(r_pi, p_pi, mdp.gamma)


def gap_direct(mdp: TabularMDP, model: EmpiricalModel, policy: TabularPolicy,
               absorb_uncovered: bool = False) -> np.ndarray:
    """delta(s) = V(s) - V_D(s), each an exact policy evaluation."""
    _check_shapes(mdp, policy)
    v_true = exact_value(mdp, policy)
    v_data = _dataset_value(mdp, model, policy, absorb_uncovered)
    return v_true - v_data


def gap_recursive(mdp: TabularMDP, model: EmpiricalModel, policy: TabularPolicy,
                  absorb_uncovered: bool = False) -> np.ndarray:
    """delta via the Bellman-like recursion delta = b + gamma * P_pi delta.

    b(s) sums pi(a|s) * [p - p_hat](s', r | s, a) * (r + gamma * V_D(s')) over
    actions, next states and rewards; P_pi comes from the true model.
    """
    _check_shapes(mdp, policy)
    _check_coverage(model, policy, absorb_uncovered)
    v_data = _dataset_value(mdp, model, policy, absorb_uncovered)

    payoff = mdp.reward_support[None, :] + mdp.gamma * v_data[:, None]  # [S', R]
    b_sa = np.einsum("sakr,kr->sa", mdp.p - model.p_hat, payoff)
    if absorb_uncovered:
        # uncovered p_hat is a zero-reward self-loop: subtract its payoff gamma*V_D(s)
        b_sa = b_sa - np.where(~model.covered, mdp.gamma * v_data[:, None], 0.0)
    b = np.einsum("sa,sa->s", policy.probs, b_sa)

    _, p_pi_true = _policy_reward_and_kernel(mdp.p, mdp.reward_support, policy)
    return _solve_bellman(b, p_pi_true, mdp.gamma)


def gap_report(mdp: TabularMDP, model: EmpiricalModel, policy: TabularPolicy,
               absorb_uncovered: bool = False) -> GapReport:
    v_true = exact_value(mdp, policy)
    v_data = _dataset_value(mdp, model, policy, absorb_uncovered)
    direct = v_true - v_data
    recursive = gap_recursive(mdp, model, policy, absorb_uncovered)
    return GapReport(
        v_true=v_true,
        v_dataset=v_data,
        delta_direct=direct,
        delta_recursive=recursive,
        max_abs_discrepancy=float(np.max(np.abs(direct - recursive))),
    )


# -- file interfaces (used by the CLI) ----------------------------------------


def load_mdp_json(path: str | Path) -> TabularMDP:
    doc = json.loads(Path(path).read_text())
    required = {"S", "A", "reward_support", "p", "rho0", "gamma"}
    missing = required - doc.keys()
    if missing:
        raise ValueError(f"{path}: MDP file missing fields {sorted(missing)}")
    p = np.asarray(doc["p"], dtype=np.float64)
    expected = (doc["S"], doc["A"], doc["S"], len(doc["reward_support"]))
    if p.shape != expected:
        raise ValueError(f"{path}: p has shape {p.shape}, expected {expected}")
    return TabularMDP(
        p=p,
        reward_support=np.asarray(doc["reward_support"], dtype=np.float64),
        rho0=np.asarray(doc["rho0"], dtype=np.float64),
        gamma=float(doc["gamma"]),
    )


def load_transitions_json(path: str | Path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError(f"{path}: transitions file must be a JSON list of [s, a, r_index, s_next]")
    arr = np.asarray(doc, dtype=np.int64)
    if arr.size and (arr.ndim != 2 or arr.shape[1] != 4):
        raise ValueError(f"{path}: each transition must have 4 integer entries")
    return arr.reshape(-1, 4)
