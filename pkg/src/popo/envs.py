"""Deterministic toy continuous-control environments and scripted data collection.

Environments are value-semantics state machines: ``step(state, action)`` is a
pure function of its arguments, randomness only enters through ``reset`` and
the behavior policies. Both environments end episodes by timeout only, and
timeouts are not terminal for bootstrapping, so collected datasets carry
done=0.0 everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from popo.data import Dataset

POLICY_KINDS = ("random", "medium", "expert")


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    obs_dim: int
    act_dim: int
    max_action: float
    episode_len: int
    dt: float

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("dimensions must be >= 1")
        if self.max_action <= 0:
            raise ValueError("max_action must be > 0")
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")


class PointMassState(NamedTuple):
    pos: np.ndarray  # [2]
    vel: np.ndarray  # [2]
    t: int


class PendulumState(NamedTuple):
    theta: float
    theta_dot: float
    t: int


def _wrap_angle(theta: float) -> float:
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


class PointMassEnv:
    """2-D double integrator steered toward a fixed goal.

    Dynamics (semi-implicit Euler): v' = v + a*dt, x' = x + v'*dt.
    Reward: -||x' - goal||_2 - 0.1*||a||_2^2, always <= 0.
    """

    GOAL = np.array([0.7, 0.7])

    def __init__(self):
        self.spec = EnvSpec("pointmass-v0", obs_dim=4, act_dim=2, max_action=1.0,
                            episode_len=200, dt=0.05)
        self.clip_warnings = 0

    def reset(self, rng: np.random.Generator) -> PointMassState:
        pos = rng.uniform(-1.0, 1.0, size=2)
        return PointMassState(pos=pos, vel=np.zeros(2), t=0)

    def observe(self, state: PointMassState) -> np.ndarray:
        return np.concatenate([state.pos, state.vel]).astype(np.float32)

    def step(self, state: PointMassState, action: np.ndarray):
        action = np.asarray(action, dtype=np.float64)
        clipped = np.clip(action, -self.spec.max_action, self.spec.max_action)
        if not np.array_equal(clipped, action):
            self.clip_warnings += 1
        vel = state.vel + clipped * self.spec.dt
        pos = state.pos + vel * self.spec.dt
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise FloatingPointError("point-mass state became non-finite")
        reward = -float(np.linalg.norm(pos - self.GOAL)) - 0.1 * float(np.sum(clipped**2))
        t = state.t + 1
        return PointMassState(pos=pos, vel=vel, t=t), reward, t >= self.spec.episode_len

    def expert_action(self, state: PointMassState, rng=None) -> np.ndarray:
        a = -2.0 * (state.pos - self.GOAL) - 1.0 * state.vel
        return np.clip(a, -self.spec.max_action, self.spec.max_action)


class PendulumEnv:
    """Torque-limited pendulum; theta = 0 means upright.

    theta'' = (3g / 2l) sin(theta) + (3 / ml^2) u with g=10, m=l=1, u in [-2, 2];
    angular velocity clamped to +-8. Reward: -(wrap(theta)^2 + 0.1*theta_dot^2
    + 0.001*u^2), always <= 0.
    """

    G, M, L = 10.0, 1.0, 1.0
    MAX_SPEED = 8.0

    def __init__(self):
        self.spec = EnvSpec("pendulum-v0", obs_dim=3, act_dim=1, max_action=2.0,
                            episode_len=200, dt=0.05)
        self.clip_warnings = 0

    def reset(self, rng: np.random.Generator) -> PendulumState:
        theta = rng.uniform(-np.pi, np.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return PendulumState(theta=theta, theta_dot=theta_dot, t=0)

    def observe(self, state: PendulumState) -> np.ndarray:
        return np.array(
            [np.cos(state.theta), np.sin(state.theta), state.theta_dot], dtype=np.float32
        )

    def step(self, state: PendulumState, action: np.ndarray):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        u = float(np.clip(action[0], -self.spec.max_action, self.spec.max_action))
        if u != float(action[0]):
            self.clip_warnings += 1
        accel = (3.0 * self.G / (2.0 * self.L)) * np.sin(state.theta) + (
            3.0 / (self.M * self.L**2)
        ) * u
        theta_dot = float(np.clip(state.theta_dot + accel * self.spec.dt,
                                  -self.MAX_SPEED, self.MAX_SPEED))
        theta = state.theta + theta_dot * self.spec.dt
        if not (np.isfinite(theta) and np.isfinite(theta_dot)):
            raise FloatingPointError("pendulum state became non-finite")
        angle = _wrap_angle(theta)
        reward = -(angle**2 + 0.1 * theta_dot**2 + 0.001 * u**2)
        t = state.t + 1
        return PendulumState(theta=theta, theta_dot=theta_dot, t=t), float(reward), t >= self.spec.episode_len

    def expert_action(self, state: PendulumState, rng=None) -> np.ndarray:
        # energy-shaping swing-up, PD stabilization near the top
        inertia = self.M * self.L**2 / 3.0
        e_top = self.M * self.G * self.L / 2.0
        energy = 0.5 * inertia * state.theta_dot**2 + e_top * np.cos(state.theta)
        angle = _wrap_angle(state.theta)
        if abs(angle) < 0.4 and abs(state.theta_dot) < 3.0:
            u = -16.0 * angle - 4.0 * state.theta_dot
        else:
            u = 4.0 * state.theta_dot * (e_top - energy)
            if abs(u) < 0.2:  # hanging at rest: kick to start the swing
                u = self.spec.max_action
        return np.clip(np.array([u]), -self.spec.max_action, self.spec.max_action)


ENV_IDS = ("pointmass-v0", "pendulum-v0")


def make_env(env_id: str):
    if env_id == "pointmass-v0":
        return PointMassEnv()
    if env_id == "pendulum-v0":
        return PendulumEnv()
    raise ValueError(f"unknown env_id {env_id!r}; choose from {ENV_IDS}")


def scripted_policy(kind: str, env, state, rng: np.random.Generator) -> np.ndarray:
    """Behavior tiers: expert PD/energy controller, noisy medium, uniform random."""
    spec = env.spec
    if kind == "expert":
        return env.expert_action(state).astype(np.float32)
    if kind == "medium":
        if rng.uniform() < 0.3:
            return rng.uniform(-spec.max_action, spec.max_action, size=spec.act_dim).astype(np.float32)
        noisy = env.expert_action(state) + rng.normal(0.0, 0.3, size=spec.act_dim)
        return np.clip(noisy, -spec.max_action, spec.max_action).astype(np.float32)
    if kind == "random":
        return rng.uniform(-spec.max_action, spec.max_action, size=spec.act_dim).astype(np.float32)
    raise ValueError(f"unknown policy kind {kind!r}; choose from {POLICY_KINDS}")


def rollout_episode(env, kind: str, episode_rng: np.random.Generator):
    """One scripted episode; returns (columns dict, undiscounted return)."""
    spec = env.spec
    obs_rows, act_rows, rew_rows, next_rows = [], [], [], []
    state = env.reset(episode_rng)
    total = 0.0
    done = False
    while not done:
        obs = env.observe(state)
        action = scripted_policy(kind, env, state, episode_rng)
        state, reward, done = env.step(state, action)
        obs_rows.append(obs)
        act_rows.append(action)
        rew_rows.append(np.float32(reward))
        next_rows.append(env.observe(state))
        total += reward
    cols = {
        "obs": np.stack(obs_rows),
        "act": np.stack(act_rows),
        "reward": np.asarray(rew_rows, dtype=np.float32),
        "next_obs": np.stack(next_rows),
        # timeout-only envs: nothing is terminal for bootstrapping
        "done": np.zeros(len(rew_rows), dtype=np.float32),
    }
    return cols, total


def episode_rng(seed: int, episode_index: int) -> np.random.Generator:
    """Per-episode stream; collection order (and --jobs) cannot change the data."""
    return np.random.default_rng(np.random.SeedSequence([seed, episode_index]))


def collect_dataset(env, kind: str, n_transitions: int, seed: int, jobs: int = 1) -> Dataset:
    """Roll scripted episodes until n transitions are gathered, then trim."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    if kind not in POLICY_KINDS:
        raise ValueError(f"unknown policy kind {kind!r}")
    spec = env.spec
    n_episodes = -(-n_transitions // spec.episode_len)  # ceil

    def run(i: int):
        return rollout_episode(env, kind, episode_rng(seed, i))

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_episode_worker, [(spec.env_id, kind, seed, i) for i in range(n_episodes)]))
    else:
        results = [run(i) for i in range(n_episodes)]

    cols = {k: np.concatenate([r[0][k] for r in results])[:n_transitions] for k in results[0][0]}
    full_episodes = n_transitions // spec.episode_len
    returns = [float(r[1]) for r in results[:full_episodes]]
    manifest = {
        "env_id": spec.env_id,
        "policy": kind,
        "seed": seed,
        "episode_returns": returns,
        "mean_return": float(np.mean(returns)) if returns else None,
    }
    return Dataset(
        env_id=spec.env_id,
        obs_dim=spec.obs_dim,
        act_dim=spec.act_dim,
        max_action=spec.max_action,
        obs=cols["obs"],
        act=cols["act"],
        reward=cols["reward"],
        next_obs=cols["next_obs"],
        done=cols["done"],
        manifest=manifest,
    )


def _episode_worker(args):
    env_id, kind, seed, i = args
    return rollout_episode(make_env(env_id), kind, episode_rng(seed, i))
