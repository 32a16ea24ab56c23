import numpy as np
import pytest

from popo.data import write_dataset
from popo.envs import (
    PendulumEnv,
    PointMassEnv,
    collect_dataset,
    episode_rng,
    make_env,
    rollout_episode,
    scripted_policy,
)


def run_episode(env, kind, rng):
    state = env.reset(rng)
    total = 0.0
    done = False
    while not done:
        action = scripted_policy(kind, env, state, rng)
        state, reward, done = env.step(state, action)
        total += reward
    return total


class TestReset:
    def test_fixed_seed_identical_state(self):
        env = PointMassEnv()
        s1 = env.reset(np.random.default_rng(5))
        s2 = env.reset(np.random.default_rng(5))
        np.testing.assert_array_equal(s1.pos, s2.pos)
        np.testing.assert_array_equal(s1.vel, s2.vel)

    def test_position_mean_near_zero(self):
        env = PointMassEnv()
        rng = np.random.default_rng(0)
        positions = np.array([env.reset(rng).pos for _ in range(10_000)])
        assert np.all(np.abs(positions.mean(axis=0)) < 0.05)

    def test_velocity_always_zero(self):
        env = PointMassEnv()
        rng = np.random.default_rng(1)
        for _ in range(100):
            np.testing.assert_array_equal(env.reset(rng).vel, np.zeros(2))

    def test_pendulum_reset_ranges(self):
        env = PendulumEnv()
        rng = np.random.default_rng(2)
        for _ in range(1000):
            s = env.reset(rng)
            assert -np.pi <= s.theta <= np.pi
            assert -1.0 <= s.theta_dot <= 1.0


class TestStep:
    def test_at_goal_zero_action_zero_reward(self):
        env = PointMassEnv()
        state = type(env.reset(np.random.default_rng(0)))(pos=env.GOAL.copy(), vel=np.zeros(2), t=0)
        _, reward, _ = env.step(state, np.zeros(2))
        assert reward == 0.0

    def test_hand_evaluated_dynamics(self):
        # v' = v + a*dt = (0.05, 0); x' = x + v'*dt = (0.0025, 0)
        # reward = -||x' - goal|| - 0.1*||a||^2, evaluated by explicit arithmetic
        env = PointMassEnv()
        state = type(env.reset(np.random.default_rng(0)))(pos=np.zeros(2), vel=np.zeros(2), t=0)
        nxt, reward, done = env.step(state, np.array([1.0, 0.0]))
        np.testing.assert_allclose(nxt.vel, [0.05, 0.0], atol=1e-15)
        np.testing.assert_allclose(nxt.pos, [0.0025, 0.0], atol=1e-15)
        expected = -np.sqrt((0.0025 - 0.7) ** 2 + 0.7**2) - 0.1
        np.testing.assert_allclose(reward, expected, atol=1e-12)
        np.testing.assert_allclose(reward, -1.0881833, atol=1e-6)
        assert not done

    def test_step_is_pure(self):
        env = PointMassEnv()
        state = env.reset(np.random.default_rng(3))
        a = np.array([0.3, -0.8])
        out1 = env.step(state, a)
        out2 = env.step(state, a)
        np.testing.assert_array_equal(out1[0].pos, out2[0].pos)
        assert out1[1] == out2[1]

    def test_done_exactly_at_episode_len(self):
        env = PointMassEnv()
        state = env.reset(np.random.default_rng(4))
        done = False
        steps = 0
        while not done:
            state, _, done = env.step(state, np.zeros(2))
            steps += 1
        assert steps == env.spec.episode_len

    def test_out_of_bounds_action_clipped_with_warning(self):
        env = PointMassEnv()
        state = env.reset(np.random.default_rng(5))
        env.step(state, np.array([5.0, 0.0]))
        assert env.clip_warnings == 1

    def test_pendulum_speed_clamp_property(self):
        env = PendulumEnv()
        rng = np.random.default_rng(6)
        state = env.reset(rng)
        for _ in range(100_000):
            action = rng.uniform(-2, 2, size=1)
            state, _, done = env.step(state, action)
            assert abs(state.theta_dot) <= env.MAX_SPEED
            if done:
                state = env.reset(rng)

    def test_rewards_never_positive(self):
        for env in (PointMassEnv(), PendulumEnv()):
            rng = np.random.default_rng(7)
            state = env.reset(rng)
            for _ in range(2000):
                action = rng.uniform(-env.spec.max_action, env.spec.max_action, env.spec.act_dim)
                state, reward, done = env.step(state, action)
                assert reward <= 0.0
                if done:
                    state = env.reset(rng)


class TestScriptedPolicies:
    def test_expert_zero_at_goal(self):
        env = PointMassEnv()
        state = type(env.reset(np.random.default_rng(0)))(pos=env.GOAL.copy(), vel=np.zeros(2), t=0)
        np.testing.assert_array_equal(env.expert_action(state), np.zeros(2))

    def test_tier_ordering_pointmass(self):
        env = PointMassEnv()
        returns = {}
        for kind in ("random", "medium", "expert"):
            rng = np.random.default_rng(100)
            returns[kind] = [run_episode(env, kind, rng) for _ in range(100)]
        med = {k: np.median(v) for k, v in returns.items()}
        mean = {k: np.mean(v) for k, v in returns.items()}
        # returns are negative: expert >= 5x random means |expert| <= |random| / 5
        assert abs(mean["expert"]) * 5 <= abs(mean["random"])
        assert med["random"] < med["medium"] < med["expert"]

    def test_tier_ordering_pendulum(self):
        env = PendulumEnv()
        med = {}
        for kind in ("random", "medium", "expert"):
            rng = np.random.default_rng(200)
            med[kind] = np.median([run_episode(env, kind, rng) for _ in range(100)])
        assert med["random"] < med["medium"] < med["expert"]

    def test_unknown_kind_rejected(self):
        env = PointMassEnv()
        with pytest.raises(ValueError, match="kind"):
            scripted_policy("great", env, env.reset(np.random.default_rng(0)), np.random.default_rng(0))


class TestCollect:
    def test_single_transition(self):
        ds = collect_dataset(PointMassEnv(), "random", 1, seed=0)
        assert ds.count == 1
        assert ds.manifest["episode_returns"] == []

    def test_same_seed_bitwise_identical_file(self, tmp_path):
        p1, p2 = tmp_path / "a.popo", tmp_path / "b.popo"
        write_dataset(collect_dataset(PointMassEnv(), "medium", 450, seed=9), p1)
        write_dataset(collect_dataset(PointMassEnv(), "medium", 450, seed=9), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_matches_independent_replay(self):
        env = PointMassEnv()
        ds = collect_dataset(env, "medium", 600, seed=3)
        replayed = [rollout_episode(PointMassEnv(), "medium", episode_rng(3, i))[1] for i in range(3)]
        np.testing.assert_allclose(ds.manifest["episode_returns"], replayed, atol=1e-9)
        np.testing.assert_allclose(ds.manifest["mean_return"], np.mean(replayed), atol=1e-9)

    def test_done_column_all_zero(self):
        ds = collect_dataset(PointMassEnv(), "random", 250, seed=1)
        np.testing.assert_array_equal(ds.done, np.zeros(250, dtype=np.float32))

    def test_all_rewards_nonpositive(self):
        ds = collect_dataset(PendulumEnv(), "random", 300, seed=2)
        assert np.all(ds.reward <= 0.0)

    def test_jobs_parallelism_is_equivalent(self):
        a = collect_dataset(PointMassEnv(), "medium", 410, seed=5, jobs=1)
        b = collect_dataset(PointMassEnv(), "medium", 410, seed=5, jobs=2)
        np.testing.assert_array_equal(a.obs, b.obs)
        np.testing.assert_array_equal(a.act, b.act)
        assert a.manifest == b.manifest


def test_make_env_ids():
    assert make_env("pointmass-v0").spec.env_id == "pointmass-v0"
    assert make_env("pendulum-v0").spec.env_id == "pendulum-v0"
    with pytest.raises(ValueError, match="unknown env_id"):
        make_env("halfcheetah-v2")
