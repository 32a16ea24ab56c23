"""Offline policy optimization agent (POPO) and its ablation variants.

The agent follows the estimator idiom: construct with hyperparameters, ``fit``
on a static transition dataset, ``predict`` actions for states. One training
step runs, in order: VAE update, critic update, actor update, soft target
updates.

Variants:

- ``popo``: quantile critic with a distortion risk measure + conditional VAE
  with residual action generation (n candidates, argmax by distorted value).
- ``opo``: same action pipeline, twin scalar critic (clipped double-Q).
- ``td4``: quantile critic, no VAE; the actor maps the state directly to an
  action (single candidate).
- ``td3``: twin critic and direct actor, no VAE.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from popo import data as data_mod
from popo.config import TrainConfig
from popo.critic import (
    DistortionMeasure,
    QuantileCritic,
    TwinQCritic,
    critic_update,
    distort,
    twin_q_update,
)
from popo.data import Batch, Dataset
from popo.envs import EnvSpec
from popo.errors import NonFiniteError, ShapeError
from popo.nn import AdamState, DenseNet, adam_step
from popo.nn import soft_update as _soft_update_net
from popo.vae import ConditionalVAE

METRIC_COLUMNS = (
    "step",
    "critic_loss",
    "actor_objective",
    "vae_total",
    "vae_recon",
    "vae_kl",
    "eval_return_mean",
    "eval_return_std",
    "q_beta_mean",
    "mc_return",
)

_TRAIN_STREAM = 0x7E41
_EVAL_STREAM = 0xE7A1
_SELECT_STREAM = 0x5E1E


@dataclass
class EvalResult:
    return_mean: float
    return_std: float
    returns: list[float]  # undiscounted, one per episode
    mc_returns: list[float]  # discounted from the initial state, one per episode
    q_values: list[float]  # value estimate of the first (s, a), one per episode

    @property
    def mc_return_mean(self) -> float:
        return float(np.mean(self.mc_returns))

    @property
    def q_beta_mean(self) -> float:
        return float(np.mean(self.q_values))


class POPO(BaseEstimator):
    """Pessimistic offline policy optimizer with a fit/predict surface."""

    def __init__(self, gamma=0.99, xi=0.05, eta=5e-3, n_candidates=10, batch_size=256,
                 lr_vae=3e-4, lr_critic=3e-4, lr_actor=3e-4, n_taus=32, n_target_taus=32,
                 n_value_taus=32, kappa=1.0, distortion_kind="wang", zeta=-0.75,
                 distort_td=True, variant="popo", hidden=256, vae_hidden=750,
                 n_cos_features=64, latent_clip=0.5, eval_interval=5000, eval_episodes=10,
                 max_steps=100_000, seed=0, dtype="float32"):
        self.gamma = gamma
        self.xi = xi
        self.eta = eta
        self.n_candidates = n_candidates
        self.batch_size = batch_size
        self.lr_vae = lr_vae
        self.lr_critic = lr_critic
        self.lr_actor = lr_actor
        self.n_taus = n_taus
        self.n_target_taus = n_target_taus
        self.n_value_taus = n_value_taus
        self.kappa = kappa
        self.distortion_kind = distortion_kind
        self.zeta = zeta
        self.distort_td = distort_td
        self.variant = variant
        self.hidden = hidden
        self.vae_hidden = vae_hidden
        self.n_cos_features = n_cos_features
        self.latent_clip = latent_clip
        self.eval_interval = eval_interval
        self.eval_episodes = eval_episodes
        self.max_steps = max_steps
        self.seed = seed
        self.dtype = dtype

    # -- wiring ---------------------------------------------------------------

    def config(self) -> TrainConfig:
        keys = set(TrainConfig.field_names())
        return TrainConfig.from_dict({k: v for k, v in self.get_params().items() if k in keys})

    @property
    def has_vae(self) -> bool:
        return self.variant in ("popo", "opo")

    @property
    def distributional(self) -> bool:
        return self.variant in ("popo", "td4")

    def is_setup(self) -> bool:
        return hasattr(self, "actor_")

    def setup(self, env_info) -> "POPO":
        """Build networks for an EnvSpec or a Dataset's dimensions."""
        if isinstance(env_info, (Dataset, EnvSpec)):
            obs_dim, act_dim = env_info.obs_dim, env_info.act_dim
            max_action = env_info.max_action
            env_id = env_info.env_id
        else:
            raise TypeError(f"setup needs an EnvSpec or Dataset, got {type(env_info).__name__}")
        cfg = self.config()
        np_dtype = np.dtype(self.dtype).type
        root = np.random.SeedSequence([int(self.seed), 0x90F0])
        init_rng = np.random.default_rng(root)

        self.obs_dim_, self.act_dim_ = obs_dim, act_dim
        self.max_action_ = float(max_action)
        self.env_id_ = env_id
        self.measure_ = DistortionMeasure.from_config(cfg)
        self.step_ = 0
        self.metrics_: list[dict] = []
        self.order_hook_ = None  # test hook: called with stage names during train_step

        if self.has_vae:
            self.vae_ = ConditionalVAE(obs_dim, act_dim, max_action, init_rng,
                                       hidden=cfg.vae_hidden, lr=cfg.lr_vae,
                                       latent_clip=cfg.latent_clip, dtype=np_dtype)
            actor_in = obs_dim + act_dim
        else:
            self.vae_ = None
            actor_in = obs_dim
        self.actor_ = DenseNet.create([actor_in, cfg.hidden, cfg.hidden, act_dim],
                                      ["relu", "relu", "tanh"], init_rng, np_dtype)
        self.actor_target_ = self.actor_.copy()
        self.actor_adam_ = AdamState.for_params(self.actor_.params(), lr=cfg.lr_actor)
        if self.distributional:
            self.critic_ = QuantileCritic(obs_dim, act_dim, init_rng, hidden=cfg.hidden,
                                          n_cos=cfg.n_cos_features, lr=cfg.lr_critic,
                                          dtype=np_dtype)
        else:
            self.critic_ = TwinQCritic(obs_dim, act_dim, init_rng, hidden=cfg.hidden,
                                       lr=cfg.lr_critic, dtype=np_dtype)
        self._train_rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), _TRAIN_STREAM]))
        return self

    # -- action generation ------------------------------------------------------

    def _actor_forward(self, x: np.ndarray, use_targets: bool) -> np.ndarray:
        net = self.actor_target_ if use_targets else self.actor_
        return net.forward(x)

    def _candidates_batch(self, obs: np.ndarray, count: int, use_targets: bool,
                          rng: np.random.Generator):
        """Candidate actions [B, count, act_dim] plus the flat actor input."""
        b = obs.shape[0]
        if self.has_vae:
            obs_rep = np.repeat(obs, count, axis=0)
            a_hat = self.vae_.decode(obs_rep, rng=rng)
            actor_in = np.concatenate([obs_rep, a_hat], axis=1)
            raw = self._actor_forward(actor_in, use_targets)
            cand = np.clip(a_hat + self.xi * self.max_action_ * raw,
                           -self.max_action_, self.max_action_)
        else:
            count = 1
            actor_in = obs.astype(self.actor_.dtype, copy=False)
            raw = self._actor_forward(actor_in, use_targets)
            cand = np.clip(self.max_action_ * raw, -self.max_action_, self.max_action_)
        return cand.reshape(b, count, self.act_dim_), actor_in

    def _score_flat(self, obs_rep: np.ndarray, act_flat: np.ndarray, use_targets: bool,
                    rng: np.random.Generator) -> np.ndarray:
        """Values used for candidate ranking: distorted expectation, or Q1."""
        x = np.concatenate([obs_rep, act_flat], axis=1).astype(act_flat.dtype, copy=False)
        if self.distributional:
            taus = distort(self.measure_, rng.uniform(size=self.n_value_taus))
            return self.critic_.z_shared(x, taus, use_target=use_targets).mean(axis=1, dtype=np.float64)
        return self.critic_.q_values(x, use_target=use_targets).astype(np.float64)

    def _select_batch(self, obs: np.ndarray, use_targets: bool, rng: np.random.Generator,
                      count: int | None = None) -> np.ndarray:
        count = self.n_candidates if count is None else count
        cand, _ = self._candidates_batch(obs, count, use_targets, rng)
        b, n, _ = cand.shape
        if n == 1:
            return cand[:, 0, :]
        obs_rep = np.repeat(obs, n, axis=0)
        scores = self._score_flat(obs_rep, cand.reshape(b * n, -1), use_targets, rng)
        best = scores.reshape(b, n).argmax(axis=1)  # ties: lowest index
        return cand[np.arange(b), best]

    def generate_actions(self, obs: np.ndarray, count: int | None = None,
                         use_targets: bool = False,
                         rng: np.random.Generator | None = None) -> np.ndarray:
        """The n residual candidates for one state: clip(a_hat + xi*max*actor)."""
        self._require_setup()
        if count is None:
            count = self.n_candidates
        if count < 1:
            raise ValueError("count must be >= 1")
        rng = self._train_rng if rng is None else rng
        obs = self._check_obs(obs)
        cand, _ = self._candidates_batch(obs[None, :], count, use_targets, rng)
        return cand[0]

    def select_action(self, obs: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Highest-value candidate for one state; deterministic for a fixed stream."""
        self._require_setup()
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), _SELECT_STREAM]))
        obs = self._check_obs(obs)
        return self._select_batch(obs[None, :], use_targets=False, rng=rng)[0]

    def predict(self, obs: np.ndarray) -> np.ndarray:
        """Greedy actions for one observation or a batch (fresh derived stream)."""
        self._require_setup()
        arr = np.asarray(obs, dtype=np.float32)
        single = arr.ndim == 1
        rows = arr[None, :] if single else arr
        if rows.shape[1] != self.obs_dim_:
            raise ShapeError(f"expected obs dim {self.obs_dim_}, got {rows.shape[1]}")
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), _SELECT_STREAM]))
        out = self._select_batch(rows, use_targets=False, rng=rng)
        return out[0] if single else out

    # -- updates ---------------------------------------------------------------

    def _next_actions(self, next_obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """TD-target actions: target actor + target critic scoring, online VAE."""
        return self._select_batch(next_obs, use_targets=True, rng=rng)

    def actor_update(self, batch: Batch, rng: np.random.Generator | None = None) -> float:
        """Ascend the mean critic value of selected actions; returns the objective.

        Gradients flow through the residual term into the actor only; the VAE
        and the critic stay frozen for this step.
        """
        self._require_setup()
        rng = self._train_rng if rng is None else rng
        objective, grads = self._actor_grads(batch, rng)
        adam_step(self.actor_.params(), grads, self.actor_adam_)
        return objective

    def _actor_grads(self, batch: Batch, rng: np.random.Generator):
        """(objective, d(-objective)/d(actor params)); no update applied."""
        cfg_n = self.n_candidates if self.has_vae else 1
        obs = batch.obs
        b = obs.shape[0]
        dtype = self.actor_.dtype

        if self.has_vae:
            obs_rep = np.repeat(obs, cfg_n, axis=0)
            a_hat = self.vae_.decode(obs_rep, rng=rng)
            actor_in = np.concatenate([obs_rep, a_hat], axis=1)
        else:
            obs_rep = obs
            a_hat = None
            actor_in = obs.astype(dtype, copy=False)
        raw, actor_cache = self.actor_.forward_cached(actor_in)
        scale = self.xi * self.max_action_ if self.has_vae else self.max_action_
        pre_clip = (a_hat + scale * raw) if self.has_vae else scale * raw
        cand = np.clip(pre_clip, -self.max_action_, self.max_action_)

        if cfg_n > 1:
            scores = self._score_flat(obs_rep, cand, use_targets=False, rng=rng)
            best = scores.reshape(b, cfg_n).argmax(axis=1)
            flat_idx = np.arange(b) * cfg_n + best
        else:
            flat_idx = np.arange(b)
        a_sel = cand[flat_idx]
        x = np.concatenate([obs.astype(dtype, copy=False), a_sel], axis=1)

        # d(-objective)/d(action), critic parameters frozen
        if self.distributional:
            taus = distort(self.measure_, rng.uniform(size=self.n_value_taus))
            z, cache = self.critic_.z_shared_cached(x, taus)
            objective = float(z.mean(dtype=np.float64))
            dz = np.full(z.shape, -1.0 / z.size, dtype=dtype)
            dx = self.critic_.input_grad_shared(cache, dz)
        else:
            q, cache = self.critic_.q1.forward_cached(x)
            objective = float(q.mean(dtype=np.float64))
            dq = np.full(q.shape, -1.0 / q.size, dtype=dtype)
            dx = self.critic_.q1.input_grad_cached(cache, dq)
        if not np.isfinite(objective):
            raise NonFiniteError(f"actor objective became non-finite ({objective})")

        d_act = dx[:, self.obs_dim_:]
        live = (np.abs(pre_clip[flat_idx]) < self.max_action_).astype(dtype)
        d_raw_sel = d_act * live * dtype.type(scale)
        d_raw = np.zeros_like(raw)
        d_raw[flat_idx] = d_raw_sel
        grads, _ = self.actor_.backward_cached(actor_cache, d_raw)
        return objective, grads

    def soft_update(self, eta: float | None = None) -> None:
        self._require_setup()
        eta = self.eta if eta is None else eta
        self.critic_.soft_update(eta)
        _soft_update_net(self.actor_target_, self.actor_, eta)

    def train_step(self, dataset: Dataset) -> dict:
        """One Algorithm-1 iteration: sample batch, VAE, critic, actor, targets."""
        self._require_setup()
        if len(dataset) < 1:
            raise ValueError("dataset is empty")
        cfg = self.config()
        rng = self._train_rng
        batch = data_mod.sample(dataset, cfg.batch_size, rng)
        row = dict.fromkeys(METRIC_COLUMNS)
        row["step"] = self.step_ + 1

        if self.has_vae:
            self._stage("vae")
            total, recon, kl = self.vae_.update(batch.obs, batch.act, rng)
            row["vae_total"], row["vae_recon"], row["vae_kl"] = total, recon, kl
        self._stage("critic")
        if self.distributional:
            row["critic_loss"] = critic_update(batch, self.critic_, self._next_actions,
                                               self.measure_, cfg, rng)
        else:
            row["critic_loss"] = twin_q_update(batch, self.critic_, self._next_actions, cfg, rng)
        self._stage("actor")
        row["actor_objective"] = self.actor_update(batch, rng)
        self._stage("targets")
        self.soft_update()
        self.step_ += 1
        return row

    def fit(self, dataset: Dataset, eval_env=None, on_row=None) -> "POPO":
        """Train for max_steps on the static dataset, evaluating periodically."""
        if not self.is_setup():
            self.setup(dataset)
        cfg = self.config()
        for _ in range(cfg.max_steps):
            row = self.train_step(dataset)
            if eval_env is not None and self.step_ % cfg.eval_interval == 0:
                result = self.evaluate(eval_env, cfg.eval_episodes)
                row["eval_return_mean"] = result.return_mean
                row["eval_return_std"] = result.return_std
                row["q_beta_mean"] = result.q_beta_mean
                row["mc_return"] = result.mc_return_mean
            self.metrics_.append(row)
            if on_row is not None:
                on_row(row)
        return self

    # -- evaluation --------------------------------------------------------------

    def _select_per_stream(self, obs: np.ndarray, rngs: list, use_targets: bool = False) -> np.ndarray:
        """Greedy actions for one state per RNG stream (episodes in lockstep)."""
        e = obs.shape[0]
        dtype = self.actor_.dtype
        if not self.has_vae:
            raw = self._actor_forward(obs.astype(dtype, copy=False), use_targets)
            return np.clip(self.max_action_ * raw, -self.max_action_, self.max_action_)
        n = self.n_candidates
        z = np.concatenate([self.vae_.sample_latent(n, rng) for rng in rngs])
        obs_rep = np.repeat(obs, n, axis=0)
        a_hat = self.vae_.decode(obs_rep, z=z)
        raw = self._actor_forward(np.concatenate([obs_rep, a_hat], axis=1), use_targets)
        cand = np.clip(a_hat + self.xi * self.max_action_ * raw,
                       -self.max_action_, self.max_action_)
        if n == 1:
            return cand
        x = np.concatenate([obs_rep, cand], axis=1).astype(dtype, copy=False)
        if self.distributional:
            taus = np.stack([distort(self.measure_, rng.uniform(size=self.n_value_taus))
                             for rng in rngs]).astype(dtype)
            taus_rows = np.repeat(taus, n, axis=0)
            scores = self.critic_.z_rows(x, taus_rows, use_target=use_targets).mean(axis=1, dtype=np.float64)
        else:
            scores = self.critic_.q_values(x, use_target=use_targets).astype(np.float64)
        best = scores.reshape(e, n).argmax(axis=1)
        return cand.reshape(e, n, self.act_dim_)[np.arange(e), best]

    def _value_estimates(self, obs: np.ndarray, actions: np.ndarray, rngs: list) -> np.ndarray:
        x = np.concatenate([obs, actions], axis=1).astype(self.actor_.dtype, copy=False)
        if self.distributional:
            taus = np.stack([distort(self.measure_, rng.uniform(size=self.n_value_taus))
                             for rng in rngs]).astype(self.actor_.dtype)
            return self.critic_.z_rows(x, taus).mean(axis=1, dtype=np.float64)
        return self.critic_.q_values(x).astype(np.float64)

    def evaluate(self, env, episodes: int, seed: int | None = None) -> EvalResult:
        """Greedy rollouts on frozen networks; nothing is trained or recorded.

        Episodes run in lockstep (one batched network pass per env step), each
        on its own RNG stream. Returns undiscounted return statistics plus, per
        episode, the discounted Monte-Carlo return from the start state and the
        critic's value estimate of the first (state, action) — the
        estimate/return pairing.
        """
        self._require_setup()
        if episodes < 1:
            raise ValueError("episodes must be >= 1")
        base = int(self.seed) if seed is None else int(seed)
        rngs = [np.random.default_rng(np.random.SeedSequence([base, _EVAL_STREAM, ep]))
                for ep in range(episodes)]
        states = [env.reset(rng) for rng in rngs]
        obs = np.stack([env.observe(s) for s in states]).astype(np.float32)
        totals = np.zeros(episodes)
        discounted = np.zeros(episodes)
        gains = np.ones(episodes)
        q_values: np.ndarray | None = None
        active = list(range(episodes))
        while active:
            batch_obs = obs[active]
            batch_rngs = [rngs[i] for i in active]
            actions = self._select_per_stream(batch_obs, batch_rngs, use_targets=False)
            if q_values is None:  # first step: record the estimate/return pairing
                q_values = self._value_estimates(batch_obs, actions, batch_rngs)
            still = []
            for row, ep in enumerate(active):
                state, reward, done = env.step(states[ep], actions[row])
                states[ep] = state
                obs[ep] = env.observe(state)
                totals[ep] += reward
                discounted[ep] += gains[ep] * reward
                gains[ep] *= self.gamma
                if not done:
                    still.append(ep)
            active = still
        return EvalResult(
            return_mean=float(np.mean(totals)),
            return_std=float(np.std(totals)),
            returns=[float(r) for r in totals],
            mc_returns=[float(r) for r in discounted],
            q_values=[float(q) for q in q_values],
        )

    # -- persistence ---------------------------------------------------------------

    def _named_nets(self) -> dict[str, DenseNet]:
        nets = {"actor": self.actor_, "actor_target": self.actor_target_}
        if self.distributional:
            nets.update(
                critic_trunk=self.critic_.trunk, critic_embed=self.critic_.embed,
                critic_head=self.critic_.head, critic_target_trunk=self.critic_.target_trunk,
                critic_target_embed=self.critic_.target_embed,
                critic_target_head=self.critic_.target_head,
            )
        else:
            nets.update(
                critic_q1=self.critic_.q1, critic_q2=self.critic_.q2,
                critic_target_q1=self.critic_.target_q1, critic_target_q2=self.critic_.target_q2,
            )
        if self.has_vae:
            nets.update(
                vae_enc_body=self.vae_.enc_body, vae_mu_head=self.vae_.mu_head,
                vae_logstd_head=self.vae_.logstd_head, vae_decoder=self.vae_.decoder,
            )
        return nets

    def save(self, out_dir: str | Path) -> None:
        """Checkpoint directory: agent.json + one container file per network."""
        self._require_setup()
        out_dir = Path(out_dir)
        (out_dir / "nets").mkdir(parents=True, exist_ok=True)
        nets = self._named_nets()
        doc = {
            "params": self.get_params(),
            "env": {
                "env_id": self.env_id_, "obs_dim": self.obs_dim_,
                "act_dim": self.act_dim_, "max_action": self.max_action_,
            },
            "step": self.step_,
            "networks": sorted(nets),
        }
        (out_dir / "agent.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        for name, net in nets.items():
            net.save(out_dir / "nets" / f"{name}.net")

    @classmethod
    def load(cls, out_dir: str | Path) -> "POPO":
        out_dir = Path(out_dir)
        doc = json.loads((out_dir / "agent.json").read_text())
        agent = cls(**doc["params"])
        env = doc["env"]
        agent.setup(EnvSpec(env_id=env["env_id"], obs_dim=env["obs_dim"],
                            act_dim=env["act_dim"], max_action=env["max_action"],
                            episode_len=1, dt=1.0))
        nets = agent._named_nets()
        if sorted(nets) != doc["networks"]:
            raise ShapeError(
                f"checkpoint networks {doc['networks']} do not match variant "
                f"{agent.variant!r} ({sorted(nets)})"
            )
        np_dtype = np.dtype(agent.dtype).type
        for name, net in nets.items():
            loaded = DenseNet.load(out_dir / "nets" / f"{name}.net", dtype=np_dtype)
            if loaded.dims != net.dims:
                raise ShapeError(f"network {name}: checkpoint dims {loaded.dims} != {net.dims}")
            net.set_params(loaded.params())
        agent.step_ = int(doc["step"])
        return agent

    # -- helpers ---------------------------------------------------------------------

    def _stage(self, name: str) -> None:
        if self.order_hook_ is not None:
            self.order_hook_(name)

    def _check_obs(self, obs: np.ndarray) -> np.ndarray:
        arr = np.asarray(obs, dtype=np.float32).reshape(-1)
        if arr.shape[0] != self.obs_dim_:
            raise ShapeError(f"expected obs dim {self.obs_dim_}, got {arr.shape[0]}")
        return arr

    def _require_setup(self) -> None:
        if not self.is_setup():
            raise RuntimeError("agent is not set up; call setup(...) or fit(dataset) first")
