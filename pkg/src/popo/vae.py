"""Conditional VAE that reconstructs dataset actions given the state.

Encoder (state, action) -> diagonal Gaussian (mu, sigma); decoder
(state, latent) -> action through a tanh head scaled to the action box.
Sampling a fresh latent from the clipped prior yields an in-distribution
"central" action for the policy to perturb.
"""

from __future__ import annotations

import numpy as np

from popo.errors import NonFiniteError, ShapeError
from popo.nn import AdamState, DenseNet, adam_step

LOG_STD_MIN = -4.0
LOG_STD_MAX = 15.0


class ConditionalVAE:
    def __init__(self, obs_dim: int, act_dim: int, max_action: float,
                 rng: np.random.Generator, hidden: int = 750, lr: float = 3e-4,
                 latent_clip: float = 0.5, dtype=np.float32):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.max_action = float(max_action)
        self.latent_dim = 2 * act_dim
        self.latent_clip = float(latent_clip)
        self.enc_body = DenseNet.create([obs_dim + act_dim, hidden, hidden], ["relu", "relu"], rng, dtype)
        self.mu_head = DenseNet.create([hidden, self.latent_dim], ["identity"], rng, dtype)
        self.logstd_head = DenseNet.create([hidden, self.latent_dim], ["identity"], rng, dtype)
        self.decoder = DenseNet.create(
            [obs_dim + self.latent_dim, hidden, hidden, act_dim], ["relu", "relu", "tanh"], rng, dtype
        )
        self.adam = AdamState.for_params(self.params(), lr=lr)

    @property
    def dtype(self):
        return self.enc_body.dtype

    def params(self) -> list[np.ndarray]:
        return (
            self.enc_body.params()
            + self.mu_head.params()
            + self.logstd_head.params()
            + self.decoder.params()
        )

    def astype(self, dtype) -> "ConditionalVAE":
        clone = object.__new__(ConditionalVAE)
        clone.obs_dim, clone.act_dim = self.obs_dim, self.act_dim
        clone.max_action, clone.latent_dim = self.max_action, self.latent_dim
        clone.latent_clip = self.latent_clip
        clone.enc_body = self.enc_body.astype(dtype)
        clone.mu_head = self.mu_head.astype(dtype)
        clone.logstd_head = self.logstd_head.astype(dtype)
        clone.decoder = self.decoder.astype(dtype)
        clone.adam = AdamState.for_params(clone.params(), lr=self.adam.lr)
        return clone

    # -- operations ----------------------------------------------------------

    def encode(self, obs: np.ndarray, act: np.ndarray):
        """(mu, sigma) with sigma = exp(log-std clamped to [-4, 15]) > 0."""
        obs, act = np.atleast_2d(obs), np.atleast_2d(act)
        if obs.shape[1] != self.obs_dim or act.shape[1] != self.act_dim:
            raise ShapeError(
                f"encode got obs {obs.shape}, act {act.shape}; expected dims "
                f"({self.obs_dim}, {self.act_dim})"
            )
        h = self.enc_body.forward(np.concatenate([obs, act], axis=1).astype(self.dtype))
        mu = self.mu_head.forward(h)
        log_std = np.clip(self.logstd_head.forward(h), LOG_STD_MIN, LOG_STD_MAX)
        return mu, np.exp(log_std)

    def sample_latent(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Prior draw used at generation time: N(0, I) clipped to +-latent_clip."""
        z = rng.standard_normal((n, self.latent_dim))
        return np.clip(z, -self.latent_clip, self.latent_clip).astype(self.dtype)

    def decode(self, obs: np.ndarray, z: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
        """Central action(s) for obs; fresh clipped-prior latents when z is absent."""
        obs = np.atleast_2d(obs)
        if z is None:
            if rng is None:
                raise ValueError("decode needs either z or an rng to sample it")
            z = self.sample_latent(obs.shape[0], rng)
        else:
            z = np.atleast_2d(z).astype(self.dtype)
            if z.shape[1] != self.latent_dim:
                raise ShapeError(f"latent must have dimension {self.latent_dim}, got {z.shape[1]}")
        x = np.concatenate([obs.astype(self.dtype), z], axis=1)
        return self.max_action * self.decoder.forward(x)

    def _forward(self, obs: np.ndarray, act: np.ndarray, eps: np.ndarray, want_cache: bool):
        x_enc = np.concatenate([obs, act], axis=1).astype(self.dtype)
        h, body_cache = self.enc_body.forward_cached(x_enc)
        mu, mu_cache = self.mu_head.forward_cached(h)
        log_std_raw, ls_cache = self.logstd_head.forward_cached(h)
        clip_mask = (log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX)
        log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
        sigma = np.exp(log_std)
        z = mu + sigma * eps
        x_dec = np.concatenate([obs.astype(self.dtype), z], axis=1)
        out, dec_cache = self.decoder.forward_cached(x_dec)
        a_hat = self.max_action * out

        b = obs.shape[0]
        diff = (a_hat - act).astype(np.float64)
        recon = float(np.mean(diff**2))
        kl_terms = sigma.astype(np.float64) ** 2 + mu.astype(np.float64) ** 2 - 1.0 - 2.0 * log_std.astype(np.float64)
        kl = float(0.5 * kl_terms.sum() / b)
        total = recon + 0.5 * kl
        losses = (total, recon, kl)
        if not want_cache:
            return losses, None
        cache = (body_cache, mu_cache, ls_cache, dec_cache, mu, sigma, clip_mask, eps, a_hat, act, b)
        return losses, cache

    def loss(self, obs: np.ndarray, act: np.ndarray, rng: np.random.Generator | None = None,
             eps: np.ndarray | None = None):
        """(total, reconstruction, kl) with reparameterized z = mu + sigma * eps.

        total = mean squared reconstruction + 0.5 * mean diagonal-Gaussian KL.
        """
        obs, act = np.atleast_2d(obs), np.atleast_2d(act)
        if obs.shape[0] == 0:
            raise ValueError("loss needs a nonempty batch")
        if eps is None:
            if rng is None:
                raise ValueError("loss needs either eps or an rng to sample it")
            eps = rng.standard_normal((obs.shape[0], self.latent_dim)).astype(self.dtype)
        losses, _ = self._forward(obs, act, eps.astype(self.dtype), want_cache=False)
        return losses

    def _gradients(self, obs: np.ndarray, act: np.ndarray, eps: np.ndarray):
        losses, cache = self._forward(obs, act, eps, want_cache=True)
        body_cache, mu_cache, ls_cache, dec_cache, mu, sigma, clip_mask, eps, a_hat, act_arr, b = cache

        d_a_hat = (2.0 / a_hat.size) * (a_hat - act_arr.astype(self.dtype))
        dec_grads, d_xdec = self.decoder.backward_cached(dec_cache, self.max_action * d_a_hat)
        dz = d_xdec[:, self.obs_dim:]

        d_mu = dz + (0.5 / b) * mu
        d_sigma = dz * eps
        d_log_std = (d_sigma * sigma + (0.5 / b) * (sigma * sigma - 1.0)) * clip_mask
        mu_grads, dh_mu = self.mu_head.backward_cached(mu_cache, d_mu)
        ls_grads, dh_ls = self.logstd_head.backward_cached(ls_cache, d_log_std)
        body_grads, _ = self.enc_body.backward_cached(body_cache, dh_mu + dh_ls)
        grads = body_grads + mu_grads + ls_grads + dec_grads
        return losses, grads

    def update(self, obs: np.ndarray, act: np.ndarray, rng: np.random.Generator):
        """One reparameterized-gradient Adam step; returns the pre-step losses."""
        obs, act = np.atleast_2d(obs), np.atleast_2d(act)
        if obs.shape[0] == 0:
            raise ValueError("update needs a nonempty batch")
        eps = rng.standard_normal((obs.shape[0], self.latent_dim)).astype(self.dtype)
        losses, grads = self._gradients(obs, act, eps)
        if not np.isfinite(losses[0]):
            raise NonFiniteError(f"VAE loss became non-finite ({losses[0]})")
        adam_step(self.params(), grads, self.adam)
        return losses
