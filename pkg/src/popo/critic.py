"""Distributional quantile critic with distortion risk measures.

The critic maps (state, action, tau) to a return quantile. Tau enters through
64 cosine features, linearly embedded to trunk width, ReLU'd, and fused
multiplicatively with the trunk's top activation (the IQN scheme). Because the
output head is linear, head(trunk * embed) is evaluated in the factorized form
(trunk * w_head) @ embed^T, which avoids materializing the fused tensor when
scoring many candidate actions.

A twin scalar critic (clipped double-Q) backs the non-distributional ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from popo.config import TrainConfig
from popo.data import Batch
from popo.errors import NonFiniteError, ShapeError
from popo.nn import AdamState, DenseNet, adam_step
from popo.nn import soft_update as _soft_update_net

DISTORTION_KINDS = ("wang", "cpw", "cvar", "identity")

# ndtri blows up at exactly 0/1; endpoints are handled by their limits instead
_TAU_EPS = 1e-8


@dataclass(frozen=True)
class DistortionMeasure:
    """Reweighting of quantile levels; pessimistic measures oversample low tau."""

    kind: str
    zeta: float = 0.0

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ValueError(f"kind must be one of {DISTORTION_KINDS}, got {self.kind!r}")
        if self.kind == "cvar" and not 0.0 < self.zeta <= 1.0:
            raise ValueError(f"cvar needs zeta in (0, 1], got {self.zeta}")
        if self.kind == "cpw" and self.zeta <= 0.0:
            raise ValueError(f"cpw needs zeta > 0, got {self.zeta}")

    @classmethod
    def from_config(cls, doc) -> "DistortionMeasure":
        if isinstance(doc, TrainConfig):
            return cls(doc.distortion_kind, doc.zeta)
        return cls(doc.get("kind", "wang"), float(doc.get("zeta", -0.75)))


def distort(measure: DistortionMeasure, tau):
    """beta(tau) in [0, 1] for scalar or array tau.

    wang: Phi(Phi^-1(tau) + zeta); cpw: tau^z / (tau^z + (1-tau)^z)^(1/z);
    cvar: zeta * tau; identity: tau. Endpoints map exactly to themselves where
    the measure's limit does (wang, cpw, identity).
    """
    arr = np.asarray(tau, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("tau must lie in [0, 1]")
    kind, zeta = measure.kind, measure.zeta
    if kind == "identity":
        out = arr.copy()
    elif kind == "cvar":
        out = zeta * arr
    elif kind == "cpw":
        num = arr**zeta
        out = num / (num + (1.0 - arr) ** zeta) ** (1.0 / zeta)
    else:  # wang
        interior = np.clip(arr, _TAU_EPS, 1.0 - _TAU_EPS)
        out = ndtr(ndtri(interior) + zeta)
        out = np.where(arr <= 0.0, 0.0, np.where(arr >= 1.0, 1.0, out))
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.isscalar(tau) or arr.ndim == 0 else out


def cos_features(taus: np.ndarray, n_features: int, dtype=np.float64) -> np.ndarray:
    """[..., n_features] with entry i = cos(i * pi * tau), via the Chebyshev recurrence.

    Built feature-major (contiguous rows) and transposed once at the end.
    """
    taus = np.asarray(taus)
    tmp = np.empty((n_features,) + taus.shape, dtype=dtype)
    tmp[0] = 1.0
    if n_features > 1:
        c1 = np.cos(np.pi * taus.astype(np.float64)).astype(dtype)
        tmp[1] = c1
        two_c1 = 2.0 * c1
        for k in range(2, n_features):
            np.multiply(two_c1, tmp[k - 1], out=tmp[k])
            tmp[k] -= tmp[k - 2]
    axes = tuple(range(1, tmp.ndim)) + (0,)
    return np.ascontiguousarray(tmp.transpose(axes))


def quantile_huber(deltas: np.ndarray, taus: np.ndarray, kappa: float = 1.0) -> float:
    """(1/N') sum_i sum_j |tau_i - 1{delta<0}| * L_kappa(delta_ij) / kappa.

    ``deltas`` is the [N, N'] TD-error matrix of one transition; ``taus`` the N
    quantile levels of its rows.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    if deltas.ndim != 2:
        raise ShapeError(f"deltas must be [N, N'], got shape {deltas.shape}")
    if taus.shape != (deltas.shape[0],):
        raise ShapeError(f"taus must have length {deltas.shape[0]}, got {taus.shape}")
    if kappa <= 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    if not np.all(np.isfinite(deltas)):
        raise NonFiniteError("non-finite TD delta in quantile_huber")
    if np.any(taus < 0) or np.any(taus > 1):
        raise ValueError("taus must lie in [0, 1]")
    abs_d = np.abs(deltas)
    huber = np.where(abs_d <= kappa, 0.5 * deltas**2, kappa * (abs_d - 0.5 * kappa))
    weight = np.abs(taus[:, None] - (deltas < 0.0))
    return float((weight * huber / kappa).sum() / deltas.shape[1])


def _huber_loss_and_grad(deltas: np.ndarray, taus: np.ndarray, kappa: float):
    """Batch mean of the per-transition loss above, plus d(loss)/d(deltas).

    deltas: [B, N, N'], taus: [B, N]. In-place heavy: these tensors dominate
    the TD step's non-GEMM cost.
    """
    b, _, n_prime = deltas.shape
    dt = deltas.dtype.type
    scale = 1.0 / (kappa * n_prime * b)

    # L_kappa(x) = 0.5*min(|x|,k)^2 + k*(|x| - min(|x|,k))
    abs_d = np.abs(deltas)
    clipped = np.minimum(abs_d, dt(kappa))
    huber = abs_d
    huber -= clipped
    huber *= dt(kappa)
    half_sq = clipped * clipped
    half_sq *= dt(0.5)
    huber += half_sq

    weight = (deltas < 0).astype(deltas.dtype)
    np.subtract(taus[:, :, None], weight, out=weight)
    np.abs(weight, out=weight)

    huber *= weight
    loss = float(huber.sum(dtype=np.float64) * scale)

    grad = np.clip(deltas, -kappa, kappa)  # L'_kappa
    grad *= weight
    grad *= dt(scale)
    return loss, grad


class QuantileCritic:
    """Implicit-quantile network with a frozen target copy and its own Adam state."""

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator,
                 hidden: int = 256, n_cos: int = 64, lr: float = 3e-4, dtype=np.float32):
        in_dim = obs_dim + act_dim
        self.n_cos = n_cos
        self.trunk = DenseNet.create([in_dim, hidden, hidden], ["relu", "relu"], rng, dtype)
        self.embed = DenseNet.create([n_cos, hidden], ["relu"], rng, dtype)
        self.head = DenseNet.create([hidden, 1], ["identity"], rng, dtype)
        self.target_trunk = self.trunk.copy()
        self.target_embed = self.embed.copy()
        self.target_head = self.head.copy()
        self.adam = AdamState.for_params(self.params(), lr=lr)

    @property
    def dtype(self):
        return self.trunk.dtype

    def params(self) -> list[np.ndarray]:
        return self.trunk.params() + self.embed.params() + self.head.params()

    def astype(self, dtype) -> "QuantileCritic":
        clone = object.__new__(QuantileCritic)
        clone.n_cos = self.n_cos
        clone.trunk = self.trunk.astype(dtype)
        clone.embed = self.embed.astype(dtype)
        clone.head = self.head.astype(dtype)
        clone.target_trunk = self.target_trunk.astype(dtype)
        clone.target_embed = self.target_embed.astype(dtype)
        clone.target_head = self.target_head.astype(dtype)
        clone.adam = AdamState.for_params(clone.params(), lr=self.adam.lr)
        return clone

    def _nets(self, use_target: bool):
        if use_target:
            return self.target_trunk, self.target_embed, self.target_head
        return self.trunk, self.embed, self.head

    def _head_vec(self, head: DenseNet):
        return head.layers[0].weight[0], head.layers[0].bias[0]

    # -- per-row taus (TD loss path) --------------------------------------

    def z_rows(self, x: np.ndarray, taus: np.ndarray, use_target: bool = False) -> np.ndarray:
        """x: [B, in], taus: [B, N] -> z: [B, N]. Forward only."""
        trunk, embed, head = self._nets(use_target)
        t_out = trunk.forward(x)
        feats = cos_features(taus, self.n_cos, self.dtype)
        b, n = taus.shape
        emb = embed.forward(feats.reshape(b * n, self.n_cos)).reshape(b, n, -1)
        w, bias = self._head_vec(head)
        tw = t_out * w
        return (emb @ tw[:, :, None])[:, :, 0] + bias

    def z_rows_cached(self, x: np.ndarray, taus: np.ndarray):
        trunk, embed, head = self._nets(False)
        t_out, t_cache = trunk.forward_cached(x)
        feats = cos_features(taus, self.n_cos, self.dtype)
        b, n = taus.shape
        emb_flat, e_cache = embed.forward_cached(feats.reshape(b * n, self.n_cos))
        emb = emb_flat.reshape(b, n, -1)
        w, bias = self._head_vec(head)
        tw = t_out * w
        z = (emb @ tw[:, :, None])[:, :, 0] + bias
        return z, (t_cache, e_cache, t_out, emb, tw, w)

    def backward_rows(self, cache, dz: np.ndarray):
        """Gradients for params() plus the input gradient, from dLoss/dz [B, N]."""
        t_cache, e_cache, t_out, emb, tw, w = cache
        b, n, h = emb.shape
        dz = dz.astype(self.dtype, copy=False)
        s = (dz[:, None, :] @ emb)[:, 0, :]  # [B, H]: sum_n dz * emb
        d_trunk_out = s * w
        d_w = np.sum(s * t_out, axis=0, dtype=self.dtype)
        d_bias = np.asarray([dz.sum(dtype=np.float64)], dtype=self.dtype)
        d_emb = (dz[:, :, None] * tw[:, None, :]).reshape(b * n, h)
        e_grads, _ = self.embed.backward_cached(e_cache, d_emb)
        t_grads, dx = self.trunk.backward_cached(t_cache, d_trunk_out)
        return t_grads + e_grads + [d_w[None, :], d_bias], dx

    # -- shared taus (scoring / value path) --------------------------------

    def z_shared(self, x: np.ndarray, taus: np.ndarray, use_target: bool = False) -> np.ndarray:
        """x: [M, in], taus: [K] -> z: [M, K]. Forward only."""
        trunk, embed, head = self._nets(use_target)
        t_out = trunk.forward(x)
        emb = embed.forward(cos_features(taus, self.n_cos, self.dtype))  # [K, H]
        w, bias = self._head_vec(head)
        return (t_out * w) @ emb.T + bias

    def z_shared_cached(self, x: np.ndarray, taus: np.ndarray):
        trunk, embed, head = self._nets(False)
        t_out, t_cache = trunk.forward_cached(x)
        emb, e_cache = embed.forward_cached(cos_features(taus, self.n_cos, self.dtype))
        w, bias = self._head_vec(head)
        tw = t_out * w
        z = tw @ emb.T + bias
        return z, (t_cache, e_cache, t_out, emb, tw, w)

    def backward_shared(self, cache, dz: np.ndarray):
        t_cache, e_cache, t_out, emb, tw, w = cache
        dz = dz.astype(self.dtype, copy=False)
        s = dz @ emb  # [M, H]
        d_trunk_out = s * w
        d_w = np.sum(s * t_out, axis=0, dtype=self.dtype)
        d_bias = np.asarray([dz.sum(dtype=np.float64)], dtype=self.dtype)
        d_emb = dz.T @ tw  # [K, H]
        e_grads, _ = self.embed.backward_cached(e_cache, d_emb)
        t_grads, dx = self.trunk.backward_cached(t_cache, d_trunk_out)
        return t_grads + e_grads + [d_w[None, :], d_bias], dx

    def input_grad_shared(self, cache, dz: np.ndarray) -> np.ndarray:
        """d<dz, z>/d(input) without computing parameter gradients."""
        t_cache, e_cache, t_out, emb, tw, w = cache
        dz = dz.astype(self.dtype, copy=False)
        d_trunk_out = (dz @ emb) * w
        return self.trunk.input_grad_cached(t_cache, d_trunk_out)

    def q_values(self, x: np.ndarray, measure: DistortionMeasure, n_taus: int,
                 rng: np.random.Generator, use_target: bool = False) -> np.ndarray:
        """Distorted expectations for a batch of inputs, one shared tau draw."""
        taus = distort(measure, rng.uniform(size=n_taus))
        return self.z_shared(x, taus, use_target).mean(axis=1, dtype=np.float64)

    def apply_gradients(self, grads: list[np.ndarray]) -> None:
        adam_step(self.params(), grads, self.adam)

    def soft_update(self, eta: float) -> None:
        _soft_update_net(self.target_trunk, self.trunk, eta)
        _soft_update_net(self.target_embed, self.embed, eta)
        _soft_update_net(self.target_head, self.head, eta)


# -- public single-pair operations --------------------------------------------


def z_values(critic: QuantileCritic, obs: np.ndarray, act: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Quantile predictions Z_tau(s, a) at the given levels."""
    taus = np.asarray(taus, dtype=np.float64)
    if np.any(taus < 0) or np.any(taus > 1):
        raise ValueError("taus must lie in [0, 1]")
    x = np.concatenate([np.asarray(obs), np.asarray(act)]).astype(critic.dtype)
    return critic.z_rows(x[None, :], taus[None, :])[0]


def q_beta(critic: QuantileCritic, obs: np.ndarray, act: np.ndarray,
           measure: DistortionMeasure, n_taus: int, rng: np.random.Generator) -> float:
    """Monte-Carlo distorted expectation: mean of Z at beta(tau_k), tau_k ~ U(0,1)."""
    if n_taus < 1:
        raise ValueError("n_taus must be >= 1")
    taus = distort(measure, rng.uniform(size=n_taus))
    x = np.concatenate([np.asarray(obs), np.asarray(act)]).astype(critic.dtype)
    return float(critic.z_shared(x[None, :], taus).mean(dtype=np.float64))


# -- updates -------------------------------------------------------------------


def critic_update(batch: Batch, critic: QuantileCritic, next_action_fn,
                  measure: DistortionMeasure, cfg: TrainConfig,
                  rng: np.random.Generator) -> float:
    """One quantile-Huber TD step; returns the pre-step loss.

    Targets r + gamma * (1 - done) * Z_tau'(s', a') use the frozen target
    network and the caller's action generator (gradient-isolated).
    """
    dtype = critic.dtype
    b = len(batch.reward)
    taus = rng.uniform(size=(b, cfg.n_taus))
    target_taus = rng.uniform(size=(b, cfg.n_target_taus))
    if cfg.distort_td:
        taus = distort(measure, taus)
        target_taus = distort(measure, target_taus)
    taus = taus.astype(dtype)
    target_taus = target_taus.astype(dtype)

    next_act = next_action_fn(batch.next_obs, rng)
    x_next = np.concatenate([batch.next_obs, next_act], axis=1).astype(dtype, copy=False)
    z_next = critic.z_rows(x_next, target_taus, use_target=True)  # [B, N']
    mask = (cfg.gamma * (1.0 - batch.done)).astype(dtype)
    y = batch.reward[:, None].astype(dtype) + mask[:, None] * z_next

    x = np.concatenate([batch.obs, batch.act], axis=1).astype(dtype, copy=False)
    z, cache = critic.z_rows_cached(x, taus)  # [B, N]
    deltas = y[:, None, :] - z[:, :, None]  # [B, N, N']
    loss, d_deltas = _huber_loss_and_grad(deltas, taus, cfg.kappa)
    if not np.isfinite(loss):
        raise NonFiniteError(f"critic loss became non-finite ({loss})")
    dz = -d_deltas.sum(axis=2)
    grads, _ = critic.backward_rows(cache, dz)
    critic.apply_gradients(grads)
    return loss


class TwinQCritic:
    """Two independent scalar Q networks with target copies (clipped double-Q)."""

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator,
                 hidden: int = 256, lr: float = 3e-4, dtype=np.float32):
        in_dim = obs_dim + act_dim
        dims, acts = [in_dim, hidden, hidden, 1], ["relu", "relu", "identity"]
        self.q1 = DenseNet.create(dims, acts, rng, dtype)
        self.q2 = DenseNet.create(dims, acts, rng, dtype)
        self.target_q1 = self.q1.copy()
        self.target_q2 = self.q2.copy()
        self.adam = AdamState.for_params(self.params(), lr=lr)

    @property
    def dtype(self):
        return self.q1.dtype

    def params(self) -> list[np.ndarray]:
        return self.q1.params() + self.q2.params()

    def astype(self, dtype) -> "TwinQCritic":
        clone = object.__new__(TwinQCritic)
        clone.q1 = self.q1.astype(dtype)
        clone.q2 = self.q2.astype(dtype)
        clone.target_q1 = self.target_q1.astype(dtype)
        clone.target_q2 = self.target_q2.astype(dtype)
        clone.adam = AdamState.for_params(clone.params(), lr=self.adam.lr)
        return clone

    def q_values(self, x: np.ndarray, use_target: bool = False) -> np.ndarray:
        """Q1 heads the scoring/actor path (TD3 convention); shape [M]."""
        net = self.target_q1 if use_target else self.q1
        return net.forward(x)[:, 0]

    def soft_update(self, eta: float) -> None:
        _soft_update_net(self.target_q1, self.q1, eta)
        _soft_update_net(self.target_q2, self.q2, eta)


def twin_q_update(batch: Batch, twin: TwinQCritic, next_action_fn,
                  cfg: TrainConfig, rng: np.random.Generator) -> float:
    """Clipped double-Q TD step with mean-squared loss; returns pre-step loss."""
    dtype = twin.dtype
    b = len(batch.reward)
    next_act = next_action_fn(batch.next_obs, rng)
    x_next = np.concatenate([batch.next_obs, next_act], axis=1).astype(dtype, copy=False)
    q1_t = twin.target_q1.forward(x_next)[:, 0]
    q2_t = twin.target_q2.forward(x_next)[:, 0]
    y = batch.reward.astype(dtype) + (cfg.gamma * (1.0 - batch.done)).astype(dtype) * np.minimum(q1_t, q2_t)

    x = np.concatenate([batch.obs, batch.act], axis=1).astype(dtype, copy=False)
    out1, c1 = twin.q1.forward_cached(x)
    out2, c2 = twin.q2.forward_cached(x)
    err1 = out1[:, 0] - y
    err2 = out2[:, 0] - y
    loss = float(np.mean(err1.astype(np.float64) ** 2) + np.mean(err2.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise NonFiniteError(f"twin-Q loss became non-finite ({loss})")
    g1, _ = twin.q1.backward_cached(c1, (2.0 / b) * err1[:, None])
    g2, _ = twin.q2.backward_cached(c2, (2.0 / b) * err2[:, None])
    adam_step(twin.params(), g1 + g2, twin.adam)
    return loss
