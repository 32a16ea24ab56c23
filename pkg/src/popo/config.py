"""Training hyperparameters shared by the agent, critic and CLI."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

VARIANTS = ("popo", "opo", "td4", "td3")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    xi: float = 0.05  # residual perturbation coefficient
    eta: float = 5e-3  # target-network update rate
    n_candidates: int = 10  # actions generated per state
    batch_size: int = 256
    lr_vae: float = 3e-4
    lr_critic: float = 3e-4
    lr_actor: float = 3e-4
    n_taus: int = 32  # quantile samples for the online critic in the TD loss
    n_target_taus: int = 32  # quantile samples on the target side
    n_value_taus: int = 32  # samples for distorted-expectation values
    kappa: float = 1.0
    distortion_kind: str = "wang"
    zeta: float = -0.75
    distort_td: bool = True  # apply the risk measure to TD-loss taus, not just values
    variant: str = "popo"
    hidden: int = 256
    vae_hidden: int = 750
    n_cos_features: int = 64
    latent_clip: float = 0.5
    eval_interval: int = 5000
    eval_episodes: int = 10
    max_steps: int = 100_000

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.xi < 0:
            raise ValueError(f"xi must be >= 0, got {self.xi}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.n_candidates < 1:
            raise ValueError(f"n_candidates must be >= 1, got {self.n_candidates}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.field_names())
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}
