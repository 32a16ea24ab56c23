"""Offline reinforcement-learning lab: pessimistic distributional policy optimization.

Core pieces:

- ``popo.nn``      minimal dense-network engine (manual backprop, Adam)
- ``popo.critic``  implicit-quantile critic, distortion risk measures, twin-Q baseline
- ``popo.vae``     conditional VAE generating in-distribution "central" actions
- ``popo.agent``   the POPO estimator (fit on a static dataset / predict actions) and ablations
- ``popo.envs``    deterministic toy control environments + scripted behavior policies
- ``popo.data``    bit-exact binary dataset container and mini-batch sampler
- ``popo.gap``     tabular estimation-gap analyzer (true vs dataset value functions)
- ``popo.cli``     gen-data / train / eval / gap / dataset-inspect commands
"""

from popo.agent import POPO, EvalResult
from popo.config import TrainConfig
from popo.critic import (
    DistortionMeasure,
    QuantileCritic,
    TwinQCritic,
    distort,
    q_beta,
    quantile_huber,
    z_values,
)
from popo.data import Batch, Dataset, Transition, inspect_summary, read_dataset, sample, write_dataset
from popo.envs import EnvSpec, collect_dataset, make_env, scripted_policy
from popo.gap import (
    EmpiricalModel,
    GapReport,
    TabularMDP,
    TabularPolicy,
    empirical_model,
    exact_value,
    gap_direct,
    gap_recursive,
    gap_report,
)
from popo.nn import AdamState, DenseNet, adam_step, backward, forward, grad_check
from popo.vae import ConditionalVAE

__all__ = [
    "POPO",
    "EvalResult",
    "TrainConfig",
    "DistortionMeasure",
    "QuantileCritic",
    "TwinQCritic",
    "distort",
    "q_beta",
    "quantile_huber",
    "z_values",
    "Batch",
    "Dataset",
    "Transition",
    "inspect_summary",
    "read_dataset",
    "sample",
    "write_dataset",
    "EnvSpec",
    "collect_dataset",
    "make_env",
    "scripted_policy",
    "EmpiricalModel",
    "GapReport",
    "TabularMDP",
    "TabularPolicy",
    "empirical_model",
    "exact_value",
    "gap_direct",
    "gap_recursive",
    "gap_report",
    "AdamState",
    "DenseNet",
    "adam_step",
    "backward",
    "forward",
    "grad_check",
    "ConditionalVAE",
]

__version__ = "0.1.0"
