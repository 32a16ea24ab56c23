"""Bit-exact dataset container and uniform mini-batch sampler.

On disk: magic ``POPO`` | version u32 LE | header length u32 LE | JSON header
{env_id, obs_dim, act_dim, max_action, count, manifest} | ``count`` rows of
little-endian float32: obs, act, reward, next_obs, done. In memory the columns
are separate read-only arrays for cache-friendly batch gathers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from popo.container import read_container, write_container
from popo.errors import SchemaError, ShapeError, TruncatedFileError

_HEADER_FIELDS = ("env_id", "obs_dim", "act_dim", "max_action", "count", "manifest")


class Transition(NamedTuple):
    obs: np.ndarray
    act: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: float


class Batch(NamedTuple):
    obs: np.ndarray  # [B, obs_dim]
    act: np.ndarray  # [B, act_dim]
    reward: np.ndarray  # [B]
    next_obs: np.ndarray  # [B, obs_dim]
    done: np.ndarray  # [B]


@dataclass(frozen=True)
class Dataset:
    """Immutable columnar transition store plus generation manifest."""

    env_id: str
    obs_dim: int
    act_dim: int
    max_action: float
    obs: np.ndarray
    act: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    manifest: dict

    def __post_init__(self):
        n = len(self.reward)
        shapes = {
            "obs": (n, self.obs_dim),
            "act": (n, self.act_dim),
            "reward": (n,),
            "next_obs": (n, self.obs_dim),
            "done": (n,),
        }
        for name, want in shapes.items():
            col = getattr(self, name)
            if col.shape != want:
                raise ShapeError(f"column {name} has shape {col.shape}, expected {want}")
            if col.dtype != np.float32:
                raise ShapeError(f"column {name} must be float32, got {col.dtype}")
            if not np.all(np.isfinite(col)):
                raise ValueError(f"column {name} contains non-finite values")
            col.setflags(write=False)
        if n and not np.all(np.isin(self.done, (0.0, 1.0))):
            raise ValueError("done column must contain only 0.0 / 1.0")

    def __len__(self) -> int:
        return len(self.reward)

    @property
    def count(self) -> int:
        return len(self)

    def header(self) -> dict:
        return {
            "env_id": self.env_id,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "max_action": self.max_action,
            "count": self.count,
            "manifest": self.manifest,
        }

    def rows_blob(self) -> bytes:
        """The documented row-major payload: obs | act | reward | next_obs | done."""
        rows = np.concatenate(
            [self.obs, self.act, self.reward[:, None], self.next_obs, self.done[:, None]],
            axis=1,
        ).astype("<f4")
        return rows.tobytes()

    def content_hash(self) -> str:
        """SHA-256 over the canonical serialized form (header + rows)."""
        h = hashlib.sha256()
        h.update(json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode())
        h.update(self.rows_blob())
        return h.hexdigest()


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    write_container(path, dataset.header(), dataset.rows_blob())


def read_dataset(path: str | Path) -> Dataset:
    header, blob = read_container(path)
    missing = [k for k in _HEADER_FIELDS if k not in header]
    if missing:
        raise SchemaError(f"{path}: dataset header missing fields {missing}")
    obs_dim, act_dim = int(header["obs_dim"]), int(header["act_dim"])
    count = int(header["count"])
    if obs_dim < 1 or act_dim < 1:
        raise SchemaError(f"{path}: dimensions must be >= 1, got obs={obs_dim} act={act_dim}")
    row_width = 2 * obs_dim + act_dim + 2
    expected = count * row_width * 4
    if len(blob) != expected:
        raise TruncatedFileError(
            f"{path}: row payload has {len(blob)} bytes, expected {expected} "
            f"({count} rows x {row_width} x 4 bytes)"
        )
    rows = np.frombuffer(blob, dtype="<f4").reshape(count, row_width).astype(np.float32)
    o = obs_dim
    return Dataset(
        env_id=str(header["env_id"]),
        obs_dim=obs_dim,
        act_dim=act_dim,
        max_action=float(header["max_action"]),
        obs=rows[:, :o].copy(),
        act=rows[:, o:o + act_dim].copy(),
        reward=rows[:, o + act_dim].copy(),
        next_obs=rows[:, o + act_dim + 1:2 * o + act_dim + 1].copy(),
        done=rows[:, 2 * o + act_dim + 1].copy(),
        manifest=header["manifest"],
    )


def sample(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform with replacement; deterministic per RNG stream."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return Batch(
        obs=dataset.obs[idx],
        act=dataset.act[idx],
        reward=dataset.reward[idx],
        next_obs=dataset.next_obs[idx],
        done=dataset.done[idx],
    )


def inspect_summary(dataset: Dataset) -> dict:
    """JSON-ready summary: count, per-column stats, manifest."""

    def stats(col: np.ndarray) -> dict:
        if col.size == 0:
            return {"min": None, "max": None, "mean": None}
        return {
            "min": float(col.min()),
            "max": float(col.max()),
            "mean": float(col.mean(dtype=np.float64)),
        }

    return {
        "env_id": dataset.env_id,
        "count": dataset.count,
        "obs_dim": dataset.obs_dim,
        "act_dim": dataset.act_dim,
        "max_action": dataset.max_action,
        "columns": {
            "obs": stats(dataset.obs),
            "act": stats(dataset.act),
            "reward": stats(dataset.reward),
            "next_obs": stats(dataset.next_obs),
            "done": stats(dataset.done),
        },
        "content_hash": dataset.content_hash(),
        "manifest": dataset.manifest,
    }
