# isofit/oracles.py
"""Synthetic scoring oracles standing in for a denoising loss on prompt embeddings."""
from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .inversion import PSEUDO_SLOTS, PromptEmbedding


def pool(prompt: PromptEmbedding, mode: str = "mean") -> np.ndarray:
    """Mean of the pseudo-token slots, or their concatenation."""
    vectors = [prompt.pseudo(name) for name in PSEUDO_SLOTS]
    if mode == "mean":
        return np.mean(vectors, axis=0)
    if mode == "concat":
        return np.concatenate(vectors)
    raise ConfigError(f"unknown pooling mode {mode!r}")


class ScoringOracle(ABC):
    """evaluate() must be deterministic in (prompt, noise_key) and safe to call from several threads."""

    @abstractmethod
    def evaluate(self, prompt: PromptEmbedding, noise_key: int = 0) -> float:
        ...


@dataclass
class QuadraticOracle(ScoringOracle):
    target: np.ndarray
    mode: str = "mean"

    def evaluate(self, prompt, noise_key=0):
        diff = pool(prompt, self.mode) - self.target
        return float(diff @ diff)


@dataclass
class CosineOracle(ScoringOracle):
    target: np.ndarray
    mode: str = "mean"

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if not np.linalg.norm(self.target) > 0:
            raise ContractViolation("cosine oracle needs a non-zero target")

    def evaluate(self, prompt, noise_key=0):
        e = pool(prompt, self.mode)
        denom = np.linalg.norm(e) * np.linalg.norm(self.target)
        if denom == 0:
            return 1.0
        return float(1.0 - (e @ self.target) / denom)


def noise_seed(prompt: PromptEmbedding, noise_key: int) -> int:
    h = hashlib.sha256()
    for slot in prompt.slots:
        h.update(np.ascontiguousarray(slot, dtype="<f8").tobytes())
    h.update(int(noise_key).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest()[:8], "little")


@dataclass
class NoisyProxyOracle(CosineOracle):
    """Cosine loss plus Gaussian noise fixed by (prompt, noise_key)."""
    noise_std: float = 0.01

    def evaluate(self, prompt, noise_key=0):
        noise = np.random.default_rng(noise_seed(prompt, noise_key)).normal(0.0, self.noise_std)
        return super().evaluate(prompt, noise_key) + float(noise)


def builtin_oracles(name: str, target, mode: str = "mean", noise_std: float = 0.01) -> ScoringOracle:
    target = np.asarray(target, dtype=np.float64)
    if name == "quadratic":
        return QuadraticOracle(target, mode)
    if name == "cosine":
        return CosineOracle(target, mode)
    if name == "noisy-proxy":
        return NoisyProxyOracle(target, mode, noise_std)
    raise ConfigError(f"unknown oracle {name!r}")
