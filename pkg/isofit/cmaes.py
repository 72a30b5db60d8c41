# isofit/cmaes.py
"""
CMA-ES with mirrored sampling.

Candidates come in +/- pairs around the mean. Rank weights are averaged over
tied fitness values and the mean shift is accumulated pair by pair, so a
constant fitness leaves the mean exactly where it was.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractViolation

logger = logging.getLogger(__name__)


def population_size(n: int) -> int:
    lam = 4 + int(np.floor(3.0 * np.log(n)))
    return lam + (lam % 2)


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    rng: np.random.Generator
    generation: int = 0
    lam: int = 0
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu_eff: float = 0.0
    c_sigma: float = 0.0
    d_sigma: float = 0.0
    c_c: float = 0.0
    c1: float = 0.0
    c_mu: float = 0.0
    chi_n: float = 0.0
    B: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None   # y of the last ask, (lam, n)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @classmethod
    def create(cls, mean0, sigma0: float, seed: int, lam: Optional[int] = None) -> "CmaState":
        mean = np.asarray(mean0, dtype=np.float64).copy()
        n = len(mean)
        if n < 1 or not sigma0 > 0:
            raise ContractViolation("CMA-ES needs a non-empty mean and a positive step size")
        lam = population_size(n) if lam is None else lam
        if lam < 2 or lam % 2:
            raise ContractViolation(f"mirrored sampling needs an even population, got {lam}")
        mu = lam // 2
        w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        w = w / w.sum()
        mu_eff = 1.0 / float((w * w).sum())
        c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
        c1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
        return cls(
            mean=mean, sigma=float(sigma0), C=np.eye(n), p_sigma=np.zeros(n), p_c=np.zeros(n),
            rng=np.random.default_rng(seed), lam=lam, weights=w, mu_eff=mu_eff,
            c_sigma=c_sigma,
            d_sigma=1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma,
            c_c=(4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n),
            c1=c1,
            c_mu=min(1.0 - c1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff)),
            chi_n=np.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n)),
            B=np.eye(n), D=np.ones(n),
        )


def cma_ask(state: CmaState) -> np.ndarray:
    """Draw the population (lam, n) as interleaved mirrored pairs; remembers the directions."""
    n, half = state.dim, state.lam // 2
    z = state.rng.standard_normal((half, n))
    y_half = (z * state.D) @ state.B.T
    y = np.empty((state.lam, n))
    y[0::2], y[1::2] = y_half, -y_half
    state.samples = y
    return state.mean + state.sigma * y


def _sample_weights(fitness: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Recombination weight per sample (best first), averaged over equal fitness values."""
    lam = len(fitness)
    by_rank = np.zeros(lam)
    by_rank[: len(weights)] = weights
    order = np.argsort(fitness, kind="stable")
    out = np.empty(lam)
    sorted_f = fitness[order]
    start = 0
    while start < lam:
        stop = start + 1
        while stop < lam and sorted_f[stop] == sorted_f[start]:
            stop += 1
        out[order[start:stop]] = by_rank[start:stop].mean()
        start = stop
    return out


def _factorize(C: np.ndarray):
    C = 0.5 * (C + C.T)
    try:
        np.linalg.cholesky(C)
        eigvals, B = np.linalg.eigh(C)
        if np.all(eigvals > 0) and np.all(np.isfinite(eigvals)):
            return C, B, np.sqrt(eigvals)
    except np.linalg.LinAlgError:
        pass
    eigvals, B = np.linalg.eigh(np.nan_to_num(C))
    floor = max(1e-14, 1e-12 * float(np.abs(eigvals).max(initial=0.0)))
    logger.warning("covariance lost positive definiteness; clipping eigenvalues at %.3g", floor)
    eigvals = np.maximum(eigvals, floor)
    return (B * eigvals) @ B.T, B, np.sqrt(eigvals)


def cma_step(state: CmaState, fitness) -> CmaState:
    """Rank-one + rank-mu update with cumulative step-size adaptation. Returns a new state."""
    f = np.asarray(fitness, dtype=np.float64)
    if state.samples is None or len(f) != state.lam:
        raise ContractViolation(f"expected {state.lam} fitness values for the last population, got {len(f)}")
    bad = np.flatnonzero(~np.isfinite(f))
    if len(bad):
        raise ContractViolation(f"non-finite fitness for sample {int(bad[0])}")

    n, y = state.dim, state.samples
    ws = _sample_weights(f, state.weights)
    pair_w = ws[0::2] - ws[1::2]
    y_w = pair_w @ y[0::2]

    mean = state.mean + state.sigma * y_w
    inv_sqrt_y = state.B @ ((state.B.T @ y_w) / state.D)
    p_sigma = (1.0 - state.c_sigma) * state.p_sigma \
        + np.sqrt(state.c_sigma * (2.0 - state.c_sigma) * state.mu_eff) * inv_sqrt_y
    norm_ps = float(np.linalg.norm(p_sigma))
    g = state.generation + 1
    h_sigma = float(norm_ps / np.sqrt(1.0 - (1.0 - state.c_sigma) ** (2 * g)) < (1.4 + 2.0 / (n + 1.0)) * state.chi_n)
    p_c = (1.0 - state.c_c) * state.p_c + h_sigma * np.sqrt(state.c_c * (2.0 - state.c_c) * state.mu_eff) * y_w

    rank_mu = (y * ws[:, None]).T @ y
    C = (1.0 - state.c1 - state.c_mu) * state.C \
        + state.c1 * (np.outer(p_c, p_c) + (1.0 - h_sigma) * state.c_c * (2.0 - state.c_c) * state.C) \
        + state.c_mu * rank_mu
    C, B, D = _factorize(C)
    sigma = state.sigma * float(np.exp((state.c_sigma / state.d_sigma) * (norm_ps / state.chi_n - 1.0)))

    return replace(state, mean=mean, sigma=sigma, C=C, p_sigma=p_sigma, p_c=p_c, generation=g,
                   B=B, D=D, samples=None)
