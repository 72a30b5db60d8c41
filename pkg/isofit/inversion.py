# isofit/inversion.py
"""
Multi-word prompt inversion: "a <style> image of <object> <etc>".

Pseudo-token embeddings start from similarity-weighted vocabulary mixtures
(style, object) or noise (etc) and are then searched by CMA-ES inside a PCA
subspace of the vocabulary: e = e0 + W_p Q.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .cmaes import CmaState, cma_ask, cma_step
from .errors import ContractViolation, InputError, OracleFailure

logger = logging.getLogger(__name__)

TEMPLATE = ("a", "<style>", "image", "of", "<object>", "<etc>")
PSEUDO_SLOTS = ("style", "object", "etc")
SLOT_INDEX = {"style": 1, "object": 4, "etc": 5}
CARRIERS = ("a", "image", "of")


# ============================================================================
# VOCABULARY
# ============================================================================

@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if emb.ndim != 2 or emb.shape[0] != len(self.tokens) or emb.shape[0] < 1:
            raise ContractViolation(f"embeddings must be ({len(self.tokens)}, D), got {emb.shape}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractViolation("vocabulary tokens must be unique")
        bad = np.flatnonzero(~np.isfinite(emb).all(axis=1))
        if len(bad):
            raise ContractViolation(f"non-finite embedding for token {self.tokens[bad[0]]!r}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def row(self, token: str) -> np.ndarray:
        try:
            return self.embeddings[self.tokens.index(token)]
        except ValueError:
            raise ContractViolation(f"token {token!r} is not in the vocabulary") from None


def read_vocabulary(path: Union[str, Path]) -> Vocabulary:
    """First line "V D", then V lines "token v1 ... vD"."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"vocabulary file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    try:
        V, D = (int(x) for x in lines[0].split())
        tokens, rows = [], []
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != D + 1:
                raise InputError(f"{path}: expected {D} values for token {parts[0]!r}")
            tokens.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    except (IndexError, ValueError) as e:
        raise InputError(f"{path}: malformed vocabulary ({e})") from e
    if len(tokens) != V:
        raise InputError(f"{path}: header says {V} tokens, found {len(tokens)}")
    if V < 2:
        raise InputError(f"{path}: vocabulary needs at least 2 tokens")
    try:
        return Vocabulary(tuple(tokens), np.array(rows, dtype=np.float64).reshape(V, D))
    except ContractViolation as e:
        raise InputError(f"{path}: {e}") from e


def read_query(path: Union[str, Path], dim: Optional[int] = None) -> np.ndarray:
    """One line of D floats."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"query embedding file not found: {path}")
    try:
        q = np.array([float(x) for x in path.read_text().split()], dtype=np.float64)
    except ValueError as e:
        raise InputError(f"{path}: malformed query embedding ({e})") from e
    if dim is not None and q.shape != (dim,):
        raise InputError(f"{path}: expected {dim} values, got {q.size}")
    return q


def write_embedding(slots: Mapping[str, np.ndarray], path: Union[str, Path]) -> Path:
    """One line of D floats per pseudo-token, in template order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(f"{x:.17g}" for x in slots[name]) for name in PSEUDO_SLOTS]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# ============================================================================
# PROMPT
# ============================================================================

@dataclass(frozen=True)
class PromptEmbedding:
    slots: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.slots) != len(TEMPLATE):
            raise ContractViolation(f"prompt needs {len(TEMPLATE)} slots, got {len(self.slots)}")

    def pseudo(self, name: str) -> np.ndarray:
        return self.slots[SLOT_INDEX[name]]

    def with_slots(self, values: Mapping[str, np.ndarray]) -> "PromptEmbedding":
        slots = list(self.slots)
        for name, value in values.items():
            slots[SLOT_INDEX[name]] = np.asarray(value, dtype=np.float64)
        return PromptEmbedding(tuple(slots))


def assemble_prompt(e_style, e_object, e_etc, carrier_vocab: Vocabulary) -> PromptEmbedding:
    vectors = [np.asarray(v, dtype=np.float64) for v in (e_style, e_object, e_etc)]
    for name, v in zip(PSEUDO_SLOTS, vectors):
        if v.shape != (carrier_vocab.dim,):
            raise ContractViolation(f"{name} embedding must have {carrier_vocab.dim} entries, got {v.shape}")
    carriers = {w: carrier_vocab.row(w).copy() for w in CARRIERS}
    style, obj, etc = vectors
    return PromptEmbedding((carriers["a"], style, carriers["image"], carriers["of"], obj, etc))


# ============================================================================
# SUBSPACE
# ============================================================================

@dataclass(frozen=True)
class EmbeddingSubspace:
    mean: np.ndarray
    basis: np.ndarray          # W_p, (D, d), orthonormal columns
    eigenvalues: np.ndarray    # (d,), non-increasing

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def lift(self, q: np.ndarray) -> np.ndarray:
        return self.basis @ q

    def project(self, e: np.ndarray) -> np.ndarray:
        return self.basis.T @ e

    def reconstruct(self, rows: np.ndarray) -> np.ndarray:
        centered = np.atleast_2d(rows) - self.mean
        return self.mean + (centered @ self.basis) @ self.basis.T


def pca_fit(embeddings: np.ndarray, d: int) -> EmbeddingSubspace:
    """Top-d eigenvectors of the row covariance; each column's largest-magnitude entry is positive."""
    X = np.asarray(embeddings, dtype=np.float64)
    V, D = X.shape
    if V < 2:
        raise ContractViolation("PCA needs at least 2 rows")
    if not 1 <= d < V or d > D:
        raise ContractViolation(f"subspace dimension must satisfy 1 <= d < V={V} and d <= D={D}, got {d}")
    mu = X.mean(axis=0)
    cov = (X - mu).T @ (X - mu) / (V - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")[:d]
    vals, W = np.maximum(eigvals[order], 0.0), eigvecs[:, order].copy()
    lead = np.argmax(np.abs(W), axis=0)
    W *= np.where(W[lead, np.arange(d)] < 0, -1.0, 1.0)
    return EmbeddingSubspace(mean=mu, basis=W, eigenvalues=vals)


# ============================================================================
# INITIALIZATION
# ============================================================================

def cosine_similarities(query: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    norms = np.linalg.norm(vocab.embeddings, axis=1) * np.linalg.norm(query)
    dots = vocab.embeddings @ query
    return np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)


def init_token(query_embed: Optional[np.ndarray], vocab: Vocabulary, kind: str, temperature: float = 0.1,
               top_k: int = 16, seed: int = 0) -> np.ndarray:
    """
    style / object: softmax(c / tau) over the top_k most similar rows, mixed.
    etc: seeded Gaussian with componentwise std = mean per-row std of the vocabulary.
    """
    if kind == "etc":
        std = float(vocab.embeddings.std(axis=1).mean())
        return np.random.default_rng([seed, 17]).normal(0.0, std, size=vocab.dim)
    if kind not in ("style", "object"):
        raise ContractViolation(f"unknown slot kind {kind!r}")
    q = np.asarray(query_embed, dtype=np.float64)
    if q.shape != (vocab.dim,) or not np.all(np.isfinite(q)):
        raise ContractViolation(f"query embedding must be {vocab.dim} finite values")
    if not np.any(q):
        raise ContractViolation("query embedding is all zeros")
    if not temperature > 0:
        raise ContractViolation("temperature must be positive")
    c = cosine_similarities(q, vocab)
    top = np.argsort(-c, kind="stable")[: max(1, min(top_k, vocab.size))]
    logits = c[top] / temperature
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return w @ vocab.embeddings[top]


# ============================================================================
# OPTIMIZATION
# ============================================================================

@dataclass
class InversionResult:
    slots: Dict[str, np.ndarray]
    coefficients: Dict[str, np.ndarray]
    best_loss: float
    initial_loss: float
    trace_best: List[float] = field(default_factory=list)
    trace_sigma: List[float] = field(default_factory=list)
    evaluations: int = 0


def _split_budget(generations: int, parts: int) -> List[int]:
    base, extra = divmod(generations, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def optimize_embedding(oracle, e0: Mapping[str, np.ndarray], subspace: EmbeddingSubspace,
                       base_prompt: PromptEmbedding, generations: int = 200, seed: int = 0,
                       sigma0: float = 0.5, noise_key: int = 0,
                       optimize_slots: Sequence[str] = PSEUDO_SLOTS, sequential: bool = False,
                       workers: int = 1) -> InversionResult:
    """
    Minimize oracle(e0 + W_p Q) over the coefficients of the selected slots.
    Returns the best candidate ever evaluated; the trace holds best-so-far per generation.
    """
    if generations < 1:
        raise ContractViolation("generation budget must be at least 1")
    slots = [s for s in PSEUDO_SLOTS if s in set(optimize_slots)]
    if not slots or len(slots) != len(set(optimize_slots)):
        raise ContractViolation(f"optimize_slots must be a non-empty subset of {PSEUDO_SLOTS}")
    e0 = {name: np.asarray(e0[name], dtype=np.float64) for name in PSEUDO_SLOTS}
    d = subspace.dim

    def decode(coeffs: Mapping[str, np.ndarray]) -> PromptEmbedding:
        return base_prompt.with_slots({name: e0[name] + subspace.lift(coeffs[name]) for name in PSEUDO_SLOTS})

    best_q = {name: np.zeros(d) for name in PSEUDO_SLOTS}
    initial = float(oracle.evaluate(decode(best_q), noise_key))
    best_loss = np.inf
    trace_best: List[float] = []
    trace_sigma: List[float] = []
    evaluations = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    rounds = [(slots, generations)] if not sequential else \
        [([s], g) for s, g in zip(slots, _split_budget(generations, len(slots))) if g > 0]
    try:
        for round_index, (active, budget) in enumerate(rounds):
            start = np.concatenate([best_q[name] for name in active])
            state = CmaState.create(start, sigma0, seed=int(np.random.SeedSequence([seed, round_index]).generate_state(1)[0]))
            for _ in range(budget):
                generation = len(trace_best) + 1
                X = cma_ask(state)
                candidates = []
                for x in X:
                    q = dict(best_q)
                    for i, name in enumerate(active):
                        q[name] = x[i * d:(i + 1) * d]
                    candidates.append(q)
                prompts = [decode(q) for q in candidates]
                try:
                    if pool is None:
                        fitness = [oracle.evaluate(p, noise_key) for p in prompts]
                    else:
                        fitness = list(pool.map(lambda p: oracle.evaluate(p, noise_key), prompts))
                except Exception as e:
                    raise OracleFailure(f"oracle failed: {e}", generation) from e
                fitness = np.asarray(fitness, dtype=np.float64)
                bad = np.flatnonzero(~np.isfinite(fitness))
                if len(bad):
                    raise OracleFailure(f"oracle returned a non-finite loss for sample {int(bad[0])}", generation)
                evaluations += len(fitness)
                k = int(np.argmin(fitness))
                if fitness[k] < best_loss:
                    best_loss = float(fitness[k])
                    best_q = {name: v.copy() for name, v in candidates[k].items()}
                state = cma_step(state, fitness)
                trace_best.append(best_loss)
                trace_sigma.append(state.sigma)
                if generation % 50 == 0:
                    logger.info("generation %d: best loss %.6g, sigma %.3g", generation, best_loss, state.sigma)
    finally:
        if pool is not None:
            pool.shutdown()

    best_slots = {name: e0[name] + subspace.lift(best_q[name]) for name in PSEUDO_SLOTS}
    return InversionResult(slots=best_slots, coefficients=best_q, best_loss=best_loss, initial_loss=initial,
                           trace_best=trace_best, trace_sigma=trace_sigma, evaluations=evaluations)
