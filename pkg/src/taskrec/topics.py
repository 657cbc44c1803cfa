"""Biterm topic model over command sequences, with prefix fold-in inference.

Sequences are treated as short documents; every unordered pair of positions
in a document contributes one biterm. The model is fitted by collapsed Gibbs
sampling over biterm topic assignments and read out as a point estimate of
the final-state counts.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .corpus import CommandSequence, Vocabulary
from .errors import DataError, UnknownCommandError, ValidationError, VocabularyMismatchError


@dataclass(frozen=True)
class BtmConfig:
    K: int = 14
    alpha: float = 0.001
    beta: float = 0.005
    iterations: int = 500
    seed: int = 0

    def validate(self):
        if self.K < 1:
            raise ValidationError("K must be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError("alpha and beta must be positive")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")


def extract_biterms(sequence) -> list[tuple[int, int]]:
    """All unordered pairs of distinct positions, canonically (w1 <= w2)."""
    commands = sequence.commands if isinstance(sequence, CommandSequence) else sequence
    if len(commands) == 0:
        raise ValidationError("cannot extract biterms from an empty sequence")
    out = []
    for i in range(len(commands)):
        for j in range(i + 1, len(commands)):
            a, b = commands[i], commands[j]
            out.append((a, b) if a <= b else (b, a))
    return out


@njit(cache=True)
def _gibbs_kernel(w1, w2, K, V, alpha, beta, iterations, seed):
    np.random.seed(seed)
    n_biterms = w1.shape[0]
    z = np.empty(n_biterms, dtype=np.int64)
    n_z = np.zeros(K, dtype=np.int64)
    n_wz = np.zeros((K, V), dtype=np.int64)
    for b in range(n_biterms):
        t = np.random.randint(0, K)
        z[b] = t
        n_z[t] += 1
        n_wz[t, w1[b]] += 1
        n_wz[t, w2[b]] += 1
    probs = np.empty(K, dtype=np.float64)
    vbeta = V * beta
    for _ in range(iterations):
        for b in range(n_biterms):
            t = z[b]
            n_z[t] -= 1
            n_wz[t, w1[b]] -= 1
            n_wz[t, w2[b]] -= 1
            total = 0.0
            for k in range(K):
                denom = 2.0 * n_z[k] + vbeta
                p = (n_z[k] + alpha) \
                    * (n_wz[k, w1[b]] + beta) * (n_wz[k, w2[b]] + beta) \
                    / (denom * (denom + 1.0))
                probs[k] = p
                total += p
            r = np.random.random() * total
            acc = 0.0
            t = K - 1
            for k in range(K):
                acc += probs[k]
                if r < acc:
                    t = k
                    break
            z[b] = t
            n_z[t] += 1
            n_wz[t, w1[b]] += 1
            n_wz[t, w2[b]] += 1
    return z, n_z, n_wz


@dataclass
class BitermModel:
    phi: np.ndarray          # K x |C|, rows sum to 1
    theta: np.ndarray        # K
    config: BtmConfig
    vocab_digest: str
    n_z: np.ndarray          # final-state biterm counts per topic
    n_wz: np.ndarray         # final-state word-slot counts per topic

    @property
    def K(self) -> int:
        return self.phi.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.phi.shape[1]

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({
                "K": self.K,
                "alpha": self.config.alpha,
                "beta": self.config.beta,
                "iterations": self.config.iterations,
                "seed": self.config.seed,
                "phi": self.phi.tolist(),
                "theta": self.theta.tolist(),
                "n_z": self.n_z.tolist(),
                "n_wz": self.n_wz.tolist(),
                "vocab_digest": self.vocab_digest,
            }, fh)

    @staticmethod
    def load(path, vocab: Vocabulary | None = None) -> "BitermModel":
        with open(path) as fh:
            rec = json.load(fh)
        if vocab is not None and rec["vocab_digest"] != vocab.digest():
            raise VocabularyMismatchError(
                f"model at {path} was fitted against a different vocabulary")
        cfg = BtmConfig(K=rec["K"], alpha=rec["alpha"], beta=rec["beta"],
                        iterations=rec["iterations"], seed=rec["seed"])
        return BitermModel(
            phi=np.asarray(rec["phi"]), theta=np.asarray(rec["theta"]),
            config=cfg, vocab_digest=rec["vocab_digest"],
            n_z=np.asarray(rec["n_z"]), n_wz=np.asarray(rec["n_wz"]))


def fit_btm(corpus, cfg: BtmConfig, vocab: Vocabulary) -> BitermModel:
    """Fit the biterm model by collapsed Gibbs sampling (seed-deterministic)."""
    cfg.validate()
    if not corpus:
        raise DataError("cannot fit a topic model on an empty corpus")
    V = len(vocab)
    if cfg.K > V * V:
        warnings.warn("K exceeds the number of possible biterms; "
                      "the model is degenerate", stacklevel=2)
    w1, w2 = [], []
    for seq in corpus:
        if any(c < 0 or c >= V for c in seq.commands):
            raise UnknownCommandError("corpus contains ids outside the vocabulary")
        for a, b in extract_biterms(seq):
            w1.append(a)
            w2.append(b)
    if not w1:
        raise DataError("corpus yields no biterms (all documents length < 2)")
    w1 = np.asarray(w1, dtype=np.int64)
    w2 = np.asarray(w2, dtype=np.int64)
    _, n_z, n_wz = _gibbs_kernel(w1, w2, cfg.K, V, cfg.alpha, cfg.beta,
                                 cfg.iterations, cfg.seed)
    phi = (n_wz + cfg.beta) / (n_wz.sum(axis=1, keepdims=True) + V * cfg.beta)
    theta = (n_z + cfg.alpha) / (len(w1) + cfg.K * cfg.alpha)
    return BitermModel(phi=phi, theta=theta, config=cfg,
                       vocab_digest=vocab.digest(), n_z=n_z, n_wz=n_wz)


def infer_task_distribution(model: BitermModel, prefix) -> np.ndarray:
    """Closed-form fold-in: P(z|d) averaged over the document's biterms.

    Prefixes with fewer than 2 commands carry no biterm evidence and get the
    corpus prior theta.
    """
    commands = prefix.commands if isinstance(prefix, CommandSequence) else tuple(prefix)
    V = model.vocab_size
    if any(c < 0 or c >= V for c in commands):
        raise UnknownCommandError("prefix contains ids outside the vocabulary")
    if len(commands) < 2:
        return model.theta / model.theta.sum()
    pairs = extract_biterms(commands)
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    # responsibilities: K x |pairs|
    resp = model.theta[:, None] * model.phi[:, a] * model.phi[:, b]
    resp_sum = resp.sum(axis=0)
    resp_sum[resp_sum == 0.0] = 1.0
    p = (resp / resp_sum).mean(axis=1)
    return p / p.sum()


def top_commands(model: BitermModel, z: int, n: int = 20):
    """The n highest-probability commands of topic z, ties to the lower id."""
    if not 0 <= z < model.K:
        raise ValidationError(f"topic index {z} out of range")
    n = min(n, model.vocab_size)
    row = model.phi[z]
    order = np.lexsort((np.arange(len(row)), -row))
    return [(int(i), float(row[i])) for i in order[:n]]
