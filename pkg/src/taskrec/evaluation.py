"""Metrics and the multi-run experiment harness.

Recommenders are evaluated per step: every position t in [t_min, len-2] of
every test sequence is an evaluation point predicting the command at t+1.
Help models report precision/recall at a threshold and AU-ROC.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, ValidationError


def rank_topk(scores, k):
    """Indices of the k highest scores, ties broken by lower index."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def topk_accuracy(ranker, test_set, k: int, t_min: int = 1) -> float:
    """Fraction of evaluation points whose true next command is in the top k.

    `ranker` maps a prefix (list of command ids) to a score vector over the
    vocabulary. Only the prefix is ever passed to the ranker.
    """
    hits = total = 0
    for seq in test_set:
        c = seq.commands
        for t in range(t_min, len(c) - 1):
            scores = ranker(list(c[:t + 1]))
            hits += int(c[t + 1] in rank_topk(scores, k))
            total += 1
    if total == 0:
        raise DataError("no evaluation points in the test set")
    return hits / total


def precision_recall(scores, labels, threshold: float):
    """Precision and recall of `score >= threshold`; 0/0 precision is 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.sum() == 0:
        raise DataError("recall is undefined without positive examples")
    predicted = scores >= threshold
    tp = int((predicted & (labels == 1)).sum())
    precision = tp / predicted.sum() if predicted.any() else 0.0
    recall = tp / labels.sum()
    return float(precision), float(recall)


def auroc(scores, labels) -> float:
    """Mann-Whitney AU-ROC: P(random positive outscores a random negative),
    ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AU-ROC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


@dataclass
class EvalReport:
    metrics: dict[str, dict[str, tuple[float, float]]]  # model -> metric -> (mean, std)
    runs: int
    fingerprint: str = ""
    per_run: list[dict] = field(default_factory=list)

    def render(self) -> str:
        models = list(self.metrics)
        names = sorted({m for v in self.metrics.values() for m in v})
        width = max(len(m) for m in models + ["model"]) + 2
        lines = ["model".ljust(width) + "  ".join(n.ljust(16) for n in names)]
        for model in models:
            cells = []
            for n in names:
                if n in self.metrics[model]:
                    mean, std = self.metrics[model][n]
                    cells.append(f"{mean:.3f} ± {std:.3f}".ljust(16))
                else:
                    cells.append("-".ljust(16))
            lines.append(model.ljust(width) + "  ".join(cells))
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "runs": self.runs,
            "fingerprint": self.fingerprint,
            "metrics": {m: {n: {"mean": v[0], "std": v[1]}
                            for n, v in vals.items()}
                        for m, vals in self.metrics.items()},
        }, indent=2)


def config_fingerprint(config: dict, file_digests=()) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config, sort_keys=True, default=str).encode())
    for d in file_digests:
        h.update(str(d).encode())
    return h.hexdigest()[:16]


def run_trials(run_fn, n: int = 5, base_seed: int = 0,
               config: dict | None = None) -> EvalReport:
    """Run `run_fn(seed)` for seeds base_seed..base_seed+n-1 and aggregate.

    Each run returns {model: {metric: value}}. Means use the sample (n-1)
    standard deviation; any failing run aborts the report with its seed.
    """
    if n < 1:
        raise ValidationError("need at least one run")
    per_run = []
    for i in range(n):
        seed = base_seed + i
        try:
            per_run.append(run_fn(seed))
        except Exception as exc:
            raise DataError(f"trial with seed {seed} failed: {exc}") from exc
    metrics = {}
    for model in per_run[0]:
        metrics[model] = {}
        for name in per_run[0][model]:
            vals = np.asarray([r[model][name] for r in per_run], dtype=np.float64)
            std = float(vals.std(ddof=1)) if n > 1 else 0.0
            metrics[model][name] = (float(vals.mean()), std)
    fingerprint = config_fingerprint(config or {})
    return EvalReport(metrics=metrics, runs=n, fingerprint=fingerprint,
                      per_run=per_run)
