"""Frequency-counting recommenders: first-order Markov, pruned probabilistic
suffix trees with longest-suffix backoff, and the task-weighted PST ensemble.

Stored counts are raw; Laplace smoothing (lambda = 1) is applied only at
prediction time so that fitted counts stay directly checkable against
conditional-frequency oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import CommandSequence, Vocabulary
from .errors import DataError, ValidationError, VocabularyMismatchError
from .topics import BitermModel, infer_task_distribution

SMOOTHING = 1.0


def _smoothed(counts: np.ndarray) -> np.ndarray:
    row = counts + SMOOTHING
    return row / row.sum()


@dataclass
class FirstOrderModel:
    counts: np.ndarray  # |C| x |C| transition counts

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def fit_first_order(train, vocab_size: int) -> FirstOrderModel:
    if not train:
        raise DataError("cannot fit on an empty corpus")
    counts = np.zeros((vocab_size, vocab_size), dtype=np.int64)
    for seq in train:
        c = seq.commands
        for t in range(len(c) - 1):
            counts[c[t], c[t + 1]] += 1
    return FirstOrderModel(counts=counts)


def predict_markov(model: FirstOrderModel, last: int) -> np.ndarray:
    """Laplace-smoothed next-command distribution given the last command."""
    return _smoothed(model.counts[last].astype(np.float64))


@dataclass
class SuffixTree:
    """Variable-order context tree; nodes keyed by context, most-recent-last."""

    nodes: dict[tuple[int, ...], np.ndarray]  # context -> next-command counts
    max_depth: int
    min_count: int
    vocab_size: int

    def node_total(self, context) -> int:
        return int(self.nodes[tuple(context)].sum())


def _keep(occurrences: int, min_count: int) -> bool:
    # the single strict-vs-nonstrict comparison; ">= threshold" chosen
    return occurrences >= min_count


def fit_pst(train, vocab_size: int, max_depth: int = 10,
            min_count: int = 7) -> SuffixTree:
    """Count next-command distributions for every frequent context.

    The root (empty context) holds unigram counts over all positions and is
    always kept; a context of length 1..max_depth is kept only when it is
    followed by a next command at least min_count times.
    """
    if max_depth < 0 or min_count < 1:
        raise ValidationError("max_depth must be >= 0 and min_count >= 1")
    raw: dict[tuple[int, ...], np.ndarray] = {}
    root = np.zeros(vocab_size, dtype=np.int64)
    for seq in train:
        c = seq.commands
        for t in range(len(c)):
            root[c[t]] += 1
        for m in range(1, max_depth + 1):
            for t in range(m, len(c)):
                ctx = tuple(c[t - m:t])
                vec = raw.get(ctx)
                if vec is None:
                    vec = raw[ctx] = np.zeros(vocab_size, dtype=np.int64)
                vec[c[t]] += 1
    nodes = {(): root}
    nodes.update({ctx: vec for ctx, vec in raw.items()
                  if _keep(int(vec.sum()), min_count)})
    return SuffixTree(nodes=nodes, max_depth=max_depth,
                      min_count=min_count, vocab_size=vocab_size)


def pst_predict(tree: SuffixTree, prefix) -> np.ndarray:
    """Longest-suffix lookup with backoff to the root, Laplace smoothed."""
    commands = prefix.commands if isinstance(prefix, CommandSequence) else tuple(prefix)
    for m in range(min(len(commands), tree.max_depth), 0, -1):
        node = tree.nodes.get(tuple(commands[-m:]))
        if node is not None:
            return _smoothed(node.astype(np.float64))
    return _smoothed(tree.nodes[()].astype(np.float64))


@dataclass
class TaskPstEnsemble:
    trees: list[SuffixTree]
    btm: BitermModel


def fit_task_pst(train, btm: BitermModel, vocab_size: int,
                 max_depth: int = 10, min_count: int = 7) -> TaskPstEnsemble:
    """One PST per task; sequences are routed by their argmax full-sequence
    task assignment (ties to the lowest task index)."""
    if btm.vocab_size != vocab_size:
        raise ValidationError("BTM vocabulary size does not match corpus")
    shards: list[list] = [[] for _ in range(btm.K)]
    for seq in train:
        dist = infer_task_distribution(btm, seq)
        shards[int(np.argmax(dist))].append(seq)
    trees = [fit_pst(shard, vocab_size, max_depth, min_count)
             if shard else _empty_tree(vocab_size, max_depth, min_count)
             for shard in shards]
    return TaskPstEnsemble(trees=trees, btm=btm)


def _empty_tree(vocab_size, max_depth, min_count) -> SuffixTree:
    return SuffixTree(nodes={(): np.zeros(vocab_size, dtype=np.int64)},
                      max_depth=max_depth, min_count=min_count,
                      vocab_size=vocab_size)


def taskpst_predict(ens: TaskPstEnsemble, prefix) -> np.ndarray:
    """Per-tree predictions mixed by the prefix's task distribution."""
    w = infer_task_distribution(ens.btm, prefix)
    out = np.zeros(ens.trees[0].vocab_size)
    for z, tree in enumerate(ens.trees):
        out += w[z] * pst_predict(tree, prefix)
    return out


# ---------------------------------------------------------------------------
# Persistence and inspection
# ---------------------------------------------------------------------------

def save_first_order(path, model: FirstOrderModel, vocab: Vocabulary):
    with open(path, "w") as fh:
        json.dump({"vocab_digest": vocab.digest(),
                   "counts": model.counts.tolist()}, fh)


def load_first_order(path, vocab: Vocabulary | None = None) -> FirstOrderModel:
    with open(path) as fh:
        rec = json.load(fh)
    if vocab is not None and rec["vocab_digest"] != vocab.digest():
        raise VocabularyMismatchError(
            f"model at {path} was fitted against a different vocabulary")
    return FirstOrderModel(counts=np.asarray(rec["counts"], dtype=np.int64))


def save_ensemble(path, ens: TaskPstEnsemble, vocab: Vocabulary):
    with open(path, "w") as fh:
        json.dump({
            "vocab_digest": vocab.digest(),
            "trees": [{
                "max_depth": t.max_depth, "min_count": t.min_count,
                "vocab_size": t.vocab_size,
                "nodes": [[list(ctx), vec.tolist()]
                          for ctx, vec in sorted(t.nodes.items())],
            } for t in ens.trees],
        }, fh)


def load_ensemble(path, btm: BitermModel,
                  vocab: Vocabulary | None = None) -> TaskPstEnsemble:
    with open(path) as fh:
        rec = json.load(fh)
    if vocab is not None and rec["vocab_digest"] != vocab.digest():
        raise VocabularyMismatchError(
            f"ensemble at {path} was fitted against a different vocabulary")
    trees = [SuffixTree(
        nodes={tuple(ctx): np.asarray(vec, dtype=np.int64)
               for ctx, vec in t["nodes"]},
        max_depth=t["max_depth"], min_count=t["min_count"],
        vocab_size=t["vocab_size"]) for t in rec["trees"]]
    if len(trees) != btm.K:
        raise ValidationError("ensemble tree count does not match the BTM")
    return TaskPstEnsemble(trees=trees, btm=btm)


def save_tree(path, tree: SuffixTree, vocab: Vocabulary):
    with open(path, "w") as fh:
        json.dump({
            "max_depth": tree.max_depth,
            "min_count": tree.min_count,
            "vocab_size": tree.vocab_size,
            "vocab_digest": vocab.digest(),
            "nodes": [[list(ctx), vec.tolist()] for ctx, vec in
                      sorted(tree.nodes.items())],
        }, fh)


def load_tree(path, vocab: Vocabulary | None = None) -> SuffixTree:
    with open(path) as fh:
        rec = json.load(fh)
    if vocab is not None and rec["vocab_digest"] != vocab.digest():
        raise VocabularyMismatchError(
            f"tree at {path} was fitted against a different vocabulary")
    nodes = {tuple(ctx): np.asarray(vec, dtype=np.int64)
             for ctx, vec in rec["nodes"]}
    return SuffixTree(nodes=nodes, max_depth=rec["max_depth"],
                      min_count=rec["min_count"], vocab_size=rec["vocab_size"])


def dump_tree(tree: SuffixTree, vocab: Vocabulary | None = None) -> str:
    """Indented human-readable rendering, children grouped under parents."""
    lines = []
    by_depth = sorted(tree.nodes, key=lambda c: (len(c), c))
    for ctx in by_depth:
        vec = tree.nodes[ctx]
        top = np.argsort(-vec)[:3]
        label = "null" if not ctx else " ".join(
            vocab.names[c] if vocab else str(c) for c in ctx)
        summary = ", ".join(
            f"{vocab.names[c] if vocab else c}:{int(vec[c])}"
            for c in top if vec[c] > 0)
        lines.append(f"{'  ' * len(ctx)}[{label}] total={int(vec.sum())} {summary}")
    return "\n".join(lines)
