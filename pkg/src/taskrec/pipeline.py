"""Wiring shared by the CLI and the experiment harness: model registry,
ranker construction, and the standard synthetic benchmarks."""

from __future__ import annotations

import numpy as np

from . import markov, neural
from .corpus import (HelpInjection, SyntheticSpec, generate_help_data,
                     generate_synthetic, split_by_user)
from .errors import ValidationError
from .evaluation import auroc, topk_accuracy
from .helpmodel import HelpConfig, fit_forest, make_projection, train_help_lstm
from .topics import BitermModel, BtmConfig, fit_btm, infer_task_distribution

RECOMMENDER_KINDS = ("firstmm", "pst", "taskpst", "vrnn", "taskrnn", "jtcrnn")
HELP_KINDS = ("help-rf", "help-lstm")
MODEL_KINDS = RECOMMENDER_KINDS + HELP_KINDS

NEEDS_BTM = ("taskpst", "taskrnn", "jtcrnn")


def make_ranker(kind, model, btm: BitermModel | None = None):
    """A prefix -> score-vector callable for any recommender kind.

    Task-aware kinds condition on the prefix's fold-in distribution only;
    nothing beyond the prefix is ever consulted.
    """
    if kind in NEEDS_BTM and btm is None:
        raise ValidationError(f"{kind} requires a fitted BTM")
    if kind == "firstmm":
        return lambda prefix: markov.predict_markov(model, prefix[-1])
    if kind == "pst":
        return lambda prefix: markov.pst_predict(model, prefix)
    if kind == "taskpst":
        return lambda prefix: markov.taskpst_predict(model, prefix)
    if kind == "vrnn":
        return lambda prefix: model.forward(prefix)[-1]
    if kind == "taskrnn":
        return lambda prefix: model.forward(
            prefix, side=infer_task_distribution(btm, prefix))[-1]
    if kind == "jtcrnn":
        return lambda prefix: model.forward(prefix, btm=btm)[0][-1]
    raise ValidationError(f"unknown recommender kind {kind!r}")


# ---------------------------------------------------------------------------
# Standard synthetic benchmarks (the desk-scale stand-in for the paper's
# proprietary corpus)
# ---------------------------------------------------------------------------

RECOMMENDER_BENCH_SPEC = SyntheticSpec(
    num_tasks=3, vocab_per_task=12, docs=1000, doc_length=21,
    task_mixing=0.1, transition_sharpness=8.0, vocab_overlap=0.75)

HELP_BENCH_SPEC = SyntheticSpec(
    num_tasks=3, vocab_per_task=10, docs=10, doc_length=21, task_mixing=0.05,
    help_injection=HelpInjection(loop_rate=0.7, pause_rate=1.0))


def recommender_trial(seed: int, models=("pst", "taskpst", "vrnn", "taskrnn"),
                      spec: SyntheticSpec = RECOMMENDER_BENCH_SPEC,
                      max_epochs: int = 15, test_cap: int = 100):
    """Train and evaluate the requested recommenders on one seeded corpus.

    Returns {model: {"top1": ..., "top5": ...}}.
    """
    sequences, _labels, vocab = generate_synthetic(spec, seed=seed)
    train_seqs, test_seqs = split_by_user(sequences, 0.2, seed=seed)
    test_seqs = test_seqs[:test_cap]
    val_seqs = test_seqs[:max(1, test_cap // 3)]
    btm = None
    if any(m in NEEDS_BTM for m in models):
        btm = fit_btm(train_seqs,
                      BtmConfig(K=spec.num_tasks, iterations=300, seed=seed),
                      vocab)
    net_cfg = neural.NetConfig(embed_dim=8, hidden_dim=6, layers=1, lr=2e-3,
                               max_epochs=max_epochs, patience=max_epochs,
                               K=spec.num_tasks, seed=seed)
    results = {}
    for kind in models:
        if kind == "firstmm":
            model = markov.fit_first_order(train_seqs, len(vocab))
        elif kind == "pst":
            model = markov.fit_pst(train_seqs, len(vocab), max_depth=2, min_count=3)
        elif kind == "taskpst":
            model = markov.fit_task_pst(train_seqs, btm, len(vocab),
                                        max_depth=2, min_count=3)
        elif kind in ("vrnn", "taskrnn", "jtcrnn"):
            variant = {"vrnn": "vanilla", "taskrnn": "task", "jtcrnn": "jtc"}[kind]
            model, _ = neural.train(variant, train_seqs, val_seqs, net_cfg,
                                    btm=btm if variant != "vanilla" else None)
        else:
            raise ValidationError(f"unknown recommender kind {kind!r}")
        ranker = make_ranker(kind, model, btm)
        results[kind] = {"top1": topk_accuracy(ranker, test_seqs, 1),
                         "top5": topk_accuracy(ranker, test_seqs, 5)}
    return results


def help_trial(seed: int, n_positive: int = 200, n_negative: int = 1000,
               spec: SyntheticSpec = HELP_BENCH_SPEC, max_epochs: int = 40):
    """Train and evaluate the help models on one seeded synthetic split.

    Returns AU-ROC for the RF and LSTM classifiers, timed and untimed.
    """
    examples = generate_help_data(spec, n_positive, n_negative, seed=seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    examples = [examples[i] for i in order]
    n_test = len(examples) // 4
    test, pool = examples[:n_test], examples[n_test:]
    n_val = len(pool) // 5
    val, train_ex = pool[:n_val], pool[n_val:]
    y_test = [int(e.label) for e in test]
    vocab_size = 1 + max(c for e in examples for c in e.sequence.commands)

    results = {}
    proj = make_projection(vocab_size, 8, seed)
    for name, use_time in (("help-rf", True), ("help-rf-untimed", False)):
        forest = fit_forest(train_ex, proj, use_time=use_time, seed=seed)
        results[name] = {"auroc": auroc(forest.predict_proba(test), y_test)}
    for name, use_time in (("help-lstm", True), ("help-lstm-untimed", False)):
        cfg = HelpConfig(hidden_dim=32, max_epochs=max_epochs, patience=10,
                         batch_size=64, use_time=use_time, seed=seed)
        model, _ = train_help_lstm(train_ex, val, cfg, vocab_size)
        results[name] = {"auroc": auroc([model.score(e) for e in test], y_test)}
    return results
