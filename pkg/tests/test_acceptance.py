"""Acceptance gate: ten checks, one pass/fail line each.

Each check prints "ACCEPTANCE nn PASS <summary>" when its assertions hold;
a failing check reads as the usual pytest failure for that test id.
Run with `pytest tests/test_acceptance.py -v -s`.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from taskrec import markov, neural
from taskrec.corpus import (CommandSequence, HelpInjection, SyntheticSpec,
                            Vocabulary, generate_help_data, generate_synthetic,
                            preprocess, label_help, split_by_user, task_slice)
from taskrec.evaluation import auroc, precision_recall, run_trials
from taskrec.helpmodel import HelpConfig, HelpLstm, train_help_lstm
from taskrec.neural import NetConfig, RecommenderNet
from taskrec.pipeline import help_trial, recommender_trial
from taskrec.topics import BtmConfig, fit_btm, infer_task_distribution
from conftest import make_sequences


def ok(n, text):
    print(f"\nACCEPTANCE {n:02d} PASS {text}")


@pytest.fixture(scope="module")
def fixed_corpus():
    # 200 sequences, |C| = 10, lengths 21, fixed seed
    return make_sequences(200, 10, length=21, seed=2024)


@pytest.fixture(scope="module")
def ordinal_runs():
    """5-seed recommender benchmark, shared by checks 5 and 7."""
    t0 = time.monotonic()
    report = run_trials(recommender_trial, n=5, base_seed=0)
    return report, time.monotonic() - t0


def test_01_counting_oracle_equivalence(fixed_corpus):
    t0 = time.monotonic()
    fm = markov.fit_first_order(fixed_corpus, 10)
    brute = np.zeros((10, 10), dtype=np.int64)
    for s in fixed_corpus:
        for a, b in zip(s.commands, s.commands[1:]):
            brute[a, b] += 1
    assert (fm.counts == brute).all()  # bitwise
    totals = brute.sum(axis=1)
    norm = brute / totals[:, None]
    model_norm = fm.counts / fm.counts.sum(axis=1)[:, None]
    np.testing.assert_allclose(model_norm, norm, atol=1e-12)

    tree = markov.fit_pst(fixed_corpus, 10, max_depth=3, min_count=1)
    oracle = {(): np.zeros(10, dtype=np.int64)}
    for s in fixed_corpus:
        c = s.commands
        for t in range(len(c)):
            oracle[()][c[t]] += 1
        for m in (1, 2, 3):
            for t in range(m, len(c)):
                ctx = tuple(c[t - m:t])
                oracle.setdefault(ctx, np.zeros(10, dtype=np.int64))[c[t]] += 1
    assert set(tree.nodes) == set(oracle)
    for ctx, vec in oracle.items():
        assert (tree.nodes[ctx] == vec).all()
        np.testing.assert_allclose(tree.nodes[ctx] / vec.sum(),
                                   vec / vec.sum(), atol=1e-12)
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    ok(1, f"FirstMM + {len(tree.nodes)} PST nodes match the brute-force "
          f"counter bitwise ({elapsed:.1f}s)")


def test_02_reduction_identities(fixed_corpus):
    # depth-1 PST equals the first-order model for every prefix ending
    tree = markov.fit_pst(fixed_corpus, 10, max_depth=1, min_count=1)
    fm = markov.fit_first_order(fixed_corpus, 10)
    for last in range(10):
        np.testing.assert_array_equal(markov.pst_predict(tree, [3, last]),
                                      markov.predict_markov(fm, last))

    # single-task ensemble equals the plain tree
    vocab = Vocabulary.from_names([f"c{i}" for i in range(10)])
    btm1 = fit_btm(fixed_corpus[:80], BtmConfig(K=1, iterations=5), vocab)
    ens = markov.fit_task_pst(fixed_corpus[:80], btm1, 10, max_depth=3,
                              min_count=1)
    plain = markov.fit_pst(fixed_corpus[:80], 10, max_depth=3, min_count=1)
    for s in fixed_corpus[:10]:
        np.testing.assert_array_equal(
            markov.taskpst_predict(ens, list(s.commands[:9])),
            markov.pst_predict(plain, list(s.commands[:9])))

    # K=1 nets: the side channel degenerates to a constant input column
    cmd = np.array([[2, 7, 4, 1, 9, 0]])
    for variant in ("task", "jtc"):
        cfg = NetConfig(variant=variant, embed_dim=4, hidden_dim=6, layers=2,
                        K=1, seed=0)
        net = RecommenderNet(cfg, vocab_size=10)
        kwargs = ({"side": np.ones((1, 1))} if variant == "task"
                  else {"fold": np.ones((1, 6, 1))})
        logits, _, _ = net._forward(cmd, **kwargs)
        clone = RecommenderNet(NetConfig(variant="vanilla", embed_dim=5,
                                         hidden_dim=6, layers=2, seed=0),
                               vocab_size=10)
        clone.params = {k: v for k, v in net.params.items()
                        if k not in ("W_task", "b_task")}
        clone.params["embed"] = np.concatenate(
            [net.params["embed"], np.ones((10, 1))], axis=1)
        logits2, _, _ = clone._forward(cmd)
        np.testing.assert_allclose(logits, logits2, atol=1e-9)
    ok(2, "depth-1 PST = FirstMM, K=1 TaskPST = PST (exact); K=1 task/jtc "
          "nets = vanilla + constant column (1e-9)")


def test_03_gradient_verification():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    errs = {}
    for variant in ("vanilla", "task", "jtc"):
        cfg = NetConfig(variant=variant, embed_dim=4, hidden_dim=6, layers=2,
                        K=3 if variant != "vanilla" else 0, seed=0)
        net = RecommenderNet(cfg, vocab_size=12)
        cmd = rng.integers(0, 12, size=(4, 6))
        targets = rng.integers(0, 12, size=(4, 6))
        side = rng.dirichlet(np.ones(3), size=4) if variant != "vanilla" else None
        fold = rng.dirichlet(np.ones(3), size=(4, 6)) if variant == "jtc" else None
        errs[variant] = neural.gradient_check(
            net, (cmd, targets, side, fold), epsilon=1e-4, n_samples=200,
            seed=1)

    help_cfg = HelpConfig(embed_dim=4, hidden_dim=6, layers=1, seed=0)
    model = HelpLstm(help_cfg, vocab_size=12)
    cmd = rng.integers(0, 12, size=(4, 7))
    dt = rng.uniform(0, 5, size=(4, 7))
    lengths = np.array([7, 5, 6, 7])
    labels = np.array([1, 0, 0, 1])
    errs["help"] = neural.gradient_check(model, (cmd, dt, lengths, labels),
                                         epsilon=1e-4, n_samples=200, seed=1)
    elapsed = time.monotonic() - t0
    assert all(e < 1e-3 for e in errs.values()), errs
    assert elapsed < 120.0
    worst = max(errs.values())
    ok(3, f"central-difference check on 4 models, worst rel. error "
          f"{worst:.2e} < 1e-3 ({elapsed:.0f}s)")


def test_04_btm_planted_recovery():
    t0 = time.monotonic()
    spec = SyntheticSpec(num_tasks=3, vocab_per_task=10, docs=1000,
                         doc_length=21, task_mixing=0.05,
                         transition_sharpness=8.0)
    sequences, labels, vocab = generate_synthetic(spec, seed=0)
    btm = fit_btm(sequences, BtmConfig(K=3, alpha=0.001, beta=0.005,
                                       iterations=500, seed=0), vocab)
    # greedy topic-to-task matching by phi mass on each task's slice
    mass = np.array([[btm.phi[z, list(task_slice(spec, y))].sum()
                      for y in range(3)] for z in range(3)])
    work = mass.copy()
    mapping = {}
    for _ in range(3):
        z, y = np.unravel_index(np.argmax(work), work.shape)
        mapping[int(z)] = int(y)
        work[z, :] = -1
        work[:, y] = -1
    slice_mass = np.mean([mass[z, mapping[z]] for z in range(3)])
    assign = [mapping[int(np.argmax(infer_task_distribution(btm, s)))]
              for s in sequences]
    acc = float(np.mean([a == y for a, y in zip(assign, labels)]))
    elapsed = time.monotonic() - t0
    assert slice_mass >= 0.9
    assert acc >= 0.9
    assert elapsed < 120.0
    ok(4, f"matched-slice phi mass {slice_mass:.3f} >= 0.9, document "
          f"accuracy {acc:.3f} >= 0.9 ({elapsed:.0f}s)")


def test_05_ordinal_recommender_pattern(ordinal_runs):
    report, elapsed = ordinal_runs
    m = report.metrics
    pst_t1, taskpst_t1 = m["pst"]["top1"][0], m["taskpst"]["top1"][0]
    vrnn_t5, taskrnn_t5 = m["vrnn"]["top5"][0], m["taskrnn"]["top5"][0]
    assert taskpst_t1 >= pst_t1
    assert taskrnn_t5 >= vrnn_t5
    assert elapsed < 900.0
    ok(5, f"5-run means: Top-1 TaskPST {taskpst_t1:.3f} >= PST {pst_t1:.3f}; "
          f"Top-5 TaskRNN {taskrnn_t5:.3f} >= vRNN {vrnn_t5:.3f} "
          f"({elapsed:.0f}s)")


def test_06_ordinal_help_pattern():
    t0 = time.monotonic()
    report = run_trials(help_trial, n=5, base_seed=0)
    m = {k: v["auroc"][0] for k, v in report.metrics.items()}
    elapsed = time.monotonic() - t0
    assert m["help-lstm"] >= m["help-rf"]
    assert m["help-lstm"] >= m["help-lstm-untimed"]
    assert m["help-lstm"] >= 0.9
    assert elapsed < 600.0
    ok(6, f"5-run AU-ROC means: LSTM {m['help-lstm']:.3f} >= RF "
          f"{m['help-rf']:.3f}, timed >= untimed "
          f"({m['help-lstm-untimed']:.3f}), LSTM >= 0.9 ({elapsed:.0f}s)")


def test_07_metric_oracles(ordinal_runs):
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(4, 50))
        scores = rng.integers(0, 6, size=n) / 5.0  # ties guaranteed
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        pairwise = float(np.mean((pos[:, None] > neg[None, :])
                                 + 0.5 * (pos[:, None] == neg[None, :])))
        assert abs(auroc(scores, labels) - pairwise) < 1e-9

    report, _ = ordinal_runs
    for model, metrics in report.metrics.items():
        assert metrics["top5"][0] >= metrics["top1"][0], model

    p, r = precision_recall([0.9, 0.8, 0.5, 0.3, 0.1], [1, 0, 1, 1, 0], 0.5)
    assert (p, r) == (2 / 3, 2 / 3)
    p, r = precision_recall([0.1, 0.2], [1, 0], 0.9)
    assert (p, r) == (0.0, 0.0)
    ok(7, "AU-ROC = pairwise oracle on 100 tied sets (1e-9); Top-5 >= Top-1 "
          "on every benchmark model; precision/recall fixtures exact")


def test_08_pipeline_invariants():
    vocab = Vocabulary.from_names(
        [f"cmd_{i:02d}" for i in range(9)] + ["help"], ["help"])
    rng = np.random.default_rng(8)
    from taskrec.corpus import RawSession
    sessions = []
    for i in range(80):
        n = int(rng.integers(15, 60))
        names = []
        while len(names) < n:
            c = f"cmd_{int(rng.integers(9)):02d}"
            names.extend([c] * int(rng.integers(1, 5)))  # bursts of repeats
        if rng.random() < 0.3:
            names.insert(int(rng.integers(10, len(names))), "help")
        sessions.append(RawSession(
            f"user_{i % 11}",
            tuple((c, float(t)) for t, c in enumerate(names))))

    sequences = preprocess(sessions, vocab)
    assert sequences
    for s in sequences:
        assert len(s) == 21
        runs = [s.commands[i] == s.commands[i + 1] == s.commands[i + 2]
                for i in range(19)]
        assert not any(runs)

    train, test = split_by_user(sequences, 0.3, seed=8)
    assert {s.user for s in train}.isdisjoint({s.user for s in test})

    positives, _rest = label_help(sequences, vocab.help_ids, k=8)
    help_id = vocab.index["help"]
    assert all(help_id not in e.sequence.commands for e in positives)

    # bit reproducibility of every seeded path
    spec = SyntheticSpec(num_tasks=2, vocab_per_task=6, docs=40, doc_length=21,
                         task_mixing=0.1,
                         help_injection=HelpInjection(pause_rate=1.0))
    assert generate_synthetic(spec, 3) == generate_synthetic(spec, 3)
    seqs, _, svocab = generate_synthetic(spec, 3)
    b1 = fit_btm(seqs, BtmConfig(K=2, iterations=20, seed=3), svocab)
    b2 = fit_btm(seqs, BtmConfig(K=2, iterations=20, seed=3), svocab)
    assert (b1.phi == b2.phi).all() and (b1.n_z == b2.n_z).all()
    cfg = NetConfig(variant="vanilla", embed_dim=4, hidden_dim=6, layers=1,
                    max_epochs=1, seed=3)
    n1, _ = neural.train("vanilla", seqs, seqs[:4], cfg)
    n2, _ = neural.train("vanilla", seqs, seqs[:4], cfg)
    assert all((n1.params[k] == n2.params[k]).all() for k in n1.params)
    ex = generate_help_data(spec, 8, 16, seed=3)
    hcfg = HelpConfig(embed_dim=4, hidden_dim=6, max_epochs=1, seed=3)
    val = ex[:3] + ex[-3:]  # generator emits negatives first, then positives
    h1, _ = train_help_lstm(ex, val, hcfg, len(svocab))
    h2, _ = train_help_lstm(ex, val, hcfg, len(svocab))
    assert all((h1.params[k] == h2.params[k]).all() for k in h1.params)
    ok(8, "length-21/no-run>2 preprocessing, user-disjoint split, help-free "
          "positives, and bitwise seed reproducibility all hold")


def test_09_online_offline_consistency():
    model = HelpLstm(HelpConfig(embed_dim=6, hidden_dim=10, layers=1, seed=9),
                     vocab_size=15)
    rng = np.random.default_rng(9)
    for _ in range(100):
        n = int(rng.integers(9, 30))
        commands = rng.integers(0, 15, size=n).tolist()
        gaps = [0.0] + rng.uniform(0, 200, size=n - 1).tolist()
        seq = CommandSequence("u", tuple(commands), tuple(gaps))
        online = model.step_probs(commands, gaps)[-1]
        offline = model.score(seq)
        assert online == offline  # exact, same arithmetic path
    ok(9, "online final-step probability equals training-mode probability "
          "exactly on 100 random sequences")


def test_10_end_to_end_smoke(tmp_path):
    t0 = time.monotonic()

    def run(*args, stdin=None):
        proc = subprocess.run([sys.executable, "-m", "taskrec.cli",
                               *map(str, args)],
                              input=stdin, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr or proc.stdout
        return proc

    spec = {"num_tasks": 3, "vocab_per_task": 10, "docs": 200,
            "doc_length": 21, "task_mixing": 0.1,
            "transition_sharpness": 8.0,
            "help_injection": {"loop_rate": 0.7, "pause_rate": 1.0},
            "n_positive": 60, "n_negative": 180}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    run("synth", "--spec-file", tmp_path / "spec.json", "--seed", 1,
        "--out-dir", tmp_path)
    run("fit-btm", "--corpus", tmp_path / "corpus.jsonl",
        "--vocab", tmp_path / "vocab.json", "--out", tmp_path / "btm.json",
        "--k", 3, "--iterations", 150, "--seed", 1)

    common = ["--vocab", tmp_path / "vocab.json", "--seed", "1", "--quiet"]
    corpus = ["--corpus", tmp_path / "corpus.jsonl"]
    net = ["--embed-dim", "8", "--hidden-dim", "12", "--layers", "1",
           "--lr", "2e-3", "--max-epochs", "5"]
    run("train", "firstmm", *corpus, *common, "--out", tmp_path / "fm.json")
    run("train", "pst", *corpus, *common, "--out", tmp_path / "pst.json",
        "--max-depth", 3, "--min-count", 2)
    run("train", "taskpst", *corpus, *common, "--btm", tmp_path / "btm.json",
        "--out", tmp_path / "tpst.json", "--max-depth", 3, "--min-count", 2)
    run("train", "vrnn", *corpus, *common, *net, "--out", tmp_path / "v.npz")
    run("train", "taskrnn", *corpus, *common, *net,
        "--btm", tmp_path / "btm.json", "--out", tmp_path / "t.npz")
    run("train", "jtcrnn", *corpus, *common, *net,
        "--btm", tmp_path / "btm.json", "--out", tmp_path / "j.npz")
    run("train", "help-rf", "--help-data", tmp_path / "help.jsonl", *common,
        "--out", tmp_path / "rf.joblib")
    run("train", "help-lstm", "--help-data", tmp_path / "help.jsonl", *common,
        "--hidden-dim", "16", "--layers", "1", "--max-epochs", "12",
        "--out", tmp_path / "hl.npz")

    proc = run("evaluate", "--vocab", tmp_path / "vocab.json",
               "--btm", tmp_path / "btm.json",
               "--test-corpus", tmp_path / "corpus.jsonl",
               "--help-data", tmp_path / "help.jsonl",
               *(arg for kind, path in [
                   ("firstmm", "fm.json"), ("pst", "pst.json"),
                   ("taskpst", "tpst.json"), ("vrnn", "v.npz"),
                   ("taskrnn", "t.npz"), ("jtcrnn", "j.npz"),
                   ("help-rf", "rf.joblib"), ("help-lstm", "hl.npz")]
                 for arg in ("--model", f"{kind}={tmp_path / path}")),
               "--out-json", tmp_path / "report.json")
    assert "firstmm" in proc.stdout and "help-lstm" in proc.stdout
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["metrics"]) == 8

    # scripted demo: normal activity, then a loop with long pauses
    script = "".join(f"cmd_{i:03d} 2\n" for i in range(9))
    script += "cmd_000 150\ncmd_001 160\ncmd_000 170\ncmd_001 180\n" * 2
    script += "quit\n"
    proc = run("demo", "--recommender-kind", "taskpst",
               "--recommender", tmp_path / "tpst.json",
               "--btm", tmp_path / "btm.json",
               "--vocab", tmp_path / "vocab.json",
               "--help-model", tmp_path / "hl.npz", stdin=script)
    assert "ALERT" in proc.stdout
    elapsed = time.monotonic() - t0
    assert elapsed < 1800.0
    ok(10, f"synth -> fit-btm -> train x8 -> evaluate -> demo completed, "
           f"alarm fired ({elapsed:.0f}s)")
