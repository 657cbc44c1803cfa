"""Operator command line: corpus ingestion and synthesis, model fitting,
evaluation, and an interactive terminal demo (recommendations plus a help
alert) over a streaming command session.

Exit codes: 0 success, 1 validation error, 2 I/O or data error, 3 internal.
"""

from __future__ import annotations

import difflib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import corpus as corpus_mod
from . import markov, neural
from .corpus import (HelpInjection, SyntheticSpec, read_corpus,
                     read_help_examples, read_vocabulary, write_corpus,
                     write_help_examples, write_vocabulary)
from .errors import DataError, TaskrecError, UnknownCommandError, ValidationError
from .evaluation import EvalReport, auroc, config_fingerprint, precision_recall, run_trials, topk_accuracy
from .helpmodel import (ForestModel, HelpConfig, HelpLstm, fit_forest,
                        make_projection, train_help_lstm)
from .pipeline import HELP_KINDS, MODEL_KINDS, NEEDS_BTM, RECOMMENDER_KINDS, make_ranker
from .topics import BitermModel, BtmConfig, fit_btm, infer_task_distribution, top_commands


@click.group()
def cli():
    """Task-aware command recommendation and proactive help."""


def _read_lines(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


# ---------------------------------------------------------------------------
# ingest / synth
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--denylist", type=click.Path(exists=True), default=None,
              help="UI-event command names to drop, one per line.")
@click.option("--help-list", type=click.Path(exists=True), default=None,
              help="Help-action command names, one per line.")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--k", default=8, show_default=True,
              help="Minimum context before a help action counts.")
@click.option("--test-fraction", default=0.2, show_default=True)
@click.option("--negative-ratio", default=5, show_default=True,
              help="Negatives sampled per positive help example.")
@click.option("--seed", default=0, show_default=True)
def ingest(log_path, denylist, help_list, out_dir, k, test_fraction,
           negative_ratio, seed):
    """Parse a JSONL usage log into corpus, vocabulary, and help files."""
    deny = _read_lines(denylist) if denylist else []
    help_names = _read_lines(help_list) if help_list else []
    with open(log_path, "rb") as fh:
        parsed = corpus_mod.parse_log(fh)
    sessions = corpus_mod.filter_denylist(parsed.sessions, deny)
    if not sessions:
        raise DataError("denylist removed every event")
    vocab = corpus_mod.build_vocabulary(sessions, help_names)
    sequences = corpus_mod.preprocess(sessions, vocab)
    if not sequences:
        raise DataError("no sequence survived preprocessing")
    positives, rest = corpus_mod.label_help(sequences, vocab.help_ids, k=k)
    if help_names and not rest:
        raise DataError("no negative-candidate sequences remain; "
                        "is every command on the help list?")
    n_neg = min(negative_ratio * len(positives), len(rest))
    negatives = corpus_mod.sample_negatives(rest, n_neg, seed) if positives else []
    train_seqs, test_seqs = corpus_mod.split_by_user(sequences, test_fraction, seed)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_vocabulary(out / "vocab.json", vocab)
    write_corpus(out / "train.jsonl", train_seqs)
    write_corpus(out / "test.jsonl", test_seqs)
    if positives:
        write_help_examples(out / "help.jsonl", positives + negatives)
    stats = {"sessions": len(sessions), "sequences": len(sequences),
             "vocab_size": len(vocab), "skipped_lines": parsed.skipped,
             "help_positives": len(positives), "help_negatives": len(negatives),
             "train_sequences": len(train_seqs), "test_sequences": len(test_seqs)}
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    click.echo(json.dumps(stats))


@cli.command()
@click.option("--spec-file", required=True, type=click.Path(exists=True),
              help="JSON file with SyntheticSpec fields.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path())
def synth(spec_file, seed, out_dir):
    """Generate a planted-task corpus (and help data when configured)."""
    with open(spec_file) as fh:
        raw = json.load(fh)
    n_pos = raw.pop("n_positive", 0)
    n_neg = raw.pop("n_negative", 0)
    inj = raw.pop("help_injection", None)
    spec = SyntheticSpec(**raw,
                         help_injection=HelpInjection(**inj) if inj else None)
    sequences, labels, vocab = corpus_mod.generate_synthetic(spec, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out / "corpus.jsonl", sequences)
    write_vocabulary(out / "vocab.json", vocab)
    (out / "labels.json").write_text(json.dumps(labels))
    if spec.help_injection is not None and n_pos and n_neg:
        examples = corpus_mod.generate_help_data(spec, n_pos, n_neg, seed)
        write_help_examples(out / "help.jsonl", examples)
    click.echo(f"wrote {len(sequences)} sequences, |C|={len(vocab)}")


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@cli.command("fit-btm")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--k", default=14, show_default=True)
@click.option("--alpha", default=0.001, show_default=True)
@click.option("--beta", default=0.005, show_default=True)
@click.option("--iterations", default=500, show_default=True)
@click.option("--seed", default=0, show_default=True)
def fit_btm_cmd(corpus_path, vocab_path, out, k, alpha, beta, iterations, seed):
    """Fit the biterm task model over a corpus."""
    vocab = read_vocabulary(vocab_path)
    sequences = read_corpus(corpus_path)
    model = fit_btm(sequences, BtmConfig(K=k, alpha=alpha, beta=beta,
                                         iterations=iterations, seed=seed), vocab)
    model.save(out)
    click.echo(f"fitted BTM K={k} on {len(sequences)} sequences -> {out}")


@cli.command()
@click.argument("model_kind", type=click.Choice(MODEL_KINDS))
@click.option("--corpus", "corpus_path", type=click.Path(exists=True),
              help="Training corpus (recommenders).")
@click.option("--help-data", type=click.Path(exists=True),
              help="Labeled help examples (help models).")
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--btm", "btm_path", type=click.Path(),
              help="Fitted BTM file (task-aware models).")
@click.option("--out", required=True, type=click.Path())
@click.option("--max-depth", default=10, show_default=True)
@click.option("--min-count", default=7, show_default=True)
@click.option("--embed-dim", default=32, show_default=True)
@click.option("--hidden-dim", default=64, show_default=True)
@click.option("--layers", default=2, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--max-epochs", default=50, show_default=True)
@click.option("--patience", default=5, show_default=True)
@click.option("--val-fraction", default=0.1, show_default=True)
@click.option("--trees", default=50, show_default=True)
@click.option("--proj-dim", default=8, show_default=True)
@click.option("--no-time", is_flag=True, help="Drop the time-gap channel.")
@click.option("--seed", default=0, show_default=True)
@click.option("--quiet", is_flag=True, help="Suppress the metrics stream.")
def train(model_kind, corpus_path, help_data, vocab_path, btm_path, out,
          max_depth, min_count, embed_dim, hidden_dim, layers, lr, max_epochs,
          patience, val_fraction, trees, proj_dim, no_time, seed, quiet):
    """Train one model and persist it."""
    vocab = read_vocabulary(vocab_path)
    btm = None
    if model_kind in NEEDS_BTM:
        if not btm_path or not Path(btm_path).exists():
            raise ValidationError(
                f"{model_kind} needs a fitted BTM; run `taskrec fit-btm` first")
        btm = BitermModel.load(btm_path, vocab)
    hook = None if quiet else lambda rec: click.echo(json.dumps(rec))

    if model_kind in RECOMMENDER_KINDS:
        if not corpus_path:
            raise ValidationError("recommenders need --corpus")
        sequences = read_corpus(corpus_path)
        if model_kind == "firstmm":
            model = markov.fit_first_order(sequences, len(vocab))
            markov.save_first_order(out, model, vocab)
        elif model_kind == "pst":
            model = markov.fit_pst(sequences, len(vocab), max_depth, min_count)
            markov.save_tree(out, model, vocab)
        elif model_kind == "taskpst":
            model = markov.fit_task_pst(sequences, btm, len(vocab),
                                        max_depth, min_count)
            markov.save_ensemble(out, model, vocab)
        else:
            variant = {"vrnn": "vanilla", "taskrnn": "task", "jtcrnn": "jtc"}[model_kind]
            rng = np.random.default_rng(seed)
            sequences = [sequences[i] for i in rng.permutation(len(sequences))]
            n_val = max(1, int(round(val_fraction * len(sequences))))
            cfg = neural.NetConfig(
                variant=variant, embed_dim=embed_dim, hidden_dim=hidden_dim,
                layers=layers, K=btm.K if btm else 0, lr=lr,
                max_epochs=max_epochs, patience=patience, seed=seed)
            net, report = neural.train(variant, sequences[n_val:],
                                       sequences[:n_val], cfg, btm=btm,
                                       metrics_hook=hook)
            net.save(out, vocab.digest())
            click.echo(f"stopped at epoch {report.stopped_epoch}, "
                       f"val top-1 {report.epochs[-1]['val_top1']:.3f}")
            return
        click.echo(f"fitted {model_kind} on {len(sequences)} sequences -> {out}")
        return

    if not help_data:
        raise ValidationError("help models need --help-data")
    examples = read_help_examples(help_data)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    examples = [examples[i] for i in order]
    n_val = max(1, int(round(val_fraction * len(examples))))
    val, train_ex = examples[:n_val], examples[n_val:]
    if model_kind == "help-rf":
        proj = make_projection(len(vocab), proj_dim, seed)
        model = fit_forest(train_ex + val, proj, use_time=not no_time,
                           n_trees=trees, seed=seed, vocab_digest=vocab.digest())
        model.save(out)
        click.echo(f"fitted help-rf on {len(examples)} examples -> {out}")
    else:
        cfg = HelpConfig(hidden_dim=hidden_dim, layers=layers, lr=lr,
                         max_epochs=max_epochs, patience=patience,
                         use_time=not no_time, seed=seed)
        model, report = train_help_lstm(train_ex, val, cfg, len(vocab),
                                        metrics_hook=hook)
        model.save(out, vocab.digest())
        click.echo(f"stopped after {len(report)} epochs, "
                   f"val AU-ROC {report[-1]['val_auroc']:.3f}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def load_model(kind, path, vocab, btm=None):
    if kind == "firstmm":
        return markov.load_first_order(path, vocab)
    if kind == "pst":
        return markov.load_tree(path, vocab)
    if kind == "taskpst":
        return markov.load_ensemble(path, btm, vocab)
    if kind in ("vrnn", "taskrnn", "jtcrnn"):
        return neural.RecommenderNet.load(path, vocab)
    if kind == "help-rf":
        return ForestModel.load(path, vocab)
    if kind == "help-lstm":
        return HelpLstm.load(path, vocab)
    raise ValidationError(f"unknown model kind {kind!r}")


@cli.command()
@click.option("--model", "models", multiple=True, required=True,
              help="kind=path, e.g. pst=models/pst.json; repeatable.")
@click.option("--test-corpus", type=click.Path(exists=True))
@click.option("--help-data", type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--btm", "btm_path", type=click.Path(exists=True))
@click.option("--runs", default=1, show_default=True)
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--out-json", type=click.Path(), default=None)
def evaluate(models, test_corpus, help_data, vocab_path, btm_path, runs,
             threshold, out_json):
    """Evaluate frozen model files; emits a text table and JSON report."""
    vocab = read_vocabulary(vocab_path)
    btm = BitermModel.load(btm_path, vocab) if btm_path else None
    test_seqs = read_corpus(test_corpus) if test_corpus else None
    examples = read_help_examples(help_data) if help_data else None
    loaded = []
    for spec in models:
        kind, _, path = spec.partition("=")
        if kind not in MODEL_KINDS or not path:
            raise ValidationError(f"bad --model {spec!r}; use kind=path")
        loaded.append((kind, load_model(kind, path, vocab, btm)))

    def one_run(_seed):
        out = {}
        for kind, model in loaded:
            if kind in RECOMMENDER_KINDS:
                if test_seqs is None:
                    raise ValidationError("recommender evaluation needs --test-corpus")
                ranker = make_ranker(kind, model, btm)
                out[kind] = {"top1": topk_accuracy(ranker, test_seqs, 1),
                             "top5": topk_accuracy(ranker, test_seqs, 5)}
            else:
                if examples is None:
                    raise ValidationError("help evaluation needs --help-data")
                labels = [int(e.label) for e in examples]
                if kind == "help-rf":
                    scores = model.predict_proba(examples)
                else:
                    scores = [model.score(e) for e in examples]
                p, r = precision_recall(scores, labels, threshold)
                out[kind] = {"precision": p, "recall": r,
                             "auroc": auroc(scores, labels)}
        return out

    config = {"models": list(models), "runs": runs, "threshold": threshold}
    report = run_trials(one_run, n=runs, config=config)
    click.echo(report.render())
    if out_json:
        Path(out_json).write_text(report.to_json())


# ---------------------------------------------------------------------------
# demo
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--recommender-kind", type=click.Choice(RECOMMENDER_KINDS), required=True)
@click.option("--recommender", "rec_path", required=True, type=click.Path(exists=True))
@click.option("--help-model", "help_path", type=click.Path(exists=True))
@click.option("--btm", "btm_path", type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--top-k", default=5, show_default=True)
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--k", default=8, show_default=True,
              help="Minimum context before help probabilities are shown.")
def demo(recommender_kind, rec_path, help_path, btm_path, vocab_path, top_k,
         threshold, k):
    """Interactive session: type commands (optionally `name GAP_SECONDS`),
    get task, next-command recommendations, and a proactive help flag."""
    vocab = read_vocabulary(vocab_path)
    btm = BitermModel.load(btm_path, vocab) if btm_path else None
    recommender = load_model(recommender_kind, rec_path, vocab, btm)
    ranker = make_ranker(recommender_kind, recommender, btm)
    help_model = HelpLstm.load(help_path, vocab) if help_path else None

    commands: list[int] = []
    gaps: list[float] = []
    last_time = None
    click.echo("taskrec demo -- type a command name (optionally followed by a "
               "gap in seconds); `quit` to exit")
    for line in sys.stdin:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "quit":
            break
        name = parts[0]
        if name not in vocab.index:
            close = difflib.get_close_matches(name, vocab.names, n=3)
            click.echo(f"unknown command {name!r}; did you mean: "
                       + (", ".join(close) if close else "(no suggestion)"))
            continue
        now = time.monotonic()
        if len(parts) > 1:
            gap = float(parts[1])
        else:
            gap = 0.0 if last_time is None else now - last_time
        last_time = now
        commands.append(vocab.index[name])
        gaps.append(gap if commands[:-1] else 0.0)

        if btm is not None:
            dist = infer_task_distribution(btm, commands)
            z = int(np.argmax(dist))
            top = ", ".join(vocab.names[c] for c, _ in top_commands(btm, z, 3))
            click.echo(f"task: #{z} (p={dist[z]:.2f}; typical: {top})")
        scores = ranker(commands)
        order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
        recs = ", ".join(f"{vocab.names[i]} ({scores[i]:.2f})"
                         for i in order[:top_k])
        click.echo(f"next: {recs}")
        if help_model is not None:
            if len(commands) < k + 1:
                click.echo(f"help: warming up ({len(commands)}/{k + 1} commands)")
            else:
                p = help_model.step_probs(commands, gaps)[-1]
                marker = "  << ALERT: user may need help" if p >= threshold else ""
                click.echo(f"help: p={p:.2f}{marker}")
    click.echo("bye")


def main():
    try:
        cli.main(standalone_mode=False)
    except (ValidationError, click.UsageError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except (DataError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(1)
    except TaskrecError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)
    except Exception as exc:  # pragma: no cover
        click.echo(f"internal error: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
