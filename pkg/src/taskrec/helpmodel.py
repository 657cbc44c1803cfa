"""Proactive help detection.

Two classifiers over (command, time-gap) sequences: a random-forest baseline
on pooled Gaussian-projected command features, and a streaming LSTM whose
final-unfolding output trains a binary head. At prediction time the same
head is applied at every step once a minimum context of k commands has been
seen, so help can be flagged mid-session.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import joblib
import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .corpus import CommandSequence, HelpExample
from .errors import DataError, ValidationError, VocabularyMismatchError
from .evaluation import auroc
from .neural import (Adam, clip_gradients, log_softmax, lstm_cell,
                     lstm_cell_backward, softmax)


# ---------------------------------------------------------------------------
# Random-forest baseline
# ---------------------------------------------------------------------------

@dataclass
class ProjectionMatrix:
    matrix: np.ndarray  # |C| x dim
    seed: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def make_projection(vocab_size: int, dim: int = 8, seed: int = 0) -> ProjectionMatrix:
    """Gaussian random projection of the one-hot command space to `dim`."""
    if dim < 1:
        raise ValidationError("projection dim must be >= 1")
    rng = np.random.default_rng(seed)
    return ProjectionMatrix(
        matrix=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)),
        seed=seed)


def featurize_rf(example, proj: ProjectionMatrix, use_time: bool = True) -> np.ndarray:
    """Pool per-step (projected command (+) gap) vectors into a fixed vector.

    Element-wise mean and max of the per-step vectors, concatenated with the
    sequence length: 2 * (dim + 1) + 1 values.
    """
    seq = example.sequence if isinstance(example, HelpExample) else example
    if len(seq) < 1:
        raise ValidationError("cannot featurize an empty sequence")
    steps = proj.matrix[list(seq.commands)]
    gaps = np.asarray(seq.gaps if (use_time and seq.gaps is not None)
                      else np.zeros(len(seq)), dtype=np.float64)
    steps = np.concatenate([steps, gaps[:, None]], axis=1)
    return np.concatenate([steps.mean(axis=0), steps.max(axis=0),
                           [float(len(seq))]])


@dataclass
class ForestModel:
    forest: RandomForestClassifier
    proj: ProjectionMatrix
    use_time: bool
    vocab_digest: str = ""

    def predict_proba(self, examples) -> np.ndarray:
        feats = np.stack([featurize_rf(e, self.proj, self.use_time)
                          for e in examples])
        probs = self.forest.predict_proba(feats)
        return probs[:, list(self.forest.classes_).index(1)]

    def save(self, path):
        joblib.dump(self, path)

    @staticmethod
    def load(path, vocab=None) -> "ForestModel":
        model = joblib.load(path)
        if vocab is not None and model.vocab_digest != vocab.digest():
            raise VocabularyMismatchError(
                f"forest at {path} was trained against a different vocabulary")
        return model


def fit_forest(examples, proj: ProjectionMatrix, use_time: bool = True,
               n_trees: int = 50, seed: int = 0, vocab_digest: str = "") -> ForestModel:
    """Bootstrap-aggregated Gini trees (sqrt(d) features per split)."""
    labels = np.asarray([int(e.label) for e in examples])
    if len(examples) < 2 or len(set(labels.tolist())) < 2:
        raise DataError("forest training needs both classes present")
    feats = np.stack([featurize_rf(e, proj, use_time) for e in examples])
    forest = RandomForestClassifier(
        n_estimators=n_trees, criterion="gini", max_features="sqrt",
        random_state=seed)
    forest.fit(feats, labels)
    return ForestModel(forest=forest, proj=proj, use_time=use_time,
                       vocab_digest=vocab_digest)


# ---------------------------------------------------------------------------
# LSTM classifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HelpConfig:
    embed_dim: int = 8
    hidden_dim: int = 32
    layers: int = 1
    use_time: bool = True
    log_time: bool = False  # feed log1p(gap) instead of raw seconds
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 5
    batch_size: int = 32
    grad_clip: float = 5.0
    min_context: int = 8
    seed: int = 0


@dataclass
class HelpPrediction:
    probs: list[float]          # P(help) for steps k, k+1, ...
    first_step: int             # index of the first scored step (= k)
    threshold: float

    @property
    def alarm(self) -> bool:
        return self.first_alarm_index is not None

    @property
    def first_alarm_index(self) -> int | None:
        for j, p in enumerate(self.probs):
            if p >= self.threshold:
                return self.first_step + j
        return None


class HelpLstm:
    """Binary sequence classifier: embeddings (+) gap -> LSTM -> 2 logits."""

    def __init__(self, cfg: HelpConfig, vocab_size: int):
        self.cfg = cfg
        self.vocab_size = vocab_size
        rng = np.random.default_rng(cfg.seed)
        D, H, L = cfg.embed_dim, cfg.hidden_dim, cfg.layers

        def u(*shape):
            return rng.uniform(-0.08, 0.08, size=shape)

        p = {"embed": u(vocab_size, D)}
        width = D + (1 if cfg.use_time else 0)
        for l in range(L):
            p[f"Wx{l}"] = u(width if l == 0 else H, 4 * H)
            p[f"Wh{l}"] = u(H, 4 * H)
            b = u(4 * H)
            b[H:2 * H] += 1.0
            p[f"b{l}"] = b
        p["W_head"] = u(H, 2)
        p["b_head"] = u(2)
        self.params = p

    # -- batched training path --------------------------------------------

    def _forward_batch(self, cmd, dt, lengths):
        p, cfg = self.params, self.cfg
        B, T = cmd.shape
        H, L = cfg.hidden_dim, cfg.layers
        h = [np.zeros((B, H)) for _ in range(L)]
        c = [np.zeros((B, H)) for _ in range(L)]
        caches = []
        final_h = np.zeros((B, H))
        if cfg.log_time:
            dt = np.log1p(dt)
        for t in range(T):
            x = p["embed"][cmd[:, t]]
            if cfg.use_time:
                x = np.concatenate([x, dt[:, t][:, None]], axis=1)
            step = []
            inp = x
            for l in range(L):
                h[l], c[l], cache = lstm_cell(
                    inp, h[l], c[l], p[f"Wx{l}"], p[f"Wh{l}"], p[f"b{l}"])
                step.append(cache)
                inp = h[l]
            caches.append(step)
            at_end = lengths == t + 1
            if at_end.any():
                final_h[at_end] = h[L - 1][at_end]
        return final_h, caches

    def loss_only(self, batch):
        return self._loss(batch, want_grads=False)[0]

    def loss_and_grads(self, batch):
        return self._loss(batch, want_grads=True)

    def _loss(self, batch, want_grads):
        cmd, dt, lengths, labels = batch
        p = self.params
        B = cmd.shape[0]
        final_h, caches = self._forward_batch(cmd, dt, lengths)
        logits = final_h @ p["W_head"] + p["b_head"]
        logp = log_softmax(logits)
        loss = -logp[np.arange(B), labels].mean()
        if not np.isfinite(loss):
            raise ValidationError("non-finite training loss")
        if not want_grads:
            return loss, None
        dlogits = softmax(logits)
        dlogits[np.arange(B), labels] -= 1.0
        dlogits /= B
        grads = self._backward(dlogits, final_h, caches, cmd, lengths)
        return loss, grads

    def _backward(self, dlogits, final_h, caches, cmd, lengths):
        p, cfg = self.params, self.cfg
        B, T = cmd.shape
        H, L, D = cfg.hidden_dim, cfg.layers, cfg.embed_dim
        g = {k: np.zeros_like(v) for k, v in p.items()}
        g["W_head"] = final_h.T @ dlogits
        g["b_head"] = dlogits.sum(axis=0)
        dfinal = dlogits @ p["W_head"].T
        dh = [np.zeros((B, H)) for _ in range(L)]
        dc = [np.zeros((B, H)) for _ in range(L)]
        for t in range(T - 1, -1, -1):
            at_end = lengths == t + 1
            if at_end.any():
                dh[L - 1][at_end] += dfinal[at_end]
            dx0 = None
            for l in range(L - 1, -1, -1):
                dx, dh_prev, dc_prev, dWx, dWh, db = lstm_cell_backward(
                    dh[l], dc[l], caches[t][l], p[f"Wx{l}"], p[f"Wh{l}"])
                g[f"Wx{l}"] += dWx
                g[f"Wh{l}"] += dWh
                g[f"b{l}"] += db
                dh[l], dc[l] = dh_prev, dc_prev
                if l > 0:
                    dh[l - 1] += dx
                else:
                    dx0 = dx
            np.add.at(g["embed"], cmd[:, t], dx0[:, :D])
        return g

    # -- sequential inference path ----------------------------------------

    def step_probs(self, commands, gaps):
        """P(help) after every step, via the same per-step cell as training."""
        p, cfg = self.params, self.cfg
        H, L = cfg.hidden_dim, cfg.layers
        h = [np.zeros((1, H)) for _ in range(L)]
        c = [np.zeros((1, H)) for _ in range(L)]
        probs = []
        gaps = gaps if gaps is not None else [0.0] * len(commands)
        for cmd_id, gap in zip(commands, gaps):
            x = p["embed"][[cmd_id]]
            if cfg.use_time:
                g = np.log1p(gap) if cfg.log_time else gap
                x = np.concatenate([x, [[g]]], axis=1)
            inp = x
            for l in range(L):
                h[l], c[l], _ = lstm_cell(
                    inp, h[l], c[l], p[f"Wx{l}"], p[f"Wh{l}"], p[f"b{l}"])
                inp = h[l]
            logits = h[L - 1] @ p["W_head"] + p["b_head"]
            probs.append(float(softmax(logits)[0, 1]))
        return probs

    def score(self, example) -> float:
        """Final-unfolding P(help), the training-mode read-out."""
        seq = example.sequence if isinstance(example, HelpExample) else example
        return self.step_probs(list(seq.commands), seq.gaps)[-1]

    def save(self, path, vocab_digest=""):
        meta = json.dumps({"config": self.cfg.__dict__,
                           "vocab_size": self.vocab_size,
                           "vocab_digest": vocab_digest})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(meta), **self.params)

    @staticmethod
    def load(path, vocab=None) -> "HelpLstm":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            params = {k: data[k] for k in data.files if k != "__meta__"}
        if vocab is not None and meta["vocab_digest"] != vocab.digest():
            raise VocabularyMismatchError(
                f"classifier at {path} was trained against a different vocabulary")
        model = HelpLstm(HelpConfig(**meta["config"]), meta["vocab_size"])
        model.params = params
        return model


def _pack_examples(examples):
    lengths = np.asarray([len(e.sequence) for e in examples])
    T = int(lengths.max())
    B = len(examples)
    cmd = np.zeros((B, T), dtype=np.int64)
    dt = np.zeros((B, T))
    labels = np.asarray([int(e.label) for e in examples])
    for i, e in enumerate(examples):
        n = len(e.sequence)
        cmd[i, :n] = e.sequence.commands
        if e.sequence.gaps is not None:
            dt[i, :n] = e.sequence.gaps
    return cmd, dt, lengths, labels


def _stratified_batches(labels, batch_size, rng):
    """Batch index lists with positives spread round-robin across batches."""
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    n_batches = max(1, int(np.ceil(len(labels) / batch_size)))
    batches = [[] for _ in range(n_batches)]
    for j, i in enumerate(pos):
        batches[j % n_batches].append(i)
    cursor = 0
    for b in batches:
        room = batch_size - len(b)
        b.extend(neg[cursor:cursor + room])
        cursor += room
    if cursor < len(neg):  # leftovers when positives overflow the layout
        batches[-1].extend(neg[cursor:])
    return [np.asarray(b) for b in batches if b]


def train_help_lstm(train_examples, val_examples, cfg: HelpConfig,
                    vocab_size: int, metrics_hook=None):
    """Train the streaming classifier with final-unfolding cross-entropy,
    stratified batches, and early stopping on validation AU-ROC."""
    for e in train_examples:
        if e.label and len(e.sequence) < cfg.min_context + 1:
            raise ValidationError(
                "positive examples must be longer than the minimum context")
    model = HelpLstm(cfg, vocab_size)
    cmd, dt, lengths, labels = _pack_examples(train_examples)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, lr=cfg.lr)
    val_labels = [int(e.label) for e in val_examples] if val_examples else None
    best_auc, best_params, since_best = -1.0, None, 0
    report = []
    for epoch in range(1, cfg.max_epochs + 1):
        tot = 0.0
        batches = _stratified_batches(labels, cfg.batch_size, rng)
        for idx in batches:
            batch = (cmd[idx], dt[idx], lengths[idx], labels[idx])
            loss, grads = model.loss_and_grads(batch)
            clip_gradients(grads, cfg.grad_clip)
            opt.step(model.params, grads)
            tot += loss
        val_auc = float("nan")
        if val_examples:
            scores = [model.score(e) for e in val_examples]
            val_auc = auroc(scores, val_labels)
        record = {"epoch": epoch, "loss": tot / len(batches), "val_auroc": val_auc}
        report.append(record)
        if metrics_hook:
            metrics_hook(record)
        if val_examples:
            if val_auc > best_auc:
                best_auc, best_params, since_best = val_auc, copy.deepcopy(model.params), 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    if best_params is not None:
        model.params = best_params
    return model, report


def predict_help_online(model: HelpLstm, stream, k: int = 8,
                        threshold: float = 0.5) -> HelpPrediction:
    """Score a (command, gap) stream per step once k commands of context
    are in; the alarm fires at the first step with P(help) >= threshold."""
    stream = list(stream)
    if len(stream) < k:
        raise DataError(f"stream of length {len(stream)} is shorter than the "
                        f"minimum context k={k}")
    commands = [c for c, _ in stream]
    gaps = [g for _, g in stream]
    probs = model.step_probs(commands, gaps)
    return HelpPrediction(probs=probs[k:], first_step=k, threshold=threshold)
