"""Recurrent next-command recommenders built directly on numpy.

Three variants share one autoregressive LSTM stack:

* vanilla  - input at step t is the embedding of command t
* task     - embedding concatenated with a fixed per-sequence task
             distribution (the full-sequence distribution at training time,
             the prefix distribution at test time)
* jtc      - embedding concatenated with the model's own per-step estimate
             of the full-sequence task distribution; a task head reads the
             previous top hidden state together with the per-step prefix
             fold-in distribution and is trained with a KL penalty

All gradients are hand-derived backpropagation through time, verified
against central finite differences (see gradient_check).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import CommandSequence
from .errors import ValidationError, VocabularyMismatchError
from .topics import BitermModel, infer_task_distribution

KL_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# Numeric primitives
# ---------------------------------------------------------------------------

def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def kl_divergence(p, q):
    """KL(p || q) with q clamped below at 1e-12 and 0*log(0) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError("distributions must have the same dimension")
    q = np.maximum(q, KL_CLAMP)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def lstm_cell(x, h_prev, c_prev, Wx, Wh, b):
    """One LSTM step; gate order i, f, g, o. Returns (h, c, cache)."""
    H = h_prev.shape[1]
    a = x @ Wx + h_prev @ Wh + b
    i = sigmoid(a[:, :H])
    f = sigmoid(a[:, H:2 * H])
    g = np.tanh(a[:, 2 * H:3 * H])
    o = sigmoid(a[:, 3 * H:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, (x, h_prev, c_prev, i, f, g, o, c)


def lstm_cell_backward(dh, dc, cache, Wx, Wh):
    """Backprop one step; returns (dx, dh_prev, dc_prev, dWx, dWh, db)."""
    x, h_prev, c_prev, i, f, g, o, c = cache
    tc = np.tanh(c)
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=1)
    dx = da @ Wx.T
    dh_prev = da @ Wh.T
    return dx, dh_prev, dc_prev, x.T @ da, h_prev.T @ da, da.sum(axis=0)


def clip_gradients(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Recommender networks
# ---------------------------------------------------------------------------

VARIANTS = ("vanilla", "task", "jtc")


@dataclass(frozen=True)
class NetConfig:
    variant: str = "vanilla"
    embed_dim: int = 32
    hidden_dim: int = 64
    layers: int = 2
    K: int = 0
    lr: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 32
    grad_clip: float = 5.0
    kl_weight: float = 1.0
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if min(self.embed_dim, self.hidden_dim, self.layers) < 1:
            raise ValidationError("dimensions must be >= 1")
        if self.variant != "vanilla" and self.K < 1:
            raise ValidationError("task-aware variants need K >= 1")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0


class RecommenderNet:
    """Autoregressive multi-layer LSTM over command embeddings."""

    def __init__(self, cfg: NetConfig, vocab_size: int):
        cfg.validate()
        self.cfg = cfg
        self.vocab_size = vocab_size
        side = cfg.K if cfg.variant != "vanilla" else 0
        rng = np.random.default_rng(cfg.seed)
        D, H, L = cfg.embed_dim, cfg.hidden_dim, cfg.layers

        def u(*shape):
            return rng.uniform(-0.08, 0.08, size=shape)

        p = {"embed": u(vocab_size, D)}
        for l in range(L):
            din = (D + side) if l == 0 else H
            p[f"Wx{l}"] = u(din, 4 * H)
            p[f"Wh{l}"] = u(H, 4 * H)
            b = u(4 * H)
            b[H:2 * H] += 1.0  # forget-gate bias
            p[f"b{l}"] = b
        p["W_out"] = u(H, vocab_size)
        p["b_out"] = u(vocab_size)
        if cfg.variant == "jtc":
            p["W_task"] = u(H + cfg.K, cfg.K)
            p["b_task"] = u(cfg.K)
        self.params = p

    # -- forward -----------------------------------------------------------

    def _forward(self, cmd, side=None, fold=None):
        """Run the stack over a batch.

        cmd: B x T int array; side: B x K (task variant); fold: B x T x K
        per-step prefix distributions (jtc). Returns (logits B x T x |C|,
        task_estimates B x T x K or None, caches).
        """
        cfg = self.cfg
        p = self.params
        B, T = cmd.shape
        H, L = cfg.hidden_dim, cfg.layers
        if cfg.variant == "task":
            if side is None or side.shape != (B, cfg.K):
                raise ValidationError("task variant requires side of shape (B, K)")
        if cfg.variant == "jtc":
            if fold is None or fold.shape != (B, T, cfg.K):
                raise ValidationError("jtc variant requires per-step fold distributions")
        h = [np.zeros((B, H)) for _ in range(L)]
        c = [np.zeros((B, H)) for _ in range(L)]
        caches, head_caches = [], []
        logits = np.empty((B, T, self.vocab_size))
        s_all = np.empty((B, T, cfg.K)) if cfg.variant == "jtc" else None
        for t in range(T):
            emb = p["embed"][cmd[:, t]]
            if cfg.variant == "vanilla":
                x = emb
            elif cfg.variant == "task":
                x = np.concatenate([emb, side], axis=1)
            else:
                head_in = np.concatenate([h[L - 1], fold[:, t]], axis=1)
                s = softmax(head_in @ p["W_task"] + p["b_task"])
                s_all[:, t] = s
                head_caches.append((head_in, s))
                x = np.concatenate([emb, s], axis=1)
            step = []
            inp = x
            for l in range(L):
                h[l], c[l], cache = lstm_cell(
                    inp, h[l], c[l], p[f"Wx{l}"], p[f"Wh{l}"], p[f"b{l}"])
                step.append(cache)
                inp = h[l]
            caches.append(step)
            logits[:, t] = h[L - 1] @ p["W_out"] + p["b_out"]
        return logits, s_all, (caches, head_caches, cmd)

    def forward(self, commands, side=None, btm=None):
        """Per-step next-command distributions for one prefix.

        For jtc the per-step prefix fold-in distributions are computed from
        the supplied BTM. Returns (probs T x |C|,) or (probs, task_estimates)
        for jtc.
        """
        commands = _as_ids(commands)
        if len(commands) == 0:
            raise ValidationError("prefix must be non-empty")
        cmd = np.asarray([commands])
        fold = None
        if self.cfg.variant == "jtc":
            if btm is None:
                raise ValidationError("jtc forward requires the fitted BTM")
            fold = _prefix_folds(btm, commands)[None, :, :]
        if self.cfg.variant == "task" and side is not None:
            side = np.asarray(side, dtype=np.float64)[None, :]
        logits, s_all, _ = self._forward(cmd, side=side, fold=fold)
        probs = softmax(logits[0])
        if self.cfg.variant == "jtc":
            return probs, s_all[0]
        return probs

    # -- loss and gradients ------------------------------------------------

    def loss_only(self, batch):
        return self._loss(batch, want_grads=False)[0]

    def loss_and_grads(self, batch):
        return self._loss(batch, want_grads=True)

    def _loss(self, batch, want_grads):
        cfg = self.cfg
        p = self.params
        cmd, targets, side, fold = batch
        B, T = cmd.shape
        logits, s_all, caches = self._forward(cmd, side=side, fold=fold)
        logp = log_softmax(logits)
        rows = np.arange(B)[:, None], np.arange(T)[None, :]
        ce = -logp[rows[0], rows[1], targets].mean()
        loss = ce
        kl = 0.0
        if cfg.variant == "jtc":
            q = np.maximum(s_all, KL_CLAMP)
            pk = side[:, None, :]  # KL target: full-sequence distribution
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(pk > 0, pk * (np.log(np.maximum(pk, KL_CLAMP)) - np.log(q)), 0.0)
            kl = terms.sum(axis=2).mean()
            loss = ce + cfg.kl_weight * kl
        if not np.isfinite(loss):
            raise ValidationError("non-finite training loss")
        if not want_grads:
            return loss, ce, kl, None
        dlogits = softmax(logits)
        dlogits[rows[0], rows[1], targets] -= 1.0
        dlogits /= B * T
        ds_direct = None
        if cfg.variant == "jtc":
            ds_direct = np.where(s_all > KL_CLAMP,
                                 -side[:, None, :] / np.maximum(s_all, KL_CLAMP),
                                 0.0)
            ds_direct *= cfg.kl_weight / (B * T)
        grads = self._backward(dlogits, ds_direct, caches)
        return loss, ce, kl, grads

    def _backward(self, dlogits, ds_direct, caches):
        cfg = self.cfg
        p = self.params
        step_caches, head_caches, cmd = caches
        B, T = cmd.shape
        H, L, D = cfg.hidden_dim, cfg.layers, cfg.embed_dim
        g = {k: np.zeros_like(v) for k, v in p.items()}
        dh = [np.zeros((B, H)) for _ in range(L)]
        dc = [np.zeros((B, H)) for _ in range(L)]
        for t in range(T - 1, -1, -1):
            top_h = step_caches[t][L - 1][7]  # cached c; need h = o*tanh(c)
            # recompute top hidden from cache for the output-layer grads
            o_top = step_caches[t][L - 1][6]
            h_top = o_top * np.tanh(top_h)
            dl = dlogits[:, t]
            g["W_out"] += h_top.T @ dl
            g["b_out"] += dl.sum(axis=0)
            dh[L - 1] += dl @ p["W_out"].T
            dx0 = None
            for l in range(L - 1, -1, -1):
                dx, dh_prev, dc_prev, dWx, dWh, db = lstm_cell_backward(
                    dh[l], dc[l], step_caches[t][l], p[f"Wx{l}"], p[f"Wh{l}"])
                g[f"Wx{l}"] += dWx
                g[f"Wh{l}"] += dWh
                g[f"b{l}"] += db
                dh[l], dc[l] = dh_prev, dc_prev
                if l > 0:
                    dh[l - 1] += dx
                else:
                    dx0 = dx
            np.add.at(g["embed"], cmd[:, t], dx0[:, :D])
            if cfg.variant == "jtc":
                head_in, s = head_caches[t]
                ds = dx0[:, D:] + ds_direct[:, t]
                du = s * (ds - (ds * s).sum(axis=1, keepdims=True))
                g["W_task"] += head_in.T @ du
                g["b_task"] += du.sum(axis=0)
                # the head read the previous step's top hidden state
                dh[L - 1] += du @ p["W_task"][:H].T
        return g

    # -- persistence -------------------------------------------------------

    def save(self, path, vocab_digest=""):
        meta = json.dumps({"config": self.cfg.__dict__,
                           "vocab_size": self.vocab_size,
                           "vocab_digest": vocab_digest})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(meta),
                     **{k: v for k, v in self.params.items()})

    @staticmethod
    def load(path, vocab=None) -> "RecommenderNet":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            params = {k: data[k] for k in data.files if k != "__meta__"}
        if vocab is not None and meta["vocab_digest"] != vocab.digest():
            raise VocabularyMismatchError(
                f"net at {path} was trained against a different vocabulary")
        net = RecommenderNet(NetConfig(**meta["config"]), meta["vocab_size"])
        net.params = params
        return net


def _as_ids(commands):
    if isinstance(commands, CommandSequence):
        return list(commands.commands)
    return list(commands)


def _prefix_folds(btm: BitermModel, commands) -> np.ndarray:
    """T x K matrix of fold-in distributions for each prefix c_0..c_t."""
    return np.stack([infer_task_distribution(btm, commands[:t + 1])
                     for t in range(len(commands))])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def prepare_batch_inputs(sequences, cfg: NetConfig, btm=None):
    """Teacher-forcing arrays for length-21 sequences.

    Returns (cmd N x 20, targets N x 20, side N x K or None, fold N x 20 x K
    or None). The side channel is the full-sequence fold-in distribution
    (used as input by the task variant and as the KL target by jtc); fold
    holds the per-step prefix distributions consumed by the jtc task head.
    """
    T = len(sequences[0].commands) - 1
    cmd = np.asarray([s.commands[:T] for s in sequences])
    targets = np.asarray([s.commands[1:T + 1] for s in sequences])
    side = fold = None
    if cfg.variant != "vanilla":
        if btm is None:
            raise ValidationError("task-aware variants require a fitted BTM")
        if btm.K != cfg.K:
            raise ValidationError(f"BTM has K={btm.K} but config says K={cfg.K}")
        side = np.stack([infer_task_distribution(btm, s) for s in sequences])
    if cfg.variant == "jtc":
        fold = np.stack([_prefix_folds(btm, list(s.commands[:T]))
                         for s in sequences])
    return cmd, targets, side, fold


def _teacher_forced_top1(net, data):
    cmd, targets, side, fold = data
    logits, _, _ = net._forward(cmd, side=side, fold=fold)
    return float((logits.argmax(axis=2) == targets).mean())


def train(variant, train_set, val_set, cfg: NetConfig, btm=None,
          metrics_hook=None):
    """Train a recommender net with Adam, gradient clipping, and early
    stopping on validation top-1 accuracy. Deterministic under cfg.seed."""
    if variant != cfg.variant:
        cfg = NetConfig(**{**cfg.__dict__, "variant": variant})
    cfg.validate()
    vocab_size = _infer_vocab_size(train_set, val_set, btm)
    net = RecommenderNet(cfg, vocab_size)
    data = prepare_batch_inputs(train_set, cfg, btm)
    val_data = prepare_batch_inputs(val_set, cfg, btm) if val_set else None
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, lr=cfg.lr)
    report = TrainReport()
    best_acc, best_params, since_best = -1.0, None, 0
    N = data[0].shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(N)
        tot_loss = tot_kl = 0.0
        n_batches = 0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = _index_batch(data, idx)
            loss, _ce, kl, grads = net.loss_and_grads(batch)
            clip_gradients(grads, cfg.grad_clip)
            opt.step(net.params, grads)
            tot_loss += loss
            tot_kl += kl
            n_batches += 1
        val_acc = _teacher_forced_top1(net, val_data) if val_data else float("nan")
        record = {"epoch": epoch, "loss": tot_loss / n_batches,
                  "kl": tot_kl / n_batches, "val_top1": val_acc}
        report.epochs.append(record)
        report.stopped_epoch = epoch
        if metrics_hook:
            metrics_hook(record)
        if val_data:
            if val_acc > best_acc:
                best_acc = val_acc
                best_params = copy.deepcopy(net.params)
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    if best_params is not None:
        net.params = best_params
    return net, report


def _index_batch(data, idx):
    cmd, targets, side, fold = data
    return (cmd[idx], targets[idx],
            side[idx] if side is not None else None,
            fold[idx] if fold is not None else None)


def _infer_vocab_size(train_set, val_set, btm):
    if btm is not None:
        return btm.vocab_size
    hi = max(max(s.commands) for s in list(train_set) + list(val_set or []))
    return hi + 1


def recommend(net: RecommenderNet, prefix, btm=None, top_k: int = 5):
    """Top-k next commands after the prefix, ties broken by lower id.

    The task variant conditions on the prefix's own fold-in distribution
    (never the full sequence); jtc recomputes its per-step estimates from
    prefix information only.
    """
    if top_k < 1:
        raise ValidationError("top_k must be >= 1")
    commands = _as_ids(prefix)
    side = None
    if net.cfg.variant == "task":
        if btm is None:
            raise ValidationError("task variant requires the fitted BTM")
        side = infer_task_distribution(btm, commands)
    out = net.forward(commands, side=side, btm=btm)
    probs = (out[0] if net.cfg.variant == "jtc" else out)[-1]
    order = np.lexsort((np.arange(len(probs)), -probs))
    return [(int(i), float(probs[i])) for i in order[:top_k]]


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def gradient_check(model, batch, epsilon: float = 1e-4, n_samples: int = 200,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled from every parameter tensor, at least two per
    tensor and >= n_samples overall. Works for any model exposing `params`,
    `loss_and_grads`, and `loss_only`.
    """
    rng = np.random.default_rng(seed)
    out = model.loss_and_grads(batch)
    grads = out[-1]
    total = sum(v.size for v in model.params.values())
    worst = 0.0
    for name, tensor in model.params.items():
        n = max(2, int(round(n_samples * tensor.size / total)))
        n = min(n, tensor.size)
        flat_idx = rng.choice(tensor.size, size=n, replace=False)
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        for j in flat_idx:
            orig = flat[j]
            flat[j] = orig + epsilon
            lp = model.loss_only(batch)
            flat[j] = orig - epsilon
            lm = model.loss_only(batch)
            flat[j] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            analytic = gflat[j]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
