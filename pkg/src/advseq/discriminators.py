"""Three sequence discriminators over frozen token embeddings.

All share the same scoring head: architecture features, optional inverted
dropout, then one dense layer whose input gets the condition label appended
as a one-hot block, so the model can judge sequence/label agreement rather
than sequence realism alone. With n_out == 1 the head is a sigmoid
real/fake scorer; with n_out > 1 it is a softmax classifier, which is how
the downstream label classifier reuses this module (condition head off,
label as the target).

Kinds:
  fasttext  mean of unigram embeddings and hashed-bigram bucket embeddings
  cnn       parallel convolutions of several widths, relu, max-over-time
            pooling, one highway layer
  birnn     bidirectional recurrent encoder with additive self-attention

Token embeddings stay frozen, so no backward pass ever reaches them; the
hashed bigram table of the fasttext kind is trained from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .corpus import PAD_ID
from .numerics import (AdamState, ParamStore, RngStream, Tensor, adam_step,
                       clip_gradients, matmul, relu, sigmoid, softmax_rows)
from .recurrent import LstmCache, lstm_cell_backward, lstm_cell_forward

KINDS = ("fasttext", "cnn", "birnn")

# fixed mixing constants for the bigram bucket hash
_BIGRAM_MULT_A = 1_000_003
_BIGRAM_MULT_B = 8_191


@dataclass(frozen=True)
class DiscriminatorConfig:
    kind: str
    vocab_size: int
    n_labels: int
    seq_len: int
    d_embed: int = 32
    d_hidden: int = 32
    n_filters: int = 16
    widths: tuple[int, ...] = (2, 3, 4)
    n_buckets: int = 4096
    dropout: float = 0.2
    l2: float = 0.1
    use_condition: bool = True
    n_out: int = 1

    def feature_dim(self) -> int:
        if self.kind == "fasttext":
            return self.d_embed
        if self.kind == "cnn":
            return len(self.widths) * self.n_filters
        if self.kind == "birnn":
            return 2 * self.d_hidden
        raise ValueError(f"unknown discriminator kind {self.kind!r}")

    def head_in_dim(self) -> int:
        return self.feature_dim() + (self.n_labels if self.use_condition else 0)


@dataclass
class Discriminator:
    cfg: DiscriminatorConfig
    params: ParamStore
    embed: np.ndarray  # (vocab_size, d_embed), frozen


def init_discriminator(cfg: DiscriminatorConfig, embed: np.ndarray,
                       rng: RngStream) -> Discriminator:
    if cfg.kind not in KINDS:
        raise ValueError(f"unknown discriminator kind {cfg.kind!r}")
    if embed.shape != (cfg.vocab_size, cfg.d_embed):
        raise ValueError(f"embedding table {embed.shape} does not match config "
                         f"({cfg.vocab_size}, {cfg.d_embed})")
    p = ParamStore()
    if cfg.kind == "fasttext":
        p.add("d.bigram", rng.child("bigram").uniform_range(
            -0.08, 0.08, (cfg.n_buckets, cfg.d_embed)))
    elif cfg.kind == "cnn":
        for w in cfg.widths:
            fan_in = w * cfg.d_embed
            p.add(f"d.conv{w}.W",
                  rng.child("conv", w).normal((fan_in, cfg.n_filters)) / np.sqrt(fan_in))
            p.add(f"d.conv{w}.b", np.zeros((1, cfg.n_filters)))
        d = cfg.feature_dim()
        p.add("d.hw.Wt", rng.child("hwt").normal((d, d)) / np.sqrt(d))
        p.add("d.hw.bt", np.zeros((1, d)))
        p.add("d.hw.Wg", rng.child("hwg").normal((d, d)) / np.sqrt(d))
        p.add("d.hw.bg", np.zeros((1, d)))
    else:
        d_in = cfg.d_hidden + cfg.d_embed
        for direction in ("fwd", "bwd"):
            p.add(f"d.{direction}.W", rng.child(direction).uniform_range(
                -0.08, 0.08, (d_in, 4 * cfg.d_hidden)))
            p.add(f"d.{direction}.b", np.zeros((1, 4 * cfg.d_hidden)))
        d_att = cfg.d_hidden
        p.add("d.att.W", rng.child("attw").normal(
            (2 * cfg.d_hidden, d_att)) / np.sqrt(2 * cfg.d_hidden))
        p.add("d.att.b", np.zeros((1, d_att)))
        p.add("d.att.u", rng.child("attu").normal((1, d_att)) / np.sqrt(d_att))
    # Zero head: a freshly built discriminator outputs exactly 0.5 (loss ln 2)
    # regardless of kind, and the last layer has no symmetry to break.
    p.add("d.head.W", np.zeros((cfg.head_in_dim(), cfg.n_out)))
    p.add("d.head.b", np.zeros((1, cfg.n_out)))
    return Discriminator(cfg, p, np.array(embed, dtype=np.float64))


# ---------------------------------------------------------------------------
# Architecture bodies: features + their backward passes
# ---------------------------------------------------------------------------


def bigram_buckets(tokens: Tensor, n_buckets: int) -> np.ndarray:
    """Deterministic hash of adjacent token pairs into bucket ids."""
    a, b = tokens[:, :-1], tokens[:, 1:]
    return (a * _BIGRAM_MULT_A + b * _BIGRAM_MULT_B) % n_buckets


def _fasttext_features(disc: Discriminator, tokens: Tensor) -> tuple[Tensor, dict]:
    uni_mask = tokens != PAD_ID
    buckets = bigram_buckets(tokens, disc.cfg.n_buckets)
    bi_mask = uni_mask[:, :-1] & uni_mask[:, 1:]
    counts = uni_mask.sum(axis=1) + bi_mask.sum(axis=1)
    counts = np.maximum(counts, 1).astype(np.float64)
    uni_sum = (disc.embed[tokens] * uni_mask[..., None]).sum(axis=1)
    bi_sum = (disc.params.value("d.bigram")[buckets] * bi_mask[..., None]).sum(axis=1)
    s = (uni_sum + bi_sum) / counts[:, None]
    return s, {"buckets": buckets, "bi_mask": bi_mask, "counts": counts}


def _fasttext_backward(disc: Discriminator, cache: dict, ds: Tensor) -> None:
    per_row = ds / cache["counts"][:, None]              # (B, d)
    weighted = per_row[:, None, :] * cache["bi_mask"][..., None]
    np.add.at(disc.params["d.bigram"].grad, cache["buckets"].reshape(-1),
              weighted.reshape(-1, disc.cfg.d_embed))


def _cnn_features(disc: Discriminator, tokens: Tensor) -> tuple[Tensor, dict]:
    cfg = disc.cfg
    X = disc.embed[tokens]                                # (B, T, d_e)
    B, T, d_e = X.shape
    pooled_parts, cache_parts = [], []
    for w in cfg.widths:
        if T < w:
            raise ValueError(f"sequence length {T} shorter than filter width {w}")
        L = T - w + 1
        windows = np.concatenate([X[:, i:i + L] for i in range(w)], axis=2)  # (B, L, w*d_e)
        pre = windows.reshape(B * L, w * d_e) @ disc.params.value(f"d.conv{w}.W")
        pre = pre.reshape(B, L, cfg.n_filters) + disc.params.value(f"d.conv{w}.b")
        act = relu(pre)
        pooled = act.max(axis=1)                          # (B, F)
        cache_parts.append({"w": w, "windows": windows, "argmax": act.argmax(axis=1),
                            "pooled": pooled})
        pooled_parts.append(pooled)
    s0 = np.concatenate(pooled_parts, axis=1)             # (B, widths*F)
    t_gate = sigmoid(matmul(s0, disc.params.value("d.hw.Wt")) + disc.params.value("d.hw.bt"))
    g_pre = matmul(s0, disc.params.value("d.hw.Wg")) + disc.params.value("d.hw.bg")
    g_act = relu(g_pre)
    s = t_gate * g_act + (1.0 - t_gate) * s0
    return s, {"convs": cache_parts, "s0": s0, "t": t_gate, "g_pre": g_pre, "g": g_act}


def _cnn_backward(disc: Discriminator, cache: dict, ds: Tensor) -> None:
    cfg = disc.cfg
    p = disc.params
    s0, t_gate, g_act = cache["s0"], cache["t"], cache["g"]
    dt = ds * (g_act - s0)
    dg = ds * t_gate
    ds0 = ds * (1.0 - t_gate)
    da_t = dt * t_gate * (1.0 - t_gate)
    da_g = dg * (cache["g_pre"] > 0)
    p["d.hw.Wt"].grad += matmul(s0.T, da_t)
    p["d.hw.bt"].grad += da_t.sum(axis=0, keepdims=True)
    p["d.hw.Wg"].grad += matmul(s0.T, da_g)
    p["d.hw.bg"].grad += da_g.sum(axis=0, keepdims=True)
    ds0 += matmul(da_t, p.value("d.hw.Wt").T) + matmul(da_g, p.value("d.hw.Wg").T)
    offset = 0
    for part in cache["convs"]:
        w = part["w"]
        dpooled = ds0[:, offset:offset + cfg.n_filters] * (part["pooled"] > 0)
        offset += cfg.n_filters
        windows = part["windows"]
        B, L, win_dim = windows.shape
        dpre = np.zeros((B, L, cfg.n_filters))
        np.put_along_axis(dpre, part["argmax"][:, None, :], dpooled[:, None, :], axis=1)
        p[f"d.conv{w}.W"].grad += windows.reshape(B * L, win_dim).T @ \
            dpre.reshape(B * L, cfg.n_filters)
        p[f"d.conv{w}.b"].grad += dpre.sum(axis=(0, 1))[None, :]


def _lstm_seq_forward(X: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, list[LstmCache]]:
    """Run the fused cell along axis 1; X is (B, T, d_in_x)."""
    B, T, _ = X.shape
    d_h = W.shape[1] // 4
    h = np.zeros((B, d_h))
    c = np.zeros((B, d_h))
    H = np.empty((B, T, d_h))
    caches: list[LstmCache] = []
    for t in range(T):
        z = np.concatenate([h, X[:, t]], axis=1)
        h, c, cache = lstm_cell_forward(z, c, W, b)
        H[:, t] = h
        caches.append(cache)
    return H, caches


def _lstm_seq_backward(dH: Tensor, caches: list[LstmCache], W: Tensor,
                       gW: Tensor, gb: Tensor) -> None:
    """BPTT along axis 1; input embeddings are frozen so dx is dropped."""
    B, T, d_h = dH.shape
    dh_carry = np.zeros((B, d_h))
    dc_carry = np.zeros((B, d_h))
    for t in range(T - 1, -1, -1):
        dz, dc_carry = lstm_cell_backward(dH[:, t] + dh_carry, dc_carry,
                                          caches[t], W, gW, gb)
        dh_carry = dz[:, :d_h]


def _birnn_features(disc: Discriminator, tokens: Tensor) -> tuple[Tensor, dict]:
    cfg = disc.cfg
    p = disc.params
    X = disc.embed[tokens]
    H_f, caches_f = _lstm_seq_forward(X, p.value("d.fwd.W"), p.value("d.fwd.b"))
    H_b_rev, caches_b = _lstm_seq_forward(X[:, ::-1], p.value("d.bwd.W"), p.value("d.bwd.b"))
    H = np.concatenate([H_f, H_b_rev[:, ::-1]], axis=2)    # (B, T, 2*d_h)
    u = np.tanh(np.einsum("btd,de->bte", H, p.value("d.att.W")) + p.value("d.att.b"))
    scores = np.einsum("bte,e->bt", u, p.value("d.att.u")[0])
    alpha = softmax_rows(scores)
    s = np.einsum("bt,btd->bd", alpha, H)
    return s, {"H": H, "u": u, "alpha": alpha, "caches_f": caches_f, "caches_b": caches_b}


def _birnn_backward(disc: Discriminator, cache: dict, ds: Tensor) -> None:
    cfg = disc.cfg
    p = disc.params
    H, u, alpha = cache["H"], cache["u"], cache["alpha"]
    dalpha = np.einsum("bd,btd->bt", ds, H)
    dH = alpha[..., None] * ds[:, None, :]
    dscores = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    p["d.att.u"].grad += np.einsum("bte,bt->e", u, dscores)[None, :]
    du = dscores[..., None] * p.value("d.att.u")[0]
    da = du * (1.0 - u * u)
    B, T, d2 = H.shape
    d_att = da.shape[2]
    p["d.att.W"].grad += H.reshape(B * T, d2).T @ da.reshape(B * T, d_att)
    p["d.att.b"].grad += da.sum(axis=(0, 1))[None, :]
    dH += (da.reshape(B * T, d_att) @ p.value("d.att.W").T).reshape(B, T, d2)
    d_h = cfg.d_hidden
    _lstm_seq_backward(dH[:, :, :d_h], cache["caches_f"], p.value("d.fwd.W"),
                       p["d.fwd.W"].grad, p["d.fwd.b"].grad)
    _lstm_seq_backward(dH[:, ::-1, d_h:], cache["caches_b"], p.value("d.bwd.W"),
                       p["d.bwd.W"].grad, p["d.bwd.b"].grad)


_FEATURES = {"fasttext": _fasttext_features, "cnn": _cnn_features, "birnn": _birnn_features}
_BACKWARDS = {"fasttext": _fasttext_backward, "cnn": _cnn_backward, "birnn": _birnn_backward}


# ---------------------------------------------------------------------------
# Head, loss, and training
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    body: Any
    features: Tensor       # post-dropout head input without condition block
    drop_mask: Tensor | None
    labels: np.ndarray | None


def forward(disc: Discriminator, tokens: Tensor, labels: np.ndarray | None,
            train: bool = False, drop_rng: RngStream | None = None
            ) -> tuple[Tensor, ForwardCache]:
    """Head logits (B, n_out). Dropout only runs when train=True."""
    cfg = disc.cfg
    s, body = _FEATURES[cfg.kind](disc, tokens)
    drop_mask = None
    if train and cfg.dropout > 0.0:
        if drop_rng is None:
            raise ValueError("training forward pass needs a dropout stream")
        keep = 1.0 - cfg.dropout
        drop_mask = (drop_rng.uniform(s.shape) < keep).astype(np.float64) / keep
        s = s * drop_mask
    if cfg.use_condition:
        if labels is None:
            raise ValueError("conditional discriminator needs labels")
        onehot = np.zeros((len(tokens), cfg.n_labels))
        onehot[np.arange(len(tokens)), labels] = 1.0
        head_in = np.concatenate([s, onehot], axis=1)
    else:
        head_in = s
    logits = matmul(head_in, disc.params.value("d.head.W")) + disc.params.value("d.head.b")
    return logits, ForwardCache(body, head_in, drop_mask, labels)


def backward(disc: Discriminator, cache: ForwardCache, dlogits: Tensor) -> None:
    cfg = disc.cfg
    p = disc.params
    p["d.head.W"].grad += matmul(cache.features.T, dlogits)
    p["d.head.b"].grad += dlogits.sum(axis=0, keepdims=True)
    ds = matmul(dlogits, p.value("d.head.W").T)[:, :cfg.feature_dim()]
    if cache.drop_mask is not None:
        ds = ds * cache.drop_mask
    _BACKWARDS[cfg.kind](disc, cache.body, ds)


def score(disc: Discriminator, tokens: Tensor, labels: np.ndarray | None,
          batch_size: int = 2048) -> np.ndarray:
    """Eval-mode P(real | sequence, label) for a sigmoid head."""
    if disc.cfg.n_out != 1:
        raise ValueError("score() expects a sigmoid head; use class_probs()")
    out = np.empty(len(tokens))
    for start in range(0, len(tokens), batch_size):
        sl = slice(start, start + batch_size)
        lab = None if labels is None else labels[sl]
        logits, _ = forward(disc, tokens[sl], lab, train=False)
        out[sl] = sigmoid(logits[:, 0])
    return out


def class_probs(disc: Discriminator, tokens: Tensor, labels: np.ndarray | None = None,
                batch_size: int = 2048) -> np.ndarray:
    """Eval-mode class distribution for a softmax head."""
    out = np.empty((len(tokens), disc.cfg.n_out))
    for start in range(0, len(tokens), batch_size):
        sl = slice(start, start + batch_size)
        lab = None if labels is None else labels[sl]
        logits, _ = forward(disc, tokens[sl], lab, train=False)
        out[sl] = softmax_rows(logits)
    return out


def loss_and_dlogits(disc: Discriminator, logits: Tensor,
                     targets: np.ndarray) -> tuple[float, float, Tensor]:
    """Mean loss, accuracy, and d(loss)/d(logits) including the head L2 term."""
    B = len(targets)
    if disc.cfg.n_out == 1:
        probs = sigmoid(logits[:, 0])
        y = targets.astype(np.float64)
        eps = 1e-12
        loss = float(-(y * np.log(probs + eps) + (1 - y) * np.log(1 - probs + eps)).mean())
        dlogits = ((probs - y) / B)[:, None]
        acc = float(((probs >= 0.5) == (y >= 0.5)).mean())
    else:
        logits_s = logits - logits.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(logits_s).sum(axis=1))
        rows = np.arange(B)
        loss = float((logZ - logits_s[rows, targets]).mean())
        dlogits = softmax_rows(logits)
        dlogits[rows, targets] -= 1.0
        dlogits /= B
        acc = float((logits.argmax(axis=1) == targets).mean())
    W = disc.params.value("d.head.W")
    loss += 0.5 * disc.cfg.l2 * float((W * W).sum())
    return loss, acc, dlogits


def train_step(disc: Discriminator, opt: AdamState, tokens: Tensor,
               labels: np.ndarray | None, targets: np.ndarray,
               drop_rng: RngStream | None, clip: float = 5.0) -> tuple[float, float]:
    """One supervised update; returns (loss, accuracy) on the batch."""
    logits, cache = forward(disc, tokens, labels, train=True, drop_rng=drop_rng)
    loss, acc, dlogits = loss_and_dlogits(disc, logits, targets)
    backward(disc, cache, dlogits)
    disc.params["d.head.W"].grad += disc.cfg.l2 * disc.params.value("d.head.W")
    clip_gradients(disc.params, clip)
    adam_step(disc.params, opt)
    return loss, acc


def eval_loss(disc: Discriminator, tokens: Tensor, labels: np.ndarray | None,
              targets: np.ndarray) -> tuple[float, float]:
    """Eval-mode (loss, accuracy) without touching gradients."""
    logits, _ = forward(disc, tokens, labels, train=False)
    loss, acc, _ = loss_and_dlogits(disc, logits, targets)
    return loss, acc
