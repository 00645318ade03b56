"""Skip-gram word embeddings with negative sampling.

Trains small dense vectors on a token corpus so the discriminators can
start from frozen, distribution-aware embeddings instead of random ones.
Updates are applied with scatter-adds over minibatches of (center, context)
pairs, which keeps the result deterministic for a given stream.
"""

from __future__ import annotations

import numpy as np

from .corpus import PAD_ID, SequenceData
from .numerics import RngStream, sigmoid


def _skipgram_pairs(data: SequenceData, window: int) -> np.ndarray:
    """All (center, context) id pairs within `window`, pads skipped."""
    pairs: list[tuple[int, int]] = []
    for row in data.tokens:
        toks = [int(t) for t in row if t != PAD_ID]
        for i, center in enumerate(toks):
            lo = max(0, i - window)
            hi = min(len(toks), i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    pairs.append((center, toks[j]))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


def _negative_table(data: SequenceData, vocab_size: int) -> np.ndarray:
    """Cumulative unigram^0.75 distribution used to draw negatives."""
    counts = np.bincount(data.tokens.ravel(), minlength=vocab_size).astype(np.float64)
    counts[PAD_ID] = 0.0
    weights = counts ** 0.75
    total = weights.sum()
    if total == 0:
        weights = np.ones(vocab_size)
        weights[PAD_ID] = 0.0
        total = weights.sum()
    return np.cumsum(weights / total)


def pretrain_embeddings(data: SequenceData, vocab_size: int, dim: int,
                        rng: RngStream, window: int = 2, negatives: int = 5,
                        epochs: int = 5, lr: float = 0.025,
                        batch_size: int = 512) -> np.ndarray:
    """Train input vectors and return them as a (vocab_size, dim) table.

    The learning rate decays linearly over all updates down to 1e-4 of its
    starting value, the usual schedule for this model.
    """
    pairs = _skipgram_pairs(data, window)
    w_in = rng.child("init").uniform_range(-0.5 / dim, 0.5 / dim, (vocab_size, dim))
    if len(pairs) == 0:
        return w_in
    w_out = np.zeros((vocab_size, dim))
    cum = _negative_table(data, vocab_size)

    n_batches = (len(pairs) + batch_size - 1) // batch_size
    total_steps = epochs * n_batches
    step = 0
    for epoch in range(epochs):
        order = rng.child("shuffle", epoch).permutation(len(pairs))
        for b in range(n_batches):
            batch = pairs[order[b * batch_size:(b + 1) * batch_size]]
            centers, contexts = batch[:, 0], batch[:, 1]
            u = rng.child("neg", epoch, b).uniform((len(batch), negatives))
            negs = np.searchsorted(cum, u, side="right")
            np.clip(negs, 0, vocab_size - 1, out=negs)

            v = w_in[centers]                      # (B, d)
            u_pos = w_out[contexts]                # (B, d)
            u_neg = w_out[negs]                    # (B, K, d)
            g_pos = sigmoid((v * u_pos).sum(axis=1)) - 1.0          # (B,)
            g_neg = sigmoid(np.einsum("bkd,bd->bk", u_neg, v))      # (B, K)

            lr_t = lr * max(1.0 - step / total_steps, 1e-4)
            dv = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
            np.add.at(w_in, centers, -lr_t * dv)
            np.add.at(w_out, contexts, -lr_t * g_pos[:, None] * v)
            np.add.at(w_out, negs.reshape(-1),
                      (-lr_t * g_neg[..., None] * v[:, None, :]).reshape(-1, dim))
            step += 1
    return w_in


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(a @ b) / denom
