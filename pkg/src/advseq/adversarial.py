"""Adversarial training with Monte Carlo rollout rewards.

The generator is trained by REINFORCE: sampled sequences are scored by a
discriminator, and intermediate positions receive the mean discriminator
score of K rollout completions. Completions come from a separate rollout
network whose weights trail the generator through a soft update
beta <- (1 - alpha) * theta + alpha * beta after every iteration, which
damps reward churn while the discriminator moves.

Raw scores can be rescaled before the policy step. The odds-ratio form
D/(1-D) amplifies confident scores; the rank-based form maps batch ranks
through a sigmoid so rewards keep a fixed scale no matter how strong the
discriminator is. Either way a per-position batch-mean baseline can be
subtracted to cut gradient variance.

Pretraining loops for both players live here too, so every training
entry point shares one file.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from itertools import product
from typing import Callable

import numpy as np

from .corpus import SequenceData
from .discriminators import Discriminator, score, train_step
from .generator import (GeneratorDims, batch_log_probs, forward_states,
                        mean_nll, mle_step, policy_gradient_step,
                        sample_batch, step_logits, _sample_from_logits)
from .numerics import (AdamState, ParamStore, RngStream, chunk_slices, pmap,
                       sigmoid)

ODA_CAP = 1e6
RESCALE_MODES = ("none", "oda", "bra")


@dataclass
class TrainSchedule:
    iterations: int = 30
    g_steps: int = 5
    d_steps: int = 5
    batch_size: int = 32
    rollouts: int = 8
    alpha: float = 0.8
    rescale: str = "oda"
    delta: float = 12.0
    baseline: bool = True
    teacher_forcing: bool = True
    g_lr: float = 1e-4
    d_lr: float = 1e-3
    clip: float = 5.0

    def validate(self) -> None:
        if self.rescale not in RESCALE_MODES:
            raise ValueError(f"rescale must be one of {RESCALE_MODES}, got {self.rescale!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"soft-update alpha must lie in [0, 1], got {self.alpha}")
        if self.rollouts < 1 or self.batch_size < 1:
            raise ValueError("rollouts and batch_size must be positive")
        # iterations == 0 is allowed: the loop degenerates to a no-op and
        # returns the pretrained parameters untouched.
        if self.iterations < 0 or self.g_steps < 1 or self.d_steps < 1:
            raise ValueError("iterations must be >= 0, g_steps and d_steps >= 1")
        if self.delta <= 0.0:
            raise ValueError(f"rank-rescale delta must be positive, got {self.delta}")


def soft_update(rollout_params: ParamStore, gen_params: ParamStore,
                alpha: float) -> None:
    """beta <- (1 - alpha) * theta + alpha * beta, exact at both endpoints."""
    for name, p in rollout_params.items():
        theta = gen_params.value(name)
        if alpha == 0.0:
            p.value[...] = theta
        elif alpha != 1.0:
            p.value *= alpha
            p.value += (1.0 - alpha) * theta


def clone_params(params: ParamStore) -> ParamStore:
    return params.copy()


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------

ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def discriminator_score_fn(disc: Discriminator, threads: int = 1,
                           chunk: int = 2048) -> ScoreFn:
    """Chunked eval-mode scoring; the chunk grid is fixed, so worker count
    cannot change the result."""
    def fn(tokens: np.ndarray, labels: np.ndarray) -> np.ndarray:
        slices = chunk_slices(len(tokens), chunk)
        parts = pmap(lambda sl: score(disc, tokens[sl], labels[sl]), slices, threads)
        return np.concatenate(parts) if parts else np.empty(0)
    return fn


def mc_rollout_rewards(rollout_params: ParamStore, dims: GeneratorDims,
                       score_fn: ScoreFn, tokens: np.ndarray, labels: np.ndarray,
                       n_rollouts: int, rng: RngStream) -> np.ndarray:
    """Per-position rewards for sampled sequences, shape (B, T).

    Position t < T-1 gets the mean score of n_rollouts completions of the
    prefix ending at t; the final position is scored directly. Completions
    are generated by the rollout network restarted from its own
    teacher-forced state at the cut, with all rollout randomness drawn up
    front from one stream.
    """
    B, T = tokens.shape
    K = n_rollouts
    rewards = np.empty((B, T))
    if T > 1:
        cache = forward_states(rollout_params, dims, tokens, labels)
        n_rows = (T - 1) * B * K
        # row r = p*B*K + b*K + k, cuts p ascending so the active set at
        # generation position q is exactly the first q*B*K rows
        seqs = np.tile(tokens[None, :, None, :], (T - 1, 1, K, 1)).reshape(n_rows, T)
        h = np.repeat(cache.hs.transpose(1, 0, 2)[:T - 1], K, axis=1).reshape(n_rows, -1)
        c = np.repeat(cache.cs.transpose(1, 0, 2)[:T - 1], K, axis=1).reshape(n_rows, -1)
        prev = np.repeat(tokens.T[:T - 1], K, axis=1).reshape(n_rows)
        labels_rows = np.tile(labels[None, :, None], (T - 1, 1, K)).reshape(n_rows)
        cond = rollout_params.value("gen.label_embed")[labels_rows]
        u = rng.uniform((n_rows, T))
        for q in range(1, T):
            a = q * B * K
            logits, h_new, c_new, _, _ = step_logits(
                rollout_params, dims, h[:a], c[:a], prev[:a], cond[:a])
            drawn = _sample_from_logits(logits, u[:a, q])
            seqs[:a, q] = drawn
            prev[:a] = drawn
            h[:a] = h_new
            c[:a] = c_new
        scores = score_fn(seqs, labels_rows)
        rewards[:, :T - 1] = scores.reshape(T - 1, B, K).mean(axis=2).T
    rewards[:, T - 1] = score_fn(tokens, labels)
    return rewards


def enumeration_rewards(rollout_params: ParamStore, dims: GeneratorDims,
                        score_fn: ScoreFn, tokens: np.ndarray,
                        labels: np.ndarray) -> np.ndarray:
    """Exact expected rewards by summing over every completion.

    Only feasible for tiny vocabularies and lengths; the reference point
    Monte Carlo rewards converge to.
    """
    B, T = tokens.shape
    V = dims.vocab_size
    rewards = np.empty((B, T))
    for p in range(T - 1):
        suffixes = np.array(list(product(range(V), repeat=T - 1 - p)), dtype=np.int64)
        n_suf = len(suffixes)
        full = np.repeat(tokens, n_suf, axis=0)            # (B*n_suf, T)
        full[:, p + 1:] = np.tile(suffixes, (B, 1))
        labs = np.repeat(labels, n_suf)
        logp, _ = batch_log_probs(rollout_params, dims, full, labs, exclude_pad=False)
        w = np.exp(logp[:, p + 1:].sum(axis=1)).reshape(B, n_suf)
        vals = score_fn(full, labs).reshape(B, n_suf)
        rewards[:, p] = (w * vals).sum(axis=1)
    rewards[:, T - 1] = score_fn(tokens, labels)
    return rewards


def rescale_oda(rewards: np.ndarray) -> np.ndarray:
    """Odds ratio D/(1-D); scores clamped below 1-1e-6 and the output
    capped at 1e6 so a saturated discriminator cannot produce inf."""
    d = np.clip(rewards, 0.0, 1.0 - 1e-6)
    return np.minimum(d / (1.0 - d), ODA_CAP)


def rank_tensor(scores: np.ndarray) -> np.ndarray:
    """Descending 1-based ranks per column with stable tie order."""
    B = scores.shape[0]
    order = np.argsort(-scores, axis=0, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, B + 1)[:, None] *
                      np.ones_like(order[:1]), axis=0)
    return ranks


def rescale_bra(rewards: np.ndarray, delta: float = 12.0) -> np.ndarray:
    """Batch-rank rescale sigma(delta * (0.5 - rank/B)); the batch median
    lands near 0.5 regardless of the raw score scale."""
    B = rewards.shape[0]
    ranks = rank_tensor(rewards)
    return sigmoid(delta * (0.5 - ranks / B))


def subtract_baseline(rewards: np.ndarray) -> np.ndarray:
    """Remove the per-position batch mean."""
    return rewards - rewards.mean(axis=0, keepdims=True)


def apply_reward_shaping(rewards: np.ndarray, sched: TrainSchedule) -> np.ndarray:
    if sched.rescale == "oda":
        rewards = rescale_oda(rewards)
    elif sched.rescale == "bra":
        rewards = rescale_bra(rewards, sched.delta)
    if sched.baseline:
        rewards = subtract_baseline(rewards)
    return rewards


# ---------------------------------------------------------------------------
# Pretraining loops
# ---------------------------------------------------------------------------


def iterate_batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain_generator(params: ParamStore, dims: GeneratorDims,
                       train: SequenceData, valid: SequenceData, rng: RngStream,
                       epochs: int, batch_size: int = 64, lr: float = 1e-3,
                       patience: int = 20, min_delta: float = 1e-4,
                       clip: float = 5.0, opt: AdamState | None = None,
                       start_epoch: int = 0, prior_valid: tuple = (),
                       log_cb=None) -> list[dict]:
    """Teacher-forced maximum likelihood with early stopping on validation
    NLL. Training always keeps the latest weights; stopping just ends the
    loop once `patience` epochs pass without improvement.

    Resuming: pass `start_epoch` plus the previous epochs' validation NLLs
    so the early-stopping state replays to where the interrupted run left
    off. Epoch indices key the shuffle streams, so the continued trajectory
    matches an uninterrupted run.
    """
    if opt is None:
        opt = AdamState(params, lr=lr)
    history: list[dict] = []
    best = np.inf
    stale = 0
    for v in prior_valid:
        if v < best - min_delta:
            best = v
            stale = 0
        else:
            stale += 1
    t0 = time.perf_counter()
    for epoch in range(start_epoch, epochs):
        order = rng.child("order", epoch).permutation(len(train))
        losses = []
        for idx in iterate_batches(len(train), batch_size, order):
            losses.append(mle_step(params, dims, opt, train.tokens[idx],
                                   train.labels[idx], clip=clip))
        valid_nll = mean_nll(params, dims, valid)
        row = {"epoch": epoch, "train_nll": float(np.mean(losses)),
               "valid_nll": valid_nll,
               "wall_seconds": time.perf_counter() - t0}
        history.append(row)
        if log_cb is not None:
            log_cb(row)
        if valid_nll < best - min_delta:
            best = valid_nll
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    return history


def pretrain_discriminator(disc: Discriminator, gen_params: ParamStore,
                           dims: GeneratorDims, train: SequenceData,
                           rng: RngStream, epochs: int, batch_size: int = 64,
                           lr: float = 1e-3, clip: float = 5.0,
                           opt: AdamState | None = None, start_epoch: int = 0,
                           log_cb=None) -> list[dict]:
    """Real-vs-generated pretraining; fakes reuse the real batch's labels
    so both classes share one condition marginal."""
    if opt is None:
        opt = AdamState(disc.params, lr=lr)
    history: list[dict] = []
    t0 = time.perf_counter()
    for epoch in range(start_epoch, epochs):
        order = rng.child("order", epoch).permutation(len(train))
        losses, accs = [], []
        for b, idx in enumerate(iterate_batches(len(train), batch_size, order)):
            real_tok = train.tokens[idx]
            labels = train.labels[idx]
            fake_tok = sample_batch(gen_params, dims, labels, train.seq_len,
                                    rng.child("fake", epoch, b))
            tokens = np.concatenate([real_tok, fake_tok], axis=0)
            both_labels = np.concatenate([labels, labels])
            targets = np.concatenate([np.ones(len(idx), dtype=np.int64),
                                      np.zeros(len(idx), dtype=np.int64)])
            loss, acc = train_step(disc, opt, tokens, both_labels, targets,
                                   rng.child("drop", epoch, b), clip=clip)
            losses.append(loss)
            accs.append(acc)
        row = {"epoch": epoch, "d_loss": float(np.mean(losses)),
               "d_acc": float(np.mean(accs)),
               "wall_seconds": time.perf_counter() - t0}
        history.append(row)
        if log_cb is not None:
            log_cb(row)
    return history


# ---------------------------------------------------------------------------
# Adversarial loop
# ---------------------------------------------------------------------------


def adversarial_train(gen_params: ParamStore, dims: GeneratorDims,
                      disc: Discriminator, train: SequenceData,
                      monitor: SequenceData, sched: TrainSchedule, rng: RngStream,
                      rollout_params: ParamStore | None = None,
                      g_opt: AdamState | None = None,
                      d_opt: AdamState | None = None,
                      start_iteration: int = 0, threads: int = 1,
                      on_iteration=None) -> tuple[list[dict], ParamStore]:
    """Alternate policy-gradient generator steps with discriminator steps.

    All randomness is derived from (purpose, iteration, step) child
    streams, so resuming at `start_iteration` with restored parameters and
    optimizer states continues the original trajectory exactly.
    """
    sched.validate()
    if rollout_params is None:
        rollout_params = clone_params(gen_params)  # beta starts at theta
    if g_opt is None:
        g_opt = AdamState(gen_params, lr=sched.g_lr)
    if d_opt is None:
        d_opt = AdamState(disc.params, lr=sched.d_lr)
    score_fn = discriminator_score_fn(disc, threads=threads)
    history: list[dict] = []
    t0 = time.perf_counter()
    for i in range(start_iteration, sched.iterations):
        g_objs, reward_means = [], []
        for g in range(sched.g_steps):
            idx = rng.child("glabels", i, g).integers(0, len(train), sched.batch_size)
            labels = train.labels[idx]
            tokens = sample_batch(gen_params, dims, labels, train.seq_len,
                                  rng.child("gsample", i, g))
            raw = mc_rollout_rewards(rollout_params, dims, score_fn, tokens,
                                     labels, sched.rollouts, rng.child("mc", i, g))
            shaped = apply_reward_shaping(raw, sched)
            g_objs.append(policy_gradient_step(gen_params, dims, g_opt, tokens,
                                               labels, shaped, clip=sched.clip))
            reward_means.append(float(raw.mean()))
            if sched.teacher_forcing:
                ridx = rng.child("tf", i, g).integers(0, len(train), sched.batch_size)
                mle_step(gen_params, dims, g_opt, train.tokens[ridx],
                         train.labels[ridx], clip=sched.clip)
        d_losses, d_accs = [], []
        for d in range(sched.d_steps):
            idx = rng.child("dreal", i, d).integers(0, len(train), sched.batch_size)
            labels = train.labels[idx]
            fake = sample_batch(gen_params, dims, labels, train.seq_len,
                                rng.child("dfake", i, d))
            tokens = np.concatenate([train.tokens[idx], fake], axis=0)
            both = np.concatenate([labels, labels])
            targets = np.concatenate([np.ones(len(idx), dtype=np.int64),
                                      np.zeros(len(idx), dtype=np.int64)])
            loss, acc = train_step(disc, d_opt, tokens, both, targets,
                                   rng.child("drop", i, d), clip=sched.clip)
            d_losses.append(loss)
            d_accs.append(acc)
        soft_update(rollout_params, gen_params, sched.alpha)
        row = {"iteration": i,
               "g_objective": float(np.mean(g_objs)),
               "mean_reward": float(np.mean(reward_means)),
               "d_loss": float(np.mean(d_losses)),
               "d_acc": float(np.mean(d_accs)),
               "nll_test": mean_nll(gen_params, dims, monitor),
               "wall_seconds": time.perf_counter() - t0}
        history.append(row)
        if on_iteration is not None:
            on_iteration(i, row, rollout_params, g_opt, d_opt)
    return history, rollout_params


def teacher_forcing_step(params: ParamStore, dims: GeneratorDims, opt: AdamState,
                         tokens: np.ndarray, labels: np.ndarray,
                         clip: float = 5.0) -> float:
    """Policy-gradient step on real text with every reward fixed at one;
    algebraically identical to a maximum-likelihood step, which is how it
    is computed."""
    return mle_step(params, dims, opt, tokens, labels, clip=clip)
