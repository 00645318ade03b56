"""Three evaluation tiers for conditional sequence generators.

Micro: held-out negative log-likelihood and n-gram statistics (BLEU
against references, self-BLEU among samples for diversity).

Macro: adversarial evaluation. A fresh convolutional evaluator is trained
to separate held-out real text from generated text; the generator's score
is the evaluator's error rate on a balanced held-out set. Because a weak
or broken evaluator would make that number meaningless, three reliability
probes report how far the evaluator is from its ideal accuracy on rigged
inputs: real-vs-real and generated-vs-generated should sit at chance,
real-vs-random-tokens should be perfectly separable.

Application: train a label classifier on real data, on generated data,
and on their union, then compare test accuracies, measuring whether
generated text can stand in for (or augment) real training data.

Macro and application numbers are reported as the median over several
evaluator seeds, since single evaluator trainings are noisy.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import PAD_ID, DataError, SequenceData
from .discriminators import (Discriminator, DiscriminatorConfig, class_probs,
                             init_discriminator, train_step)
from .embeddings import pretrain_embeddings
from .generator import GeneratorDims, mean_nll, sample_batch
from .numerics import AdamState, ParamStore, RngStream

BLEU_EPS = 1e-9


def strip_pads(row: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(t) for t in row if int(t) != PAD_ID)


def ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(candidate: Sequence, references: list[Sequence], max_n: int = 4,
         eps: float = BLEU_EPS) -> float:
    """Sentence BLEU with clipped modified precisions for n = 1..max_n.

    Zero precisions (including empty n-gram sets) are replaced by `eps`
    before the geometric mean. Brevity penalty uses the reference length
    closest to the candidate, shorter on ties. Inputs must already have
    pads removed.
    """
    if not references:
        raise ValueError("bleu needs at least one reference")
    c = len(candidate)
    if c == 0:
        return 0.0
    log_precisions = 0.0
    for n in range(1, max_n + 1):
        cand_counts = ngrams(candidate, n)
        total = sum(cand_counts.values())
        if total == 0:
            log_precisions += math.log(eps)
            continue
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in ngrams(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        matched = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        p_n = matched / total
        log_precisions += math.log(p_n) if p_n > 0 else math.log(eps)
    r = min((len(ref) for ref in references),
            key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_precisions / max_n)


def self_bleu(samples: list[Sequence], max_n: int = 4) -> float:
    """Mean BLEU of each sample against all the others; high values mean
    the sample set repeats itself."""
    if len(samples) < 2:
        raise ValueError("self-BLEU needs at least two samples")
    scores = [bleu(samples[i], samples[:i] + samples[i + 1:], max_n=max_n)
              for i in range(len(samples))]
    return float(np.mean(scores))


def corpus_bleu_mean(samples: list[Sequence], references: list[Sequence],
                     max_n: int = 4) -> float:
    return float(np.mean([bleu(s, references, max_n=max_n) for s in samples]))


def nll_test(params: ParamStore, dims: GeneratorDims, data: SequenceData) -> float:
    """Mean per-sequence negative log-likelihood on held-out data, nats."""
    return mean_nll(params, dims, data)


# ---------------------------------------------------------------------------
# Macro tier: adversarial evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSettings:
    epochs: int = 25
    batch_size: int = 64
    lr: float = 1e-3
    embed_epochs: int = 3
    d_embed: int = 32
    n_filters: int = 16
    widths: tuple[int, ...] = (2, 3, 4)
    dropout: float = 0.2
    l2: float = 0.1


def _train_cnn(tokens: np.ndarray, labels: np.ndarray | None,
               targets: np.ndarray, n_labels: int, vocab_size: int,
               n_out: int, use_condition: bool, rng: RngStream,
               settings: EvalSettings) -> Discriminator:
    """Fit a fresh convolutional classifier, embeddings pretrained on its
    own training rows and then frozen."""
    seq_len = tokens.shape[1]
    embed = pretrain_embeddings(SequenceData(tokens, targets), vocab_size,
                                settings.d_embed, rng.child("embed"),
                                epochs=settings.embed_epochs)
    cfg = DiscriminatorConfig(kind="cnn", vocab_size=vocab_size,
                              n_labels=n_labels, seq_len=seq_len,
                              d_embed=settings.d_embed,
                              n_filters=settings.n_filters,
                              widths=settings.widths, dropout=settings.dropout,
                              l2=settings.l2, use_condition=use_condition,
                              n_out=n_out)
    disc = init_discriminator(cfg, embed, rng.child("init"))
    opt = AdamState(disc.params, lr=settings.lr)
    n = len(tokens)
    for epoch in range(settings.epochs):
        order = rng.child("order", epoch).permutation(n)
        for b, start in enumerate(range(0, n, settings.batch_size)):
            idx = order[start:start + settings.batch_size]
            lab = None if labels is None else labels[idx]
            train_step(disc, opt, tokens[idx], lab, targets[idx],
                       rng.child("drop", epoch, b))
    return disc


def _binary_probe(pos: SequenceData, neg: SequenceData, rng: RngStream,
                  settings: EvalSettings, vocab_size: int,
                  n_labels: int) -> float:
    """Train an evaluator on half of each side, return held-out accuracy."""
    if len(pos) < 4 or len(neg) < 4:
        raise DataError(f"evaluator probe needs at least 4 items per side, "
                        f"got {len(pos)} vs {len(neg)}")

    def halves(data: SequenceData, stream: RngStream):
        order = stream.permutation(len(data))
        cut = len(data) // 2
        return data.subset(order[:cut]), data.subset(order[cut:])

    pos_tr, pos_te = halves(pos, rng.child("pos"))
    neg_tr, neg_te = halves(neg, rng.child("neg"))
    tokens = np.concatenate([pos_tr.tokens, neg_tr.tokens])
    labels = np.concatenate([pos_tr.labels, neg_tr.labels])
    targets = np.concatenate([np.ones(len(pos_tr), dtype=np.int64),
                              np.zeros(len(neg_tr), dtype=np.int64)])
    disc = _train_cnn(tokens, labels, targets, n_labels, vocab_size,
                      n_out=1, use_condition=True, rng=rng.child("train"),
                      settings=settings)
    te_tokens = np.concatenate([pos_te.tokens, neg_te.tokens])
    te_labels = np.concatenate([pos_te.labels, neg_te.labels])
    te_targets = np.concatenate([np.ones(len(pos_te)), np.zeros(len(neg_te))])
    from .discriminators import score as d_score
    preds = d_score(disc, te_tokens, te_labels) >= 0.5
    return float((preds == (te_targets >= 0.5)).mean())


def adversarial_success(real: SequenceData, generated: SequenceData,
                        rng: RngStream, settings: EvalSettings,
                        vocab_size: int) -> float:
    """Held-out error rate of a fresh real-vs-generated evaluator; 0.5
    means the evaluator cannot tell the sets apart at all."""
    n_labels = max(real.n_labels(), generated.n_labels())
    acc = _binary_probe(real, generated, rng, settings, vocab_size, n_labels)
    return 1.0 - acc


def random_sequences(n: int, seq_len: int, vocab_size: int, n_labels: int,
                     rng: RngStream) -> SequenceData:
    """Uniform tokens over the non-reserved vocabulary; the separability
    floor for reliability probing."""
    tokens = 2 + rng.child("tok").integers(0, vocab_size - 2, (n, seq_len))
    labels = rng.child("lab").integers(0, n_labels, (n,))
    return SequenceData(tokens, labels)


def ere_suite(real: SequenceData, generated: SequenceData, rng: RngStream,
              settings: EvalSettings, vocab_size: int) -> dict[str, float]:
    """Evaluator reliability errors.

    ere1: |acc - 0.5| on real-vs-real (should be inseparable)
    ere2: |acc - 0.5| on generated-vs-generated (same)
    ere3: |acc - 1.0| on real-vs-random-tokens (should be trivial)
    """
    n_labels = max(real.n_labels(), generated.n_labels())

    def split_half(data: SequenceData, stream: RngStream):
        order = stream.permutation(len(data))
        cut = len(data) // 2
        return data.subset(order[:cut]), data.subset(order[cut:])

    real_a, real_b = split_half(real, rng.child("real_split"))
    gen_a, gen_b = split_half(generated, rng.child("gen_split"))
    rand = random_sequences(len(real), real.seq_len, vocab_size, n_labels,
                            rng.child("rand"))
    acc1 = _binary_probe(real_a, real_b, rng.child("ere1"), settings,
                         vocab_size, n_labels)
    acc2 = _binary_probe(gen_a, gen_b, rng.child("ere2"), settings,
                         vocab_size, n_labels)
    acc3 = _binary_probe(real, rand, rng.child("ere3"), settings,
                         vocab_size, n_labels)
    return {"ere1": abs(acc1 - 0.5), "ere2": abs(acc2 - 0.5),
            "ere3": abs(acc3 - 1.0)}


# ---------------------------------------------------------------------------
# Application tier: downstream label classification
# ---------------------------------------------------------------------------


def classifier_accuracy(train: SequenceData, test: SequenceData,
                        rng: RngStream, settings: EvalSettings,
                        vocab_size: int, n_labels: int) -> float:
    """Train a label classifier (condition head off, label as target) and
    return its test accuracy."""
    disc = _train_cnn(train.tokens, None, train.labels, n_labels, vocab_size,
                      n_out=n_labels, use_condition=False,
                      rng=rng.child("train"), settings=settings)
    probs = class_probs(disc, test.tokens)
    return float((probs.argmax(axis=1) == test.labels).mean())


def downstream_classification(real_train: SequenceData,
                              synth_train: SequenceData, test: SequenceData,
                              rng: RngStream, settings: EvalSettings,
                              vocab_size: int) -> dict[str, float]:
    """Test accuracy when training on real data, generated data, and their
    union (augmentation)."""
    n_labels = max(real_train.n_labels(), test.n_labels())
    mix = SequenceData.concat([real_train, synth_train])
    return {
        "acc_real": classifier_accuracy(real_train, test, rng.child("real"),
                                        settings, vocab_size, n_labels),
        "acc_synth": classifier_accuracy(synth_train, test, rng.child("synth"),
                                         settings, vocab_size, n_labels),
        "acc_mix": classifier_accuracy(mix, test, rng.child("mix"),
                                       settings, vocab_size, n_labels),
    }


# ---------------------------------------------------------------------------
# Aggregation and reporting
# ---------------------------------------------------------------------------


def median_over_seeds(fn: Callable[[RngStream], dict[str, float]],
                      rng: RngStream, n_seeds: int = 3) -> dict[str, float]:
    """Run fn under n_seeds child streams, take the per-metric median."""
    results = [fn(rng.child("seed", s)) for s in range(n_seeds)]
    return {k: float(np.median([r[k] for r in results])) for k in results[0]}


def generate_eval_samples(params: ParamStore, dims: GeneratorDims,
                          labels: np.ndarray, seq_len: int,
                          rng: RngStream) -> SequenceData:
    tokens = sample_batch(params, dims, labels, seq_len, rng)
    return SequenceData(tokens, labels)


def micro_metrics(params: ParamStore, dims: GeneratorDims, test: SequenceData,
                  rng: RngStream, n_samples: int = 200) -> dict[str, float]:
    """Held-out NLL plus BLEU-vs-test and self-BLEU over fresh samples."""
    if len(test) < 1 or n_samples < 2:
        raise DataError("micro metrics need a nonempty test set and >= 2 samples")
    labels = test.labels[rng.child("labels").integers(0, len(test), n_samples)]
    samples = generate_eval_samples(params, dims, labels, test.seq_len,
                                    rng.child("sample"))
    sample_rows = [strip_pads(r) for r in samples.tokens]
    ref_rows = [strip_pads(r) for r in test.tokens]
    return {
        "nll_test": nll_test(params, dims, test),
        "bleu_test": corpus_bleu_mean(sample_rows, ref_rows),
        "self_bleu": self_bleu(sample_rows),
    }


def macro_metrics(params: ParamStore, dims: GeneratorDims, test: SequenceData,
                  rng: RngStream, settings: EvalSettings, vocab_size: int,
                  n_seeds: int = 3) -> dict[str, float]:
    """AdverSuc and the reliability probes, median over evaluator seeds."""
    labels = test.labels
    generated = generate_eval_samples(params, dims, labels, test.seq_len,
                                      rng.child("gen_a"))
    generated_b = generate_eval_samples(params, dims, labels, test.seq_len,
                                        rng.child("gen_b"))

    def one_seed(stream: RngStream) -> dict[str, float]:
        out = {"adversuc": adversarial_success(test, generated, stream.child("adv"),
                                               settings, vocab_size)}
        out.update(ere_suite(test, SequenceData.concat([generated, generated_b]),
                             stream.child("ere"), settings, vocab_size))
        return out

    return median_over_seeds(one_seed, rng.child("seeds"), n_seeds)


def application_metrics(params: ParamStore, dims: GeneratorDims,
                        real_train: SequenceData, test: SequenceData,
                        rng: RngStream, settings: EvalSettings,
                        vocab_size: int, n_seeds: int = 3) -> dict[str, float]:
    """Downstream classification with generated data matched in size and
    label mix to the real training set, median over seeds."""
    if len(real_train) < 2 or len(test) < 2:
        raise DataError("application metrics need nonempty train and test sets")
    synth = generate_eval_samples(params, dims, real_train.labels,
                                  real_train.seq_len, rng.child("synth"))

    def one_seed(stream: RngStream) -> dict[str, float]:
        return downstream_classification(real_train, synth, test, stream,
                                         settings, vocab_size)

    out = median_over_seeds(one_seed, rng.child("seeds"), n_seeds)
    counts = np.bincount(real_train.labels, minlength=2).astype(np.float64)
    ratio = counts.max() / max(counts.min(), 1.0)
    if ratio > 9.0:
        out["label_imbalance"] = float(ratio)  # flagged only beyond 9:1
    return out


@dataclass
class MetricsReport:
    """Ordered metric table with byte-stable CSV rendering.

    The CSV is one row per run: run id, seed, then every metric; floats
    are rendered with repr so equal values give equal bytes. Suites that
    could not run are listed in `skipped` (name -> reason) and appear only
    in the text summary.
    """
    run_id: str
    seed: int
    metrics: dict[str, float]
    skipped: dict[str, str] = field(default_factory=dict)

    def csv_text(self) -> str:
        header = ",".join(["run_id", "seed"] + list(self.metrics))
        row = ",".join([self.run_id, str(self.seed)]
                       + [repr(v) for v in self.metrics.values()])
        return header + "\n" + row + "\n"

    def text(self) -> str:
        names = list(self.metrics) + [f"{s} suite" for s in self.skipped]
        width = max((len(n) for n in names), default=0)
        lines = [f"run {self.run_id}  seed {self.seed}"]
        lines += [f"{n.ljust(width)}  {v:.6f}" for n, v in self.metrics.items()]
        lines += [f"{(s + ' suite').ljust(width)}  skipped ({reason})"
                  for s, reason in self.skipped.items()]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_csv(text: str) -> "MetricsReport":
        lines = [ln for ln in text.splitlines() if ln]
        if len(lines) != 2:
            raise ValueError("metrics CSV must be a header row plus one data row")
        names = lines[0].split(",")
        cells = lines[1].split(",")
        if len(names) != len(cells) or names[:2] != ["run_id", "seed"]:
            raise ValueError("metrics CSV must start with run_id,seed columns")
        metrics = {n: float(c) for n, c in zip(names[2:], cells[2:])}
        return MetricsReport(cells[0], int(cells[1]), metrics)
