"""Command line for the full pipeline.

Subcommands cover the whole workflow against one run directory:

    corpus-gen   materialize a grammar corpus, vocabulary, and splits
    pretrain-g   maximum-likelihood generator pretraining
    pretrain-d   discriminator pretraining against the pretrained generator
    advtrain     adversarial training with rollout rewards (resumable)
    sample       print sequences from a trained generator
    eval         micro / macro / application metrics

The run directory comes from --run-dir, else the ADVSEQ_RUN_DIR
environment variable, else ./run. corpus-gen pins the resolved
configuration into <run>/config.txt; later commands read it back, so a run
stays self-describing. Mutating commands hold a .lock file while working.

Exit codes: 0 success, 2 usage or configuration problems, 3 numeric
failures during training, 4 corrupt or mismatched artifacts.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .adversarial import adversarial_train, pretrain_discriminator, pretrain_generator
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .config import (ConfigError, RunConfig, canonical_text, config_digest,
                     make_config)
from .corpus import (DataError, SequenceData, SplitDataset, Vocab,
                     decode_sequence, generate_corpus, read_corpus, read_vocab,
                     split_corpus, write_corpus, write_vocab)
from .discriminators import KINDS, Discriminator, init_discriminator
from .embeddings import pretrain_embeddings
from .evaluation import (MetricsReport, application_metrics, macro_metrics,
                         micro_metrics)
from .generator import GeneratorDims, init_generator_params, mean_nll, sample_batch
from .grammar import GrammarError, GrammarSpec, format_grammar, load_grammar, resolve_grammar
from .numerics import AdamState, NumericError, ParamStore, RngStream, ShapeError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_CORRUPT = 4

ADV_COLUMNS = ("iteration", "nll_test", "mean_reward", "d_loss", "g_objective",
               "wall_seconds")
GPRE_COLUMNS = ("epoch", "train_nll", "valid_nll", "wall_seconds")
DPRE_COLUMNS = ("epoch", "d_loss", "d_acc", "wall_seconds")


class CliError(Exception):
    """Unusable invocation or missing prerequisite artifact."""


# ---------------------------------------------------------------------------
# Run directory plumbing
# ---------------------------------------------------------------------------


class RunPaths:
    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        join = lambda name: os.path.join(run_dir, name)
        self.config = join("config.txt")
        self.grammar = join("grammar.txt")
        self.vocab = join("vocab.txt")
        self.train = join("corpus_train.txt")
        self.valid = join("corpus_valid.txt")
        self.test = join("corpus_test.txt")
        self.embeddings = join("embeddings.ckpt")
        self.gen_pretrain = join("gen_pretrain.ckpt")
        self.gen_pretrain_log = join("gen_pretrain_log.csv")
        self.gen_adv = join("gen_adv.ckpt")
        self.advtrain = join("advtrain.ckpt")
        self.adv_metrics = join("advtrain_metrics.csv")
        self.metrics_csv = join("metrics.csv")
        self.metrics_txt = join("metrics.txt")
        self.lock = join(".lock")

    def disc(self, kind: str) -> str:
        return os.path.join(self.run_dir, f"disc_{kind}.ckpt")

    def disc_log(self, kind: str) -> str:
        return os.path.join(self.run_dir, f"disc_{kind}_log.csv")


class RunLock:
    """Exclusive per-run-dir lock so two trainers cannot interleave writes."""

    def __init__(self, paths: RunPaths):
        self.path = paths.lock

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"run directory is locked ({self.path}); "
                           f"another command may be running, or remove a stale lock") \
                from None
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def resolve_run_dir(args) -> str:
    return args.run_dir or os.environ.get("ADVSEQ_RUN_DIR") or "run"


def resolve_config(args, paths: RunPaths) -> RunConfig:
    """Preset < pinned/explicit config file < --set pairs < --seed/--threads."""
    file_text = None
    if args.config:
        file_text = _read_text(args.config)
    elif os.path.exists(paths.config):
        file_text = _read_text(paths.config)
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"run.seed={args.seed}")
    if getattr(args, "threads", None) is not None:
        sets.append(f"run.threads={args.threads}")
    return make_config(args.preset, file_text, sets)


def _read_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}") from None


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"missing {path}; run `{hint}` first")
    return path


def _csv_cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# Artifact composition
# ---------------------------------------------------------------------------


def load_run_data(paths: RunPaths, cfg: RunConfig
                  ) -> tuple[GrammarSpec, Vocab, SplitDataset]:
    grammar = load_grammar(_require(paths.grammar, "advseq corpus-gen"))
    vocab = read_vocab(_require(paths.vocab, "advseq corpus-gen"))
    seq_len = cfg["corpus.seq_len"]
    splits = []
    for path in (paths.train, paths.valid, paths.test):
        data, unknown = read_corpus(_require(path, "advseq corpus-gen"), vocab, seq_len)
        if unknown:
            raise DataError(f"{path}: {unknown} tokens fell outside the stored vocabulary")
        splits.append(data)
    return grammar, vocab, SplitDataset(*splits)


def run_digest(cfg: RunConfig, vocab: Vocab, grammar: GrammarSpec) -> bytes:
    return config_digest(cfg, len(vocab), len(grammar.labels))


def _load_blocks(path: str, digest: bytes | None) -> dict[str, np.ndarray]:
    """Load a checkpoint, refusing on a config-digest mismatch.

    A bad digest is a usage problem (checkpoint from a different
    configuration), not file corruption, so it raises CliError (exit 2)
    rather than CheckpointError (exit 4).
    """
    blocks, stored = load_tensors(path)
    if digest is not None and stored != digest:
        raise CliError(f"{path} was written under a different configuration "
                       f"(digest mismatch); refusing to load")
    return blocks


def save_generator(path: str, params: ParamStore, dims: GeneratorDims,
                   digest: bytes) -> None:
    tensors = {name: p.value for name, p in params.items()}
    tensors["meta.dims"] = np.array([[dims.vocab_size, dims.n_labels,
                                      dims.d_embed, dims.d_hidden, dims.d_label]],
                                    dtype=np.float64)
    save_tensors(path, tensors, digest)


def _params_from_blocks(template: ParamStore, blocks: dict[str, np.ndarray],
                        path: str, prefix: str = "") -> None:
    for name, p in template.items():
        key = prefix + name
        if key not in blocks:
            raise CheckpointError(f"{path}: missing tensor {key!r}")
        if blocks[key].shape != p.value.shape:
            raise CheckpointError(f"{path}: tensor {key!r} has shape "
                                  f"{blocks[key].shape}, expected {p.value.shape}")
        p.value[...] = blocks[key]


def load_generator(path: str, digest: bytes | None
                   ) -> tuple[ParamStore, GeneratorDims]:
    blocks = _load_blocks(path, digest)
    if "meta.dims" not in blocks:
        raise CheckpointError(f"{path}: not a generator checkpoint")
    meta = blocks["meta.dims"][0]
    dims = GeneratorDims(*(int(x) for x in meta))
    params = init_generator_params(dims, RngStream(0, "ckpt-shape"))
    _params_from_blocks(params, blocks, path)
    return params, dims


def load_or_make_embeddings(paths: RunPaths, cfg: RunConfig, vocab: Vocab,
                            train: SequenceData, digest: bytes,
                            root: RngStream) -> np.ndarray:
    if os.path.exists(paths.embeddings):
        blocks = _load_blocks(paths.embeddings, digest)
        if "embed.table" not in blocks:
            raise CheckpointError(f"{paths.embeddings}: not an embedding checkpoint")
        return blocks["embed.table"]
    table = pretrain_embeddings(train, len(vocab), cfg["disc.d_embed"],
                                root.child("embed"),
                                window=cfg["embed.window"],
                                negatives=cfg["embed.negatives"],
                                epochs=cfg["embed.epochs"], lr=cfg["embed.lr"])
    save_tensors(paths.embeddings, {"embed.table": table}, digest)
    return table


def load_discriminator(path: str, cfg: RunConfig, vocab: Vocab, kind: str,
                       seq_len: int, n_labels: int, digest: bytes) -> Discriminator:
    blocks = _load_blocks(path, digest)
    if "embed.table" not in blocks:
        raise CheckpointError(f"{path}: not a discriminator checkpoint")
    dcfg = cfg.disc_config(len(vocab), n_labels, seq_len, kind=kind)
    disc = init_discriminator(dcfg, blocks["embed.table"], RngStream(0, "ckpt-shape"))
    _params_from_blocks(disc.params, blocks, path)
    return disc


def save_discriminator(path: str, disc: Discriminator, digest: bytes) -> None:
    tensors = {name: p.value for name, p in disc.params.items()}
    tensors["embed.table"] = disc.embed
    save_tensors(path, tensors, digest)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_corpus_gen(args) -> int:
    run_dir = resolve_run_dir(args)
    os.makedirs(run_dir, exist_ok=True)
    paths = RunPaths(run_dir)
    cfg = resolve_config(args, paths)
    if os.path.exists(paths.train):
        raise CliError(f"{paths.train} already exists; use a fresh run directory")
    with RunLock(paths):
        grammar = resolve_grammar(cfg["corpus.grammar"], cfg["corpus.seq_len"])
        root = RngStream(cfg["run.seed"])
        data, vocab = generate_corpus(grammar, cfg["corpus.n"], root.child("corpus"))
        splits = split_corpus(data, cfg["corpus.split"], root.child("split"))
        with open(paths.config, "w", encoding="utf-8") as fh:
            fh.write(canonical_text(cfg))
        with open(paths.grammar, "w", encoding="utf-8") as fh:
            fh.write(format_grammar(grammar))
        write_vocab(paths.vocab, vocab)
        write_corpus(paths.train, splits.train, vocab)
        write_corpus(paths.valid, splits.valid, vocab)
        write_corpus(paths.test, splits.test, vocab)
    print(f"corpus: {len(splits.train)} train / {len(splits.valid)} valid / "
          f"{len(splits.test)} test, vocabulary {len(vocab)}")
    try:
        print(f"exact conditional entropy: {grammar.conditional_entropy():.6f} nats")
    except GrammarError:
        print("exact conditional entropy: unavailable (templates may overlap)")
    return EXIT_OK


def _read_csv_rows(path: str, key: str, upto: int) -> list[dict]:
    """Rows of a metrics CSV whose integer `key` column is <= upto."""
    if not os.path.exists(path):
        return []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        for line in fh:
            row = dict(zip(header, line.rstrip("\n").split(",")))
            if int(row[key]) <= upto:
                rows.append(row)
    return rows


def _append_rows(path: str, columns: tuple[str, ...], old: list[dict],
                 new: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in old:
            fh.write(",".join(str(row[c]) for c in columns) + "\n")
        for row in new:
            fh.write(",".join(_csv_cell(row[c]) for c in columns) + "\n")


def cmd_pretrain_g(args) -> int:
    paths = RunPaths(resolve_run_dir(args))
    cfg = resolve_config(args, paths)
    grammar, vocab, splits = load_run_data(paths, cfg)
    digest = run_digest(cfg, vocab, grammar)
    dims = cfg.generator_dims(len(vocab), len(grammar.labels))
    root = RngStream(cfg["run.seed"])
    epochs = cfg["pretrain.g_epochs"]
    with RunLock(paths):
        start = 0
        prior: list[dict] = []
        if args.resume:
            blocks = _load_blocks(_require(paths.gen_pretrain, "advseq pretrain-g"),
                                  digest)
            params, dims = load_generator(paths.gen_pretrain, digest)
            opt = AdamState(params, lr=cfg["pretrain.g_lr"])
            opt.load_state_tensors({k[len("gopt."):]: v for k, v in blocks.items()
                                    if k.startswith("gopt.")})
            start = int(blocks["meta.epoch"][0, 0]) + 1
            prior = _read_csv_rows(paths.gen_pretrain_log, "epoch", start - 1)
            if start >= epochs:
                raise CliError(f"nothing to do: log is at epoch {start - 1} "
                               f"and pretrain.g_epochs = {epochs}")
        else:
            params = init_generator_params(dims, root.child("gen_init"))
            opt = AdamState(params, lr=cfg["pretrain.g_lr"])
        history = pretrain_generator(params, dims, splits.train, splits.valid,
                                     root.child("gpre"), epochs=epochs,
                                     batch_size=cfg["pretrain.batch_size"],
                                     lr=cfg["pretrain.g_lr"],
                                     patience=cfg["pretrain.patience"],
                                     opt=opt, start_epoch=start,
                                     prior_valid=tuple(float(r["valid_nll"])
                                                       for r in prior))
        _append_rows(paths.gen_pretrain_log, GPRE_COLUMNS, prior, history)
        last_epoch = history[-1]["epoch"] if history else start - 1
        tensors = {name: p.value for name, p in params.items()}
        tensors["meta.dims"] = np.array([[dims.vocab_size, dims.n_labels,
                                          dims.d_embed, dims.d_hidden,
                                          dims.d_label]], dtype=np.float64)
        tensors.update({f"gopt.{k}": v for k, v in opt.state_tensors().items()})
        tensors["meta.epoch"] = np.array([[float(last_epoch)]])
        save_tensors(paths.gen_pretrain, tensors, digest)
    if history:
        last = history[-1]
        print(f"pretrained generator: epochs {start}..{last['epoch']}, "
              f"train NLL {last['train_nll']:.4f}, valid NLL {last['valid_nll']:.4f}")
        print(f"test NLL {mean_nll(params, dims, splits.test):.4f} nats")
    else:
        print("early stopping already triggered; nothing to continue")
    return EXIT_OK


def cmd_pretrain_d(args) -> int:
    paths = RunPaths(resolve_run_dir(args))
    cfg = resolve_config(args, paths)
    grammar, vocab, splits = load_run_data(paths, cfg)
    digest = run_digest(cfg, vocab, grammar)
    kind = args.kind or cfg["disc.kind"]
    if kind not in KINDS:
        raise CliError(f"--kind must be one of {KINDS}, got {kind!r}")
    gen_params, dims = load_generator(
        _require(paths.gen_pretrain, "advseq pretrain-g"), digest)
    root = RngStream(cfg["run.seed"])
    epochs = cfg.d_pretrain_epochs(kind)
    with RunLock(paths):
        embed = load_or_make_embeddings(paths, cfg, vocab, splits.train, digest, root)
        dcfg = cfg.disc_config(len(vocab), len(grammar.labels),
                               cfg["corpus.seq_len"], kind=kind)
        start = 0
        prior: list[dict] = []
        if args.resume:
            disc = load_discriminator(
                _require(paths.disc(kind), f"advseq pretrain-d --kind {kind}"),
                cfg, vocab, kind, cfg["corpus.seq_len"], len(grammar.labels), digest)
            blocks = _load_blocks(paths.disc(kind), digest)
            opt = AdamState(disc.params, lr=cfg["pretrain.d_lr"])
            opt.load_state_tensors({k[len("dopt."):]: v for k, v in blocks.items()
                                    if k.startswith("dopt.")})
            start = int(blocks["meta.epoch"][0, 0]) + 1
            prior = _read_csv_rows(paths.disc_log(kind), "epoch", start - 1)
            if start >= epochs:
                raise CliError(f"nothing to do: log is at epoch {start - 1} "
                               f"and the configured epochs = {epochs}")
        else:
            disc = init_discriminator(dcfg, embed, root.child("dinit", kind))
            opt = AdamState(disc.params, lr=cfg["pretrain.d_lr"])
        history = pretrain_discriminator(disc, gen_params, dims, splits.train,
                                         root.child("dpre", kind), epochs=epochs,
                                         batch_size=cfg["pretrain.batch_size"],
                                         lr=cfg["pretrain.d_lr"],
                                         opt=opt, start_epoch=start)
        _append_rows(paths.disc_log(kind), DPRE_COLUMNS, prior, history)
        tensors = {name: p.value for name, p in disc.params.items()}
        tensors["embed.table"] = disc.embed
        tensors.update({f"dopt.{k}": v for k, v in opt.state_tensors().items()})
        tensors["meta.epoch"] = np.array([[float(history[-1]["epoch"])]])
        save_tensors(paths.disc(kind), tensors, digest)
    last = history[-1]
    print(f"pretrained {kind} discriminator: epochs {start}..{last['epoch']}, "
          f"loss {last['d_loss']:.4f}, accuracy {last['d_acc']:.4f}")
    return EXIT_OK


def cmd_advtrain(args) -> int:
    paths = RunPaths(resolve_run_dir(args))
    cfg = resolve_config(args, paths)
    grammar, vocab, splits = load_run_data(paths, cfg)
    digest = run_digest(cfg, vocab, grammar)
    kind = cfg["disc.kind"]
    sched = cfg.schedule()
    root = RngStream(cfg["run.seed"])
    with RunLock(paths):
        disc = load_discriminator(
            _require(paths.disc(kind), f"advseq pretrain-d --kind {kind}"),
            cfg, vocab, kind, cfg["corpus.seq_len"], len(grammar.labels), digest)
        if args.resume:
            blocks = _load_blocks(
                _require(paths.advtrain, "advseq advtrain"), digest)
            gen_params, dims = load_generator(paths.gen_pretrain, digest)
            _params_from_blocks(gen_params, blocks, paths.advtrain)
            rollout_params = gen_params.copy()
            _params_from_blocks(rollout_params, blocks, paths.advtrain, prefix="rollout.")
            _params_from_blocks(disc.params, blocks, paths.advtrain)
            g_opt = AdamState(gen_params, lr=sched.g_lr)
            d_opt = AdamState(disc.params, lr=sched.d_lr)
            g_opt.load_state_tensors({k[len("gopt."):]: v for k, v in blocks.items()
                                      if k.startswith("gopt.")})
            d_opt.load_state_tensors({k[len("dopt."):]: v for k, v in blocks.items()
                                      if k.startswith("dopt.")})
            start = int(blocks["meta.iteration"][0, 0]) + 1
        else:
            if os.path.exists(paths.advtrain):
                raise CliError(f"{paths.advtrain} exists; pass --resume to continue "
                               f"or remove it to start over")
            gen_params, dims = load_generator(
                _require(paths.gen_pretrain, "advseq pretrain-g"), digest)
            rollout_params = None
            g_opt = d_opt = None
            start = 0
        if start >= sched.iterations:
            raise CliError(f"nothing to do: checkpoint is at iteration {start - 1} "
                           f"and adv.iterations = {sched.iterations}")

        rows = _read_csv_rows(paths.adv_metrics, "iteration", start - 1)
        metrics_fh = open(paths.adv_metrics, "w", encoding="utf-8")
        metrics_fh.write(",".join(ADV_COLUMNS) + "\n")
        for row in rows:
            metrics_fh.write(",".join(row[c] for c in ADV_COLUMNS) + "\n")
        metrics_fh.flush()

        def on_iteration(i, row, rollout, g_o, d_o):
            metrics_fh.write(",".join(_csv_cell(row[c]) for c in ADV_COLUMNS) + "\n")
            metrics_fh.flush()
            tensors = {name: p.value for name, p in gen_params.items()}
            tensors["meta.dims"] = np.array([[dims.vocab_size, dims.n_labels,
                                              dims.d_embed, dims.d_hidden,
                                              dims.d_label]], dtype=np.float64)
            tensors.update({f"rollout.{n}": p.value for n, p in rollout.items()})
            tensors.update({n: p.value for n, p in disc.params.items()})
            tensors["embed.table"] = disc.embed
            tensors.update({f"gopt.{k}": v for k, v in g_o.state_tensors().items()})
            tensors.update({f"dopt.{k}": v for k, v in d_o.state_tensors().items()})
            tensors["meta.iteration"] = np.array([[float(i)]])
            save_tensors(paths.advtrain, tensors, digest)

        try:
            history, _ = adversarial_train(gen_params, dims, disc, splits.train,
                                           splits.test, sched, root.child("adv"),
                                           rollout_params=rollout_params,
                                           g_opt=g_opt, d_opt=d_opt,
                                           start_iteration=start,
                                           threads=cfg["run.threads"],
                                           on_iteration=on_iteration)
        finally:
            metrics_fh.close()
        save_generator(paths.gen_adv, gen_params, dims, digest)
    last = history[-1] if history else {"nll_test": float("nan")}
    print(f"adversarial training done at iteration {sched.iterations - 1}; "
          f"test NLL {last['nll_test']:.4f}")
    return EXIT_OK


def _pick_generator(paths: RunPaths, args, digest: bytes
                    ) -> tuple[ParamStore, GeneratorDims, str]:
    if args.ckpt:
        path = args.ckpt
    elif os.path.exists(paths.gen_adv):
        path = paths.gen_adv
    else:
        path = _require(paths.gen_pretrain, "advseq pretrain-g")
    params, dims = load_generator(path, digest)
    return params, dims, path


def cmd_sample(args) -> int:
    paths = RunPaths(resolve_run_dir(args))
    cfg = resolve_config(args, paths)
    grammar, vocab, _ = load_run_data(paths, cfg)
    digest = run_digest(cfg, vocab, grammar)
    params, dims, path = _pick_generator(paths, args, digest)
    n_labels = dims.n_labels
    if args.label is not None and not 0 <= args.label < n_labels:
        raise CliError(f"--label must lie in [0, {n_labels}), got {args.label}")
    if args.label is None:
        labels = np.arange(args.n, dtype=np.int64) % n_labels
    else:
        labels = np.full(args.n, args.label, dtype=np.int64)
    root = RngStream(cfg["run.seed"])
    tokens = sample_batch(params, dims, labels, cfg["corpus.seq_len"],
                          root.child("cli_sample"))
    lines = []
    for i in range(args.n):
        text = " ".join(decode_sequence(tokens[i], vocab, strip_pad=False))
        lines.append(f"{int(labels[i])}\t{text}")
    out = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out)
        print(f"wrote {args.n} samples from {path} to {args.out}")
    else:
        sys.stdout.write(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    paths = RunPaths(resolve_run_dir(args))
    cfg = resolve_config(args, paths)
    grammar, vocab, splits = load_run_data(paths, cfg)
    digest = run_digest(cfg, vocab, grammar)
    params, dims, ckpt_path = _pick_generator(paths, args, digest)
    root = RngStream(cfg["run.seed"]).child("eval")
    settings = cfg.eval_settings()
    tiers = ("micro", "macro", "application") if args.tier == "all" else (args.tier,)
    metrics: dict[str, float] = {}
    skipped: dict[str, str] = {}
    with RunLock(paths):
        if "micro" in tiers:
            try:
                metrics.update(micro_metrics(params, dims, splits.test,
                                             root.child("micro"),
                                             n_samples=cfg["eval.n_samples"]))
                try:
                    exact = grammar.conditional_entropy()
                    metrics["exact_entropy"] = exact
                    metrics["nll_gap"] = metrics["nll_test"] - exact
                except GrammarError:
                    pass
            except DataError as e:
                skipped["micro"] = str(e)
        if "macro" in tiers:
            try:
                metrics.update(macro_metrics(params, dims, splits.test,
                                             root.child("macro"), settings,
                                             len(vocab), n_seeds=cfg["eval.seeds"]))
            except DataError as e:
                skipped["macro"] = str(e)
        if "application" in tiers:
            try:
                metrics.update(application_metrics(params, dims, splits.train,
                                                   splits.test, root.child("app"),
                                                   settings, len(vocab),
                                                   n_seeds=cfg["eval.seeds"]))
            except DataError as e:
                skipped["application"] = str(e)
        report = MetricsReport(os.path.basename(os.path.abspath(paths.run_dir)),
                               cfg["run.seed"], metrics, skipped)
        with open(paths.metrics_csv, "w", encoding="utf-8") as fh:
            fh.write(report.csv_text())
        with open(paths.metrics_txt, "w", encoding="utf-8") as fh:
            fh.write(report.text())
    print(f"evaluated {ckpt_path}")
    sys.stdout.write(report.text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--run-dir", help="run directory (default: $ADVSEQ_RUN_DIR or ./run)")
    sub.add_argument("--config", help="config file overriding the pinned run config")
    sub.add_argument("--preset", default="desk", choices=("desk", "full"),
                     help="baseline defaults before file/--set overrides")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    sub.add_argument("--threads", type=int,
                     help="worker threads for rollout scoring; never changes results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advseq",
        description="Conditional adversarial sequence generation with "
                    "rollout rewards, plus its evaluation suite.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("corpus-gen", help="generate corpus, vocab, and splits")
    _add_common(p)
    p.set_defaults(fn=cmd_corpus_gen)

    p = subs.add_parser("pretrain-g", help="maximum-likelihood generator pretraining")
    _add_common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the saved pretraining checkpoint")
    p.set_defaults(fn=cmd_pretrain_g)

    p = subs.add_parser("pretrain-d", help="discriminator pretraining")
    _add_common(p)
    p.add_argument("--kind", choices=KINDS, help="override disc.kind")
    p.add_argument("--resume", action="store_true",
                   help="continue from the saved pretraining checkpoint")
    p.set_defaults(fn=cmd_pretrain_d)

    p = subs.add_parser("advtrain", help="adversarial training")
    _add_common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest adversarial checkpoint")
    p.set_defaults(fn=cmd_advtrain)

    p = subs.add_parser("sample", help="print generated sequences")
    _add_common(p)
    p.add_argument("--n", type=int, default=10, help="number of sequences")
    p.add_argument("--label", type=int, help="condition label (default: alternate)")
    p.add_argument("--ckpt", help="generator checkpoint (default: adversarial, "
                                  "then pretrained)")
    p.add_argument("--out", help="write samples here instead of stdout")
    p.set_defaults(fn=cmd_sample)

    p = subs.add_parser("eval", help="run the evaluation tiers")
    _add_common(p)
    p.add_argument("--tier", default="all",
                   choices=("all", "micro", "macro", "application"))
    p.add_argument("--ckpt", help="generator checkpoint (default: adversarial, "
                                  "then pretrained)")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, GrammarError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, ShapeError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
