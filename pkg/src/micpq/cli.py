"""Command-line entry point: synth, train, index, search, eval.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.  Flags
take precedence over an optional ``--config`` file of ``key=value``
lines (keys are the flag names, dashes and underscores interchangeable).
Human-readable output goes to stdout, diagnostics to stderr, and
machine-readable artifacts only to files.

Heavy imports happen after argument parsing so that ``--threads`` can
cap the numeric libraries' thread pools via the environment.
"""
from __future__ import annotations

import argparse
import os
import sys

_TRUE_STRINGS = {"1", "true", "yes", "on"}

# dests whose flag spelling differs from the dest name
_FLAG_NAMES = {"mi_weight": "--lambda"}
_CONFIG_ALIASES = {"lambda": "mi_weight"}

_SHARED_OPTS = {
    "seed": (int, 0, "root random seed"),
    "threads": (int, None, "cap worker threads (default: available parallelism)"),
    "config": (str, None, "key=value defaults file; flags take precedence"),
}

# dest -> (converter, default, help); required options have default REQUIRED
_REQUIRED = object()

_COMMAND_OPTS = {
    "synth": {
        "n": (int, _REQUIRED, "number of documents"),
        "dim": (int, _REQUIRED, "embedding width"),
        "classes": (int, _REQUIRED, "number of mixture components"),
        "sep": (float, 10.0, "inter-center distance scale"),
        "sigma": (float, 1.0, "within-class noise standard deviation"),
        "out": (str, _REQUIRED, "output directory for data.emb / data.lbl"),
    },
    "train": {
        "emb": (str, _REQUIRED, "embedding file to train on"),
        "M": (int, _REQUIRED, "number of codebooks"),
        "K": (int, 16, "codewords per codebook"),
        "sub_dim": (int, 24, "codeword width"),
        "lr": (float, 0.001, "Adam learning rate"),
        "batch_size": (int, 256, "mini-batch size"),
        "epochs": (int, 100, "training epochs"),
        "mi_weight": (float, 0.1, "weight of the mutual-information term"),
        "alpha": (float, 0.1, "conditional-entropy trade-off"),
        "tau_cl": (float, 0.3, "contrastive temperature"),
        "tau_gumbel": (float, None, "Gumbel-softmax temperature (default: 10 for 16-bit codes, else 5)"),
        "p_drop": (float, 0.3, "dropout rate for the two views"),
        "out": (str, _REQUIRED, "checkpoint output path"),
        "log": (str, None, "write per-epoch records to this file"),
        "split": (str, "train", "train on this split: train or all"),
        "split_ratios": (str, "0.8,0.1,0.1", "train,val,test fractions"),
        "split_seed": (int, 0, "seed of the deterministic split"),
        "checkpoint_every": (int, 0, "also checkpoint every N epochs"),
    },
    "index": {
        "ckpt": (str, _REQUIRED, "model checkpoint"),
        "emb": (str, _REQUIRED, "corpus embedding file"),
        "out": (str, _REQUIRED, "index output path"),
        "split": (str, "train", "index this split: train or all"),
        "split_ratios": (str, "0.8,0.1,0.1", "train,val,test fractions"),
        "split_seed": (int, 0, "seed of the deterministic split"),
    },
    "search": {
        "index": (str, _REQUIRED, "index file"),
        "ckpt": (str, _REQUIRED, "model checkpoint"),
        "queries": (str, _REQUIRED, "query embedding file"),
        "k": (int, 10, "results per query"),
        "mode": (str, "adc", "distance mode: adc or hamming"),
    },
    "eval": {
        "ckpt": (str, _REQUIRED, "model checkpoint"),
        "emb": (str, _REQUIRED, "corpus embedding file"),
        "labels": (str, _REQUIRED, "corpus label file"),
        "k": (int, 100, "retrieval depth for precision"),
        "mode": (str, "adc", "distance mode: adc or hamming"),
        "index": (str, None, "search a prebuilt index instead of encoding the train split"),
        "clustering": (bool, False, "also report per-codebook clustering accuracy"),
        "report": (str, None, "write the report to this file"),
        "split_ratios": (str, "0.8,0.1,0.1", "train,val,test fractions"),
        "split_seed": (int, 0, "seed of the deterministic split"),
        "kmeans_seed": (int, 0, "seed of the K-means baseline"),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="micpq",
        description="Train a contrastive product quantizer, compile compact "
        "codes and run top-k retrieval over them.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, opts in _COMMAND_OPTS.items():
        sub = subparsers.add_parser(command)
        for dest, (conv, default, help_text) in {**opts, **_SHARED_OPTS}.items():
            flag = _FLAG_NAMES.get(dest, "--" + dest.replace("_", "-"))
            if conv is bool:
                sub.add_argument(flag, dest=dest, action="store_const", const=True,
                                 default=None, help=help_text)
            else:
                # defaults are resolved after the config file is merged in
                sub.add_argument(flag, dest=dest, type=conv, default=None, help=help_text)
    return parser


def _read_config(path) -> dict[str, str]:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


def _resolve_options(parser, args) -> None:
    """Fill unset options from the config file, then from the defaults."""
    opts = {**_COMMAND_OPTS[args.command], **_SHARED_OPTS}
    if args.config:
        try:
            config = _read_config(args.config)
        except OSError as err:
            parser.error(f"cannot read config file: {err}")
            return
        except ValueError as err:
            parser.error(str(err))
            return
        for key, raw in config.items():
            key = _CONFIG_ALIASES.get(key, key)
            if key == "config":
                parser.error("config files cannot set --config")
            if key not in opts:
                parser.error(f"unknown config key {key!r} for command {args.command!r}")
            if getattr(args, key) is None:  # a flag on the command line wins
                conv = opts[key][0]
                try:
                    value = raw.lower() in _TRUE_STRINGS if conv is bool else conv(raw)
                except ValueError:
                    parser.error(f"config key {key!r}: cannot parse {raw!r}")
                    return
                setattr(args, key, value)
    for dest, (conv, default, _) in opts.items():
        if getattr(args, dest) is None:
            if default is _REQUIRED:
                parser.error(f"the following argument is required: --{dest.replace('_', '-')}")
            setattr(args, dest, default)
    if getattr(args, "mode", "adc") not in ("adc", "hamming"):
        parser.error(f"--mode must be adc or hamming, got {args.mode!r}")
    if getattr(args, "split", "train") not in ("train", "all"):
        parser.error(f"--split must be train or all, got {args.split!r}")


def _parse_ratios(parser, text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        parser.error(f"--split-ratios needs three comma-separated fractions, got {text!r}")
    try:
        ratios = tuple(float(p) for p in parts)
    except ValueError:
        parser.error(f"--split-ratios: cannot parse {text!r}")
        raise
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        parser.error(f"--split-ratios must be nonnegative and sum to 1, got {text!r}")
    return ratios


def _set_thread_env(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise ValueError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _split_rows(n_docs: int, which: str, ratios, split_seed: int):
    import numpy as np

    from .evaluation import split_indices

    if which == "all":
        return np.arange(n_docs)
    train_idx, _, _ = split_indices(n_docs, ratios, split_seed)
    return np.sort(train_idx)


def _cmd_synth(args) -> int:
    from . import dataio

    spec = dataio.MixtureSpec(
        n_docs=args.n,
        dim=args.dim,
        n_classes=args.classes,
        separation=args.sep,
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    embeddings, labels = dataio.synth_mixture(spec)
    os.makedirs(args.out, exist_ok=True)
    emb_path, lbl_path = dataio.default_paths(args.out)
    dataio.write_embeddings(embeddings, emb_path)
    dataio.write_labels(labels, lbl_path)
    print(f"wrote {embeddings.n_docs} x {embeddings.dim} embeddings to {emb_path}")
    print(f"wrote {labels.n_docs} labels ({labels.n_classes} classes) to {lbl_path}")
    return 0


def _banner(n_codebooks: int, n_codewords: int, sub_dim: int) -> str:
    if n_codewords >= 2 and n_codewords & (n_codewords - 1) == 0:
        bits = n_codebooks * (n_codewords.bit_length() - 1)
        return f"micpq train: {bits}-bit codes (M={n_codebooks}, K={n_codewords}, sub_dim={sub_dim})"
    return (
        f"micpq train: {n_codebooks} sub-indices per doc "
        f"(M={n_codebooks}, K={n_codewords} not a power of two, sub_dim={sub_dim})"
    )


def _cmd_train(args, parser) -> int:
    from . import dataio, trainer
    from .dataio import EmbeddingMatrix
    from .objectives import LossConfig

    data = dataio.read_embeddings(args.emb)
    ratios = _parse_ratios(parser, args.split_ratios)
    rows = _split_rows(data.n_docs, args.split, ratios, args.split_seed)
    tau_gumbel = args.tau_gumbel
    if tau_gumbel is None:
        tau_gumbel = trainer.default_gumbel_temperature(args.M, args.K)
    cfg = trainer.TrainConfig(
        n_codebooks=args.M,
        n_codewords=args.K,
        sub_dim=args.sub_dim,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        n_epochs=args.epochs,
        seed=args.seed,
        loss=LossConfig(
            tau_cl=args.tau_cl,
            tau_gumbel=tau_gumbel,
            alpha=args.alpha,
            mi_weight=args.mi_weight,
            p_drop=args.p_drop,
        ),
        checkpoint_path=args.out,
        checkpoint_every=args.checkpoint_every,
    )
    print(_banner(args.M, args.K, args.sub_dim))
    print(
        f"config: lr={args.lr} batch_size={args.batch_size} epochs={args.epochs} "
        f"lambda={args.mi_weight} alpha={args.alpha} tau_cl={args.tau_cl} "
        f"tau_gumbel={tau_gumbel} p_drop={args.p_drop} seed={args.seed}"
    )
    print(f"training on {len(rows)} of {data.n_docs} documents (split={args.split})")
    _, log = trainer.train(
        cfg,
        EmbeddingMatrix(data.values[rows]),
        on_epoch=lambda record: print(record.format_line(), flush=True),
    )
    if args.log:
        log.write(args.log)
    print(f"checkpoint written to {args.out}", file=sys.stderr)
    return 0


def _cmd_index(args, parser) -> int:
    import numpy as np

    from . import dataio, retrieval, trainer
    from .dataio import EmbeddingMatrix

    model = trainer.load_checkpoint(args.ckpt)
    data = dataio.read_embeddings(args.emb)
    ratios = _parse_ratios(parser, args.split_ratios)
    rows = _split_rows(data.n_docs, args.split, ratios, args.split_seed)
    index = retrieval.build_index(
        model, EmbeddingMatrix(data.values[rows]), ids=rows.astype(np.uint64)
    )
    retrieval.save_index(index, args.out)
    print(
        f"indexed {index.n_docs} documents "
        f"({index.payload_nbytes} code payload bytes) to {args.out}"
    )
    return 0


def _check_hamming_mode(mode: str, n_codewords: int) -> None:
    from .errors import KNot2Error

    if mode == "hamming" and n_codewords != 2:
        raise KNot2Error("hamming mode requires K=2")


def _cmd_search(args) -> int:
    from . import dataio, retrieval, trainer

    index = retrieval.load_index(args.index)
    model = trainer.load_checkpoint(args.ckpt)
    queries = dataio.read_embeddings(args.queries)
    _check_hamming_mode(args.mode, index.books.n_codewords)
    search = retrieval.search_topk_hamming if args.mode == "hamming" else retrieval.search_topk
    for qi in range(queries.n_docs):
        for rank, (doc_id, dist) in enumerate(
            search(index, queries.values[qi], model, args.k), start=1
        ):
            shown = f"{int(dist)}" if args.mode == "hamming" else f"{dist:.6f}"
            print(f"{qi}\t{rank}\t{doc_id}\t{shown}")
    return 0


def _cmd_eval(args, parser) -> int:
    from . import dataio, evaluation, retrieval, trainer
    from .errors import ConfigMismatchError

    model = trainer.load_checkpoint(args.ckpt)
    data = dataio.read_embeddings(args.emb)
    labels = dataio.read_labels(args.labels, expected_n_docs=data.n_docs)
    _check_hamming_mode(args.mode, model.books.n_codewords)
    ratios = _parse_ratios(parser, args.split_ratios)
    index = None
    if args.index:
        index = retrieval.load_index(args.index)
        if index.books.books.shape != model.books.books.shape:
            raise ConfigMismatchError(
                f"index codebooks {index.books.books.shape} do not match "
                f"checkpoint codebooks {model.books.books.shape}"
            )
    report = evaluation.retrieval_eval(
        model,
        data,
        labels,
        k=args.k,
        mode=args.mode,
        ratios=ratios,
        split_seed=args.split_seed,
        index=index,
    )
    if args.clustering:
        report.clustering = evaluation.evaluate_codeword_quality(
            model, data, labels, kmeans_seed=args.kmeans_seed
        )
    for line in report.format_lines():
        print(line)
    print(f"evaluated in {report.elapsed_seconds:.2f}s", file=sys.stderr)
    if args.report:
        report.write(args.report)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _resolve_options(parser, args)
    try:
        _set_thread_env(args.threads)
    except ValueError as err:
        parser.error(str(err))
    from .errors import MicpqError

    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "train":
            return _cmd_train(args, parser)
        if args.command == "index":
            return _cmd_index(args, parser)
        if args.command == "search":
            return _cmd_search(args)
        if args.command == "eval":
            return _cmd_eval(args, parser)
        raise AssertionError(f"unreachable command {args.command!r}")
    except (MicpqError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
