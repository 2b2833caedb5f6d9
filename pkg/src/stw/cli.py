"""Command-line entry point.

Subcommands: synth, train, eval, bench, build-quadtree, build-tsw,
harden, validate. Parameter resolution order is config file over explicit
flags over built-in defaults, and every run emits its fully resolved
configuration alongside its outputs. Exit codes: 0 success, 1 usage
error, 2 data error, 3 internal error.

Heavy numerical imports happen inside commands so that ``--threads`` can
cap the BLAS thread pools before they load.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import STWError, UsageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

PROVIDERS = ("stw", "stw-soft", "quadtree", "flowtree", "tsw", "oracle")

_DEFAULTS = {
    "synth": {
        "train": 100, "test": 100, "seed": 0, "out": None,
    },
    "train": {
        "corpus": None, "splits": None, "out": None,
        "margin": 7.5, "select_margin": False, "margin_grid": "0.1,0.5,1,5",
        "learning_rate": 0.1, "batch_size": 100, "epochs": 30,
        "mass_scale": 5.0, "alpha": 20.0, "kary": 5, "depth": 5,
        "validation_fraction": 0.2, "seed": 0,
    },
    "eval": {
        "corpus": None, "splits": None, "provider": None, "out": None,
        "checkpoint": None, "tree": None, "tree_set": None,
        "embeddings": None, "k": None, "k_grid": "1,3,5,7,9,11,13,15,17,19",
        "n_trees": 10, "sample_depth": 6, "branching": 5, "seed": 0,
    },
    "bench": {
        "corpus": None, "provider": None, "out": None,
        "checkpoint": None, "tree": None, "tree_set": None,
        "embeddings": None, "query_count": 500, "batch_sizes": "1",
        "queries": 100, "seed": 0, "csv": False,
        "n_trees": 10, "sample_depth": 6, "branching": 5,
    },
    "build-quadtree": {
        "corpus": None, "embeddings": None, "seed": 0, "out": None,
    },
    "build-tsw": {
        "corpus": None, "embeddings": None, "n_trees": 10,
        "sample_depth": 6, "branching": 5, "seed": 0, "out": None,
    },
    "harden": {
        "checkpoint": None, "out": None,
    },
    "validate": {
        "corpus": None, "splits": None,
    },
}

_REQUIRED = {
    "synth": ("out",),
    "train": ("corpus", "out"),
    "eval": ("corpus", "provider", "out"),
    "bench": ("corpus", "provider", "out"),
    "build-quadtree": ("corpus", "embeddings", "out"),
    "build-tsw": ("corpus", "embeddings", "out"),
    "harden": ("checkpoint", "out"),
    "validate": ("corpus",),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_options(parser, command):
    for key, default in _DEFAULTS[command].items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, dest=key, action="store_true", default=None,
                                help=f"(default: {default})")
        elif isinstance(default, int) and default is not None:
            parser.add_argument(flag, dest=key, type=int, default=None,
                                help=f"(default: {default})")
        elif isinstance(default, float):
            parser.add_argument(flag, dest=key, type=float, default=None,
                                help=f"(default: {default})")
        elif key == "provider":
            parser.add_argument(flag, dest=key, choices=PROVIDERS, default=None,
                                help="distance provider")
        elif key == "k":
            parser.add_argument(flag, dest=key, type=int, default=None,
                                help="fixed k (default: selected on the valid split)")
        else:
            parser.add_argument(flag, dest=key, default=None,
                                help=f"(default: {default})")


def build_parser() -> _Parser:
    parser = _Parser(prog="stw", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=None,
                        help="JSON file whose entries override flags")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP thread pools")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    descriptions = {
        "synth": "generate the synthetic instrument corpus",
        "train": "learn a tree metric from a labeled corpus",
        "eval": "kNN-classify the test split under a distance provider",
        "bench": "time batched distance computation",
        "build-quadtree": "build a quadtree over word embeddings",
        "build-tsw": "sample tree metrics by farthest-point clustering",
        "harden": "extract the discrete tree from a checkpoint",
        "validate": "report corpus invariant violations",
    }
    for command in _DEFAULTS:
        p = sub.add_parser(command, help=descriptions[command],
                           description=descriptions[command])
        _add_options(p, command)
    return parser


def _resolve(args, command) -> dict:
    config = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}")
        unknown = set(config) - set(_DEFAULTS[command])
        if unknown:
            raise UsageError(
                f"config keys not recognized for {command}: {sorted(unknown)}")
    resolved = {}
    for key, default in _DEFAULTS[command].items():
        if key in config:
            resolved[key] = config[key]
        else:
            flag = getattr(args, key, None)
            resolved[key] = default if flag is None else flag
    for key in _REQUIRED[command]:
        if resolved[key] is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")
    return resolved


def _float_list(text, name) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated number list")
    if not values:
        raise UsageError(f"{name} is empty")
    return values


def _int_list(text, name) -> tuple[int, ...]:
    return tuple(int(v) for v in _float_list(text, name))


def _emit_config(resolved, command, directory=None, path=None):
    payload = dict(resolved)
    payload["command"] = command
    if directory is not None:
        target = os.path.join(directory, "resolved_config.json")
    else:
        target = str(path) + ".config.json"
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_corpus(resolved):
    from .data_io import load_corpus
    return load_corpus(resolved["corpus"], splits_path=resolved.get("splits"))


def _require_valid(corpus):
    from .measures import validate_corpus
    problems = validate_corpus(corpus)
    if problems:
        for line in problems:
            print(f"invalid corpus: {line}", file=sys.stderr)
        raise STWError(f"corpus failed validation with {len(problems)} problem(s)")


def _point_cloud(resolved, corpus):
    if not resolved.get("embeddings"):
        raise UsageError(f"--embeddings is required for provider {resolved['provider']}")
    from .baselines import PointCloud
    from .data_io import load_embeddings
    table = load_embeddings(resolved["embeddings"], corpus.vocabulary)
    return PointCloud(table.vectors)


def _build_provider(resolved, corpus):
    from .baselines import load_treeset, quadtree_build, tsw_sample
    from .evaluation import (FlowtreeProvider, HardTreeProvider,
                             OracleProvider, SoftTreeProvider, TSWProvider)
    from .stw_train import harden, load_checkpoint
    from .tree import load_tree
    provider = resolved["provider"]
    if provider in ("stw", "stw-soft"):
        if not resolved.get("checkpoint"):
            raise UsageError(f"--checkpoint is required for provider {provider}")
        model, _ = load_checkpoint(resolved["checkpoint"], corpus.vocabulary)
        if provider == "stw":
            return HardTreeProvider(harden(model), "stw")
        return SoftTreeProvider(model)
    if provider == "quadtree":
        if resolved.get("tree"):
            tree = load_tree(resolved["tree"], corpus.vocabulary)
        else:
            tree = quadtree_build(_point_cloud(resolved, corpus), resolved["seed"])
        return HardTreeProvider(tree, "quadtree")
    if provider == "flowtree":
        cloud = _point_cloud(resolved, corpus)
        if resolved.get("tree"):
            tree = load_tree(resolved["tree"], corpus.vocabulary)
        else:
            tree = quadtree_build(cloud, resolved["seed"])
        return FlowtreeProvider(cloud, tree)
    if provider == "tsw":
        if resolved.get("tree_set"):
            sampled = load_treeset(resolved["tree_set"], corpus.vocabulary)
        else:
            sampled = tsw_sample(_point_cloud(resolved, corpus),
                                 resolved["n_trees"], resolved["sample_depth"],
                                 resolved["branching"], resolved["seed"])
        return TSWProvider(sampled)
    if provider == "oracle":
        import numpy as np
        pts = _point_cloud(resolved, corpus).points
        diff = pts[:, None, :] - pts[None, :, :]
        return OracleProvider(np.sqrt((diff ** 2).sum(axis=-1)))
    raise UsageError(f"unknown provider {provider!r}; choose from {', '.join(PROVIDERS)}")


def cmd_synth(resolved) -> int:
    from .data_io import save_corpus, save_splits, synthetic_instruments
    if resolved["train"] <= 0 or resolved["test"] <= 0:
        raise UsageError("--train and --test must be positive")
    os.makedirs(resolved["out"], exist_ok=True)
    corpus = synthetic_instruments(resolved["train"], resolved["test"],
                                   resolved["seed"])
    corpus_path = os.path.join(resolved["out"], "corpus.jsonl")
    splits_path = os.path.join(resolved["out"], "splits.txt")
    save_corpus(corpus, corpus_path)
    save_splits(corpus.split, splits_path)
    _emit_config(resolved, "synth", directory=resolved["out"])
    print(f"wrote {corpus_path} ({len(corpus.documents)} documents)")
    print(f"wrote {splits_path}")
    return EXIT_OK


def cmd_train(resolved) -> int:
    from dataclasses import replace
    from .stw_train import TrainConfig, save_checkpoint, select_margin, train
    corpus = _load_corpus(resolved)
    _require_valid(corpus)
    try:
        cfg = TrainConfig(
            margin=resolved["margin"],
            learning_rate=resolved["learning_rate"],
            batch_size=resolved["batch_size"],
            epochs=resolved["epochs"],
            mass_scale=resolved["mass_scale"],
            alpha=resolved["alpha"],
            seed=resolved["seed"],
            validation_fraction=resolved["validation_fraction"],
            margin_grid=_float_list(resolved["margin_grid"], "--margin-grid"),
            kary=resolved["kary"],
            depth=resolved["depth"],
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    if resolved["select_margin"]:
        chosen = select_margin(corpus, cfg)
        print(f"selected margin {chosen} from grid {cfg.margin_grid}")
        cfg = replace(cfg, margin=chosen)
    result = train(corpus, cfg)
    os.makedirs(resolved["out"], exist_ok=True)
    checkpoint_path = os.path.join(resolved["out"], "checkpoint.json")
    log_path = os.path.join(resolved["out"], "training_log.jsonl")
    save_checkpoint(checkpoint_path, result, corpus.vocabulary)
    with open(log_path, "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record.__dict__))
            fh.write("\n")
    _emit_config(resolved, "train", directory=resolved["out"])
    last = result.log[-1]
    print(f"wrote {checkpoint_path}")
    print(f"best epoch {result.best_epoch} "
          f"(valid loss {result.log[result.best_epoch - 1].valid_loss:.6f}); "
          f"final epoch valid loss {last.valid_loss:.6f}")
    return EXIT_OK


def cmd_eval(resolved) -> int:
    from .evaluation import evaluate
    corpus = _load_corpus(resolved)
    _require_valid(corpus)
    provider = _build_provider(resolved, corpus)
    k_grid = _int_list(resolved["k_grid"], "--k-grid")
    report = evaluate(provider, corpus, k=resolved["k"], k_grid=k_grid,
                      config=resolved)
    os.makedirs(resolved["out"], exist_ok=True)
    report_path = os.path.join(resolved["out"], "eval_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    _emit_config(resolved, "eval", directory=resolved["out"])
    print(report.as_text())
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_bench(resolved) -> int:
    from .evaluation import bench_batch, bench_csv
    corpus = _load_corpus(resolved)
    provider = _build_provider(resolved, corpus)
    batch_sizes = _int_list(resolved["batch_sizes"], "--batch-sizes")
    os.makedirs(resolved["out"], exist_ok=True)
    report_path = os.path.join(resolved["out"], "bench_report.jsonl")
    with open(report_path, "w", encoding="utf-8") as fh:
        for bs in batch_sizes:
            report = bench_batch(provider, corpus,
                                 query_count=resolved["query_count"],
                                 batch_size=bs, n_queries=resolved["queries"],
                                 seed=resolved["seed"], config=resolved)
            print(report.as_text())
            fh.write(json.dumps({k: v for k, v in report.__dict__.items()
                                 if k != "per_query_s"}))
            fh.write("\n")
            if resolved["csv"]:
                csv_path = os.path.join(resolved["out"],
                                        f"bench_batch{bs}_timings.csv")
                with open(csv_path, "w", encoding="utf-8") as cf:
                    cf.write(bench_csv(report))
    _emit_config(resolved, "bench", directory=resolved["out"])
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_build_quadtree(resolved) -> int:
    from .baselines import quadtree_build
    from .tree import save_tree
    corpus = _load_corpus({"corpus": resolved["corpus"], "splits": None})
    resolved_with_provider = dict(resolved, provider="quadtree")
    cloud = _point_cloud(resolved_with_provider, corpus)
    tree = quadtree_build(cloud, resolved["seed"])
    save_tree(tree, resolved["out"], corpus.vocabulary,
              builder={"kind": "quadtree", "seed": resolved["seed"]})
    _emit_config(resolved, "build-quadtree", path=resolved["out"])
    print(f"wrote {resolved['out']} "
          f"({tree.n_internal} internal nodes, depth {tree.depth})")
    return EXIT_OK


def cmd_build_tsw(resolved) -> int:
    from .baselines import save_treeset, tsw_sample
    corpus = _load_corpus({"corpus": resolved["corpus"], "splits": None})
    resolved_with_provider = dict(resolved, provider="tsw")
    cloud = _point_cloud(resolved_with_provider, corpus)
    sampled = tsw_sample(cloud, resolved["n_trees"], resolved["sample_depth"],
                         resolved["branching"], resolved["seed"])
    save_treeset(sampled, resolved["out"], corpus.vocabulary,
                 builder={"kind": "tsw", "seed": resolved["seed"]})
    _emit_config(resolved, "build-tsw", path=resolved["out"])
    print(f"wrote {resolved['out']} ({sampled.count} trees)")
    return EXIT_OK


def cmd_harden(resolved) -> int:
    from .stw_train import harden, load_checkpoint
    from .tree import tree_payload
    model, payload = load_checkpoint(resolved["checkpoint"])
    tree = harden(model)
    # the tree inherits the checkpoint's vocabulary hash
    out_payload = tree_payload(tree, payload["vocab_sha256"],
                               builder={"kind": "harden",
                                        "checkpoint": str(resolved["checkpoint"])})
    with open(resolved["out"], "w", encoding="utf-8") as fh:
        json.dump(out_payload, fh)
        fh.write("\n")
    _emit_config(resolved, "harden", path=resolved["out"])
    print(f"wrote {resolved['out']}")
    return EXIT_OK


def cmd_validate(resolved) -> int:
    from .measures import validate_corpus
    corpus = _load_corpus(resolved)
    problems = validate_corpus(corpus)
    print(f"resolved_config: {json.dumps(dict(resolved, command='validate'), sort_keys=True)}")
    if problems:
        for line in problems:
            print(line)
        print(f"{len(problems)} problem(s) found")
        return EXIT_DATA
    print("corpus is valid")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "build-quadtree": cmd_build_quadtree,
    "build-tsw": cmd_build_tsw,
    "harden": cmd_harden,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ[var] = str(args.threads)
        resolved = _resolve(args, args.command)
        return _COMMANDS[args.command](resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (STWError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - map anything else to exit 3
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
