"""Command-line entry point: ``dsth <command> [options]``.

Every command takes an optional JSON run config (``--config``).  Missing keys
are filled from :data:`DEFAULTS`, unknown keys are rejected, and the resolved
config is written to ``<out>/config.json`` so a run can be repeated from its
output directory alone.  Randomness flows from the top-level ``seed`` through
named per-stage sub-seeds.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .anchors import load_anchor_model, save_anchor_model
from .data import (
    FormatError,
    read_labels,
    read_matrix,
    split_dataset,
    synthesize_dataset,
    write_labels,
    write_matrix,
)
from .evaluation import LabelRelevance, evaluate
from .hashing import load_hash_model, save_hash_model
from .linalg import NumericalError
from .optimizer import ConfigError, DsthConfig, Variant
from .pipeline import AnchorParams, build_anchors, build_index, index_words, sub_seed, train
from .retrieval import PackedCodeIndex, load_index, save_index, search_topk

log = logging.getLogger("dsth")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "variant": "full",
    "dsth": {
        "code_length": 16,
        "alpha": 1e-4,
        "beta": 1e2,
        "mu0": 1e-2,
        "rho": 2.0,
        "mu_max": 1e6,
        "max_iter": 50,
        "rel_tol": 1e-4,
    },
    "anchors": {"k": 300, "s": 5, "sigma": None, "max_iter": 100},
    "eta": 100.0,
    "synth": {
        "n_classes": 3,
        "per_class": 50,
        "d_x": 32,
        "d_y": 16,
        "noise": 0.1,
        "text_noise": None,
        "cross_modal_consistency": 1.0,
    },
    "split": {"n_query": 15, "n_train": 100, "queries_in_database": False},
    "eval": {"R": 100, "scopes": [], "exclude_query_from_db": False},
    "paths": {"visual": None, "text": None, "labels": None, "out_dir": None},
}

# keys whose default is None but which take a value of this type
_NULLABLE = {("anchors", "sigma"): float, ("synth", "text_noise"): float}
for _k in DEFAULTS["paths"]:
    _NULLABLE[("paths", _k)] = str


class DataError(Exception):
    """Input files are missing or malformed."""


def _check_type(path: tuple, value, default):
    where = ".".join(path)
    if default is None:
        want = _NULLABLE[path]
        if value is None:
            return None
        if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, want):
            return value
        raise ConfigError(f"{where}: expected {want.__name__} or null, got {type(value).__name__}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported value")


def _merge(defaults: dict, given: dict, path: tuple = ()) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'}: expected an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        where = ".".join(path) or "top level"
        raise ConfigError(f"unknown config key(s) at {where}: {', '.join(unknown)}")
    out = {}
    for key, default in defaults.items():
        sub = path + (key,)
        if isinstance(default, dict):
            out[key] = _merge(default, given.get(key, {}), sub)
        elif key in given:
            out[key] = _check_type(sub, given[key], default)
        else:
            out[key] = copy.deepcopy(default)
    return out


def resolve_config(raw: dict | None = None, overrides: dict | None = None) -> dict:
    """Fill defaults, reject unknown keys, apply command-line overrides."""
    cfg = _merge(DEFAULTS, raw or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "bits":
            cfg["dsth"]["code_length"] = value
        elif key == "out":
            cfg["paths"]["out_dir"] = value
        else:
            cfg[key] = value
    try:
        Variant(cfg["variant"])
    except ValueError:
        names = ", ".join(v.value for v in Variant)
        raise ConfigError(f"unknown variant {cfg['variant']!r}; expected one of {names}") from None
    if not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    dsth_config(cfg)
    return cfg


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def dsth_config(cfg: dict) -> DsthConfig:
    return DsthConfig(**cfg["dsth"], variant=cfg["variant"], seed=cfg["seed"])


def anchor_params(cfg: dict) -> AnchorParams:
    return AnchorParams(**cfg["anchors"])


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: dict) -> Path:
    out = cfg["paths"]["out_dir"]
    if out is None:
        raise ConfigError("no output directory: pass --out or set paths.out_dir")
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need_path(cfg: dict, key: str) -> Path:
    p = cfg["paths"][key]
    if p is None:
        raise ConfigError(f"paths.{key} is required for this command")
    return Path(p)


def _read(reader, path: Path):
    try:
        return reader(path)
    except FileNotFoundError:
        raise DataError(f"missing input file {path}") from None
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_dataset(cfg: dict):
    visual = _read(read_matrix, _need_path(cfg, "visual"))
    text = _read(read_matrix, _need_path(cfg, "text"))
    labels = _read(read_labels, _need_path(cfg, "labels"))
    if not visual.shape[1] == text.shape[1] == len(labels):
        raise DataError(
            f"sample counts disagree: visual {visual.shape[1]}, text {text.shape[1]}, labels {len(labels)}"
        )
    return visual, text, labels


def _split(cfg: dict, n: int):
    """``(database_ids, query_ids, training_ids)`` for the configured split."""
    sp = cfg["split"]
    seed = sub_seed(cfg["seed"], "split")
    try:
        if sp["queries_in_database"]:
            if not 1 <= sp["n_query"] <= n or not 1 <= sp["n_train"] <= n:
                raise ValueError(f"n_query and n_train must lie in [1, N={n}]")
            rng = np.random.default_rng(seed)
            query = np.sort(rng.choice(n, size=sp["n_query"], replace=False))
            train_ids = np.sort(rng.choice(n, size=sp["n_train"], replace=False))
            return np.arange(n), query, train_ids
        s = split_dataset(n, sp["n_query"], sp["n_train"], seed)
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from None
    return s.database_ids, s.query_ids, s.training_ids


class _Stage:
    """Logs the wall-clock of a pipeline stage and tags errors with its name."""

    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        self.timings[self.name] = elapsed
        if exc is None:
            log.info("stage %s: %.3fs", self.name, elapsed)
        elif not getattr(exc, "stage", None):
            try:
                exc.stage = self.name
            except AttributeError:
                pass
        return False


# --- commands ---------------------------------------------------------------


def cmd_synth(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    s = cfg["synth"]
    try:
        data = synthesize_dataset(
            s["n_classes"], s["per_class"], s["d_x"], s["d_y"], s["noise"],
            s["cross_modal_consistency"], sub_seed(cfg["seed"], "synth"), text_noise=s["text_noise"],
        )
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}") from None
    write_matrix(data.visual, out / "visual.dmat")
    write_matrix(data.text, out / "text.dmat")
    write_labels(data.labels, out / "labels.dlbl")
    _dump_json(cfg, out / "config.json")
    print(f"synth: N={data.n} d_x={data.visual.shape[0]} d_y={data.text.shape[0]} "
          f"classes={s['n_classes']} mismatched={int(data.mismatched.sum())} -> {out}")
    return EXIT_OK


def cmd_anchors(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    visual, _, _ = _load_dataset(cfg)
    _, _, tr = _split(cfg, visual.shape[1])
    timings = {}
    with _Stage("anchors", timings):
        model = build_anchors(visual[:, tr], anchor_params(cfg), cfg["seed"])
    save_anchor_model(model, out / "anchors")
    _dump_json(cfg, out / "config.json")
    print(f"anchors: K={model.k} s={model.s} sigma={model.sigma:.6g} on {model.n} training samples -> {out / 'anchors'}")
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    dcfg = dsth_config(cfg)
    visual, text, _ = _load_dataset(cfg)
    db, query, tr = _split(cfg, visual.shape[1])
    anchor_model = None
    if args.anchors is not None:
        anchor_model = _read(load_anchor_model, Path(args.anchors))
        if anchor_model.n != tr.size:
            raise DataError(f"anchor model covers {anchor_model.n} samples, training split has {tr.size}")
    timings = {}
    with _Stage("train", timings):
        model = train(visual[:, tr], text[:, tr], dcfg, anchor_params(cfg), cfg["eta"], anchor_model)
    timings.update({f"train.{k}": v for k, v in model.timings.items()})
    for stage in ("anchors", "fit", "projection"):
        log.info("stage %s: %.3fs", stage, model.timings[stage])

    res = model.fit_result
    save_hash_model(model.hash_model, out / "model")
    save_anchor_model(model.anchor_model, out / "model" / "anchors")
    save_index(PackedCodeIndex.from_bits(res.codes.T, ids=tr), out / "model" / "codes.didx")
    write_matrix(res.u, out / "model" / "U.dmat")
    write_matrix(res.w, out / "model" / "W.dmat")
    res.trace.to_csv(out / "trace.csv")
    _dump_json({"database": db.tolist(), "query": query.tolist(), "train": tr.tolist()}, out / "split.json")
    meta = {
        "variant": dcfg.variant.value,
        "relaxed_rounding": dcfg.variant is Variant.RELAXED_ROUNDING,
        "code_length": dcfg.code_length,
        "n_train": int(tr.size),
        "iterations": len(res.trace),
        "final_objective": res.trace.objective[-1] if len(res.trace) else res.trace.initial_objective,
    }
    _dump_json(meta, out / "metadata.json")
    _dump_json(cfg, out / "config.json")
    # wall-clock lives in its own file so every other output is reproducible byte for byte
    _dump_json(timings, out / "timings.json")
    print(f"train: variant={meta['variant']} L={dcfg.code_length} N={tr.size} "
          f"iterations={meta['iterations']} in {timings['train']:.2f}s -> {out}")
    return EXIT_OK


def _load_model(path):
    return _read(load_hash_model, Path(path))


def _check_dim(model, matrix: np.ndarray, what: str):
    if matrix.shape[0] != model.dim:
        raise DataError(f"{what} has {matrix.shape[0]} rows but the hash model expects {model.dim}")


def cmd_encode(cfg: dict, args) -> int:
    model = _load_model(args.model)
    matrix = _read(read_matrix, Path(args.matrix))
    _check_dim(model, matrix, args.matrix)
    index = build_index(model, matrix, np.arange(matrix.shape[1]))
    target = Path(args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, target)
    print(f"encode: {index.n} codes of {index.code_length} bits -> {target}")
    return EXIT_OK


def cmd_index(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    model = _load_model(args.model)
    visual, _, _ = _load_dataset(cfg)
    _check_dim(model, visual, "visual matrix")
    db, _, _ = _split(cfg, visual.shape[1])
    index = build_index(model, visual[:, db], db)
    save_index(index, out / "database.didx")
    _dump_json(cfg, out / "config.json")
    print(f"index: {index.n} database codes of {index.code_length} bits -> {out / 'database.didx'}")
    return EXIT_OK


def cmd_search(cfg: dict, args) -> int:
    model = _load_model(args.model)
    index = _read(load_index, Path(args.index))
    if index.code_length != model.code_length:
        raise DataError(f"index holds {index.code_length}-bit codes, model produces {model.code_length}")
    queries = _read(read_matrix, Path(args.queries))
    _check_dim(model, queries, args.queries)
    if not 0 <= args.k <= index.n:
        raise ConfigError(f"k={args.k} outside [0, n={index.n}]")
    words = index_words(model, queries)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query", "rank", "id", "distance"])
        for qi, q in enumerate(words):
            for r, (i, d) in enumerate(search_topk(index, q, args.k)):
                w.writerow([qi, r, i, d])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    model = _load_model(args.model)
    visual, _, labels = _load_dataset(cfg)
    _check_dim(model, visual, "visual matrix")
    db, query, _ = _split(cfg, visual.shape[1])
    if args.index is not None:
        index = _read(load_index, Path(args.index))
    else:
        index = build_index(model, visual[:, db], db)
    if int(index.ids.max()) >= len(labels):
        raise DataError("index ids exceed the label count")
    queries = index_words(model, visual[:, query])
    relevance = LabelRelevance(labels.subset(query), labels)
    ev = cfg["eval"]
    self_ids = query if ev["exclude_query_from_db"] else None
    try:
        report = evaluate(queries, index, relevance, R=ev["R"], scopes=ev["scopes"], config=cfg, self_ids=self_ids)
    except ValueError as exc:
        raise ConfigError(f"eval: {exc}") from None
    report.to_json(out / "eval.json")
    report.to_csv(out / "ap.csv", out / "precision_scope.csv")
    print(f"eval: mAP@{ev['R']}={report.map:.4f} over {len(report.per_query_ap)} queries "
          f"({len(report.excluded_queries)} without relevant items) -> {out}")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic paired dataset"),
    "anchors": (cmd_anchors, "cluster the training split into anchors"),
    "train": (cmd_train, "learn codes, bases and the hash projection"),
    "encode": (cmd_encode, "encode every column of a matrix into a DIDX file"),
    "index": (cmd_index, "encode the database split into a DIDX file"),
    "search": (cmd_search, "top-k Hamming search for query columns"),
    "eval": (cmd_eval, "mAP@R and precision-scope on the query split"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--out", help="output directory (overrides paths.out_dir)")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--variant", choices=[v.value for v in Variant])
    common.add_argument("--bits", type=int, help="code length L")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="dsth", description="Discrete semantic transfer hashing.")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=h) for name, (_, h) in COMMANDS.items()}
    parsers["train"].add_argument("--anchors", help="reuse an anchor model directory")
    for name in ("encode", "index", "search", "eval"):
        parsers[name].add_argument("--model", required=True, help="model directory (holds projection.dmat)")
    parsers["encode"].add_argument("--matrix", required=True, help="DMAT file to encode")
    parsers["search"].add_argument("--index", required=True, help="DIDX file")
    parsers["search"].add_argument("--queries", required=True, help="DMAT file of query columns")
    parsers["search"].add_argument("-k", type=int, default=10)
    parsers["eval"].add_argument("--index", help="DIDX database (built from the split if omitted)")
    return parser


def _classify(exc: Exception) -> tuple[int, str]:
    # ConfigError is a ValueError, so it has to be tested first
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config error"
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL, "numerical failure"
    return EXIT_DATA, "data error"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    # encode and search write to an explicit file, not a directory
    out_override = None if args.command in ("encode", "search") else args.out
    if args.command == "encode" and args.out is None:
        print("error: encode needs --out <file.didx>", file=sys.stderr)
        return EXIT_CONFIG
    handler = COMMANDS[args.command][0]
    try:
        raw = load_config(args.config)
        cfg = resolve_config(
            raw, {"seed": args.seed, "variant": args.variant, "bits": args.bits, "out": out_override}
        )
        return handler(cfg, args)
    except (ConfigError, NumericalError, DataError, FormatError, OSError, ValueError) as exc:
        code, kind = _classify(exc)
        stage = getattr(exc, "stage", None)
        prefix = f"{args.command}/{stage}" if stage else args.command
        print(f"error ({kind}) in {prefix}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
