"""Command-line surface: train, evaluate, predict, export-embeddings, sweep.

Option values resolve with precedence flags > config file > defaults; the
config file holds ``key = value`` lines keyed by flag name.  Exit codes are
0 for success, 1 for usage or data errors, 2 for numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional, Sequence

from . import contrastive as ct
from . import encoder as enc
from . import evaluation as ev
from . import training as tr
from .errors import KgcError, NumericError, ParseError
from .graph import KnowledgeGraph, add_inverse_triples, load_graph
from .randomness import named_stream

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

SWEEP_AXES = ("negatives-count", "loss-kind", "batch-size", "margin")
SWEEP_DEFAULT_POINTS = {
    "negatives-count": "5,15,63",
    "loss-kind": "infonce,margin,margin_tau",
    "batch-size": "64,128,256",
    "margin": "0,0.02,0.05",
}


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class _Opt:
    flag: str
    kind: object  # int, float, str, or the string "bool"
    default: object
    help: str
    choices: Optional[tuple] = None
    required: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _opt_help(o: _Opt) -> str:
    if o.required:
        return f"{o.help} (required)"
    if o.default is None:
        return f"{o.help} (optional)"
    return f"{o.help} (default: {o.default})"


_DATA = [
    _Opt("--train", str, None, "training triples TSV", required=True),
    _Opt("--valid", str, None, "validation triples TSV", required=True),
    _Opt("--test", str, None, "test triples TSV", required=True),
    _Opt("--entities", str, None, "entity descriptions TSV", required=True),
    _Opt("--relations", str, None, "relation descriptions TSV", required=True),
]
_COMMON = [
    _Opt("--config", str, None, "config file with key = value lines"),
    _Opt("--seed", int, 42, "seed for every random stream"),
    _Opt("--threads", int, 1, "worker threads for evaluation (1 = deterministic)"),
    _Opt("--max-tokens", int, enc.DEFAULT_MAX_TOKENS, "token budget per text"),
]
_MODEL = [
    _Opt("--buckets", int, enc.DEFAULT_BUCKETS, "hashed vocabulary size"),
    _Opt("--dim", int, enc.DEFAULT_DIM, "embedding dimension"),
    _Opt("--temperature", float, enc.DEFAULT_TEMPERATURE, "initial softmax temperature"),
]
_TRAIN = _MODEL + [
    _Opt("--batch-size", int, 256, "triples per training step"),
    _Opt("--epochs", int, 10, "passes over the training split"),
    _Opt("--lr", float, 0.02, "peak learning rate"),
    _Opt("--warmup", int, 400, "linear warmup steps"),
    _Opt("--grad-clip", float, 10.0, "global gradient-norm ceiling"),
    _Opt("--weight-decay", float, 1e-4, "decoupled weight decay"),
    _Opt("--dropout", float, 0.1, "token-row dropout probability"),
    _Opt("--loss", str, "infonce", "training loss", choices=tr.LOSS_KINDS),
    _Opt("--negatives", str, "ib,pb,sn", "negative sources, comma-separated from ib,pb,sn"),
    _Opt("--pre-batches", int, 2, "batches kept in the pre-batch queue"),
    _Opt("--pre-batch-weight", float, 0.5, "logit weight on queue negatives"),
    _Opt("--max-negatives", int, None, "cap on usable negatives per row"),
    _Opt("--margin", float, 0.02, "additive margin on the positive logit"),
    _Opt("--hinge-margin", float, 0.8, "margin for the hinge losses"),
    _Opt("--margin-tau-temperature", float, 0.05, "weighting temperature for margin_tau"),
]
_RERANK = [
    _Opt("--rerank", "bool", False, "boost the head's k-hop train neighborhood"),
    _Opt("--alpha", float, 0.05, "re-ranking score boost"),
    _Opt("--hops", int, 2, "re-ranking hop radius"),
]

_OPTS = {
    "train": _DATA
    + _COMMON
    + _TRAIN
    + [
        _Opt("--out", str, "checkpoint.tsv", "checkpoint path (log goes to <out>.log)"),
        _Opt("--load-report", str, None, "write the dataset load report JSON here"),
    ],
    "evaluate": _DATA
    + _COMMON
    + _RERANK
    + [
        _Opt("--checkpoint", str, "checkpoint.tsv", "trained checkpoint to score with"),
        _Opt("--split", str, "test", "split to rank", choices=("train", "valid", "test")),
        _Opt("--output", str, None, "report path (default: standard output)"),
        _Opt("--precomputed-embeddings", str, None, "entity vectors TSV replacing the index build"),
        _Opt("--load-report", str, None, "write the dataset load report JSON here"),
    ],
    "predict": _DATA
    + _COMMON
    + _RERANK
    + [
        _Opt("--checkpoint", str, "checkpoint.tsv", "trained checkpoint to score with"),
        _Opt("--head", str, None, "known entity id of the query", required=True),
        _Opt("--relation", str, None, "relation id of the query", required=True),
        _Opt("--topk", int, 10, "number of candidates to print"),
        _Opt("--direction", str, "tail", "predict the tail or the head", choices=("tail", "head")),
    ],
    "export-embeddings": _DATA
    + _COMMON
    + [
        _Opt("--checkpoint", str, "checkpoint.tsv", "trained checkpoint to encode with"),
        _Opt("--out", str, "embeddings.tsv", "output path for entity vectors"),
    ],
    "sweep": _DATA
    + _COMMON
    + _TRAIN
    + [
        _Opt("--axis", str, None, "swept dimension", choices=SWEEP_AXES, required=True),
        _Opt("--points", str, None, "comma-separated sweep points (default: per-axis set)"),
        _Opt("--out-dir", str, "sweep", "directory for per-point reports"),
        _Opt("--split", str, "test", "split to rank", choices=("train", "valid", "test")),
    ],
}

_SUMMARIES = {
    "train": "train an encoder and write a checkpoint",
    "evaluate": "rank a split and emit the JSON metrics report",
    "predict": "print top-k candidates for one query",
    "export-embeddings": "write all entity vectors as TSV",
    "sweep": "train and evaluate across one hyperparameter axis",
}


def build_parser() -> _Parser:
    parser = _Parser(prog="textkgc", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, opts in _OPTS.items():
        sub = subs.add_parser(command, help=_SUMMARIES[command])
        for o in opts:
            if o.kind == "bool":
                sub.add_argument(o.flag, action="store_true", default=None, help=_opt_help(o))
            else:
                sub.add_argument(o.flag, type=o.kind, default=None, help=_opt_help(o))
    return parser


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip():
                raise ParseError(path, lineno, "expected 'key = value'")
            values[key.strip().lower().replace("-", "_")] = val.strip()
    return values


def _as_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(lowered)


def _coerce(o: _Opt, text: str):
    try:
        if o.kind == "bool":
            return _as_bool(text)
        return o.kind(text)
    except ValueError:
        raise KgcError(f"bad config value for {o.flag}: {text!r}") from None


def _resolve(ns: argparse.Namespace, opts: list[_Opt], file_values: dict[str, str]) -> dict:
    cfg = {}
    for o in opts:
        val = getattr(ns, o.dest)
        if val is None and o.dest in file_values:
            val = _coerce(o, file_values[o.dest])
        if val is None:
            val = o.default
        if o.choices is not None and val is not None and val not in o.choices:
            raise KgcError(f"{o.flag} must be one of {', '.join(map(str, o.choices))}, got {val!r}")
        cfg[o.dest] = val
    missing = [o.flag for o in opts if o.required and cfg[o.dest] is None]
    if missing:
        raise KgcError(f"missing required options: {', '.join(missing)}")
    return cfg


def _parse_negatives(text: str) -> frozenset[str]:
    parts = frozenset(p.strip().lower() for p in text.split(",") if p.strip())
    unknown = parts - set(tr.NEGATIVE_SOURCES)
    if unknown:
        raise KgcError(f"unknown negative sources: {', '.join(sorted(unknown))}")
    if "pb" in parts and "ib" not in parts:
        raise KgcError("pre-batch negatives require in-batch negatives")
    return parts


def _load_augmented(cfg: dict) -> KnowledgeGraph:
    g = load_graph(cfg["train"], cfg["valid"], cfg["test"], cfg["entities"], cfg["relations"])
    g = add_inverse_triples(g)
    if cfg.get("load_report"):
        with open(cfg["load_report"], "w", encoding="utf-8") as fh:
            fh.write(json.dumps(g.load_report, indent=2, sort_keys=True) + "\n")
    return g


def _train_config(cfg: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        peak_lr=cfg["lr"],
        warmup_steps=cfg["warmup"],
        grad_clip=cfg["grad_clip"],
        weight_decay=cfg["weight_decay"],
        dropout=cfg["dropout"],
        loss_kind=cfg["loss"],
        negatives=_parse_negatives(cfg["negatives"]),
        pre_batches=cfg["pre_batches"],
        seed=cfg["seed"],
        max_tokens=cfg["max_tokens"],
        max_negatives=cfg["max_negatives"],
        margin_tau_temperature=cfg["margin_tau_temperature"],
        loss=ct.LossConfig(
            additive_margin=cfg["margin"],
            hinge_margin=cfg["hinge_margin"],
            pre_batch_weight=cfg["pre_batch_weight"],
        ),
    )


def _fresh_params(cfg: dict) -> enc.EncoderParams:
    rng = named_stream(cfg["seed"], "init")
    return enc.EncoderParams.initialize(cfg["buckets"], cfg["dim"], rng, cfg["temperature"])


def _build_index(g: KnowledgeGraph, params: enc.EncoderParams, cfg: dict) -> ev.EntityEmbeddingIndex:
    return ev.build_index(g, params, cfg["max_tokens"], workers=cfg["threads"])


def _rerank_config(cfg: dict) -> Optional[ev.RerankConfig]:
    return ev.RerankConfig(cfg["alpha"], cfg["hops"]) if cfg["rerank"] else None


def cmd_train(cfg: dict) -> int:
    g = _load_augmented(cfg)
    params, log_lines = tr.train(g, _fresh_params(cfg), _train_config(cfg), checkpoint_path=cfg["out"])
    with open(cfg["out"] + ".log", "w", encoding="utf-8") as fh:
        fh.write("\n".join(log_lines) + "\n")
    print(f"checkpoint: {cfg['out']} steps: {len(log_lines)}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    g = _load_augmented(cfg)
    params = enc.load_checkpoint(cfg["checkpoint"])
    if cfg["precomputed_embeddings"]:
        plugin = enc.PrecomputedEntityEncoder.load(cfg["precomputed_embeddings"])
        if plugin.dim != params.dim:
            raise KgcError(
                f"precomputed dimension {plugin.dim} does not match checkpoint dimension {params.dim}"
            )
        idx = ev.index_from_precomputed(g, plugin)
    else:
        idx = _build_index(g, params, cfg)
    result = ev.evaluate(
        g, idx, params, cfg["split"], _rerank_config(cfg), cfg["max_tokens"], workers=cfg["threads"]
    )
    text = json.dumps(result.report(), indent=2, sort_keys=True) + "\n"
    if cfg["output"]:
        with open(cfg["output"], "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    g = _load_augmented(cfg)
    params = enc.load_checkpoint(cfg["checkpoint"])
    relation = cfg["relation"]
    g.relation(relation)
    if cfg["direction"] == "head":
        relation = g.inverse_of(relation)
    idx = _build_index(g, params, cfg)
    rows = ev.predict_topk(
        g, idx, params, cfg["head"], relation, cfg["topk"], _rerank_config(cfg), cfg["max_tokens"]
    )
    for pos, (entity_id, score, known) in enumerate(rows, start=1):
        print(f"{pos}\t{entity_id}\t{score!r}\t{'true' if known else 'false'}")
    return EXIT_OK


def cmd_export_embeddings(cfg: dict) -> int:
    g = _load_augmented(cfg)
    params = enc.load_checkpoint(cfg["checkpoint"])
    idx = _build_index(g, params, cfg)
    ev.write_embeddings(idx, cfg["out"])
    print(f"embeddings: {cfg['out']} rows: {len(idx.entity_ids)}")
    return EXIT_OK


def _parse_point(axis: str, raw: str):
    try:
        if axis in ("negatives-count", "batch-size"):
            return int(raw)
        if axis == "margin":
            return float(raw)
    except ValueError:
        raise KgcError(f"bad sweep point for axis {axis}: {raw!r}") from None
    return raw


def _sweep_config(base: tr.TrainConfig, axis: str, point) -> tr.TrainConfig:
    if axis == "negatives-count":
        return dataclasses.replace(base, max_negatives=point)
    if axis == "loss-kind":
        return dataclasses.replace(base, loss_kind=point)
    if axis == "batch-size":
        return dataclasses.replace(base, batch_size=point)
    return dataclasses.replace(base, loss=dataclasses.replace(base.loss, additive_margin=point))


def cmd_sweep(cfg: dict) -> int:
    axis = cfg["axis"]
    raw_points = cfg["points"] or SWEEP_DEFAULT_POINTS[axis]
    points = [_parse_point(axis, p.strip()) for p in raw_points.split(",") if p.strip()]
    if not points:
        raise KgcError("sweep needs at least one point")
    os.makedirs(cfg["out_dir"], exist_ok=True)
    g = _load_augmented(cfg)
    base = _train_config(cfg)

    summary = []
    for point in points:
        run_cfg = _sweep_config(base, axis, point)
        params, _ = tr.train(g, _fresh_params(cfg), run_cfg)
        idx = _build_index(g, params, cfg)
        report = ev.evaluate(
            g, idx, params, cfg["split"], None, cfg["max_tokens"], workers=cfg["threads"]
        ).report()
        path = os.path.join(cfg["out_dir"], f"{axis}-{point}.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
        summary.append(
            {
                "point": point,
                "mrr": report["mrr"],
                "hits1": report["hits1"],
                "hits3": report["hits3"],
                "hits10": report["hits10"],
                "report": path,
            }
        )

    with open(os.path.join(cfg["out_dir"], "summary.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"axis": axis, "rows": summary}, indent=2, sort_keys=True) + "\n")
    print(f"{'point':>14} {'mrr':>8} {'hits1':>8} {'hits3':>8} {'hits10':>8}")
    for row in summary:
        print(
            f"{row['point']!s:>14} {row['mrr']:>8.4f} {row['hits1']:>8.4f}"
            f" {row['hits3']:>8.4f} {row['hits10']:>8.4f}"
        )
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export-embeddings": cmd_export_embeddings,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        file_values = _read_config_file(ns.config) if ns.config else {}
        cfg = _resolve(ns, _OPTS[ns.command], file_values)
        return _COMMANDS[ns.command](cfg)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KgcError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
