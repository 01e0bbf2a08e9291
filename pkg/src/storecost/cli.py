"""Command-line entry point.

Subcommands: storage, dlt, stimuli (generate/profile), decay, eval
(ingest/regress/correlate/bh), verify. Settings resolve in the order
defaults < config file (INI) < environment < flags; every run writes a
manifest sidecar carrying the resolved-config hash, seed, backend identity,
and approximation flags. Exit codes: 0 success, 1 usage, 2 data error,
3 backend/transport error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluation, stimuli
from . import dlt as dlt_mod
from .backends import MaskedNgramModel, backend_identity, load_corpus, load_joint_table
from .errors import DataFormatError, StorecostError, UsageError
from .lm_client import LmClient, ServerConfig
from .storage import (
    SentenceTokens,
    decay_curve,
    storage_profile,
    storage_record,
    write_storage_jsonl,
)

ENV_PREFIX = "STORECOST_"
_ENV_KEYS = {
    "lm_endpoint": "STORECOST_LM_ENDPOINT",
    "lm_timeout_ms": "STORECOST_LM_TIMEOUT_MS",
    "lm_top_k": "STORECOST_LM_TOP_K",
    "cache_dir": "STORECOST_CACHE_DIR",
}


@dataclass
class RunConfig:
    """Resolved settings for one run; round-trips losslessly through INI."""

    backend: str = "exact"  # exact | ngram | server
    joint: str | None = None
    corpus: str | None = None
    order: int = 2
    alpha: float = 0.5
    lm_endpoint: str | None = None
    lm_timeout_ms: int = 60000
    lm_top_k: int | None = None
    seed: int = 0
    max_distance: int | None = None
    workers: int = 1
    cache_dir: str | None = None
    rt_min: float | None = None
    rt_max: float | None = None
    min_accuracy: float | None = None
    drop_practice: bool = False

    _SECTIONS = {
        "backend": ("backend", "joint", "corpus", "order", "alpha", "lm_endpoint",
                    "lm_timeout_ms", "lm_top_k"),
        "run": ("seed", "max_distance", "workers", "cache_dir"),
        "filters": ("rt_min", "rt_max", "min_accuracy", "drop_practice"),
    }

    def to_ini(self, path):
        parser = configparser.ConfigParser()
        for section, keys in self._SECTIONS.items():
            parser[section] = {}
            for key in keys:
                value = getattr(self, key)
                if value is not None:
                    parser[section][key] = str(value)
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)

    @classmethod
    def ini_values(cls, path) -> dict:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise UsageError(f"config file {path} not found")
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for section in parser.sections():
            for key, raw in parser[section].items():
                if key not in types:
                    raise UsageError(f"unknown config key {key!r} in {path}")
                values[key] = _coerce(key, raw, types[key])
        return values

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(key: str, raw: str, annotation: str):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if "bool" in annotation:
        return raw.lower() in ("1", "true", "yes", "on")
    if "int" in annotation:
        return int(raw)
    if "float" in annotation:
        return float(raw)
    return raw


def resolve_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        for key, value in RunConfig.ini_values(args.config).items():
            setattr(config, key, value)
    annotations = {f.name: f.type for f in fields(RunConfig)}
    for key, env_name in _ENV_KEYS.items():
        if env_name in os.environ:
            setattr(config, key, _coerce(key, os.environ[env_name], annotations[key]))
    for field in fields(RunConfig):
        flag_value = getattr(args, field.name, None)
        if flag_value is not None:
            setattr(config, field.name, flag_value)
    if getattr(args, "keep_practice", False):
        config.drop_practice = False
    return config


# ---------------------------------------------------------------------------
# Backend construction and cached sentence profiling
# ---------------------------------------------------------------------------


class _Runtime:
    """Backend handle plus tokenization and the per-sentence result cache."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.client = None
        if config.backend == "exact":
            if not config.joint:
                raise UsageError("--backend exact requires --joint TABLE")
            self.backend = load_joint_table(config.joint)
        elif config.backend == "ngram":
            if not config.corpus:
                raise UsageError("--backend ngram requires --corpus FILE")
            self.backend = MaskedNgramModel.fit(
                load_corpus(config.corpus), order=config.order, alpha=config.alpha
            )
        elif config.backend == "server":
            if not config.lm_endpoint:
                raise UsageError("--backend server requires --lm-endpoint (or STORECOST_LM_ENDPOINT)")
            self.client = LmClient(
                ServerConfig(
                    endpoint=config.lm_endpoint,
                    timeout_ms=config.lm_timeout_ms,
                    top_k=config.lm_top_k,
                )
            )
            self.backend = self.client
        else:
            raise UsageError(f"unknown backend {config.backend!r}")
        self.identity = backend_identity(self.backend)

    def close(self):
        if self.client is not None:
            self.client.close()

    def sentence_tokens(self, words) -> SentenceTokens:
        if self.client is not None:
            tokens, spans = self.client.tokenize(words)
            return SentenceTokens(tuple(words), tuple(tokens), tuple(spans))
        return SentenceTokens.from_words(words)

    def _cache_path(self, words) -> Path | None:
        if not self.config.cache_dir:
            return None
        key = hashlib.sha256(
            f"{self.identity}|{self.config.max_distance}|{' '.join(words)}".encode()
        ).hexdigest()
        return Path(self.config.cache_dir) / f"{key}.json"

    def profile_sentence(self, sentence_id: str, words) -> dict:
        """Storage record for one sentence, via the on-disk cache when set."""
        cache_path = self._cache_path(words)
        if cache_path is not None and cache_path.exists():
            with open(cache_path, encoding="utf-8") as fh:
                return json.load(fh)
        sent = self.sentence_tokens(words)
        matrix, profile = storage_profile(self.backend, sent, self.config.max_distance)
        record = storage_record(sentence_id, sent, matrix, profile)
        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            with open(cache_path, "w", encoding="utf-8") as fh:
                json.dump(record, fh)
        return record

    def profile_many(self, sentences: list[tuple[str, list[str]]]) -> list[dict]:
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(lambda sw: self.profile_sentence(*sw), sentences))
        return [self.profile_sentence(sid, words) for sid, words in sentences]


def _read_sentences(path) -> list[tuple[str, list[str]]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            words = line.split()
            if words:
                out.append((f"s{lineno}", words))
    if not out:
        raise DataFormatError(f"no sentences in {path}")
    return out


def write_manifest(output_path, command: str, config: RunConfig, backend_id, extra=None) -> str:
    manifest = {
        "command": command,
        "config_hash": config.hash(),
        "seed": config.seed,
        "backend": backend_id,
        "max_distance": config.max_distance,
    }
    if extra:
        manifest.update(extra)
    path = Path(str(output_path) + ".manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest["config_hash"]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_storage(args) -> int:
    config = resolve_config(args)
    runtime = _Runtime(config)
    try:
        sentences = _read_sentences(args.input)
        records = runtime.profile_many(sentences)
    finally:
        runtime.close()
    approximate = any(r["approximate"] for r in records)
    windowed = any(r["windowed"] for r in records)
    manifest = write_manifest(
        args.output, "storage", config, runtime.identity,
        {"approximate": approximate, "windowed": windowed},
    )
    for record in records:
        record["manifest"] = manifest
    write_storage_jsonl(args.output, records)
    return 0


def cmd_decay(args) -> int:
    config = resolve_config(args)
    runtime = _Runtime(config)
    try:
        sentences = _read_sentences(args.input)
        records = runtime.profile_many(sentences)
    finally:
        runtime.close()
    max_distance = args.bins
    sums = np.zeros(max_distance + 1)
    counts = np.zeros(max_distance + 1, dtype=np.int64)
    for record in records:
        for i, k, bits in record["pp_matrix"]:
            d = k - i
            if d <= max_distance:
                sums[d] += bits
                counts[d] += 1
    approximate = any(r["approximate"] for r in records)
    manifest = write_manifest(
        args.output, "decay", config, runtime.identity, {"approximate": approximate}
    )
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(f"# manifest: {manifest}\n")
        fh.write("distance,mean_bits,count\n")
        for d in range(1, max_distance + 1):
            mean = sums[d] / counts[d] if counts[d] else float("nan")
            fh.write(f"{d},{mean!r},{counts[d]}\n")
    return 0


def cmd_dlt(args) -> int:
    config = resolve_config(args)
    excluded = frozenset(x for x in args.exclude.split(",") if x)
    with open(args.input, encoding="utf-8") as fh:
        trees = dlt_mod.parse_conllu(fh)
    profiles = [dlt_mod.dlt_storage(tree, excluded) for tree in trees]
    manifest = write_manifest(
        args.output, "dlt", config, None,
        {"excluded": sorted(excluded), "codependent": "either arc endpoint, once per token"},
    )
    dlt_mod.write_token_tsv(args.output, profiles, manifest=manifest)
    if args.text:
        if not args.words_output:
            raise UsageError("--text requires --words-output")
        with open(args.text, encoding="utf-8") as fh:
            raw_lines = [line.rstrip("\n") for line in fh if line.strip()]
        if len(raw_lines) != len(profiles):
            raise DataFormatError(
                f"{len(raw_lines)} text lines vs {len(profiles)} parsed sentences"
            )
        aligned = [
            (profile.tree.sentence_id, dlt_mod.word_align(profile, raw))
            for profile, raw in zip(profiles, raw_lines)
        ]
        dlt_mod.write_word_tsv(args.words_output, aligned, manifest=manifest)
    return 0


def cmd_stimuli(args) -> int:
    config = resolve_config(args)
    conditions = stimuli.PAIR_SETS[args.condition]
    if args.action == "generate":
        out_dir = Path(args.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for condition in conditions:
            items = stimuli.generate(condition)
            path = out_dir / f"{condition.lower()}.txt"
            stimuli.write_sentences(path, items)
            write_manifest(path, "stimuli-generate", config, None, {"condition": condition})
        return 0
    runtime = _Runtime(config)
    try:
        summaries = []
        for condition in conditions:
            items = stimuli.generate(condition)
            summaries.append(
                stimuli.profile_conditions(
                    runtime.backend,
                    items,
                    max_distance=config.max_distance,
                    tokenizer=runtime.sentence_tokens,
                )
            )
    finally:
        runtime.close()
    manifest = write_manifest(
        args.positions_output, "stimuli-profile", config, runtime.identity,
        {"approximate": any(s.approximate for s in summaries)},
    )
    stimuli.write_position_csv(args.positions_output, summaries, manifest=manifest)
    if args.totals_output:
        stimuli.write_totals_csv(args.totals_output, summaries, manifest=manifest)
    if args.plot_output:
        stimuli.write_plot_json(args.plot_output, summaries, manifest=manifest)
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    if args.action == "ingest":
        import pandas as pd

        preset = evaluation.PRESETS[args.preset]() if args.preset else evaluation.FilterConfig()
        filter_config = evaluation.FilterConfig(
            rt_min=config.rt_min if config.rt_min is not None else preset.rt_min,
            rt_max=config.rt_max if config.rt_max is not None else preset.rt_max,
            min_accuracy=(
                config.min_accuracy if config.min_accuracy is not None else preset.min_accuracy
            ),
            drop_practice=preset.drop_practice if not args.keep_practice else False,
        )
        measurements = pd.read_csv(args.measurements, sep="\t", comment="#")
        words = pd.read_csv(args.words, sep="\t", comment="#")
        table = evaluation.ingest_reading_data(measurements, words, filter_config)
        manifest = write_manifest(
            args.output, "eval-ingest", config, None,
            {"filters": asdict(filter_config)},
        )
        evaluation.write_predictor_table(args.output, table, manifest=manifest)
        return 0
    if args.action == "regress":
        table = evaluation.read_predictor_table(args.table)
        results = evaluation.cv_delta_ll(
            table,
            folds=args.folds,
            seed=config.seed,
            iterations=args.perms,
            conditions=tuple(args.conditions.split(",")),
            block_by_text=args.block_by_text,
            min_rows=args.min_rows,
            bh_alpha=args.alpha,
        )
        metadata = {
            "folds": args.folds,
            "iterations": args.perms,
            "seed": config.seed,
            "fold_scheme": "by-text" if args.block_by_text else "uniform-word",
            "permutation_scheme": "per-word sign flip of paired delta-LL",
            "permutation_modes": {r.condition: r.permutation_mode for r in results},
            "bh_family": "conditions within this run",
            "usable_rows": int(len(table.usable())),
        }
        manifest = write_manifest(args.output, "eval-regress", config, None, metadata)
        evaluation.write_results_json(args.output, results, metadata, manifest=manifest)
        return 0
    if args.action == "correlate":
        table = evaluation.read_predictor_table(args.table)
        frame = table.usable()
        result = evaluation.correlate(
            frame[args.x_col].to_numpy(),
            frame[args.y_col].to_numpy(),
            min_bin_count=args.min_bin_count,
        )
        manifest = write_manifest(
            args.output, "eval-correlate", config, None,
            {"x": args.x_col, "y": args.y_col, "min_bin_count": args.min_bin_count},
        )
        evaluation.write_correlation_csv(args.output, result, manifest=manifest)
        return 0
    if args.action == "bh":
        payloads = []
        p_values = []
        for path in args.results:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
            payloads.append((path, payload))
            p_values.extend(r["p_value"] for r in payload["results"])
        flags = evaluation.benjamini_hochberg(p_values, alpha=args.alpha)
        cursor = 0
        combined = []
        for path, payload in payloads:
            for result in payload["results"]:
                result["bh_significant"] = bool(flags[cursor])
                cursor += 1
                combined.append({"source": str(path), **result})
        manifest = write_manifest(
            args.output, "eval-bh", config, None,
            {"alpha": args.alpha, "tests": len(p_values)},
        )
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(
                {"alpha": args.alpha, "results": combined, "manifest": manifest},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
        return 0
    raise UsageError(f"unknown eval action {args.action!r}")


def cmd_verify(args) -> int:
    from .verify import run_verification

    config = resolve_config(args)
    report = run_verification(seed=config.seed, n_models=args.models)
    if args.output:
        manifest = write_manifest(args.output, "verify", config, None)
        report["manifest"] = manifest
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    for check in report["checks"]:
        status = "ok" if check["pass"] else "FAIL"
        print(f"{status:4s} {check['name']}: max |gap| = {check['max_abs_gap']:.3e}")
    return 0 if report["pass"] else 2


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_backend_flags(parser):
    parser.add_argument("--backend", choices=("exact", "ngram", "server"), default=None)
    parser.add_argument("--joint", help="exact joint table file")
    parser.add_argument("--corpus", help="n-gram training corpus file")
    parser.add_argument("--order", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--lm-endpoint", dest="lm_endpoint")
    parser.add_argument("--lm-timeout-ms", dest="lm_timeout_ms", type=int, default=None)
    parser.add_argument("--lm-top-k", dest="lm_top_k", type=int, default=None)


def _add_run_flags(parser):
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--max-distance", dest="max_distance", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--cache-dir", dest="cache_dir", default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="storecost", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("storage", help="per-sentence information-storage profiles (JSONL)")
    p.add_argument("--input", required=True, help="plain-text sentences, one per line")
    p.add_argument("--output", required=True)
    _add_backend_flags(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_storage)

    p = sub.add_parser("decay", help="mean predictive potential per distance (CSV)")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--bins", type=int, default=30, help="largest distance bin")
    _add_backend_flags(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("dlt", help="dependency-based storage cost from CoNLL-U (TSV)")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--exclude", default="punct,root,dep,reparandum")
    p.add_argument("--text", help="raw sentence text, one line per sentence")
    p.add_argument("--words-output", dest="words_output")
    _add_run_flags(p)
    p.set_defaults(func=cmd_dlt)

    p = sub.add_parser("stimuli", help="generate or profile the bundled stimulus sets")
    p.add_argument("action", choices=("generate", "profile"))
    p.add_argument("--condition", choices=tuple(stimuli.PAIR_SETS), required=True)
    p.add_argument("--output-dir", dest="output_dir", default=".")
    p.add_argument("--positions-output", dest="positions_output")
    p.add_argument("--totals-output", dest="totals_output")
    p.add_argument("--plot-output", dest="plot_output")
    _add_backend_flags(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_stimuli)

    p = sub.add_parser("eval", help="reading-time statistics pipeline")
    p.add_argument("action", choices=("ingest", "regress", "correlate", "bh"))
    p.add_argument("--measurements")
    p.add_argument("--words")
    p.add_argument("--preset", choices=tuple(evaluation.PRESETS))
    p.add_argument("--keep-practice", dest="keep_practice", action="store_true")
    p.add_argument("--rt-min", dest="rt_min", type=float, default=None)
    p.add_argument("--rt-max", dest="rt_max", type=float, default=None)
    p.add_argument("--min-accuracy", dest="min_accuracy", type=float, default=None)
    p.add_argument("--table")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--perms", type=int, default=20000)
    p.add_argument("--conditions", default=",".join(evaluation.CONDITION_ORDER))
    p.add_argument("--block-by-text", dest="block_by_text", action="store_true")
    p.add_argument("--min-rows", dest="min_rows", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--x-col", dest="x_col", default="info_stor")
    p.add_argument("--y-col", dest="y_col", default="dlt_stor")
    p.add_argument("--min-bin-count", dest="min_bin_count", type=int, default=100)
    p.add_argument("--output", required=True)
    p.add_argument("results", nargs="*", help="results JSON files (bh action)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="oracle identity suites on exact joint models")
    p.add_argument("--models", type=int, default=100)
    p.add_argument("--output")
    _add_run_flags(p)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except StorecostError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
