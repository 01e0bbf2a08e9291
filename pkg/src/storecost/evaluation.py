"""Reading-time evaluation harness.

Pipeline: per-participant measurements are filtered (participant accuracy,
then trial reading-time bounds), averaged into per-word mean reading times,
joined with predictor metadata, and regressed. Model comparison uses
per-word held-out log-likelihood differences from 10-fold cross-validation,
a one-sided sign-flip permutation test on the mean difference, and
Benjamini-Hochberg FDR control across tests.

Baseline predictors: word position in sentence and document, word length,
unigram surprisal, GPT-2 surprisal, plus spillover (previous-word) terms for
everything except the positions. Storage predictors likewise enter with a
spillover term. All predictors are z-scored on the training rows of each
fold; the target stays in raw units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from . import kernels
from .errors import (
    CorrelationError,
    DataFormatError,
    DegeneratePredictorError,
    FoldError,
    IngestionError,
    ParameterError,
    SingularDesignError,
)

SPILLOVER_BASES = ("wlen", "unisurp", "gpt2_surp", "dlt_stor", "info_stor")

BASELINE_PREDICTORS = (
    "zone",
    "position",
    "wlen",
    "unisurp",
    "gpt2_surp",
    "prev_wlen",
    "prev_unisurp",
    "prev_gpt2_surp",
)
INFO_PREDICTORS = ("info_stor", "prev_info_stor")
DLT_PREDICTORS = ("dlt_stor", "prev_dlt_stor")

# condition -> (columns added to the baseline of the comparison, columns tested)
CONDITIONS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "info": ((), INFO_PREDICTORS),
    "dlt": ((), DLT_PREDICTORS),
    "info-on-dlt": (DLT_PREDICTORS, INFO_PREDICTORS),
    "dlt-on-info": (INFO_PREDICTORS, DLT_PREDICTORS),
}
CONDITION_ORDER = ("info", "dlt", "info-on-dlt", "dlt-on-info")

_WORD_COLUMNS = ("text_id", "word_index", "sentence_id", "word")
_PREDICTOR_COLUMNS = ("unisurp", "gpt2_surp", "dlt_stor", "info_stor")

_VARIANCE_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterConfig:
    """Preprocessing thresholds; presets carry the published defaults."""

    rt_min: float | None = None
    rt_max: float | None = None
    min_accuracy: float | None = None
    drop_practice: bool = False

    @classmethod
    def spr(cls) -> "FilterConfig":
        return cls(rt_min=100.0, rt_max=3000.0, min_accuracy=5.0 / 6.0)

    @classmethod
    def maze(cls) -> "FilterConfig":
        return cls(min_accuracy=0.8)

    @classmethod
    def onestop(cls) -> "FilterConfig":
        return cls(rt_min=0.0, rt_max=2000.0, drop_practice=True)


PRESETS = {"spr": FilterConfig.spr, "maze": FilterConfig.maze, "onestop": FilterConfig.onestop}


@dataclass
class PredictorTable:
    """Per-word regression substrate with a usability mask."""

    frame: pd.DataFrame

    def usable(self) -> pd.DataFrame:
        return self.frame[self.frame["usable"]].reset_index(drop=True)

    def __len__(self):
        return len(self.frame)


def _require(frame: pd.DataFrame, columns: Iterable[str], where: str):
    for col in columns:
        if col not in frame.columns:
            raise IngestionError(f"missing column {col!r} in {where}")


def contains_punctuation(word: str) -> bool:
    """Any character that is not alphanumeric counts as punctuation."""
    return any(not ch.isalnum() for ch in str(word))


def ingest_reading_data(
    measurements: pd.DataFrame, words: pd.DataFrame, config: FilterConfig
) -> PredictorTable:
    """Filter raw measurements, average over participants, join predictors.

    Filter order: participant-level accuracy, then practice/RT trial filters,
    then the per-word mean over what remains. Word-level exclusions (sentence
    edges, punctuation) mark rows unusable rather than dropping them, as does
    a missing or excluded previous word (spillover is never imputed).
    """
    _require(measurements, ("participant", "text_id", "word_index", "rt"), "measurements")
    _require(words, _WORD_COLUMNS + _PREDICTOR_COLUMNS, "words")

    meas = measurements.copy()
    if config.min_accuracy is not None:
        if "accuracy" in meas.columns:
            acc = meas.groupby("participant")["accuracy"].first()
        elif "correct" in meas.columns:
            acc = meas.groupby("participant")["correct"].mean()
        else:
            raise IngestionError(
                "missing column 'accuracy' (or 'correct') in measurements"
            )
        keep = acc[acc >= config.min_accuracy].index
        meas = meas[meas["participant"].isin(keep)]
    if config.drop_practice and "practice" in meas.columns:
        meas = meas[~meas["practice"].astype(bool)]
    if config.rt_min is not None:
        meas = meas[meas["rt"] >= config.rt_min]
    if config.rt_max is not None:
        meas = meas[meas["rt"] <= config.rt_max]

    agg = (
        meas.groupby(["text_id", "word_index"])["rt"]
        .agg(rt_target="mean", n_obs="size")
        .reset_index()
    )

    table = words.copy()
    table = table.merge(agg, on=["text_id", "word_index"], how="left")
    table["n_obs"] = table["n_obs"].fillna(0).astype(int)

    if "wlen" not in table.columns:
        table["wlen"] = table["word"].astype(str).str.len()
    if "zone" not in table.columns:
        table["zone"] = table["word_index"]
    table = table.sort_values(["text_id", "word_index"], kind="mergesort").reset_index(drop=True)
    if "position" not in table.columns:
        table["position"] = table.groupby(["text_id", "sentence_id"]).cumcount() + 1

    sent_group = table.groupby(["text_id", "sentence_id"])["word_index"]
    first = sent_group.transform("min")
    last = sent_group.transform("max")
    word_excluded = (
        (table["word_index"] == first)
        | (table["word_index"] == last)
        | table["word"].map(contains_punctuation)
    )
    table["word_excluded"] = word_excluded

    table = add_spillover(table)
    prev_excluded = (
        table.groupby("text_id")["word_excluded"].shift(1).fillna(True).astype(bool)
    )
    table["usable"] = (
        ~table["word_excluded"]
        & (table["n_obs"] >= 1)
        & table["rt_target"].notna()
        & ~prev_excluded
        & table[[f"prev_{c}" for c in SPILLOVER_BASES]].notna().all(axis=1)
    )
    return PredictorTable(table)


def add_spillover(frame: pd.DataFrame) -> pd.DataFrame:
    """Previous-word predictor columns, per text, in word_index order.

    Requires the frame to be sorted by (text_id, word_index); the previous
    word must sit at word_index - 1 or the spillover value is left missing.
    """
    frame = frame.sort_values(["text_id", "word_index"], kind="mergesort").reset_index(drop=True)
    grouped = frame.groupby("text_id")
    contiguous = grouped["word_index"].diff() == 1
    for col in SPILLOVER_BASES:
        if col not in frame.columns:
            continue
        prev = grouped[col].shift(1)
        frame[f"prev_{col}"] = prev.where(contiguous)
    return frame


def read_predictor_table(path) -> PredictorTable:
    """Load a prepared predictor TSV (tab-separated, '#' comments allowed)."""
    frame = pd.read_csv(path, sep="\t", comment="#")
    _require(frame, ("text_id", "word_index", "rt_target"), str(path))
    _require(frame, ("zone", "position", "wlen") + _PREDICTOR_COLUMNS, str(path))
    need_prev = [c for c in SPILLOVER_BASES if f"prev_{c}" not in frame.columns]
    if need_prev:
        frame = add_spillover(frame)
    else:
        frame = frame.sort_values(["text_id", "word_index"], kind="mergesort").reset_index(
            drop=True
        )
    if "usable" not in frame.columns:
        prev_cols = [f"prev_{c}" for c in SPILLOVER_BASES]
        frame["usable"] = frame["rt_target"].notna() & frame[prev_cols].notna().all(axis=1)
    else:
        frame["usable"] = frame["usable"].astype(bool)
    return PredictorTable(frame)


def write_predictor_table(path, table: PredictorTable, manifest: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if manifest is not None:
            fh.write(f"# manifest: {manifest}\n")
        table.frame.to_csv(fh, sep="\t", index=False)


# ---------------------------------------------------------------------------
# Regression machinery
# ---------------------------------------------------------------------------


def zscore_fit_apply(
    frame: pd.DataFrame, columns: Sequence[str], fit_mask: np.ndarray
) -> tuple[pd.DataFrame, dict[str, tuple[float, float]]]:
    """Z-score columns with statistics from fit rows only (population sd)."""
    out = frame.copy()
    stats: dict[str, tuple[float, float]] = {}
    for col in columns:
        values = frame[col].to_numpy(dtype=np.float64)
        fit_values = values[fit_mask]
        mean = float(fit_values.mean())
        sd = float(fit_values.std())  # ddof=0
        if sd == 0.0 or not math.isfinite(sd):
            raise DegeneratePredictorError(f"column {col!r} has zero variance on fit rows")
        out[col] = (values - mean) / sd
        stats[col] = (mean, sd)
    return out, stats


@dataclass(frozen=True)
class RegressionFit:
    predictors: tuple[str, ...]
    coefficients: dict[str, float]  # includes "intercept"
    residual_variance: float  # ML estimate (divide by n), floored
    log_likelihood: float  # total Gaussian LL on the training rows
    n_rows: int


def _design(frame: pd.DataFrame, predictors: Sequence[str]) -> np.ndarray:
    cols = [np.ones(len(frame))]
    for col in predictors:
        cols.append(frame[col].to_numpy(dtype=np.float64))
    return np.column_stack(cols)


def ols_fit(
    frame: pd.DataFrame, predictors: Sequence[str], target: str = "rt_target"
) -> RegressionFit:
    """Ordinary least squares with a Gaussian likelihood."""
    x = _design(frame, predictors)
    y = frame[target].to_numpy(dtype=np.float64)
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise SingularDesignError(
            f"design matrix is rank deficient (predictors: {', '.join(predictors)})"
        )
    beta, _, _, _ = np.linalg.lstsq(x, y, rcond=None)
    residuals = y - x @ beta
    variance = max(float(np.mean(residuals**2)), _VARIANCE_FLOOR)
    ll = float(np.sum(_gaussian_ll_values(residuals, variance)))
    coefficients = {"intercept": float(beta[0])}
    coefficients.update({name: float(b) for name, b in zip(predictors, beta[1:])})
    return RegressionFit(tuple(predictors), coefficients, variance, ll, len(y))


def _gaussian_ll_values(residuals: np.ndarray, variance: float) -> np.ndarray:
    return -0.5 * np.log(2.0 * np.pi * variance) - residuals**2 / (2.0 * variance)


def gaussian_ll(fit: RegressionFit, frame: pd.DataFrame, target: str = "rt_target") -> np.ndarray:
    """Per-row Gaussian log-likelihood under a fit's coefficients and variance."""
    x = _design(frame, fit.predictors)
    beta = np.array([fit.coefficients["intercept"]] + [fit.coefficients[p] for p in fit.predictors])
    residuals = frame[target].to_numpy(dtype=np.float64) - x @ beta
    return _gaussian_ll_values(residuals, fit.residual_variance)


# ---------------------------------------------------------------------------
# Cross-validated delta log-likelihood
# ---------------------------------------------------------------------------


@dataclass
class DllResult:
    condition: str
    per_word_dll: np.ndarray
    mean_dll: float
    p_value: float
    bh_significant: bool | None = None
    coefficients: dict[str, float] = field(default_factory=dict)
    permutation_mode: str = "sampled"

    def summary(self) -> dict:
        return {
            "condition": self.condition,
            "mean_dll": self.mean_dll,
            "p_value": self.p_value,
            "bh_significant": self.bh_significant,
            "coefficients": self.coefficients,
        }


def assign_folds(
    frame: pd.DataFrame, folds: int, rng: np.random.Generator, block_by_text: bool = False
) -> np.ndarray:
    """Fold id per row: uniform at the word level, or whole texts per fold."""
    n = len(frame)
    if block_by_text:
        texts = frame["text_id"].to_numpy()
        unique = pd.unique(texts)
        if len(unique) < folds:
            raise FoldError(f"{len(unique)} texts cannot fill {folds} folds")
        order = rng.permutation(len(unique))
        text_fold = {unique[j]: idx % folds for idx, j in enumerate(order)}
        return np.array([text_fold[t] for t in texts], dtype=np.int64)
    fold_of = np.empty(n, dtype=np.int64)
    for fold_id, chunk in enumerate(np.array_split(rng.permutation(n), folds)):
        fold_of[chunk] = fold_id
    return fold_of


def cv_delta_ll(
    table: PredictorTable,
    folds: int = 10,
    seed: int = 0,
    iterations: int = 20000,
    conditions: Sequence[str] = CONDITION_ORDER,
    block_by_text: bool = False,
    min_rows: int | None = None,
    bh_alpha: float = 0.05,
) -> list[DllResult]:
    """Held-out per-word log-likelihood gain for each model comparison.

    For every fold, the base and target models are fit on the same training
    rows (z-scoring fitted there too), and the difference in per-row test
    log-likelihood is pooled over folds. The one-sided sign-flip permutation
    test runs on the pooled vector; BH flags are set across the conditions
    computed here (recompute across datasets with `benjamini_hochberg`.)
    """
    frame = table.usable()
    min_rows = 50 * folds if min_rows is None else min_rows
    if len(frame) < min_rows:
        raise ParameterError(f"{len(frame)} usable rows < required minimum {min_rows}")
    for name in conditions:
        if name not in CONDITIONS:
            raise ParameterError(f"unknown condition {name!r}")
    master = np.random.SeedSequence(seed)
    fold_seed, *perm_seeds = master.spawn(1 + len(conditions))
    fold_of = assign_folds(frame, folds, np.random.default_rng(fold_seed), block_by_text)

    results = []
    for name, perm_seed in zip(conditions, perm_seeds):
        extra_base, added = CONDITIONS[name]
        base_cols = tuple(BASELINE_PREDICTORS) + extra_base
        target_cols = base_cols + added
        per_word = np.zeros(len(frame))
        coef_sums = {col: 0.0 for col in added}
        for fold_id in range(folds):
            test_mask = fold_of == fold_id
            train_mask = ~test_mask
            if not test_mask.any() or not train_mask.any():
                raise FoldError("empty train or test split", fold=fold_id)
            try:
                zframe, _ = zscore_fit_apply(frame, target_cols, train_mask)
                base_fit = ols_fit(zframe[train_mask], base_cols)
                target_fit = ols_fit(zframe[train_mask], target_cols)
            except (SingularDesignError, DegeneratePredictorError) as exc:
                raise FoldError(str(exc), fold=fold_id) from exc
            test_rows = zframe[test_mask]
            dll = gaussian_ll(target_fit, test_rows) - gaussian_ll(base_fit, test_rows)
            per_word[test_mask] = dll
            for col in added:
                coef_sums[col] += target_fit.coefficients[col]
        permutation = permutation_test(per_word, iterations=iterations, seed=perm_seed)
        coefficients = {
            "current": coef_sums[added[0]] / folds,
            "spillover": coef_sums[added[1]] / folds,
        }
        results.append(
            DllResult(
                condition=name,
                per_word_dll=per_word,
                mean_dll=float(per_word.mean()),
                p_value=permutation.p_value,
                coefficients=coefficients,
                permutation_mode=permutation.mode,
            )
        )
    flags = benjamini_hochberg([r.p_value for r in results], alpha=bh_alpha)
    for result, flag in zip(results, flags):
        result.bh_significant = bool(flag)
    return results


# ---------------------------------------------------------------------------
# Permutation test and FDR control
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PermutationResult:
    p_value: float
    mode: str  # "sampled" or "exhaustive"
    draws: int
    exceed_count: int


_CHUNK_CELLS = 4_000_000


def permutation_test(values, iterations: int = 20000, seed=None, rng=None) -> PermutationResult:
    """One-sided sign-flip test on the mean of paired differences.

    Each iteration flips the sign of every value independently and compares
    the permuted mean against the observed one; p = (1 + #{>=}) / (1 + n).
    When 2^len(values) <= iterations, all sign patterns are enumerated
    instead of sampled.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ParameterError("permutation test needs a nonempty 1-D vector")
    n = values.size
    observed = float(values.sum())  # compare sums: same order as means, no division
    chunk_rows = max(1, _CHUNK_CELLS // n)
    if n < 63 and 2**n <= iterations:
        total = 2**n
        exceed = 0
        bit_cols = np.arange(n, dtype=np.uint64)
        for start in range(0, total, chunk_rows):
            idx = np.arange(start, min(start + chunk_rows, total), dtype=np.uint64)
            flips = ((idx[:, None] >> bit_cols[None, :]) & 1).astype(np.uint8)
            sums = kernels.signflip_sums(values, flips)
            exceed += int(np.count_nonzero(sums >= observed))
        return PermutationResult((1 + exceed) / (1 + total), "exhaustive", total, exceed)
    if rng is None:
        rng = np.random.default_rng(seed)
    exceed = 0
    drawn = 0
    while drawn < iterations:
        rows = min(chunk_rows, iterations - drawn)
        flips = rng.integers(0, 2, size=(rows, n), dtype=np.uint8)
        sums = kernels.signflip_sums(values, flips)
        exceed += int(np.count_nonzero(sums >= observed))
        drawn += rows
    return PermutationResult((1 + exceed) / (1 + iterations), "sampled", iterations, exceed)


def benjamini_hochberg(p_values, alpha: float = 0.05) -> np.ndarray:
    """Step-up FDR control; returns rejection flags in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ParameterError("need a nonempty 1-D p-value vector")
    if np.any((p <= 0) | (p > 1)):
        raise ParameterError("p-values must lie in (0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    thresholds = alpha * np.arange(1, m + 1) / m
    passing = np.nonzero(p[order] <= thresholds)[0]
    flags = np.zeros(m, dtype=bool)
    if passing.size:
        flags[order[: passing[-1] + 1]] = True
    return flags


# ---------------------------------------------------------------------------
# Correlation analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinStat:
    value: float
    count: int
    mean: float
    ci95: float
    displayed: bool


@dataclass(frozen=True)
class CorrelationResult:
    pearson_r: float
    spearman_rho: float
    n: int
    bins: tuple[BinStat, ...]
    fit_slope: float
    fit_intercept: float
    fit_n: int


def _average_ranks(values: np.ndarray) -> np.ndarray:
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts).astype(np.float64)
    return (cum - (counts - 1) / 2.0)[inverse]


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        raise CorrelationError("zero variance in one of the vectors")
    return float(xc @ yc) / denom


def correlate(x, y, min_bin_count: int = 100) -> CorrelationResult:
    """Pearson/Spearman correlation of x against y, with per-y-bin means.

    y is binned by exact value (integer memory-unit counts); bins with fewer
    than `min_bin_count` observations are flagged out of the visualization,
    and the linear fit runs on the raw pairs inside displayed bins,
    predicting x from y.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise CorrelationError("x and y must be equal-length vectors")
    if x.size < 3:
        raise CorrelationError("need at least 3 pairs")
    pearson = _pearson(x, y)
    spearman = _pearson(_average_ranks(x), _average_ranks(y))
    bins = []
    displayed_values = []
    for value in np.unique(y):
        sel = x[y == value]
        count = int(sel.size)
        ci = 1.96 * float(sel.std(ddof=1)) / math.sqrt(count) if count > 1 else 0.0
        displayed = count >= min_bin_count
        bins.append(BinStat(float(value), count, float(sel.mean()), ci, displayed))
        if displayed:
            displayed_values.append(float(value))
    keep = np.isin(y, displayed_values)
    if keep.sum() >= 2 and np.unique(y[keep]).size >= 2:
        design = np.column_stack([np.ones(int(keep.sum())), y[keep]])
        beta, _, _, _ = np.linalg.lstsq(design, x[keep], rcond=None)
        intercept, slope = float(beta[0]), float(beta[1])
    else:
        intercept, slope = float("nan"), float("nan")
    return CorrelationResult(
        pearson_r=pearson,
        spearman_rho=spearman,
        n=int(x.size),
        bins=tuple(bins),
        fit_slope=slope,
        fit_intercept=intercept,
        fit_n=int(keep.sum()),
    )


def write_correlation_csv(path, result: CorrelationResult, manifest=None):
    with open(path, "w", encoding="utf-8") as fh:
        if manifest is not None:
            fh.write(f"# manifest: {manifest}\n")
        fh.write(f"# pearson_r={result.pearson_r!r} spearman_rho={result.spearman_rho!r} n={result.n}\n")
        fh.write(f"# fit_slope={result.fit_slope!r} fit_intercept={result.fit_intercept!r} fit_n={result.fit_n}\n")
        fh.write("bin_value,count,mean,ci95,displayed\n")
        for b in result.bins:
            fh.write(f"{b.value!r},{b.count},{b.mean!r},{b.ci95!r},{b.displayed}\n")


# ---------------------------------------------------------------------------
# Results serialization
# ---------------------------------------------------------------------------


def results_payload(results: Sequence[DllResult], metadata: dict, manifest=None) -> dict:
    payload = {
        "results": [r.summary() for r in results],
        "metadata": dict(metadata),
    }
    if manifest is not None:
        payload["manifest"] = manifest
    return payload


def write_results_json(path, results: Sequence[DllResult], metadata: dict, manifest=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(results_payload(results, metadata, manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
