"""Stimulus generation and storage profiling for the two classic contrasts:
center-embedded vs. right-branching clauses, and subject vs. object
relative clauses.

Each contrast has 30 lexically matched sentence pairs built from fixed
templates with animate-noun and past-tense-verb slots. The bundled lexicon
reproduces the golden sentence files shipped under ``data/stimuli`` exactly;
generation is always verified against those files in tests rather than
trusted.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .errors import LexiconError, ParameterError, StorageComputationError
from .storage import storage_profile

TEMPLATES: dict[str, tuple[str, ...]] = {
    "CE": ("The", "N1", "who", "the", "N2", "who", "the", "N3", "V3", "V2", "V1", "the", "N4"),
    "RB": ("The", "N3", "V3", "the", "N2", "who", "V2", "the", "N1", "who", "V1", "the", "N4"),
    "SRC": ("The", "N1", "who", "V2", "the", "N2", "V1", "the", "N3"),
    "ORC": ("The", "N1", "who", "the", "N2", "V2", "V1", "the", "N3"),
}

PAIR_SETS = {"ce-rb": ("CE", "RB"), "src-orc": ("SRC", "ORC")}

_SLOT_NAMES = {"N1", "N2", "N3", "N4", "V1", "V2", "V3"}


@dataclass(frozen=True)
class TemplateSpec:
    template_id: str
    slots: tuple[str, ...]
    surface_pattern: tuple[str, ...]


def template_spec(template_id: str) -> TemplateSpec:
    try:
        pattern = TEMPLATES[template_id]
    except KeyError:
        raise ParameterError(f"unknown template {template_id!r}") from None
    slots = tuple(tok for tok in pattern if tok in _SLOT_NAMES)
    return TemplateSpec(template_id, slots, pattern)


@dataclass(frozen=True)
class StimulusItem:
    item_id: int
    condition: str
    sentence: tuple[str, ...]
    lexicon_choices: dict[str, str]

    @property
    def text(self) -> str:
        return " ".join(self.sentence)


def _pair_set_for(template_id: str) -> str:
    for name, members in PAIR_SETS.items():
        if template_id in members:
            return name
    raise ParameterError(f"unknown template {template_id!r}")


def load_lexicon(pair_set: str) -> list[dict[str, str]]:
    """Bundled slot-fill table: one row per item, keys n1..n4 / v1..v3."""
    if pair_set not in PAIR_SETS:
        raise ParameterError(f"unknown pair set {pair_set!r}")
    name = f"lexicon_{pair_set.replace('-', '_')}.csv"
    ref = resources.files("storecost").joinpath("data", "stimuli", name)
    with ref.open("r", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_fixture_sentences(template_id: str) -> list[str]:
    """Golden sentence list for one condition, exactly as bundled."""
    if template_id not in TEMPLATES:
        raise ParameterError(f"unknown template {template_id!r}")
    ref = resources.files("storecost").joinpath("data", "stimuli", f"{template_id.lower()}.txt")
    with ref.open("r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def generate(template_id: str, lexicon: Sequence[dict[str, str]] | None = None) -> list[StimulusItem]:
    """Instantiate the template once per lexicon row, in item order."""
    spec = template_spec(template_id)
    if lexicon is None:
        lexicon = load_lexicon(_pair_set_for(template_id))
    items = []
    for row_idx, row in enumerate(lexicon, start=1):
        item_id = int(row.get("item", row_idx))
        choices = {}
        for slot in spec.slots:
            fill = row.get(slot.lower()) or row.get(slot)
            if not fill:
                raise LexiconError(f"item {item_id}: no fill for slot {slot}")
            choices[slot] = fill
        sentence = tuple(choices.get(tok, tok) for tok in spec.surface_pattern)
        items.append(StimulusItem(item_id, template_id, sentence, choices))
    return items


def write_sentences(path, items: Iterable[StimulusItem]):
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(item.text + "\n")


# ---------------------------------------------------------------------------
# Profiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileSummary:
    condition: str
    n_items: int
    per_position_mean: tuple[float, ...]
    per_position_ci95: tuple[float, ...]
    per_item_totals: tuple[float, ...]
    total_mean: float
    total_sd: float
    approximate: bool = False


def _mean_ci(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = matrix.shape[0]
    mean = matrix.mean(axis=0)
    if n > 1:
        sd = matrix.std(axis=0, ddof=1)
        ci = 1.96 * sd / math.sqrt(n)
    else:
        ci = np.zeros_like(mean)
    return mean, ci


def profile_conditions(
    backend,
    items: Sequence[StimulusItem],
    max_distance: int | None = None,
    tokenizer=None,
) -> ProfileSummary:
    """Per-position mean storage across items of one condition, with 95% CIs.

    `tokenizer` maps a word tuple to a `SentenceTokens` (needed when the
    backend works on subword tokens); identity alignment otherwise.
    """
    if not items:
        raise ParameterError("no items to profile")
    condition = items[0].condition
    length = len(TEMPLATES[condition])
    profiles = []
    totals = []
    approximate = False
    for item in items:
        if item.condition != condition:
            raise ParameterError("profile_conditions expects a single condition")
        if len(item.sentence) != length:
            raise ParameterError(f"item {item.item_id} does not match the template length")
        sentence = tokenizer(item.sentence) if tokenizer is not None else item.sentence
        try:
            matrix, profile = storage_profile(backend, sentence, max_distance=max_distance)
        except StorageComputationError as exc:
            warnings.warn(f"item {item.item_id} skipped: {exc}", stacklevel=2)
            continue
        approximate = approximate or matrix.approximate
        profiles.append(profile.per_position)
        totals.append(profile.total)
    if not profiles:
        raise StorageComputationError(f"all {condition} items failed")
    grid = np.asarray(profiles, dtype=np.float64)
    mean, ci = _mean_ci(grid)
    totals_arr = np.asarray(totals, dtype=np.float64)
    total_sd = float(totals_arr.std(ddof=1)) if totals_arr.size > 1 else 0.0
    return ProfileSummary(
        condition=condition,
        n_items=len(profiles),
        per_position_mean=tuple(float(x) for x in mean),
        per_position_ci95=tuple(float(x) for x in ci),
        per_item_totals=tuple(float(x) for x in totals_arr),
        total_mean=float(totals_arr.mean()),
        total_sd=total_sd,
        approximate=approximate,
    )


def write_position_csv(path, summaries: Sequence[ProfileSummary], manifest=None):
    with open(path, "w", encoding="utf-8") as fh:
        if manifest is not None:
            fh.write(f"# manifest: {manifest}\n")
        fh.write("condition,position,word_slot,mean_bits,ci95\n")
        for summary in summaries:
            pattern = TEMPLATES[summary.condition]
            for pos, (mean, ci) in enumerate(
                zip(summary.per_position_mean, summary.per_position_ci95), start=1
            ):
                fh.write(f"{summary.condition},{pos},{pattern[pos - 1]},{mean!r},{ci!r}\n")


def write_totals_csv(path, summaries: Sequence[ProfileSummary], manifest=None):
    with open(path, "w", encoding="utf-8") as fh:
        if manifest is not None:
            fh.write(f"# manifest: {manifest}\n")
        fh.write("condition,item,total_bits\n")
        for summary in summaries:
            for item_idx, total in enumerate(summary.per_item_totals, start=1):
                fh.write(f"{summary.condition},{item_idx},{total!r}\n")


def plot_data(summaries: Sequence[ProfileSummary]) -> dict:
    """Plot-ready series: one line per condition with CI bars."""
    return {
        "series": [
            {
                "condition": s.condition,
                "positions": list(range(1, len(s.per_position_mean) + 1)),
                "mean_bits": list(s.per_position_mean),
                "ci95": list(s.per_position_ci95),
                "total_mean": s.total_mean,
                "total_sd": s.total_sd,
                "n_items": s.n_items,
            }
            for s in summaries
        ]
    }


def write_plot_json(path, summaries: Sequence[ProfileSummary], manifest=None):
    payload = plot_data(summaries)
    if manifest is not None:
        payload["manifest"] = manifest
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
