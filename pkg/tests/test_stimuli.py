"""Stimulus templates, golden fixtures, and condition profiling."""

from collections import Counter

import numpy as np
import pytest

from helpers import ConstantBackend
from storecost.backends import MaskedNgramModel
from storecost.errors import LexiconError, ParameterError
from storecost.stimuli import (
    TEMPLATES,
    ProfileSummary,
    generate,
    load_fixture_sentences,
    load_lexicon,
    plot_data,
    profile_conditions,
    template_spec,
    write_position_csv,
    write_sentences,
    write_totals_csv,
)


def test_template_specs():
    ce = template_spec("CE")
    assert ce.slots == ("N1", "N2", "N3", "V3", "V2", "V1", "N4")
    assert len(ce.surface_pattern) == 13
    assert len(template_spec("SRC").surface_pattern) == 9
    with pytest.raises(ParameterError):
        template_spec("XX")


def test_first_items_match_published_examples():
    assert generate("CE")[0].text == (
        "The actor who the doctor who the reporter watched visited called the dancer"
    )
    assert generate("SRC")[0].text == (
        "The actor who called the doctor praised the reporter"
    )


@pytest.mark.parametrize("condition", ["CE", "RB", "SRC", "ORC"])
def test_generation_reproduces_bundled_fixtures_exactly(condition):
    fixtures = load_fixture_sentences(condition)
    generated = [item.text for item in generate(condition)]
    assert generated == fixtures
    assert len(generated) == 30


@pytest.mark.parametrize("pair", [("CE", "RB"), ("SRC", "ORC")])
def test_conditions_lexically_matched(pair):
    left, right = (generate(c) for c in pair)
    for a, b in zip(left, right):
        assert Counter(a.sentence) == Counter(b.sentence)


def test_generate_deterministic_bytes(tmp_path):
    out1, out2 = tmp_path / "a.txt", tmp_path / "b.txt"
    write_sentences(out1, generate("ORC"))
    write_sentences(out2, generate("ORC"))
    assert out1.read_bytes() == out2.read_bytes()


def test_missing_slot_fill_raises():
    lexicon = load_lexicon("ce-rb")
    broken = [dict(row) for row in lexicon]
    broken[3]["v2"] = ""
    with pytest.raises(LexiconError) as err:
        generate("CE", broken)
    assert "V2" in str(err.value)


def test_profile_zero_backend_all_zero():
    items = generate("SRC")
    summary = profile_conditions(ConstantBackend([0.5, 0.5]), items)
    assert summary.n_items == 30
    assert all(m == pytest.approx(0.0) for m in summary.per_position_mean)
    assert summary.total_mean == pytest.approx(0.0)
    assert summary.total_sd == pytest.approx(0.0)


def test_profile_statistics_shapes_and_ci():
    corpus = [item.sentence for item in generate("ORC")]
    backend = MaskedNgramModel.fit(corpus, order=2, alpha=0.5)
    items = generate("ORC")[:5]
    summary = profile_conditions(backend, items)
    assert summary.n_items == 5
    assert len(summary.per_position_mean) == len(TEMPLATES["ORC"])
    totals = np.array(summary.per_item_totals)
    assert summary.total_mean == pytest.approx(totals.mean())
    assert summary.total_sd == pytest.approx(totals.std(ddof=1))
    # 95% CI from the sample sd over items
    grid_sd = np.array(summary.per_position_ci95)
    assert np.all(grid_sd >= 0)


def test_profile_rejects_mixed_conditions():
    items = generate("SRC")[:2] + generate("ORC")[:2]
    with pytest.raises(ParameterError):
        profile_conditions(ConstantBackend([0.5, 0.5]), items)


def test_csv_and_plot_outputs(tmp_path):
    summary = ProfileSummary(
        condition="SRC",
        n_items=2,
        per_position_mean=tuple(float(i) for i in range(9)),
        per_position_ci95=tuple(0.1 for _ in range(9)),
        per_item_totals=(10.0, 12.0),
        total_mean=11.0,
        total_sd=1.4142,
    )
    positions = tmp_path / "pos.csv"
    totals = tmp_path / "tot.csv"
    write_position_csv(positions, [summary], manifest="m1")
    write_totals_csv(totals, [summary], manifest="m1")
    pos_lines = positions.read_text().splitlines()
    assert pos_lines[0] == "# manifest: m1"
    assert pos_lines[1] == "condition,position,word_slot,mean_bits,ci95"
    assert pos_lines[2].startswith("SRC,1,The,")
    assert len(pos_lines) == 2 + 9
    payload = plot_data([summary])
    assert payload["series"][0]["condition"] == "SRC"
    assert payload["series"][0]["total_mean"] == 11.0
