"""Dependency storage cost: CoNLL-U parsing, counting, word alignment."""

import numpy as np
import pytest

from storecost.dlt import (
    DEFAULT_EXCLUDED,
    DependencyToken,
    DependencyTree,
    DltProfile,
    dlt_storage,
    parse_conllu,
    serialize_conllu,
    word_align,
)
from storecost.errors import AlignmentError, DataFormatError


def tree(arcs, sentence_id="t", forms=None):
    """arcs: list of (head, deprel) per token, 1-based heads (0 = root)."""
    n = len(arcs)
    forms = forms or [f"w{i}" for i in range(1, n + 1)]
    return DependencyTree(
        sentence_id,
        tuple(DependencyToken(f, h, rel) for f, (h, rel) in zip(forms, arcs)),
    )


# Hand-enumerated fixtures: (arcs, expected per-token counts).
HAND_TREES = [
    # "Mary met John": met->Mary nsubj, met->John obj
    ([(2, "nsubj"), (0, "root"), (2, "obj")], [1, 1, 0]),
    # single token
    ([(0, "root")], [0]),
    # all arcs punct -> excluded everywhere
    ([(2, "punct"), (0, "root"), (2, "punct")], [0, 0, 0]),
    # chain 1<-2<-3<-4
    ([(2, "amod"), (3, "nsubj"), (4, "obj"), (0, "root")], [1, 1, 1, 0]),
    # head-final: all depend on the last token
    ([(5, "nsubj"), (5, "obj"), (5, "iobj"), (5, "advmod"), (0, "root")], [1, 1, 1, 1, 0]),
    # head-initial: all depend on the first token
    ([(0, "root"), (1, "nsubj"), (1, "obj"), (1, "iobj"), (1, "advmod")], [4, 3, 2, 1, 0]),
    # punctuation mixed in: only the vocative arc counts
    ([(0, "root"), (1, "punct"), (1, "vocative"), (1, "punct")], [1, 1, 0, 0]),
    # six tokens, two heads, crossing arcs
    ([(6, "nsubj"), (4, "det"), (6, "advmod"), (6, "obj"), (4, "nmod"), (0, "root")],
     [1, 2, 2, 2, 1, 0]),
    # several seen co-dependents still count the unseen head once
    ([(4, "nsubj"), (4, "iobj"), (4, "obj"), (0, "root")], [1, 1, 1, 0]),
    # excluded 'dep' arc is inert; token 4 waits for its own head only
    ([(2, "nsubj"), (0, "root"), (2, "dep"), (5, "det"), (2, "obj")], [1, 1, 1, 1, 0]),
    # reparandum exclusion
    ([(2, "reparandum"), (0, "root"), (2, "obj")], [0, 1, 0]),
    # non-projective: arc 2<->4 crosses 1<->3
    ([(3, "nsubj"), (4, "mark"), (0, "root"), (3, "advcl")], [1, 2, 1, 0]),
]


@pytest.mark.parametrize("arcs,expected", HAND_TREES)
def test_hand_enumerated_counts(arcs, expected):
    assert list(dlt_storage(tree(arcs)).per_token) == expected


def test_subtype_labels_match_base_relation():
    # punct:weird is still punct for exclusion purposes
    counts = dlt_storage(tree([(2, "punct:weird"), (0, "root"), (2, "obj:sub")]))
    assert list(counts.per_token) == [0, 1, 0]


def test_unknown_exclusion_labels_are_inert():
    base = dlt_storage(tree([(2, "nsubj"), (0, "root"), (2, "obj")]))
    more = dlt_storage(
        tree([(2, "nsubj"), (0, "root"), (2, "obj")]),
        excluded=DEFAULT_EXCLUDED | {"nosuchlabel"},
    )
    assert base.per_token == more.per_token


# -- randomized properties ------------------------------------------------------

LABELS = ["nsubj", "obj", "det", "advmod", "nmod", "punct", "dep", "case"]


def random_tree(rng, n=None):
    n = n or int(rng.integers(2, 9))
    order = rng.permutation(n) + 1  # attachment order over positions
    heads = {int(order[0]): 0}
    labels = {int(order[0]): "root"}
    for idx in range(1, n):
        pos = int(order[idx])
        heads[pos] = int(order[int(rng.integers(0, idx))])
        labels[pos] = LABELS[int(rng.integers(0, len(LABELS)))]
    return tree([(heads[p], labels[p]) for p in range(1, n + 1)])


def brute_force_total(t, excluded=DEFAULT_EXCLUDED):
    """Independent accounting: each token pends from its earliest-seen
    co-dependent until its own position."""
    n = len(t)
    partners = {p: set() for p in range(1, n + 1)}
    for pos, tok in enumerate(t.tokens, start=1):
        if tok.head != 0 and tok.deprel.split(":")[0] not in excluded:
            partners[pos].add(tok.head)
            partners[tok.head].add(pos)
    total = 0
    for pos in range(1, n + 1):
        earlier = [u for u in partners[pos] if u < pos]
        if earlier:
            total += pos - min(earlier)
    return total


def test_total_matches_pending_span_accounting():
    rng = np.random.default_rng(17)
    for _ in range(200):
        t = random_tree(rng)
        assert dlt_storage(t).total == brute_force_total(t)


def test_exclusion_soundness_appended_excluded_token():
    rng = np.random.default_rng(29)
    for _ in range(100):
        t = random_tree(rng)
        n = len(t)
        extended = DependencyTree(
            t.sentence_id,
            t.tokens + (DependencyToken(".", int(rng.integers(1, n + 1)), "punct"),),
        )
        base = dlt_storage(t).per_token
        grown = dlt_storage(extended).per_token
        assert grown[:n] == base
        assert grown[n] == 0


def test_excluding_labels_never_increases_counts():
    rng = np.random.default_rng(31)
    for _ in range(100):
        t = random_tree(rng)
        base = np.array(dlt_storage(t).per_token)
        fewer = np.array(dlt_storage(t, excluded=DEFAULT_EXCLUDED | {"nsubj"}).per_token)
        assert np.all(fewer <= base)
    all_excluded = dlt_storage(t, excluded=frozenset(LABELS) | {"root"})
    assert all(v == 0 for v in all_excluded.per_token)


def test_aggregation_conservation_random_spacing():
    rng = np.random.default_rng(37)
    for _ in range(50):
        t = random_tree(rng)
        profile = dlt_storage(t)
        # glue random adjacent tokens together into whitespace words
        pieces = []
        for idx, tok in enumerate(t.tokens):
            if idx > 0 and rng.random() < 0.4:
                pieces.append("")  # no space
            elif idx > 0:
                pieces.append(" ")
            pieces.append(tok.form)
        raw = "".join(pieces)
        aligned = word_align(profile, raw)
        assert sum(aligned.per_word) == sum(profile.per_token)
        assert len(aligned.words) == len(raw.split())


# -- word alignment ---------------------------------------------------------------


def test_word_align_identity_and_contraction():
    t = tree([(2, "nsubj"), (0, "root"), (2, "obj")], forms=["do", "n't", "stop"])
    profile = DltProfile(t, (1, 2, 0))
    aligned = word_align(profile, "don't stop")
    assert aligned.words == ("don't", "stop")
    assert aligned.per_word == (3, 0)
    one_to_one = word_align(DltProfile(t, (1, 1, 1)), "do n't stop")
    assert one_to_one.per_word == (1, 1, 1)


def test_word_align_trailing_punctuation_attaches_left():
    t = tree([(0, "root"), (1, "punct")], forms=["end", "."])
    aligned = word_align(DltProfile(t, (2, 1)), "end.")
    assert aligned.per_word == (3,)


def test_word_align_mismatch_names_offender():
    t = tree([(0, "root")], forms=["hello"])
    with pytest.raises(AlignmentError) as err:
        word_align(DltProfile(t, (1,)), "goodbye")
    assert "hello" in str(err.value)


# -- CoNLL-U ingestion --------------------------------------------------------------

SAMPLE = """\
# sent_id = demo-1
# text = Mary met John
1\tMary\t_\t_\t_\t_\t2\tnsubj\t_\t_
2\tmet\t_\t_\t_\t_\t0\troot\t_\t_
3\tJohn\t_\t_\t_\t_\t2\tobj\t_\t_

# sent_id = demo-2
1-2\tcan't\t_\t_\t_\t_\t_\t_\t_\t_
1\tca\t_\t_\t_\t_\t0\troot\t_\t_
2\tn't\t_\t_\t_\t_\t1\tadvmod\t_\t_
3.1\tghost\t_\t_\t_\t_\t_\t_\t_\t_
3\tgo\t_\t_\t_\t_\t1\txcomp\t_\t_
"""


def test_parse_conllu_two_sentences():
    trees = parse_conllu(SAMPLE)
    assert [t.sentence_id for t in trees] == ["demo-1", "demo-2"]
    assert trees[0].forms == ("Mary", "met", "John")
    # multiword range and empty node skipped
    assert trees[1].forms == ("ca", "n't", "go")
    assert trees[1].tokens[2].head == 1


def test_parse_conllu_empty_input():
    assert parse_conllu("") == []
    assert parse_conllu("\n\n") == []


def test_parse_conllu_round_trip():
    original = parse_conllu(SAMPLE)
    again = parse_conllu(serialize_conllu(original))
    assert again == original


def test_parse_conllu_errors_carry_line_numbers():
    with pytest.raises(DataFormatError) as err:
        parse_conllu("1\tMary\t2\tnsubj\n")
    assert "line 1" in str(err.value)
    bad_head = "1\tMary\t_\t_\t_\t_\tx\tnsubj\t_\t_\n"
    with pytest.raises(DataFormatError) as err:
        parse_conllu(bad_head)
    assert "line 1" in str(err.value) and "head" in str(err.value)


def test_tree_validation():
    with pytest.raises(DataFormatError):
        tree([(1, "nsubj")])  # self loop
    with pytest.raises(DataFormatError):
        tree([(2, "nsubj"), (1, "obj")])  # cycle, no root
    with pytest.raises(DataFormatError):
        tree([(5, "nsubj"), (0, "root")])  # head out of range
