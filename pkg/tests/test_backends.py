"""Probability backends: exact joint model, masked n-gram, and loaders."""

import itertools

import numpy as np
import pytest

from storecost.backends import (
    MASK,
    ExactJointModel,
    MaskedNgramModel,
    MaskedQuery,
    TokenDistribution,
    Vocabulary,
    backend_identity,
    fit_ngram,
    load_corpus,
    load_joint_table,
)
from storecost.errors import (
    DataFormatError,
    ParameterError,
    ShapeError,
    UndefinedConditionalError,
    VocabularyError,
)

AB = Vocabulary(("a", "b"))


def model_from(table: dict[str, float], vocab=AB) -> ExactJointModel:
    n = len(next(iter(table)))
    joint = np.zeros((vocab.size,) * n)
    for seq, prob in table.items():
        joint[tuple(vocab.index(ch) for ch in seq)] = prob
    return ExactJointModel(vocab, joint)


# -- Vocabulary / TokenDistribution ------------------------------------------


def test_vocabulary_bijection_and_mask_reserved():
    vocab = Vocabulary(("x", "y", "z"))
    assert vocab.size == 3
    assert [vocab.index(s) for s in vocab.symbols] == [0, 1, 2]
    with pytest.raises(VocabularyError):
        vocab.index("w")
    with pytest.raises(ParameterError):
        Vocabulary(("x", "x"))
    with pytest.raises(ParameterError):
        Vocabulary(("x", MASK))


def test_token_distribution_normalization_guard():
    TokenDistribution.from_probs([0.5, 0.5])
    with pytest.raises(ParameterError):
        TokenDistribution(np.log2([0.7, 0.7]))
    with pytest.raises(ParameterError):
        TokenDistribution(np.array([0.0, -np.inf]))


def test_from_probs_floors_zeros_finite():
    dist = TokenDistribution.from_probs([1.0, 0.0])
    assert np.all(np.isfinite(dist.log_probs))
    assert dist.probs[0] == pytest.approx(1.0)
    assert dist.probs[1] == 0.0  # floor underflows back to zero


def test_masked_query_validation():
    q = MaskedQuery.build(["a", "b", "c"], [1])
    assert q.tokens == ("a", MASK, "c")
    assert q.mask_positions == (1,)
    with pytest.raises(ShapeError):
        MaskedQuery(("a", "b"), (1,))  # position 1 is not the sentinel
    with pytest.raises(ShapeError):
        MaskedQuery((MASK, MASK), (1, 0))  # not strictly increasing
    with pytest.raises(ShapeError):
        MaskedQuery.build(["a"], [4])


# -- ExactJointModel ----------------------------------------------------------


def test_predict_masked_uniform_joint():
    model = model_from({"aa": 0.25, "ab": 0.25, "ba": 0.25, "bb": 0.25})
    [dist] = model.predict_masked(MaskedQuery(("a", MASK), (1,)))
    assert np.allclose(dist.probs, [0.5, 0.5])


def test_predict_masked_deterministic_joint():
    model = model_from({"aa": 1.0})
    dists = model.predict_masked(MaskedQuery((MASK, MASK), (0, 1)))
    for dist in dists:
        assert dist.probs[0] == pytest.approx(1.0)


def test_predict_masked_derived_marginal():
    model = model_from({"aa": 0.4, "ab": 0.1, "ba": 0.25, "bb": 0.25})
    [dist] = model.predict_masked(MaskedQuery(("a", MASK), (1,)))
    assert np.allclose(dist.probs, [0.8, 0.2])


def test_predict_masked_errors():
    model = model_from({"aa": 1.0})
    with pytest.raises(VocabularyError):
        model.predict_masked(MaskedQuery(("c", MASK), (1,)))
    with pytest.raises(ShapeError):
        model.predict_masked(MaskedQuery(("a", MASK, MASK), (1, 2)))
    with pytest.raises(UndefinedConditionalError):
        model.predict_masked(MaskedQuery(("b", MASK), (1,)))


def test_joint_future_prob_examples():
    deterministic = model_from({"aa": 1.0})
    assert deterministic.joint_future_prob(["a"], ["a"]) == pytest.approx(1.0)
    uniform = model_from({"aa": 0.25, "ab": 0.25, "ba": 0.25, "bb": 0.25})
    assert uniform.joint_future_prob(["a"], ["b"]) == pytest.approx(0.5)
    table = model_from({"aa": 0.4, "ab": 0.1, "ba": 0.25, "bb": 0.25})
    assert table.joint_future_prob(["b"], ["a"]) == pytest.approx(0.5)
    with pytest.raises(UndefinedConditionalError):
        deterministic.joint_future_prob(["b"], ["a"])


def test_construction_guards():
    with pytest.raises(ParameterError):
        ExactJointModel(AB, np.array([[0.5, 0.5], [0.5, 0.5]]))  # sums to 2
    with pytest.raises(ParameterError):
        ExactJointModel(AB, np.array([[1.5, -0.5], [0.0, 0.0]]))
    big_vocab = Vocabulary(tuple("abcdefghi"))
    with pytest.raises(ParameterError):
        ExactJointModel(big_vocab, np.full((9,), 1.0 / 9))


def test_marginalization_matches_brute_force_enumeration():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        v = int(rng.integers(2, 5))
        vocab = Vocabulary(tuple("abcde"[:v]))
        joint = rng.gamma(1.0, size=(v,) * n)
        joint /= joint.sum()
        model = ExactJointModel(vocab, joint)
        tokens = [vocab.symbols[int(rng.integers(v))] for _ in range(n)]
        mask_at = sorted(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        query = MaskedQuery.build(tokens, mask_at)
        dists = model.predict_masked(query)
        # brute force: enumerate all full sequences consistent with the visible tokens
        for slot, dist in zip(query.mask_positions, dists):
            totals = np.zeros(v)
            for full in itertools.product(range(v), repeat=n):
                if any(
                    query.tokens[pos] != MASK and vocab.index(query.tokens[pos]) != full[pos]
                    for pos in range(n)
                ):
                    continue
                totals[full[slot]] += joint[full]
            expected = totals / totals.sum()
            assert np.allclose(dist.probs, expected, atol=1e-12)


def test_predict_masked_bitwise_deterministic():
    model = model_from({"aa": 0.4, "ab": 0.1, "ba": 0.25, "bb": 0.25})
    query = MaskedQuery(("a", MASK), (1,))
    first = model.predict_masked(query)[0].log_probs
    second = model.predict_masked(query)[0].log_probs
    assert np.array_equal(first, second)


# -- MaskedNgramModel ---------------------------------------------------------


def test_ngram_near_deterministic_with_tiny_alpha():
    model = MaskedNgramModel.fit([["a", "a"]], order=1, alpha=1e-9)
    [dist] = model.predict_masked(MaskedQuery((MASK, "a"), (0,)))
    assert dist.probs[0] == pytest.approx(1.0, abs=1e-6)


def test_ngram_bigram_smoothing_by_hand():
    model = fit_ngram([["a", "b"], ["a", "b"]], order=2, alpha=1.0)
    [dist] = model.predict_masked(MaskedQuery(("a", MASK), (1,)))
    # count(a -> b) = 2, context total 2, vocab 2: (2+1)/(2+2)
    assert dist.probs[model.vocabulary.index("b")] == pytest.approx(0.75)
    assert dist.probs[model.vocabulary.index("a")] == pytest.approx(0.25)


def test_ngram_masked_neighbor_falls_back_to_unigram():
    model = MaskedNgramModel.fit([["a", "b"], ["b", "b"]], order=2, alpha=0.5)
    # masked left neighbor: no visible context -> smoothed unigram
    [with_masked_ctx] = model.predict_masked(MaskedQuery((MASK, MASK), (1,)))
    # unigram counts: a=1, b=3 -> (1.5/5, 3.5/5)
    assert np.allclose(with_masked_ctx.probs, [1.5 / 5, 3.5 / 5])
    [start_of_seq] = model.predict_masked(MaskedQuery((MASK, "b"), (0,)))
    assert np.allclose(start_of_seq.probs, [1.5 / 5, 3.5 / 5])


def test_ngram_guards():
    with pytest.raises(ParameterError):
        MaskedNgramModel.fit([["a"]], order=0)
    with pytest.raises(ParameterError):
        MaskedNgramModel.fit([], order=1)
    with pytest.raises(VocabularyError):
        MaskedNgramModel.fit([["a", MASK]], order=1)
    model = MaskedNgramModel.fit([["a", "b"]], order=2)
    with pytest.raises(VocabularyError):
        model.predict_masked(MaskedQuery(("z", MASK), (1,)))


def test_ngram_determinism_and_normalization():
    corpus = [["a", "b", "a"], ["b", "b", "a"], ["a", "a", "b"]]
    one = MaskedNgramModel.fit(corpus, order=3, alpha=0.5)
    two = MaskedNgramModel.fit(corpus, order=3, alpha=0.5)
    query = MaskedQuery(("a", MASK, MASK), (1, 2))
    for d1, d2 in zip(one.predict_masked(query), two.predict_masked(query)):
        assert np.array_equal(d1.log_probs, d2.log_probs)
        assert np.exp2(d1.log_probs).sum() == pytest.approx(1.0, abs=1e-6)


# -- loaders ------------------------------------------------------------------


def test_load_corpus_and_joint_table(tmp_path):
    corpus_path = tmp_path / "corpus.txt"
    corpus_path.write_text("a b\n\nb a\n")
    assert load_corpus(corpus_path) == [["a", "b"], ["b", "a"]]

    table_path = tmp_path / "joint.tsv"
    table_path.write_text("a a\t0.4\na b\t0.1\nb a\t0.25\nb b\t0.25\n")
    model = load_joint_table(table_path)
    assert model.sentence_length == 2
    assert model.sequence_prob(["a", "a"]) == pytest.approx(0.4)


def test_load_joint_table_errors(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("a a 0.5\n")
    with pytest.raises(DataFormatError) as err:
        load_joint_table(bad)
    assert "line 1" in str(err.value)
    ragged = tmp_path / "ragged.tsv"
    ragged.write_text("a a\t0.5\na\t0.5\n")
    with pytest.raises(DataFormatError):
        load_joint_table(ragged)


def test_backend_identity_stable():
    model = model_from({"aa": 1.0})
    assert backend_identity(model) == backend_identity(model_from({"aa": 1.0}))
    ngram = fit_ngram([["a", "b"]], order=2, alpha=0.5)
    assert backend_identity(ngram).startswith("ngram:order=2")
    assert backend_identity(model) != backend_identity(ngram)
