"""Information-theoretic storage cost.

Central quantities, all in bits (log base 2):

* contextualized PMI of a context word with a concrete future continuation,
  given the rest of the context;
* predictive potential: its expectation over continuations, equal to the KL
  divergence between the predictive distributions with and without the word;
* information storage at position k: the sum of the predictive potentials of
  all preceding words.

Exact forms are brute-forced from an `ExactJointModel` table and serve as
oracles. The estimated form runs against any masked-prediction backend and
assumes conditional independence across future slots, summing one KL term
per masked future token.

Word positions `i` and `k` are 1-based throughout, matching the usual
notation; token indices inside queries are 0-based.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .backends import (
    LOG2_FLOOR,
    MASK,
    ExactJointModel,
    MaskedQuery,
    TopKDistribution,
)
from .errors import (
    BackendError,
    InfiniteDivergenceError,
    ParameterError,
    ShapeError,
    StorageComputationError,
    UndefinedConditionalError,
)

log = logging.getLogger(__name__)

# A log2 prob at or below this is an effective zero (the floor is -1074).
_ZERO_LOG2 = -1000.0
# Predictive potentials are analytically >= 0; float noise below this aborts.
NEGATIVE_NOISE_TOL = 1e-9


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------


def kl_divergence_bits(p, q) -> float:
    """KL(p || q) in bits; 0 log 0/q = 0; q zero under p support is an error."""
    if isinstance(p, TopKDistribution) or isinstance(q, TopKDistribution):
        if not (isinstance(p, TopKDistribution) and isinstance(q, TopKDistribution)):
            raise ShapeError("cannot mix full and top-k distributions in KL")
        return _kl_topk_bits(p, q)
    if p.size != q.size:
        raise ShapeError("KL requires distributions over the same vocabulary")
    if p.base != q.base:
        raise ShapeError("KL requires matching log bases")
    p_lp, q_lp = p.log_probs, q.log_probs
    bad = (q_lp <= _ZERO_LOG2) & (np.exp2(p_lp) > 1e-15)
    if np.any(bad):
        raise InfiniteDivergenceError(
            "q assigns zero probability where p has mass (backend should be zero-free)"
        )
    return float(kernels.kl_bits_rows(p_lp[None, :], q_lp[None, :])[0])


def _kl_topk_bits(p: TopKDistribution, q: TopKDistribution) -> float:
    """KL after coarsening both sides onto shared listed tokens plus a REST bucket.

    Tokens listed on only one side cannot be matched, so both tails (everything
    not listed on both sides) are lumped into REST before the divergence is
    taken. The coarsening can only shrink the divergence, which is the
    documented cost of top-k mode.
    """
    if p.vocab_size != q.vocab_size:
        raise ShapeError("KL requires distributions over the same vocabulary")
    q_map = dict(zip(q.indices, q.probs))
    shared = [i for i in p.indices if i in q_map]
    p_map = dict(zip(p.indices, p.probs))
    p_vec = np.array([p_map[i] for i in shared] + [0.0])
    q_vec = np.array([q_map[i] for i in shared] + [0.0])
    p_vec[-1] = max(1.0 - p_vec.sum(), 0.0)
    q_vec[-1] = max(1.0 - q_vec.sum(), 0.0)
    if q_vec[-1] <= 0.0 and p_vec[-1] > 1e-12:
        raise InfiniteDivergenceError("top-k REST bucket empty on q side but not on p side")
    p_vec /= p_vec.sum()
    q_vec /= q_vec.sum()
    with np.errstate(divide="ignore"):
        p_l2 = np.where(p_vec > 0, np.log2(np.where(p_vec > 0, p_vec, 1.0)), LOG2_FLOOR)
        q_l2 = np.where(q_vec > 0, np.log2(np.where(q_vec > 0, q_vec, 1.0)), LOG2_FLOOR)
    return float(kernels.kl_bits_rows(p_l2[None, :], q_l2[None, :])[0])


# ---------------------------------------------------------------------------
# Sentence/token alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SentenceTokens:
    """Whitespace words, backend tokens, and the word -> token-span alignment."""

    words: tuple[str, ...]
    tokens: tuple[str, ...]
    word_spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "word_spans", tuple((int(a), int(b)) for a, b in self.word_spans))
        if len(self.words) != len(self.word_spans):
            raise ShapeError("one token span per word required")
        cursor = 0
        for w, (a, b) in zip(self.words, self.word_spans):
            if a != cursor or b <= a:
                raise ShapeError(f"span {a, b} for word {w!r} does not continue the partition")
            cursor = b
        if cursor != len(self.tokens):
            raise ShapeError("word spans must partition the token sequence")

    @property
    def n_words(self) -> int:
        return len(self.words)

    def tokens_of_word(self, word_pos: int) -> range:
        """Token index range of 1-based word position."""
        a, b = self.word_spans[word_pos - 1]
        return range(a, b)

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "SentenceTokens":
        words = tuple(words)
        return cls(words, words, tuple((i, i + 1) for i in range(len(words))))


def _as_sentence(sentence) -> SentenceTokens:
    if isinstance(sentence, SentenceTokens):
        return sentence
    return SentenceTokens.from_words(tuple(sentence))


# ---------------------------------------------------------------------------
# Exact (oracle) forms on the joint table
# ---------------------------------------------------------------------------


def _check_pair(n: int, i: int, k: int):
    if not (1 <= i < k <= n):
        raise ParameterError(f"need 1 <= i < k <= N, got i={i}, k={k}, N={n}")


def contextualized_pmi_exact(
    model: ExactJointModel, sentence: Sequence[str], i: int, k: int, future: Sequence[str]
) -> float:
    """log2 of P(future | full context) over P(future | context without word i).

    Scalar table arithmetic only; the expectation-form oracle sums over this.
    Returns -inf for a future that is possible without w_i but not with it.
    """
    n = model.sentence_length
    _check_pair(n, i, k)
    if len(future) != n - k + 1:
        raise ShapeError(f"future must cover positions {k}..{n}")
    prefix = list(sentence[: k - 1])
    numer = model.joint_future_prob(prefix, future)
    ctx_wo_i = {pos: tok for pos, tok in enumerate(prefix) if pos != i - 1}
    denom_ctx = model.mass(ctx_wo_i)
    if denom_ctx == 0.0:
        raise UndefinedConditionalError("context without the target word has probability zero")
    both = dict(ctx_wo_i)
    both.update({k - 1 + j: tok for j, tok in enumerate(future)})
    denom = model.mass(both) / denom_ctx
    if numer == 0.0:
        return float("-inf")
    return float(np.log2(numer) - np.log2(denom))


def predictive_potential_exact(
    model: ExactJointModel, sentence: Sequence[str], i: int, k: int
) -> float:
    """Sequence-level KL form of the predictive potential, in bits."""
    return max(_pp_exact_raw(model, sentence, i, k), 0.0)


def _pp_exact_raw(model: ExactJointModel, sentence, i: int, k: int) -> float:
    n = model.sentence_length
    _check_pair(n, i, k)
    context = {pos: tok for pos, tok in enumerate(sentence[: k - 1])}
    future_positions = list(range(k - 1, n))
    p_plus = model.conditional_tensor(context, future_positions).ravel()
    ctx_minus = {pos: tok for pos, tok in context.items() if pos != i - 1}
    p_minus = model.conditional_tensor(ctx_minus, future_positions).ravel()
    support = p_plus > 0.0
    if np.any(support & (p_minus == 0.0)):
        raise InfiniteDivergenceError("future possible with w_i but impossible without it")
    value = float(
        np.sum(p_plus[support] * (np.log2(p_plus[support]) - np.log2(p_minus[support])))
    )
    if value < -NEGATIVE_NOISE_TOL:
        raise InfiniteDivergenceError(f"KL evaluated to {value}, below negative-noise tolerance")
    if value < 0.0:
        log.debug("clamping negative KL noise %.3e to 0", value)
    return value


def predictive_potential_expected_pmi(
    model: ExactJointModel, sentence: Sequence[str], i: int, k: int
) -> float:
    """Expectation-over-futures form: enumerate continuations one by one.

    Independent of the vectorized KL path; used to verify the identity
    between the two definitions.
    """
    n = model.sentence_length
    _check_pair(n, i, k)
    prefix = list(sentence[: k - 1])
    acc = 0.0
    for future in itertools.product(model.vocabulary.symbols, repeat=n - k + 1):
        p_future = model.joint_future_prob(prefix, future)
        if p_future == 0.0:
            continue
        acc += p_future * contextualized_pmi_exact(model, sentence, i, k, future)
    return acc


@dataclass(frozen=True)
class ChainRuleReport:
    """PP(i,k) against its decomposition into the next-word KL plus the rest."""

    total_bits: float
    next_word_bits: float
    expected_remainder_bits: float

    @property
    def gap(self) -> float:
        return self.total_bits - (self.next_word_bits + self.expected_remainder_bits)


def verify_chain_rule(
    model: ExactJointModel, sentence: Sequence[str], i: int, k: int
) -> ChainRuleReport:
    """Decompose PP(i,k) = KL over slot k + E_{w_k}[PP(i,k+1)] on the table."""
    n = model.sentence_length
    _check_pair(n, i, k)
    if k >= n:
        raise ParameterError("chain-rule decomposition needs k < N")
    total = _pp_exact_raw(model, sentence, i, k)
    context = {pos: tok for pos, tok in enumerate(sentence[: k - 1])}
    p_next = model.conditional_tensor(context, [k - 1])
    ctx_minus = {pos: tok for pos, tok in context.items() if pos != i - 1}
    q_next = model.conditional_tensor(ctx_minus, [k - 1])
    support = p_next > 0.0
    if np.any(support & (q_next == 0.0)):
        raise InfiniteDivergenceError("next word possible with w_i but impossible without it")
    slot_kl = float(
        np.sum(p_next[support] * (np.log2(p_next[support]) - np.log2(q_next[support])))
    )
    remainder = 0.0
    for v_idx, symbol in enumerate(model.vocabulary.symbols):
        if p_next[v_idx] == 0.0:
            continue
        extended = list(sentence)
        extended[k - 1] = symbol
        remainder += float(p_next[v_idx]) * _pp_exact_raw(model, extended, i, k + 1)
    return ChainRuleReport(total, slot_kl, remainder)


def expected_next_step_potential(
    model: ExactJointModel, sentence: Sequence[str], i: int, k: int
) -> tuple[float, float]:
    """(E_{w_k}[PP(i,k+1)], PP(i,k)): the monotone-decay comparison pair."""
    report = verify_chain_rule(model, sentence, i, k)
    return report.expected_remainder_bits, report.total_bits


# ---------------------------------------------------------------------------
# Estimated form against any masked-prediction backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PotentialEstimate:
    bits: float
    approximate: bool


def predictive_potential_estimated(
    backend, sentence, i: int, k: int
) -> PotentialEstimate:
    """Conditional-independence estimator over the masked future region.

    Builds the two inputs (target word visible vs. masked, all future tokens
    masked) and sums per-slot KL divergences between the paired predictive
    distributions. All subword tokens of word i are masked together; the
    future is masked at token granularity per the word alignment.
    """
    sent = _as_sentence(sentence)
    _check_pair(sent.n_words, i, k)
    future_token_positions = list(range(sent.word_spans[k - 1][0], len(sent.tokens)))
    plus_query = MaskedQuery.build(sent.tokens, future_token_positions)
    minus_tokens = list(plus_query.tokens)
    for pos in sent.tokens_of_word(i):
        minus_tokens[pos] = MASK  # replaced, not requested back
    minus_query = MaskedQuery(tuple(minus_tokens), tuple(future_token_positions))
    q_plus = backend.predict_masked(plus_query)
    q_minus = backend.predict_masked(minus_query)
    if len(q_plus) != len(future_token_positions) or len(q_minus) != len(future_token_positions):
        raise ShapeError("backend returned the wrong number of slot distributions")
    bits = 0.0
    approximate = False
    for dist_plus, dist_minus in zip(q_plus, q_minus):
        bits += kl_divergence_bits(dist_plus, dist_minus)
        approximate = approximate or dist_plus.approximate or dist_minus.approximate
    if bits < -NEGATIVE_NOISE_TOL:
        raise InfiniteDivergenceError(f"estimator produced {bits} bits")
    if bits < 0.0:
        log.debug("clamping negative estimator noise %.3e to 0", bits)
    return PotentialEstimate(max(bits, 0.0), approximate)


# ---------------------------------------------------------------------------
# Sentence profiles and corpus curves
# ---------------------------------------------------------------------------


@dataclass
class PredictivePotentialMatrix:
    """Strictly upper-triangular PP values in bits, 1-based (i, k) indexing."""

    n: int
    values: np.ndarray  # (n+1, n+1); NaN where undefined
    approximate: bool = False
    windowed: bool = False

    @classmethod
    def empty(cls, n: int) -> "PredictivePotentialMatrix":
        values = np.full((n + 1, n + 1), np.nan)
        return cls(n=n, values=values)

    def set(self, i: int, k: int, bits: float):
        _check_pair(self.n, i, k)
        self.values[i, k] = bits

    def get(self, i: int, k: int) -> float:
        _check_pair(self.n, i, k)
        return float(self.values[i, k])

    def defined_entries(self) -> list[tuple[int, int, float]]:
        out = []
        for i in range(1, self.n + 1):
            for k in range(i + 1, self.n + 1):
                v = self.values[i, k]
                if not np.isnan(v):
                    out.append((i, k, float(v)))
        return out

    def column_sum(self, k: int) -> float:
        """Sum over i < k of defined entries, ascending i (canonical order)."""
        total = 0.0
        for i in range(1, k):
            v = self.values[i, k]
            if not np.isnan(v):
                total += float(v)
        return total


@dataclass(frozen=True)
class StorageProfile:
    """Stor(k) per 1-based position, plus the sentence total, in bits."""

    per_position: tuple[float, ...]
    windowed: bool = False

    @property
    def total(self) -> float:
        return float(sum(self.per_position))


def storage_profile(
    backend, sentence, max_distance: int | None = None
) -> tuple[PredictivePotentialMatrix, StorageProfile]:
    """Fill the PP grid for one sentence and sum columns into Stor(k).

    `max_distance` bounds k - i (window); Stor is then a windowed sum and the
    outputs are labeled accordingly. Backend errors abort the sentence and
    carry the partially filled matrix.
    """
    sent = _as_sentence(sentence)
    if sent.n_words == 0:
        raise ParameterError("sentence must be nonempty")
    if max_distance is not None and max_distance < 1:
        raise ParameterError("max_distance must be >= 1")
    n = sent.n_words
    matrix = PredictivePotentialMatrix.empty(n)
    matrix.windowed = max_distance is not None and max_distance < n - 1
    for k in range(2, n + 1):
        lo = 1 if max_distance is None else max(1, k - max_distance)
        for i in range(lo, k):
            try:
                estimate = predictive_potential_estimated(backend, sent, i, k)
            except BackendError as exc:
                raise StorageComputationError(
                    f"backend failed at (i={i}, k={k}): {exc}", partial=matrix
                ) from exc
            matrix.set(i, k, estimate.bits)
            matrix.approximate = matrix.approximate or estimate.approximate
    profile = StorageProfile(
        per_position=tuple(matrix.column_sum(k) for k in range(1, n + 1)),
        windowed=matrix.windowed,
    )
    return matrix, profile


@dataclass(frozen=True)
class DecayCurve:
    """Mean predictive potential per distance d = k - i, with bin counts."""

    distances: tuple[int, ...]
    means: tuple[float, ...]
    counts: tuple[int, ...]
    approximate: bool = False


def decay_curve(backend, corpus: Iterable, max_distance: int = 30) -> DecayCurve:
    """Aggregate PP(i,k) by distance over a corpus of sentences."""
    sums = np.zeros(max_distance + 1)
    counts = np.zeros(max_distance + 1, dtype=np.int64)
    approximate = False
    seen = False
    for sentence in corpus:
        seen = True
        matrix, _ = storage_profile(backend, sentence, max_distance=max_distance)
        approximate = approximate or matrix.approximate
        for i, k, bits in matrix.defined_entries():
            d = k - i
            if d <= max_distance:
                sums[d] += bits
                counts[d] += 1
    if not seen:
        raise ParameterError("corpus must be nonempty")
    distances = tuple(range(1, max_distance + 1))
    means = tuple(
        float(sums[d] / counts[d]) if counts[d] else float("nan") for d in distances
    )
    return DecayCurve(distances, means, tuple(int(counts[d]) for d in distances), approximate)


# ---------------------------------------------------------------------------
# Output schema
# ---------------------------------------------------------------------------


def storage_record(
    sentence_id: str,
    sent: SentenceTokens,
    matrix: PredictivePotentialMatrix,
    profile: StorageProfile,
    manifest: str | None = None,
) -> dict:
    """One JSONL record: sentence id, words, sparse PP entries, Stor vector."""
    record = {
        "sentence_id": sentence_id,
        "words": list(sent.words),
        "pp_matrix": [[i, k, bits] for i, k, bits in matrix.defined_entries()],
        "storage": list(profile.per_position),
        "approximate": matrix.approximate,
        "windowed": matrix.windowed,
    }
    if manifest is not None:
        record["manifest"] = manifest
    return record


def write_storage_jsonl(path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
