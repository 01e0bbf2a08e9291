"""Probability-model backends behind a common masked-prediction contract.

Two internal backends are provided: an exact joint-distribution model with
brute-force conditionals (small vocabularies only, used as an oracle) and a
count-based masked n-gram model. Both answer `predict_masked` queries, the
same contract the network client in `lm_client` presents, so everything in
`storage` is backend-agnostic.

All distributions are exposed as log2 probabilities. Zeros are floored at
``LOG2_FLOOR`` so every entry stays finite; the floor is far below every
tolerance used anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataFormatError,
    ParameterError,
    ShapeError,
    UndefinedConditionalError,
    VocabularyError,
)

MASK = "[MASK]"

# Below the subnormal range: exp2 of it underflows to 0.0 exactly, which is
# what makes the 0*log(0/q) convention automatic in the KL kernels.
LOG2_FLOOR = -1100.0

_NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class Vocabulary:
    """Ordered set of token strings; index lookup is a bijection."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if not self.symbols:
            raise ParameterError("vocabulary must be nonempty")
        if len(set(self.symbols)) != len(self.symbols):
            raise ParameterError("vocabulary symbols must be unique")
        if MASK in self.symbols:
            raise ParameterError(f"the mask sentinel {MASK!r} is reserved")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise VocabularyError(f"unknown token {symbol!r}") from None

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.intp)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    @classmethod
    def from_corpus(cls, corpus: Iterable[Sequence[str]]) -> "Vocabulary":
        seen = sorted({tok for seq in corpus for tok in seq})
        return cls(tuple(seen))


@dataclass(frozen=True)
class TokenDistribution:
    """Categorical distribution over a vocabulary, stored as log2 probs."""

    log_probs: np.ndarray
    base: str = "log2"

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        object.__setattr__(self, "log_probs", lp)
        if self.base != "log2":
            raise ParameterError("TokenDistribution only carries base 'log2'")
        if lp.ndim != 1 or lp.size == 0:
            raise ShapeError("log_probs must be a nonempty 1-D vector")
        if not np.all(np.isfinite(lp)):
            raise ParameterError("log_probs must be finite (floor zeros instead)")
        total = float(np.exp2(lp).sum())
        if abs(total - 1.0) > _NORMALIZATION_TOL:
            raise ParameterError(f"distribution mass {total} outside 1±{_NORMALIZATION_TOL}")

    @property
    def size(self) -> int:
        return int(self.log_probs.size)

    @property
    def probs(self) -> np.ndarray:
        return np.exp2(self.log_probs)

    @property
    def approximate(self) -> bool:
        return False

    @classmethod
    def from_probs(cls, probs: Sequence[float]) -> "TokenDistribution":
        p = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            lp = np.log2(p)
        return cls(np.where(np.isfinite(lp), lp, LOG2_FLOOR))


@dataclass(frozen=True)
class TopKDistribution:
    """Truncated distribution: top-k (index, prob) entries plus a lumped tail.

    Only produced by the server client in top-k mode; always approximate.
    """

    indices: tuple[int, ...]
    probs: tuple[float, ...]
    rest_mass: float
    vocab_size: int

    def __post_init__(self):
        if len(self.indices) != len(self.probs) or not self.indices:
            raise ShapeError("top-k entries must be nonempty and aligned")
        if len(set(self.indices)) != len(self.indices):
            raise ParameterError("top-k indices must be distinct")
        total = sum(self.probs) + self.rest_mass
        if abs(total - 1.0) > 1e-4:
            raise ParameterError(f"top-k mass {total} outside 1±1e-4")

    @property
    def approximate(self) -> bool:
        return True


def _check_masked_query(tokens, mask_positions):
    positions = tuple(int(p) for p in mask_positions)
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise ShapeError("mask_positions must be strictly increasing")
    for p in positions:
        if not 0 <= p < len(tokens):
            raise ShapeError(f"mask position {p} out of range")
        if tokens[p] != MASK:
            raise ShapeError(f"position {p} does not hold the mask sentinel")
    return positions


@dataclass(frozen=True)
class MaskedQuery:
    """Token sequence with designated masked slots (0-based positions)."""

    tokens: tuple[str, ...]
    mask_positions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(
            self, "mask_positions", _check_masked_query(self.tokens, self.mask_positions)
        )

    @classmethod
    def build(cls, tokens: Sequence[str], mask_positions: Iterable[int]) -> "MaskedQuery":
        """Replace the given positions with the mask sentinel."""
        toks = list(tokens)
        positions = sorted(set(int(p) for p in mask_positions))
        for p in positions:
            if not 0 <= p < len(toks):
                raise ShapeError(f"mask position {p} out of range")
            toks[p] = MASK
        return cls(tuple(toks), tuple(positions))


class ExactJointModel:
    """Explicit joint distribution over fixed-length token sequences.

    Every conditional and marginal is computed directly from the table, so
    the model serves as the brute-force oracle for the information-theoretic
    identities. Construction is guarded to oracle sizes (N <= 8, vocab <= 8).
    """

    def __init__(self, vocabulary: Vocabulary, joint: np.ndarray):
        joint = np.asarray(joint, dtype=np.float64)
        n = joint.ndim
        if n < 1 or n > 8:
            raise ParameterError("exact joint supports sentence lengths 1..8")
        if vocabulary.size > 8:
            raise ParameterError("exact joint supports vocabularies up to 8 symbols")
        if joint.shape != (vocabulary.size,) * n:
            raise ShapeError("joint table shape must be (vocab size,) * N")
        if np.any(joint < 0):
            raise ParameterError("joint probabilities must be nonnegative")
        if abs(float(joint.sum()) - 1.0) > 1e-12:
            raise ParameterError("joint table must sum to 1 within 1e-12")
        self.vocabulary = vocabulary
        self.joint = joint
        self.sentence_length = n

    def __repr__(self):
        return f"ExactJointModel(N={self.sentence_length}, vocab={self.vocabulary.size})"

    # -- table access -----------------------------------------------------

    def mass(self, assignment: dict[int, str]) -> float:
        """Total probability with the given 0-based slots fixed, others free."""
        key = [slice(None)] * self.sentence_length
        for pos, tok in assignment.items():
            key[pos] = self.vocabulary.index(tok)
        sub = self.joint[tuple(key)]
        return float(sub) if np.ndim(sub) == 0 else float(sub.sum())

    def sequence_prob(self, tokens: Sequence[str]) -> float:
        if len(tokens) != self.sentence_length:
            raise ShapeError("sequence length must equal the model length")
        return self.mass(dict(enumerate(tokens)))

    def joint_future_prob(self, prefix: Sequence[str], future: Sequence[str]) -> float:
        """Exact P(future | prefix): table mass ratio."""
        if len(prefix) + len(future) != self.sentence_length:
            raise ShapeError("|prefix| + |future| must equal the model length")
        prefix_mass = self.mass(dict(enumerate(prefix)))
        if prefix_mass == 0.0:
            raise UndefinedConditionalError("conditioning prefix has probability zero")
        both = dict(enumerate(prefix))
        both.update({len(prefix) + j: tok for j, tok in enumerate(future)})
        return self.mass(both) / prefix_mass

    def conditional_tensor(
        self, context: dict[int, str], free_positions: Sequence[int]
    ) -> np.ndarray:
        """P(slots in free_positions | context), axes ordered as given.

        Positions absent from both are marginalized out.
        """
        key = [slice(None)] * self.sentence_length
        for pos, tok in context.items():
            key[pos] = self.vocabulary.index(tok)
        sub = self.joint[tuple(key)]
        remaining = [p for p in range(self.sentence_length) if p not in context]
        keep_axes = [remaining.index(p) for p in free_positions]
        drop_axes = tuple(a for a in range(len(remaining)) if a not in keep_axes)
        marg = sub.sum(axis=drop_axes) if drop_axes else sub
        if len(keep_axes) > 1:
            surviving = sorted(keep_axes)
            marg = np.transpose(marg, axes=[surviving.index(a) for a in keep_axes])
        total = float(marg.sum())
        if total == 0.0:
            raise UndefinedConditionalError("conditioning context has probability zero")
        return marg / total

    # -- masked-prediction contract ----------------------------------------

    def predict_masked(self, query: MaskedQuery) -> list[TokenDistribution]:
        if len(query.tokens) != self.sentence_length:
            raise ShapeError(
                f"query length {len(query.tokens)} != model length {self.sentence_length}"
            )
        context = {}
        for pos, tok in enumerate(query.tokens):
            if tok != MASK:
                self.vocabulary.index(tok)
                context[pos] = tok
        out = []
        for pos in query.mask_positions:
            marginal = self.conditional_tensor(context, [pos])
            out.append(TokenDistribution.from_probs(marginal))
        return out


class MaskedNgramModel:
    """Add-alpha smoothed n-gram model answering masked queries.

    Each masked slot is predicted from the longest visible context suffix in
    its preceding window of ``order - 1`` tokens; a masked neighbor truncates
    the context, and an empty context falls back to the smoothed unigram.
    """

    def __init__(self, vocabulary: Vocabulary, order: int, alpha: float, counts, totals):
        if order < 1:
            raise ParameterError("n-gram order must be >= 1")
        if alpha <= 0:
            raise ParameterError("smoothing alpha must be positive")
        self.vocabulary = vocabulary
        self.order = order
        self.alpha = float(alpha)
        self._counts = counts  # context tuple -> np[vocab] counts
        self._totals = totals  # context tuple -> int

    def __repr__(self):
        return f"MaskedNgramModel(order={self.order}, alpha={self.alpha}, vocab={self.vocabulary.size})"

    @classmethod
    def fit(
        cls, corpus: Sequence[Sequence[str]], order: int, alpha: float = 0.5
    ) -> "MaskedNgramModel":
        if order < 1:
            raise ParameterError("n-gram order must be >= 1")
        if not corpus:
            raise ParameterError("corpus must be nonempty")
        for seq in corpus:
            if MASK in seq:
                raise VocabularyError(f"the mask sentinel {MASK!r} may not appear in a corpus")
        vocab = Vocabulary.from_corpus(corpus)
        counts: dict[tuple[str, ...], np.ndarray] = {}
        totals: dict[tuple[str, ...], int] = {}
        for seq in corpus:
            for j, tok in enumerate(seq):
                tok_id = vocab.index(tok)
                for length in range(min(order - 1, j) + 1):
                    ctx = tuple(seq[j - length : j])
                    if ctx not in counts:
                        counts[ctx] = np.zeros(vocab.size, dtype=np.float64)
                        totals[ctx] = 0
                    counts[ctx][tok_id] += 1
                    totals[ctx] += 1
        return cls(vocab, order, alpha, counts, totals)

    def _context_for(self, tokens: Sequence[str], pos: int) -> tuple[str, ...]:
        ctx: list[str] = []
        j = pos - 1
        while j >= 0 and len(ctx) < self.order - 1 and tokens[j] != MASK:
            ctx.append(tokens[j])
            j -= 1
        return tuple(reversed(ctx))

    def predict_masked(self, query: MaskedQuery) -> list[TokenDistribution]:
        for tok in query.tokens:
            if tok != MASK:
                self.vocabulary.index(tok)
        out = []
        v = self.vocabulary.size
        for pos in query.mask_positions:
            ctx = self._context_for(query.tokens, pos)
            counts = self._counts.get(ctx)
            total = self._totals.get(ctx, 0)
            numer = (counts if counts is not None else np.zeros(v)) + self.alpha
            probs = numer / (total + self.alpha * v)
            out.append(TokenDistribution.from_probs(probs))
        return out


def fit_ngram(corpus, order: int, alpha: float = 0.5) -> MaskedNgramModel:
    return MaskedNgramModel.fit(corpus, order, alpha)


def predict_masked(model, query: MaskedQuery) -> list[TokenDistribution]:
    """Free-function form of the backend contract."""
    return model.predict_masked(query)


# -- plain-text loaders ----------------------------------------------------


def load_corpus(path) -> list[list[str]]:
    """One sequence per line, whitespace-separated tokens; blank lines skipped."""
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                corpus.append(toks)
    if not corpus:
        raise DataFormatError(f"no sequences in {path}")
    return corpus


def load_joint_table(path) -> ExactJointModel:
    """Two-column text format: `sequence<TAB>probability` per line."""
    rows: list[tuple[list[str], float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError("expected `sequence<TAB>probability`", lineno)
            tokens = parts[0].split()
            if not tokens:
                raise DataFormatError("empty sequence", lineno)
            try:
                prob = float(parts[1])
            except ValueError:
                raise DataFormatError(f"bad probability {parts[1]!r}", lineno) from None
            rows.append((tokens, prob))
    if not rows:
        raise DataFormatError(f"no table rows in {path}")
    n = len(rows[0][0])
    if any(len(tokens) != n for tokens, _ in rows):
        raise DataFormatError(f"all sequences in {path} must have the same length")
    vocab = Vocabulary(tuple(sorted({t for tokens, _ in rows for t in tokens})))
    joint = np.zeros((vocab.size,) * n, dtype=np.float64)
    for tokens, prob in rows:
        joint[tuple(vocab.index(t) for t in tokens)] += prob
    return ExactJointModel(vocab, joint)


def backend_identity(model) -> str:
    """Stable identity string used for manifests and the result cache."""
    import hashlib

    if isinstance(model, ExactJointModel):
        digest = hashlib.sha256()
        digest.update(",".join(model.vocabulary.symbols).encode())
        digest.update(np.ascontiguousarray(model.joint).tobytes())
        return f"exact:{digest.hexdigest()[:12]}"
    if isinstance(model, MaskedNgramModel):
        digest = hashlib.sha256()
        digest.update(",".join(model.vocabulary.symbols).encode())
        for ctx in sorted(model._counts):
            digest.update("\x1f".join(ctx).encode() + b"\x1e")
            digest.update(model._counts[ctx].tobytes())
        return f"ngram:order={model.order},alpha={model.alpha},counts={digest.hexdigest()[:12]}"
    identity = getattr(model, "identity", None)
    if identity is not None:
        return identity() if callable(identity) else str(identity)
    return f"backend:{type(model).__name__}"
