"""Oracle suites over randomized exact joint models.

Checks, each on brute-forced table arithmetic:

* identity of the expectation-over-futures form and the KL form of the
  predictive potential;
* the chain-rule decomposition PP(i,k) = next-word KL + E[PP(i,k+1)];
* monotone non-increase of the potential in expectation over the next word;
* agreement of the masked-slot independence estimator with the exact KL on
  joints whose only dependence is a single slot pair;
* determinism of the estimator-vs-exact gap on a fixed dependent joint.
"""

from __future__ import annotations

import itertools
import string

import numpy as np

from .backends import ExactJointModel, Vocabulary
from .storage import (
    predictive_potential_estimated,
    predictive_potential_exact,
    predictive_potential_expected_pmi,
    verify_chain_rule,
)

TOLERANCE = 1e-9

# Fixed 3-token joint with dependent future slots; the independence
# estimator is biased here and the signed bias must be reproducible.
DEPENDENT_JOINT_3 = {
    "aaa": 0.15, "aab": 0.05, "aba": 0.10, "abb": 0.10,
    "baa": 0.05, "bab": 0.15, "bba": 0.20, "bbb": 0.20,
}
DEPENDENT_SENTENCE_3 = ("a", "b", "a")


def model_from_dict(table: dict[str, float]) -> ExactJointModel:
    n = len(next(iter(table)))
    vocab = Vocabulary(tuple(sorted({ch for key in table for ch in key})))
    joint = np.zeros((vocab.size,) * n)
    for key, prob in table.items():
        joint[tuple(vocab.index(ch) for ch in key)] = prob
    return ExactJointModel(vocab, joint)


def random_exact_model(
    rng: np.random.Generator, max_n: int = 5, max_vocab: int = 4, sparse: bool = True
) -> tuple[ExactJointModel, tuple[str, ...]]:
    """Random joint (possibly with structural zeros) plus an observed sentence."""
    n = int(rng.integers(2, max_n + 1))
    v = int(rng.integers(2, max_vocab + 1))
    vocab = Vocabulary(tuple(string.ascii_lowercase[:v]))
    joint = rng.gamma(1.0, size=(v,) * n)
    if sparse and rng.random() < 0.5:
        mask = rng.random(joint.shape) < 0.3
        if not mask.all():
            joint = np.where(mask, 0.0, joint)
    joint /= joint.sum()
    flat_index = int(rng.choice(joint.size, p=joint.ravel()))
    sentence = tuple(
        vocab.symbols[idx] for idx in np.unravel_index(flat_index, joint.shape)
    )
    return ExactJointModel(vocab, joint), sentence


def random_pairwise_model(
    rng: np.random.Generator, max_n: int = 5, max_vocab: int = 4
) -> tuple[ExactJointModel, tuple[str, ...]]:
    """Joint where exactly one slot pair is dependent, all else independent.

    Every future region then factorizes given any context, so the
    independence estimator is exact on these models.
    """
    n = int(rng.integers(3, max_n + 1))
    v = int(rng.integers(2, max_vocab + 1))
    vocab = Vocabulary(tuple(string.ascii_lowercase[:v]))
    i_star = int(rng.integers(0, n - 1))
    k_star = int(rng.integers(i_star + 1, n))
    pair = rng.gamma(1.0, size=(v, v))
    pair /= pair.sum()
    joint = np.ones((v,) * n)
    for slot in range(n):
        if slot in (i_star, k_star):
            continue
        marginal = rng.gamma(1.0, size=v)
        marginal /= marginal.sum()
        shape = [1] * n
        shape[slot] = v
        joint = joint * marginal.reshape(shape)
    shape_i = [1] * n
    shape_i[i_star] = v
    shape_k = [1] * n
    shape_k[k_star] = v
    joint = joint * pair.reshape([v if s in (i_star, k_star) else 1 for s in range(n)])
    joint /= joint.sum()
    flat_index = int(rng.choice(joint.size, p=joint.ravel()))
    sentence = tuple(
        vocab.symbols[idx] for idx in np.unravel_index(flat_index, joint.shape)
    )
    return ExactJointModel(vocab, joint), sentence


def _pairs(n: int):
    return [(i, k) for k in range(2, n + 1) for i in range(1, k)]


def check_kl_identity(models) -> dict:
    worst = 0.0
    pairs = 0
    for model, sentence in models:
        for i, k in _pairs(model.sentence_length):
            expected_form = predictive_potential_expected_pmi(model, sentence, i, k)
            kl_form = predictive_potential_exact(model, sentence, i, k)
            worst = max(worst, abs(expected_form - kl_form))
            pairs += 1
    return _check("kl-identity", worst, pairs)


def check_chain_rule(models) -> dict:
    worst = 0.0
    pairs = 0
    for model, sentence in models:
        n = model.sentence_length
        for i, k in _pairs(n):
            if k >= n:
                continue
            report = verify_chain_rule(model, sentence, i, k)
            worst = max(worst, abs(report.gap))
            pairs += 1
    return _check("chain-rule", worst, pairs)


def check_monotone_decay(models) -> dict:
    worst = 0.0
    pairs = 0
    for model, sentence in models:
        n = model.sentence_length
        for i, k in _pairs(n):
            if k >= n:
                continue
            report = verify_chain_rule(model, sentence, i, k)
            violation = report.expected_remainder_bits - report.total_bits
            worst = max(worst, violation)
            pairs += 1
    return _check("monotone-decay", worst, pairs)


def check_estimator_product_form(models) -> dict:
    worst = 0.0
    pairs = 0
    for model, sentence in models:
        for i, k in _pairs(model.sentence_length):
            exact = predictive_potential_exact(model, sentence, i, k)
            estimated = predictive_potential_estimated(model, sentence, i, k).bits
            worst = max(worst, abs(estimated - exact))
            pairs += 1
    return _check("estimator-product-form", worst, pairs)


def dependent_estimator_gap() -> tuple[float, float, float]:
    """(estimated, exact, signed gap) on the fixed dependent 3-token joint."""
    model = model_from_dict(DEPENDENT_JOINT_3)
    estimated = predictive_potential_estimated(model, DEPENDENT_SENTENCE_3, 1, 2).bits
    exact = predictive_potential_exact(model, DEPENDENT_SENTENCE_3, 1, 2)
    return estimated, exact, estimated - exact


def check_dependent_gap_determinism() -> dict:
    first = dependent_estimator_gap()
    second = dependent_estimator_gap()
    result = _check("estimator-gap-determinism", abs(first[2] - second[2]), 2)
    result["estimated_bits"] = first[0]
    result["exact_bits"] = first[1]
    result["signed_gap_bits"] = first[2]
    return result


def _check(name: str, worst: float, pairs: int) -> dict:
    return {
        "name": name,
        "pairs": pairs,
        "max_abs_gap": float(worst),
        "tolerance": TOLERANCE,
        "pass": bool(worst <= TOLERANCE),
    }


def run_verification(seed: int = 0, n_models: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    general = [random_exact_model(rng) for _ in range(n_models)]
    pairwise = [random_pairwise_model(rng) for _ in range(n_models)]
    checks = [
        check_kl_identity(general),
        check_chain_rule(general),
        check_monotone_decay(general),
        check_estimator_product_form(pairwise),
        check_dependent_gap_determinism(),
    ]
    return {
        "seed": seed,
        "n_models": n_models,
        "checks": checks,
        "pass": all(c["pass"] for c in checks),
    }
