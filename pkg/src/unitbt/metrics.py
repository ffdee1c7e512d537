"""BLEU, Unit-BLEU and paired bootstrap resampling."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, EmptyInputError

SMOOTHING = ("none", "exp")


@dataclass
class BleuResult:
    score: float
    precisions: list[float]  # fractions in [0, 1]
    bp: float
    hyp_len: int
    ref_len: int
    matches: list[int]
    totals: list[int]

    def to_dict(self, signature: str | None = None) -> dict:
        d = asdict(self)
        d["lengths"] = {"hyp": self.hyp_len, "ref": self.ref_len}
        if signature is not None:
            d["signature"] = signature
        return d


def signature(max_n: int = 4, smoothing: str = "none", n_resamples: int | None = None, seed: int | None = None) -> str:
    parts = ["nrefs:1", f"order:{max_n}", f"smooth:{smoothing}", "tok:whitespace"]
    if n_resamples is not None:
        parts.insert(1, f"bs:{n_resamples}")
    if seed is not None:
        parts.insert(2, f"seed:{seed}")
    return "|".join(parts)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(hyp: Sequence, ref: Sequence, max_n: int = 4) -> np.ndarray:
    """``[matches_1..max_n, totals_1..max_n, hyp_len, ref_len]`` with clipped counts."""
    out = np.zeros(2 * max_n + 2, dtype=np.int64)
    for n in range(1, max_n + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        out[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        out[max_n + n - 1] = max(len(hyp) - n + 1, 0)
    out[-2] = len(hyp)
    out[-1] = len(ref)
    return out


def score_from_stats(stats, max_n: int = 4, smoothing: str = "none", effective_order: bool = False) -> BleuResult:
    if smoothing not in SMOOTHING:
        raise ContractError(f"unknown smoothing {smoothing!r}")
    stats = [int(s) for s in stats]
    matches, totals = stats[:max_n], stats[max_n : 2 * max_n]
    hyp_len, ref_len = stats[-2], stats[-1]
    precisions = [0.0] * max_n
    order = max_n
    smooth = 1.0
    for n in range(max_n):
        if totals[n] == 0:
            if effective_order:
                order = n
            break
        if matches[n] == 0 and smoothing == "exp":
            smooth *= 2.0
            precisions[n] = 1.0 / (smooth * totals[n])
        else:
            precisions[n] = matches[n] / totals[n]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    used = precisions[:order]
    if order == 0 or any(p == 0.0 for p in used) or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in used) / order)
    return BleuResult(score, precisions, bp, hyp_len, ref_len, matches, totals)


def bleu(hyp: Sequence, ref: Sequence, max_n: int = 4, smoothing: str = "none", effective_order: bool = False) -> BleuResult:
    """Sentence BLEU against a single reference.

    ``smoothing="exp"`` replaces the k-th zero n-gram precision by
    ``1 / (2**k * total_n)``; ``effective_order`` ignores n-gram orders longer
    than the hypothesis, as in sentence-level scoring of short rows.
    """
    if len(ref) == 0:
        raise EmptyInputError("reference must be non-empty")
    return score_from_stats(ngram_stats(list(hyp), list(ref), max_n), max_n, smoothing, effective_order)


def corpus_bleu(pairs: Sequence[tuple[Sequence, Sequence]], max_n: int = 4, smoothing: str = "none") -> BleuResult:
    """BLEU over aggregated n-gram counts of (hypothesis, reference) pairs."""
    if len(pairs) == 0:
        raise EmptyInputError("corpus is empty")
    total = np.zeros(2 * max_n + 2, dtype=np.int64)
    for hyp, ref in pairs:
        if len(ref) == 0:
            raise EmptyInputError("reference must be non-empty")
        total += ngram_stats(list(hyp), list(ref), max_n)
    return score_from_stats(total, max_n, smoothing)


def unit_bleu(hyp_units: Sequence[int], ref_units: Sequence[int], max_n: int = 4, smoothing: str = "none") -> BleuResult:
    return bleu([str(u) for u in hyp_units], [str(u) for u in ref_units], max_n, smoothing)


def corpus_unit_bleu(pairs, max_n: int = 4) -> BleuResult:
    return corpus_bleu([([str(u) for u in h], [str(u) for u in r]) for h, r in pairs], max_n)


@dataclass
class BootstrapResult:
    p_value: float
    win_a: float
    win_b: float
    ties: float
    bleu_a: float
    bleu_b: float
    n_resamples: int
    seed: int

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def _vector_scores(stats: np.ndarray, max_n: int) -> np.ndarray:
    matches = stats[:, :max_n].astype(np.float64)
    totals = stats[:, max_n : 2 * max_n].astype(np.float64)
    hyp_len = stats[:, -2].astype(np.float64)
    ref_len = stats[:, -1].astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(totals > 0, matches / np.maximum(totals, 1), 0.0)
        logp = np.where(prec > 0, np.log(np.where(prec > 0, prec, 1.0)), -np.inf).sum(axis=1) / max_n
        bp = np.where(hyp_len > 0, np.minimum(1.0, np.exp(1.0 - ref_len / np.maximum(hyp_len, 1))), 0.0)
        score = np.where(np.isfinite(logp) & (bp > 0), 100.0 * bp * np.exp(np.where(np.isfinite(logp), logp, 0.0)), 0.0)
    return score


def paired_bootstrap(
    sys_a: Sequence[Sequence],
    sys_b: Sequence[Sequence],
    refs: Sequence[Sequence],
    n_resamples: int = 1000,
    seed: int = 12345,
    max_n: int = 4,
) -> BootstrapResult:
    """Paired bootstrap over test-set indices.

    ``p_value`` is the fraction of resamples where system B's corpus BLEU is at
    least system A's, i.e. a one-sided test of "A is better than B".
    """
    if not (len(sys_a) == len(sys_b) == len(refs)):
        raise ContractError("systems and references must be aligned")
    if len(refs) == 0:
        raise EmptyInputError("empty test set")
    sa = np.stack([ngram_stats(list(h), list(r), max_n) for h, r in zip(sys_a, refs)])
    sb = np.stack([ngram_stats(list(h), list(r), max_n) for h, r in zip(sys_b, refs)])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(refs), size=(n_resamples, len(refs)))
    a = _vector_scores(sa[idx].sum(axis=1), max_n)
    b = _vector_scores(sb[idx].sum(axis=1), max_n)
    return BootstrapResult(
        p_value=float(np.mean(b >= a)),
        win_a=float(np.mean(a > b)),
        win_b=float(np.mean(b > a)),
        ties=float(np.mean(a == b)),
        bleu_a=score_from_stats(sa.sum(axis=0), max_n).score,
        bleu_b=score_from_stats(sb.sum(axis=0), max_n).score,
        n_resamples=n_resamples,
        seed=seed,
    )
