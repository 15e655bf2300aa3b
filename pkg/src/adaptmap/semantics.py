"""Sparse per-voxel semantic distributions and their Bayesian fusion.

A distribution stores explicit probabilities only for labels that have been
observed at least once; every other label shares one remainder value.  Fusion
is carried out in log space so that long observation sequences do not
underflow before normalisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

XI = 0.01  # lower bound on the likelihood of unobserved labels
CONFIDENCE_THRESHOLD = 0.1  # observations at or below this are dropped upstream


def _log(x: float) -> float:
    return math.log(x) if x > 0.0 else -math.inf


@dataclass
class SemanticDistribution:
    n_total: int
    labels: list[int] = field(default_factory=list)
    probs: list[float] = field(default_factory=list)
    p_rem: float = -1.0

    def __post_init__(self):
        if self.n_total < 1:
            raise ValueError("n_total must be >= 1")
        if self.p_rem < 0.0:
            self.p_rem = 1.0 / self.n_total

    @classmethod
    def fresh(cls, n_total: int) -> "SemanticDistribution":
        return cls(n_total)

    def copy(self) -> "SemanticDistribution":
        return SemanticDistribution(self.n_total, list(self.labels), list(self.probs), self.p_rem)

    def prob(self, label: int) -> float:
        try:
            return self.probs[self.labels.index(label)]
        except ValueError:
            return self.p_rem

    def total(self) -> float:
        return sum(self.probs) + (self.n_total - len(self.labels)) * self.p_rem

    def dense(self) -> list[float]:
        out = [self.p_rem] * self.n_total
        for l, p in zip(self.labels, self.probs):
            out[l] = p
        return out


def remainder_likelihood(observations: Sequence[tuple[int, float]], n_total: int) -> float:
    """Likelihood assigned to every label absent from ``observations``."""
    n_rest = n_total - len(observations)
    if n_rest <= 0:
        return 1.0
    s = sum(p for _, p in observations)
    return max(XI, (1.0 - s) / n_rest)


def _validate(observations, n_total):
    seen = set()
    for label, p in observations:
        if not (0.0 < p <= 1.0):
            raise ValueError(f"observation probability {p!r} outside (0, 1]")
        if not (0 <= label < n_total):
            raise ValueError(f"label {label} outside [0, {n_total})")
        if label in seen:
            raise ValueError(f"duplicate label {label} in observation")
        seen.add(label)


def observation_evidence(observations: Sequence[tuple[int, float]], depth_weight: float,
                         n_total: int) -> dict[int, float]:
    """Log-likelihood of each observed label relative to the remainder.

    Labels missing from the result have zero relative evidence.  Evidence from
    several observations combines by summing entries, which is exactly the
    product of their likelihoods.
    """
    if not depth_weight > 0.0:
        raise ValueError("depth_weight must be positive")
    _validate(observations, n_total)
    log_rem = math.log(remainder_likelihood(observations, n_total))
    return {int(l): depth_weight * (math.log(p) - log_rem) for l, p in observations}


def apply_evidence(dist: SemanticDistribution, evidence: Mapping[int, float]) -> SemanticDistribution:
    """Multiply ``dist`` by exp(evidence) per label and renormalise."""
    n = dist.n_total
    stored = dict(zip(dist.labels, dist.probs))
    log_rem = _log(dist.p_rem)
    new_labels = sorted(set(stored) | {l for l, e in evidence.items() if e != 0.0})
    logs = []
    for l in new_labels:
        base = _log(stored[l]) if l in stored else log_rem
        logs.append(base + evidence.get(l, 0.0))
    n_rest = n - len(new_labels)
    shift = max(logs + ([log_rem] if n_rest > 0 else []), default=0.0)
    if shift == -math.inf:
        raise ValueError("distribution has no probability mass")
    terms = [math.exp(v - shift) for v in logs]
    rem_term = math.exp(log_rem - shift) if n_rest > 0 else 0.0
    z = math.fsum(terms) + n_rest * rem_term
    return SemanticDistribution(n, new_labels, [t / z for t in terms],
                                rem_term / z if n_rest > 0 else 0.0)


def update_semantics(dist: SemanticDistribution, observations: Sequence[tuple[int, float]],
                     depth_weight: float) -> SemanticDistribution:
    """One weighted Bayesian update from a pixel's top-k observations."""
    if len(observations) > 4:
        raise ValueError("at most four observations per point")
    return apply_evidence(dist, observation_evidence(observations, depth_weight, dist.n_total))


def best_label(dist: SemanticDistribution) -> tuple[int, float] | None:
    """Most probable stored label, lowest id on ties; None when unobserved."""
    best = None
    for l, p in zip(dist.labels, dist.probs):
        if best is None or p > best[1] or (p == best[1] and l < best[0]):
            best = (l, p)
    return best


def merge_evidence(items: Iterable[Mapping[int, float]]) -> dict[int, float]:
    out: dict[int, float] = {}
    for ev in items:
        for l, e in ev.items():
            out[l] = out.get(l, 0.0) + e
    return out
