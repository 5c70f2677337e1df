"""Pairwise ordering accuracy, global ranking and Kendall tau."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ContractError
from .data import ComparisonPair, PairDataset
from .nn import RankModel

__all__ = [
    "EvalResult",
    "GlobalRanking",
    "pairwise_accuracy",
    "evaluate_model",
    "score_images",
    "global_ranking",
    "kendall_tau",
    "subsample_pairs",
]


@dataclass
class EvalResult:
    ordered_accuracy: float  # nan when there are no ordered pairs
    n_ordered_pairs: int
    equality_accuracy: float | None
    n_equality_pairs: int
    equality_epsilon: float

    @property
    def defined(self) -> bool:
        return self.n_ordered_pairs > 0

    def to_json(self) -> str:
        d = asdict(self)
        if not self.defined:
            d["ordered_accuracy"] = None
        return json.dumps(d, indent=2) + "\n"


def pairwise_accuracy(scores: Mapping[str, float], pairs: Sequence[ComparisonPair],
                      epsilon: float | None = None) -> EvalResult:
    """Score ``pairs`` against per-image rank estimates.

    t = 1 is correct iff r_i > r_j, t = 0 iff r_i < r_j; exact ties are wrong.
    Equality pairs are reported separately: correct iff |r_i - r_j| <= epsilon.
    The default epsilon is 0.1 times the standard deviation of the scores
    of all images the pairs mention.
    """
    if epsilon is None:
        ids = {i for p in pairs for i in (p.id_i, p.id_j)}
        vals = np.array([scores[i] for i in sorted(ids)])
        epsilon = 0.1 * float(vals.std()) if len(vals) else 0.0
    if epsilon < 0:
        raise ContractError(f"epsilon must be >= 0, got {epsilon}")
    good = n_ord = eq_good = n_eq = 0
    for p in pairs:
        d = scores[p.id_i] - scores[p.id_j]
        if p.t == 0.5:
            n_eq += 1
            eq_good += abs(d) <= epsilon
        else:
            n_ord += 1
            good += (d > 0) if p.t == 1.0 else (d < 0)
    return EvalResult(
        ordered_accuracy=good / n_ord if n_ord else math.nan,
        n_ordered_pairs=n_ord,
        equality_accuracy=eq_good / n_eq if n_eq else None,
        n_equality_pairs=n_eq,
        equality_epsilon=float(epsilon),
    )


def score_images(model: RankModel, ds: PairDataset, ids: Sequence[str] | None = None) -> dict[str, float]:
    ids = sorted(ds.samples) if ids is None else list(ids)
    missing = [i for i in ids if i not in ds.samples]
    if missing:
        raise KeyError(f"unknown image id {missing[0]!r}")
    return dict(zip(ids, model.scores(ds.stack(ids)).tolist()))


def subsample_pairs(pairs: Sequence[ComparisonPair], fraction: float, seed: int) -> list[ComparisonPair]:
    """Random subset (original order kept) for test sets too large to score in full."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(pairs)
    k = max(1, int(round(fraction * len(pairs))))
    keep = np.sort(np.random.default_rng(seed).choice(len(pairs), size=k, replace=False))
    return [pairs[i] for i in keep]


def evaluate_model(model: RankModel, ds: PairDataset, pairs: Sequence[ComparisonPair] | None = None,
                   epsilon: float | None = None) -> EvalResult:
    pairs = ds.test_pairs if pairs is None else pairs
    return pairwise_accuracy(score_images(model, ds, ds.ids_in(pairs)), pairs, epsilon)


@dataclass
class GlobalRanking:
    entries: list[tuple[str, float]]  # descending score, ties by id

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "image_id", "score"])
            for k, (sid, r) in enumerate(self.entries, start=1):
                w.writerow([k, sid, repr(r)])


def global_ranking(scores: Mapping[str, float], ids: Sequence[str] | None = None) -> GlobalRanking:
    """Order ``ids`` (default: all scored ids) by descending rank estimate."""
    ids = list(scores) if ids is None else list(ids)
    for i in ids:
        if i not in scores:
            raise KeyError(f"unknown image id {i!r}")
    return GlobalRanking(sorted(((i, float(scores[i])) for i in ids), key=lambda e: (-e[1], e[0])))


def kendall_tau(ranking: GlobalRanking, truth: Mapping[str, float]) -> float:
    """Kendall tau between the ranking's order and descending ``truth``.

    Pairs tied in truth are dropped from numerator and denominator alike.
    """
    ids = ranking.ids
    if len(ids) < 2:
        raise ContractError("kendall tau needs at least 2 ids")
    try:
        t = [truth[i] for i in ids]
    except KeyError as exc:
        raise ContractError(f"no truth value for id {exc.args[0]!r}") from None
    conc = disc = 0
    for a in range(len(t)):
        for b in range(a + 1, len(t)):
            # a is ranked above b
            if t[a] > t[b]:
                conc += 1
            elif t[a] < t[b]:
                disc += 1
    n = conc + disc
    if n == 0:
        raise ContractError("every pair is tied in truth; tau is undefined")
    return (conc - disc) / n
