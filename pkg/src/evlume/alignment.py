"""Temporal matching of repeated low-light/normal-light captures.

Each capture of a scene records the interval between the trajectory start and
its first frame; repeated captures under the two lighting conditions are then
paired one-to-one so the summed absolute interval difference is minimal.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

# exhaustive permutation search up to this size; Hungarian solver beyond
BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class CaptureInterval:
    """One capture: id, lighting condition, and trajectory-to-first-frame gap."""

    sequence_id: str
    lighting: str  # "low" or "normal"
    interval_ms: float

    def __post_init__(self):
        if self.lighting not in ("low", "normal"):
            raise ValueError(f"lighting must be 'low' or 'normal', got {self.lighting!r}")
        if not math.isfinite(self.interval_ms) or self.interval_ms < 0:
            raise ValueError("interval_ms must be finite and non-negative")


@dataclass(frozen=True)
class MatchedPair:
    low_id: str
    normal_id: str
    abs_error_ms: float


@dataclass
class Matching:
    pairs: list
    total_error_ms: float

    def errors(self) -> list:
        return [p.abs_error_ms for p in self.pairs]


def _brute_force(small, large):
    """Min-cost injective assignment of the smaller list into the larger.

    Returns (cost, assignment) where assignment[i] is the large-side index
    matched to small-side index i. Costs within 1e-9 relative are treated as
    ties (crossing pairings in 1-D are exactly cost-equal, so float rounding
    must not decide them); ties resolve to the lexicographically smallest
    assignment vector.
    """
    best_cost = None
    best_assign = None
    for perm in itertools.permutations(range(len(large)), len(small)):
        cost = sum(abs(small[i] - large[j]) for i, j in enumerate(perm))
        if best_cost is None or cost < best_cost - 1e-9 * (1.0 + best_cost):
            best_cost = cost
            best_assign = perm
    return best_cost, best_assign


def _hungarian(small, large):
    from scipy.optimize import linear_sum_assignment

    cost = np.abs(np.subtract.outer(np.asarray(small), np.asarray(large)))
    rows, cols = linear_sum_assignment(cost)
    assign = [0] * len(small)
    for r, c in zip(rows, cols):
        assign[r] = int(c)
    return float(cost[rows, cols].sum()), assign


def match_sequences(low, normal) -> Matching:
    """Pair low-light and normal-light captures minimizing summed |interval delta|.

    One-to-one over min(len(low), len(normal)) pairs. Exhaustive search for up
    to 8 captures per side guarantees the tie-break (lexicographically smallest
    index pairing); larger inputs use a Hungarian solver, which is optimal but
    leaves ties unspecified.
    """
    if not low or not normal:
        raise ValueError("both interval lists must be non-empty")
    swap = len(low) > len(normal)
    small, large = (normal, low) if swap else (low, normal)
    small_vals = [c.interval_ms for c in small]
    large_vals = [c.interval_ms for c in large]

    if max(len(low), len(normal)) <= BRUTE_FORCE_LIMIT:
        cost, assign = _brute_force(small_vals, large_vals)
    else:
        cost, assign = _hungarian(small_vals, large_vals)

    pairs = []
    for i, j in enumerate(assign):
        err = abs(small_vals[i] - large_vals[j])
        if swap:
            pairs.append(MatchedPair(large[j].sequence_id, small[i].sequence_id, err))
        else:
            pairs.append(MatchedPair(small[i].sequence_id, large[j].sequence_id, err))
    return Matching(pairs, float(cost))


@dataclass
class AlignmentStats:
    max_ms: float
    mean_ms: float
    errors: tuple

    def fraction_below(self, threshold_ms: float) -> float:
        return float(np.mean([e < threshold_ms for e in self.errors]))


def alignment_error_stats(m: Matching) -> AlignmentStats:
    errs = m.errors()
    if not errs:
        raise ValueError("matching has no pairs")
    return AlignmentStats(max(errs), float(np.mean(errs)), tuple(errs))


# ----------------------------------------------------------------------
# CSV in / JSON out
# ----------------------------------------------------------------------
def read_intervals_csv(path):
    """Read (sequence_id, lighting, interval_ms) rows -> (low list, normal list)."""
    low, normal = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            ci = CaptureInterval(row["sequence_id"].strip(),
                                 row["lighting"].strip().lower(),
                                 float(row["interval_ms"]))
            (low if ci.lighting == "low" else normal).append(ci)
    return low, normal


def matching_to_dict(m: Matching) -> dict:
    return {
        "pairs": [{"low": p.low_id, "normal": p.normal_id,
                   "abs_error_ms": p.abs_error_ms} for p in m.pairs],
        "total_error_ms": m.total_error_ms,
    }


def write_matching_json(m: Matching, path, thresholds_ms=(10.0,)) -> None:
    stats = alignment_error_stats(m)
    payload = matching_to_dict(m)
    payload["stats"] = {
        "max_ms": stats.max_ms,
        "mean_ms": stats.mean_ms,
        "fraction_below": {str(t): stats.fraction_below(t) for t in thresholds_ms},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
