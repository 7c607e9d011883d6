"""Segmentation evaluation: boundary hit rate, frame accuracy, pairwise
frame clustering, normalized conditional entropy, and the chorus variants.

Frame-based measures sample both structures on their own evaluation grid
(default 0.1 s), independent of the model's frame rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from structura.annotation import FunctionLabel

HIT_WINDOW = 0.5  # seconds
_EPS = 1e-9

Intervals = list[tuple[float, float, FunctionLabel]]


class MetricContractError(ValueError):
    """Structures do not cover the same duration, or are too short."""


@dataclass(frozen=True)
class EvalFrameGrid:
    hop: float = 0.1

    def __post_init__(self):
        if self.hop <= 0:
            raise ValueError("hop must be positive")


@dataclass(frozen=True)
class MetricReport:
    hr_precision: float
    hr_recall: float
    hr_f: float
    accuracy: float
    pw_precision: float
    pw_recall: float
    pw_f: float
    s_over: float
    s_under: float
    s_f: float
    chorus_hr_precision: float
    chorus_hr_recall: float
    chorus_hr_f: float
    chorus_pw_precision: float
    chorus_pw_recall: float
    chorus_pw_f: float
    ref_has_chorus: bool = True

    def as_dict(self) -> dict:
        return {
            "HR.5F": self.hr_f,
            "ACC": self.accuracy,
            "PWF": self.pw_f,
            "Sf": self.s_f,
            "CHR.5F": self.chorus_hr_f,
            "CF1": self.chorus_pw_f,
            "ref_has_chorus": self.ref_has_chorus,
        }


def f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _intervals(structure) -> Intervals:
    return structure.intervals()


def _duration(structure) -> float:
    ivals = _intervals(structure)
    return ivals[-1][1]


def _label_key(label) -> str:
    return label.value if isinstance(label, FunctionLabel) else str(label)


def sample_labels(
    structure, grid: EvalFrameGrid, n_frames: int, label_index: dict[str, int]
) -> np.ndarray:
    """Label index of the segment containing each frame midpoint."""
    ivals = _intervals(structure)
    times = (np.arange(n_frames) + 0.5) * grid.hop
    starts = np.array([s for s, _, _ in ivals])
    idx = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(ivals) - 1)
    labels = np.array(
        [label_index[_label_key(lab)] for _, _, lab in ivals], dtype=np.intp
    )
    return labels[idx]


def _frames_for_pair(est, ref, grid: EvalFrameGrid) -> tuple[np.ndarray, np.ndarray]:
    d_est, d_ref = _duration(est), _duration(ref)
    if abs(d_est - d_ref) > grid.hop + _EPS:
        raise MetricContractError(
            f"durations differ by more than one frame: {d_est} vs {d_ref}"
        )
    n = int(min(d_est, d_ref) / grid.hop + _EPS)
    if n < 1:
        raise MetricContractError("structures shorter than one evaluation frame")
    keys = {
        _label_key(lab)
        for struct in (est, ref)
        for _, _, lab in _intervals(struct)
    }
    label_index = {key: i for i, key in enumerate(sorted(keys))}
    return (
        sample_labels(est, grid, n, label_index),
        sample_labels(ref, grid, n, label_index),
    )


def max_bipartite_matching(adjacency: list[list[int]], n_right: int) -> int:
    """Size of a maximum matching (augmenting-path search)."""
    match_right = [-1] * n_right

    def try_assign(u: int, seen: list[bool]) -> bool:
        for v in adjacency[u]:
            if not seen[v]:
                seen[v] = True
                if match_right[v] == -1 or try_assign(match_right[v], seen):
                    match_right[v] = u
                    return True
        return False

    size = 0
    for u in range(len(adjacency)):
        if try_assign(u, [False] * n_right):
            size += 1
    return size


def hit_rate_f(
    est_bounds: list[float], ref_bounds: list[float], window: float = HIT_WINDOW
) -> tuple[float, float, float]:
    """Boundary hit rate at +-window seconds via maximum one-to-one matching.

    Song start/end must already be excluded from both lists. With both lists
    empty the score is perfect; an empty side against a non-empty one scores 0.
    """
    est = sorted(est_bounds)
    ref = sorted(ref_bounds)
    adjacency = [
        [j for j, r in enumerate(ref) if abs(e - r) <= window + _EPS] for e in est
    ]
    matches = max_bipartite_matching(adjacency, len(ref))
    precision = matches / len(est) if est else (1.0 if not ref else 0.0)
    recall = matches / len(ref) if ref else (1.0 if not est else 0.0)
    return precision, recall, f_measure(precision, recall)


def frame_accuracy(est, ref, grid: EvalFrameGrid | None = None) -> float:
    """Fraction of evaluation frames whose labels agree."""
    grid = grid or EvalFrameGrid()
    y_est, y_ref = _frames_for_pair(est, ref, grid)
    return float(np.mean(y_est == y_ref))


def pairwise_f(est, ref, grid: EvalFrameGrid | None = None) -> tuple[float, float, float]:
    """Agreement on co-labeled unordered frame pairs."""
    grid = grid or EvalFrameGrid()
    y_est, y_ref = _frames_for_pair(est, ref, grid)
    n = y_est.size
    if n < 2:
        raise MetricContractError("pairwise clustering needs at least 2 frames")
    agree_est = np.equal.outer(y_est, y_est)
    agree_ref = np.equal.outer(y_ref, y_ref)
    n_est = (agree_est.sum() - n) / 2.0
    n_ref = (agree_ref.sum() - n) / 2.0
    n_both = ((agree_est & agree_ref).sum() - n) / 2.0
    precision = n_both / n_est if n_est else 1.0
    recall = n_both / n_ref if n_ref else 1.0
    return precision, recall, f_measure(precision, recall)


def _conditional_entropy(target: np.ndarray, given: np.ndarray) -> float:
    """H(target | given) in bits, from the joint frame-label histogram."""
    n = target.size
    joint: dict[tuple[int, int], int] = {}
    for a, b in zip(given, target):
        joint[(int(a), int(b))] = joint.get((int(a), int(b)), 0) + 1
    given_counts: dict[int, int] = {}
    for (a, _), c in joint.items():
        given_counts[a] = given_counts.get(a, 0) + c
    h = 0.0
    for (a, _), c in joint.items():
        p_joint = c / n
        p_cond = c / given_counts[a]
        h -= p_joint * math.log2(p_cond)
    return h


def entropy_scores(
    est, ref, grid: EvalFrameGrid | None = None
) -> tuple[float, float, float]:
    """Normalized conditional-entropy over/under-segmentation scores.

    S_over = 1 - H(est|ref) / log2(#est labels); S_under symmetric. A side
    with a single label carries no uncertainty and scores 1 by convention.
    """
    grid = grid or EvalFrameGrid()
    y_est, y_ref = _frames_for_pair(est, ref, grid)
    n_est_labels = np.unique(y_est).size
    n_ref_labels = np.unique(y_ref).size
    s_over = 1.0
    if n_est_labels > 1:
        s_over = 1.0 - _conditional_entropy(y_est, y_ref) / math.log2(n_est_labels)
    s_under = 1.0
    if n_ref_labels > 1:
        s_under = 1.0 - _conditional_entropy(y_ref, y_est) / math.log2(n_ref_labels)
    return s_over, s_under, f_measure(s_over, s_under)


def chorus_boundaries(structure) -> list[float]:
    """Internal edges adjacent to a chorus segment."""
    ivals = _intervals(structure)
    edges = []
    for (s0, e0, l0), (s1, e1, l1) in zip(ivals, ivals[1:]):
        if l0 == FunctionLabel.CHORUS or l1 == FunctionLabel.CHORUS:
            edges.append(e0)
    return edges


class _Binarized:
    """Interval view with labels collapsed to chorus / non-chorus."""

    def __init__(self, structure):
        self._ivals = [
            (s, e, lab if lab == FunctionLabel.CHORUS else FunctionLabel.INST)
            for s, e, lab in _intervals(structure)
        ]

    def intervals(self) -> Intervals:
        return self._ivals


@dataclass(frozen=True)
class ChorusMetrics:
    hr_precision: float
    hr_recall: float
    hr_f: float
    pw_precision: float
    pw_recall: float
    pw_f: float
    ref_has_chorus: bool


def chorus_metrics(
    est, ref, grid: EvalFrameGrid | None = None, window: float = HIT_WINDOW
) -> ChorusMetrics:
    """Chorus-restricted boundary hit rate plus binary pairwise clustering.

    A reference without any chorus yields zero hit-rate scores with
    ref_has_chorus=False so corpus averages can exclude the song.
    """
    grid = grid or EvalFrameGrid()
    ref_has_chorus = any(lab == FunctionLabel.CHORUS for _, _, lab in _intervals(ref))
    if ref_has_chorus:
        p, r, f = hit_rate_f(chorus_boundaries(est), chorus_boundaries(ref), window)
    else:
        p, r, f = 0.0, 0.0, 0.0
    bp, br, bf = pairwise_f(_Binarized(est), _Binarized(ref), grid)
    return ChorusMetrics(p, r, f, bp, br, bf, ref_has_chorus)


def evaluate_pair(est, ref, grid: EvalFrameGrid | None = None) -> MetricReport:
    """All six measures for one (estimated, reference) structure pair."""
    grid = grid or EvalFrameGrid()
    est_bounds = [e for _, e, _ in _intervals(est)[:-1]]
    ref_bounds = [e for _, e, _ in _intervals(ref)[:-1]]
    hp, hr, hf = hit_rate_f(est_bounds, ref_bounds)
    acc = frame_accuracy(est, ref, grid)
    pp, pr, pf = pairwise_f(est, ref, grid)
    so, su, sf = entropy_scores(est, ref, grid)
    ch = chorus_metrics(est, ref, grid)
    return MetricReport(
        hr_precision=hp,
        hr_recall=hr,
        hr_f=hf,
        accuracy=acc,
        pw_precision=pp,
        pw_recall=pr,
        pw_f=pf,
        s_over=so,
        s_under=su,
        s_f=sf,
        chorus_hr_precision=ch.hr_precision,
        chorus_hr_recall=ch.hr_recall,
        chorus_hr_f=ch.hr_f,
        chorus_pw_precision=ch.pw_precision,
        chorus_pw_recall=ch.pw_recall,
        chorus_pw_f=ch.pw_f,
        ref_has_chorus=ch.ref_has_chorus,
    )


def corpus_average(reports: list[MetricReport]) -> dict:
    """Unweighted per-song means; no-chorus songs excluded from CHR.5F."""
    if not reports:
        raise MetricContractError("no reports to average")
    with_chorus = [r for r in reports if r.ref_has_chorus]
    return {
        "HR.5F": float(np.mean([r.hr_f for r in reports])),
        "ACC": float(np.mean([r.accuracy for r in reports])),
        "PWF": float(np.mean([r.pw_f for r in reports])),
        "Sf": float(np.mean([r.s_f for r in reports])),
        "CHR.5F": (
            float(np.mean([r.chorus_hr_f for r in with_chorus]))
            if with_chorus
            else 0.0
        ),
        "CF1": float(np.mean([r.chorus_pw_f for r in reports])),
        "n_songs": len(reports),
        "n_songs_with_chorus": len(with_chorus),
    }
