"""Frame-gridded training targets derived from a segment timeline.

Curves are defined in continuous time and sampled at frame centers, which
makes grid refinement exact: halving the hop never changes values at shared
frame centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from structura.annotation import CLASS_INDEX, N_CLASSES, FunctionLabel, SegmentTimeline

DEFAULT_HOP = 0.192  # seconds per target frame (~5.2 frames/s)
RAMP_SECONDS = 1.0  # half of the 2-second transition window
BOUNDARY_HALF_WIDTH = 0.3  # boundary sections span 0.6 s, centered on the edge
_EPS = 1e-9


class EmptyWindowError(ValueError):
    """A token window does not intersect the timeline."""


@dataclass(frozen=True)
class FrameGrid:
    """Uniform frame grid; frame i is centered at i * hop seconds."""

    hop: float = DEFAULT_HOP
    n_frames: int = 0

    def __post_init__(self):
        if self.hop <= 0:
            raise ValueError("hop must be positive")

    @classmethod
    def for_duration(cls, duration: float, hop: float = DEFAULT_HOP) -> "FrameGrid":
        if duration <= 0:
            raise ValueError("duration must be positive")
        return cls(hop=hop, n_frames=math.ceil(duration / hop - _EPS))

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.hop


@dataclass(frozen=True)
class ActivationTargets:
    """Seven function activation curves plus one boundary curve."""

    function_curves: np.ndarray  # (7, n_frames) in [0, 1]
    boundary_curve: np.ndarray  # (n_frames,) in [0, 1]
    grid: FrameGrid


@dataclass(frozen=True)
class TokenSequence:
    """Ordered section tokens supervising a training window."""

    tokens: tuple[FunctionLabel, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def class_indices(self) -> np.ndarray:
        return np.array([CLASS_INDEX[t] for t in self.tokens], dtype=np.intp)


def segment_support(times: np.ndarray, start: float, end: float) -> np.ndarray:
    """Continuous-time activation of one segment evaluated at `times`.

    1 on [start, end); raised-cosine ramps over the second before the onset
    and the second after the offset (the two halves of a 2-s Hann window).
    """
    t = np.asarray(times, dtype=np.float64)
    v = np.zeros_like(t)
    rise = (t >= start - RAMP_SECONDS) & (t < start)
    v[rise] = 0.5 * (1.0 - np.cos(np.pi * (t[rise] - start + RAMP_SECONDS)))
    v[(t >= start) & (t < end)] = 1.0
    fall = (t >= end) & (t < end + RAMP_SECONDS)
    v[fall] = 0.5 * (1.0 + np.cos(np.pi * (t[fall] - end)))
    return v


def make_function_curves(timeline: SegmentTimeline, grid: FrameGrid) -> np.ndarray:
    """One activation curve per class; same-class overlaps combine by max."""
    times = grid.frame_times()
    curves = np.zeros((N_CLASSES, grid.n_frames))
    for seg in timeline.segments:
        ci = CLASS_INDEX[seg.label]
        np.maximum(
            curves[ci], segment_support(times, seg.start, seg.end), out=curves[ci]
        )
    return np.clip(curves, 0.0, 1.0)


def make_boundary_curve(timeline: SegmentTimeline, grid: FrameGrid) -> np.ndarray:
    """1 on frames within ±0.3 s of any internal segment edge, else 0.

    Song start and end are not marked; edges between same-label segments are.
    """
    times = grid.frame_times()
    curve = np.zeros(grid.n_frames)
    for edge in timeline.internal_boundaries():
        curve[np.abs(times - edge) <= BOUNDARY_HALF_WIDTH + _EPS] = 1.0
    return curve


def make_token_sequence(
    timeline: SegmentTimeline, window: tuple[float, float]
) -> TokenSequence:
    """Ordered labels of segments overlapping [t0, t1], partial overlaps included."""
    t0, t1 = window
    if t1 <= t0:
        raise ValueError(f"empty window [{t0}, {t1}]")
    tokens = [
        seg.label for seg in timeline.segments if seg.start < t1 and seg.end > t0
    ]
    if not tokens:
        raise EmptyWindowError(f"window [{t0}, {t1}] does not intersect the song")
    return TokenSequence(tuple(tokens))


def build_targets(timeline: SegmentTimeline, grid: FrameGrid | None = None) -> ActivationTargets:
    if grid is None:
        grid = FrameGrid.for_duration(timeline.total_duration)
    return ActivationTargets(
        function_curves=make_function_curves(timeline, grid),
        boundary_curve=make_boundary_curve(timeline, grid),
        grid=grid,
    )
