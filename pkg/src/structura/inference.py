"""Full-song prediction: chunk scheduling, multi-point merging, instant
scanning, peak picking, and segment labeling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from structura.annotation import CLASSES, FunctionLabel
from structura.model import (
    ModelConfig,
    PredictionMatrix,
    instant_forward,
    spectnt_forward,
)
from structura.targets import DEFAULT_HOP, FrameGrid

CHUNK_WINDOW = 24.0  # seconds
CHUNK_HOP = 3.0  # seconds
_EPS = 1e-9


class InferenceContractError(ValueError):
    """Chunk outputs do not match the plan."""


@dataclass(frozen=True)
class Chunk:
    start: float  # seconds
    end: float
    first_frame: int  # index into the song frame grid
    pad_frames: int  # trailing input frames not fully covered by audio


@dataclass(frozen=True)
class ChunkPlan:
    chunks: tuple[Chunk, ...]
    duration: float
    n_frames: int  # song frames, ceil(duration / hop)
    window: float = CHUNK_WINDOW
    hop: float = CHUNK_HOP
    frame_hop: float = DEFAULT_HOP


@dataclass(frozen=True)
class SongCurves:
    function_probs: np.ndarray  # (N, 7)
    boundary_probs: np.ndarray  # (N,)
    grid: FrameGrid


@dataclass(frozen=True)
class LabeledSegment:
    start: float
    end: float
    label: FunctionLabel
    confidence: float


@dataclass(frozen=True)
class SegmentList:
    """Final output: a contiguous labeled partition of [0, duration]."""

    segments: tuple[LabeledSegment, ...]
    duration: float

    def boundaries(self) -> list[float]:
        return [s.end for s in self.segments[:-1]]

    def intervals(self) -> list[tuple[float, float, FunctionLabel]]:
        return [(s.start, s.end, s.label) for s in self.segments]

    def to_json_dict(self) -> dict:
        return {
            "duration": self.duration,
            "segments": [
                {
                    "start": s.start,
                    "end": s.end,
                    "label": s.label.value,
                    "confidence": s.confidence,
                }
                for s in self.segments
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SegmentList":
        segs = tuple(
            LabeledSegment(
                float(s["start"]),
                float(s["end"]),
                FunctionLabel(s["label"]),
                float(s.get("confidence", 0.0)),
            )
            for s in d["segments"]
        )
        return cls(segs, float(d["duration"]))


def plan_chunks(
    duration: float,
    frame_hop: float = DEFAULT_HOP,
    window: float = CHUNK_WINDOW,
    hop: float = CHUNK_HOP,
) -> ChunkPlan:
    """Sliding 24-s window with a 3-s hop; only the final chunk is padded.

    Chunk k owns the song frames whose centers fall in [k*hop, k*hop+window);
    with 125-frame windows and a 15.625-frame hop, eight consecutive chunks
    cover any interior frame exactly.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    window_frames = round(window / frame_hop)
    n_frames = math.ceil(duration / frame_hop - _EPS)
    n_full = math.floor(duration / frame_hop + _EPS)  # fully-covered frames
    count = max(1, math.ceil((duration - window) / hop - _EPS) + 1)
    chunks = []
    for k in range(count):
        first = math.ceil(k * hop / frame_hop - _EPS)
        covered = max(0, min(window_frames, n_full - first))
        chunks.append(
            Chunk(
                start=k * hop,
                end=k * hop + window,
                first_frame=first,
                pad_frames=window_frames - covered,
            )
        )
    return ChunkPlan(
        chunks=tuple(chunks),
        duration=duration,
        n_frames=n_frames,
        window=window,
        hop=hop,
        frame_hop=frame_hop,
    )


def chunk_input(
    spec_values: np.ndarray, chunk: Chunk, window_frames: int
) -> np.ndarray:
    """Slice a song spectrogram for one chunk, zero-padding past the end."""
    n = spec_values.shape[0]
    out = np.zeros((window_frames, spec_values.shape[1]))
    lo = chunk.first_frame
    hi = min(n, lo + window_frames)
    if hi > lo:
        out[: hi - lo] = spec_values[lo:hi]
    return out


def merge_predictions(
    plan: ChunkPlan, chunk_outputs: list[PredictionMatrix]
) -> SongCurves:
    """Average each song frame over the chunks that cover it.

    Chunk frames beyond the song's frame grid are padding and contribute
    nothing, so short songs are not biased toward silence.
    """
    if len(chunk_outputs) != len(plan.chunks):
        raise InferenceContractError(
            f"{len(chunk_outputs)} outputs for {len(plan.chunks)} chunks"
        )
    n = plan.n_frames
    acc = np.zeros((n, 8))
    counts = np.zeros(n)
    window_frames = round(plan.window / plan.frame_hop)
    for chunk, out in zip(plan.chunks, chunk_outputs):
        lo = chunk.first_frame
        hi = min(n, lo + window_frames)
        take = hi - lo
        if take <= 0:
            continue
        acc[lo:hi, :7] += out.function_probs[:take]
        acc[lo:hi, 7] += out.boundary_probs[:take]
        counts[lo:hi] += 1
    if np.any(counts == 0):
        raise InferenceContractError("chunk plan leaves song frames uncovered")
    merged = acc / counts[:, None]
    grid = FrameGrid(hop=plan.frame_hop, n_frames=n)
    return SongCurves(
        function_probs=merged[:, :7], boundary_probs=merged[:, 7], grid=grid
    )


def multipoint_scan(
    spec_values: np.ndarray,
    params,
    config: ModelConfig,
    frame_hop: float = DEFAULT_HOP,
) -> tuple[SongCurves, int]:
    """Predict a whole song with the multi-point model; returns call count."""
    duration = spec_values.shape[0] * frame_hop
    plan = plan_chunks(duration, frame_hop=frame_hop)
    window_frames = round(plan.window / plan.frame_hop)
    outputs = [
        spectnt_forward(chunk_input(spec_values, c, window_frames), params, config)
        for c in plan.chunks
    ]
    return merge_predictions(plan, outputs), len(plan.chunks)


def instant_scan(
    spec_values: np.ndarray,
    params,
    config: ModelConfig,
    frame_hop: float = DEFAULT_HOP,
) -> tuple[SongCurves, int]:
    """One model call per output frame, each chunk centered on that frame."""
    n = spec_values.shape[0]
    window_frames = config.chunk_frames
    half = window_frames // 2
    function_probs = np.zeros((n, 7))
    boundary_probs = np.zeros(n)
    calls = 0
    for j in range(n):
        window = np.zeros((window_frames, spec_values.shape[1]))
        lo = j - half
        src_lo = max(0, lo)
        src_hi = min(n, lo + window_frames)
        window[src_lo - lo : src_hi - lo] = spec_values[src_lo:src_hi]
        probs = instant_forward(window, params, config)
        calls += 1
        function_probs[j] = probs[:7]
        boundary_probs[j] = probs[7]
    grid = FrameGrid(hop=frame_hop, n_frames=n)
    return SongCurves(function_probs, boundary_probs, grid), calls


def instant_call_count(duration: float, frame_hop: float = DEFAULT_HOP) -> int:
    """Scheduler arithmetic: the instant model is called once per frame."""
    return math.ceil(duration / frame_hop - _EPS)


def multipoint_call_count(duration: float) -> int:
    """Scheduler arithmetic: one multi-point call per planned chunk."""
    return len(plan_chunks(duration).chunks)


def pick_peaks(
    boundary_curve: np.ndarray,
    grid: FrameGrid,
    max_window: float = 6.0,
    mean_past: float = 12.0,
    mean_future: float = 6.0,
    delta: float = 0.05,
) -> list[float]:
    """Boundary times from the boundary activation curve.

    A frame is a boundary iff it is the maximum within +-max_window seconds
    (first frame wins ties) and exceeds the mean of the surrounding window
    (-mean_past to +mean_future seconds) by more than delta.
    """
    curve = np.asarray(boundary_curve, dtype=np.float64)
    n = curve.size
    w_max = int(max_window / grid.hop + _EPS)
    w_past = int(mean_past / grid.hop + _EPS)
    w_future = int(mean_future / grid.hop + _EPS)
    peaks = []
    for t in range(n):
        lo = max(0, t - w_max)
        hi = min(n, t + w_max + 1)
        window = curve[lo:hi]
        peak_value = window.max()
        if curve[t] < peak_value:
            continue
        if np.argmax(window) + lo != t:  # an earlier frame attains the max
            continue
        mlo = max(0, t - w_past)
        mhi = min(n, t + w_future + 1)
        if curve[t] <= curve[mlo:mhi].mean() + delta:
            continue
        time = t * grid.hop
        if time > 0.0:
            peaks.append(time)
    return peaks


def label_segments(
    curves: SongCurves, boundaries: list[float], duration: float
) -> SegmentList:
    """Partition [0, duration] at the boundaries and label each segment with
    the class of largest mean probability (ties break by fixed class order)."""
    hop = curves.grid.hop
    n = curves.grid.n_frames
    edges = [0.0]
    for b in sorted(boundaries):
        if b <= edges[-1] + _EPS or b >= duration - _EPS:
            continue
        edges.append(b)
    edges.append(duration)
    segments = []
    for lo_t, hi_t in zip(edges, edges[1:]):
        f0 = math.ceil(lo_t / hop - _EPS)
        f1 = math.ceil(hi_t / hop - _EPS) if hi_t < duration else n
        f1 = max(f1, f0 + 1)
        means = curves.function_probs[f0:f1].mean(axis=0)
        ci = int(np.argmax(means))
        segments.append(
            LabeledSegment(lo_t, hi_t, CLASSES[ci], confidence=float(means[ci]))
        )
    return SegmentList(tuple(segments), duration)


@dataclass(frozen=True)
class InferenceResult:
    segments: SegmentList
    curves: SongCurves
    boundaries: list[float]
    calls: int


def analyze_song(
    spec_values: np.ndarray,
    params,
    config: ModelConfig,
    mode: str = "multipoint",
    duration: float | None = None,
    frame_hop: float = DEFAULT_HOP,
) -> InferenceResult:
    """Spectrogram in, labeled segments out."""
    if duration is None:
        duration = spec_values.shape[0] * frame_hop
    if mode == "multipoint":
        curves, calls = multipoint_scan(spec_values, params, config, frame_hop)
    elif mode == "instant":
        curves, calls = instant_scan(spec_values, params, config, frame_hop)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    boundaries = pick_peaks(curves.boundary_probs, curves.grid)
    segments = label_segments(curves, boundaries, duration)
    return InferenceResult(segments, curves, boundaries, calls)
