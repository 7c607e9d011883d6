"""Structural annotation parsing and the 7-class function taxonomy.

Raw annotation files carry free-form section labels ("Pre-Chorus", "verse a",
"gtr solo", ...). Everything downstream works on a fixed 7-class taxonomy, so
this module owns the substring-priority conversion rule, the text file format,
and the segment timeline representation.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass


class FunctionLabel(str, enum.Enum):
    """The seven structural function classes, in fixed tie-break order."""

    INTRO = "intro"
    VERSE = "verse"
    CHORUS = "chorus"
    BRIDGE = "bridge"
    INST = "inst"
    OUTRO = "outro"
    SILENCE = "silence"

    def __str__(self) -> str:
        return self.value


CLASSES: tuple[FunctionLabel, ...] = tuple(FunctionLabel)
CLASS_INDEX: dict[FunctionLabel, int] = {lab: i for i, lab in enumerate(CLASSES)}
N_CLASSES = len(CLASSES)


class _EndMarker:
    """Sentinel for the end-of-song row; deliberately not a FunctionLabel."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "END"


END = _EndMarker()

# Ordered (substring, class) rules. Earlier entries win when several
# substrings occur in one label, e.g. "instrumentalverse" -> verse.
CONVERSION_RULES: tuple[tuple[str, FunctionLabel], ...] = (
    ("silence", FunctionLabel.SILENCE),
    ("pre-chorus", FunctionLabel.VERSE),
    ("prechorus", FunctionLabel.VERSE),
    ("refrain", FunctionLabel.CHORUS),
    ("chorus", FunctionLabel.CHORUS),
    ("theme", FunctionLabel.CHORUS),
    ("stutter", FunctionLabel.CHORUS),
    ("verse", FunctionLabel.VERSE),
    ("rap", FunctionLabel.VERSE),
    ("section", FunctionLabel.VERSE),
    ("slow", FunctionLabel.VERSE),
    ("build", FunctionLabel.VERSE),
    ("dialog", FunctionLabel.VERSE),
    ("intro", FunctionLabel.INTRO),
    ("fadein", FunctionLabel.INTRO),
    ("opening", FunctionLabel.INTRO),
    ("bridge", FunctionLabel.BRIDGE),
    ("trans", FunctionLabel.BRIDGE),
    ("out", FunctionLabel.OUTRO),
    ("coda", FunctionLabel.OUTRO),
    ("ending", FunctionLabel.OUTRO),
    ("break", FunctionLabel.INST),
    ("inst", FunctionLabel.INST),
    ("interlude", FunctionLabel.INST),
    ("impro", FunctionLabel.INST),
    ("solo", FunctionLabel.INST),
)

NO_FUNCTION = "no_function"


class AnnotationError(ValueError):
    """Base class for annotation problems."""


class AnnotationParseError(AnnotationError):
    """A line could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class AnnotationStructureError(AnnotationError):
    """The file as a whole is malformed (e.g. missing end marker)."""


class AnnotationValidationError(AnnotationError):
    """Parsed content violates an invariant (e.g. non-monotonic times)."""


@dataclass(frozen=True)
class RawAnnotation:
    """Ordered (time, raw label) rows plus the end-of-song timestamp."""

    rows: tuple[tuple[float, str], ...]
    end_time: float

    def validate(self) -> None:
        if not self.rows:
            raise AnnotationValidationError("annotation has no rows")
        if self.rows[0][0] < 0:
            raise AnnotationValidationError("first row time is negative")
        times = [t for t, _ in self.rows]
        for a, b in zip(times, times[1:]):
            if b <= a:
                raise AnnotationValidationError(
                    f"row times not strictly increasing: {a} then {b}"
                )
        if self.end_time <= times[-1]:
            raise AnnotationValidationError(
                f"end time {self.end_time} not after last row time {times[-1]}"
            )


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    label: FunctionLabel

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentTimeline:
    """Contiguous labeled segments covering [0, total_duration]."""

    segments: tuple[Segment, ...]
    total_duration: float

    def validate(self) -> None:
        if not self.segments:
            raise AnnotationValidationError("timeline has no segments")
        if self.segments[0].start != 0.0:
            raise AnnotationValidationError("first segment does not start at 0")
        prev_end = 0.0
        for seg in self.segments:
            if seg.start != prev_end:
                raise AnnotationValidationError(
                    f"gap or overlap at {seg.start} (expected {prev_end})"
                )
            if seg.duration <= 0:
                raise AnnotationValidationError(
                    f"zero-duration segment at {seg.start}"
                )
            prev_end = seg.end
        if prev_end != self.total_duration:
            raise AnnotationValidationError(
                f"last segment ends at {prev_end}, not {self.total_duration}"
            )

    def internal_boundaries(self) -> list[float]:
        """Edge times between adjacent segments (song start/end excluded)."""
        return [seg.end for seg in self.segments[:-1]]

    def intervals(self) -> list[tuple[float, float, FunctionLabel]]:
        return [(s.start, s.end, s.label) for s in self.segments]

    def label_at(self, t: float) -> FunctionLabel:
        """Label of the segment containing time t (end-inclusive at the tail)."""
        for seg in self.segments:
            if seg.start <= t < seg.end:
                return seg.label
        return self.segments[-1].label

    def to_json_dict(self) -> dict:
        return {
            "duration": self.total_duration,
            "segments": [
                {"start": s.start, "end": s.end, "label": s.label.value}
                for s in self.segments
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json_dict(cls, d: dict) -> "SegmentTimeline":
        segs = tuple(
            Segment(float(s["start"]), float(s["end"]), FunctionLabel(s["label"]))
            for s in d["segments"]
        )
        tl = cls(segs, float(d["duration"]))
        tl.validate()
        return tl


def convert_label(raw: str) -> FunctionLabel | _EndMarker:
    """Map a free-form label to the taxonomy (or END for the end marker).

    Total function: scans the ordered substring rules against the lowercased
    label and returns the class of the first match; anything unmatched is
    treated as instrumental.
    """
    low = raw.lower()
    if low == "end":
        return END
    for needle, label in CONVERSION_RULES:
        if needle in low:
            return label
    return FunctionLabel.INST


def parse_annotation(text: str) -> RawAnnotation:
    """Parse annotation text: one "<time> <label>" per line, '#' comments,
    and a mandatory final row whose label is "end"."""
    rows: list[tuple[float, str]] = []
    end_time: float | None = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split(None, 1)
        if len(parts) != 2:
            raise AnnotationParseError("expected '<time> <label>'", line_no)
        try:
            t = float(parts[0])
        except ValueError:
            raise AnnotationParseError(f"bad time {parts[0]!r}", line_no) from None
        label = parts[1].strip()
        if label.lower() == "end":
            if end_time is not None:
                raise AnnotationStructureError("multiple end markers")
            end_time = t
        else:
            if end_time is not None:
                raise AnnotationStructureError(
                    f"row at {t} appears after the end marker"
                )
            rows.append((t, label))
    if end_time is None:
        raise AnnotationStructureError("missing end marker")
    ann = RawAnnotation(tuple(rows), end_time)
    ann.validate()
    return ann


def repair_no_function(raw: RawAnnotation) -> RawAnnotation:
    """Replace every "no_function" label with the nearest preceding label.

    A leading "no_function" with no predecessor becomes "silence".
    Idempotent.
    """
    rows: list[tuple[float, str]] = []
    for t, label in raw.rows:
        if label.strip().lower() == NO_FUNCTION:
            label = rows[-1][1] if rows else FunctionLabel.SILENCE.value
        rows.append((t, label))
    return RawAnnotation(tuple(rows), raw.end_time)


def to_timeline(raw: RawAnnotation) -> SegmentTimeline:
    """Convert annotation rows into a contiguous labeled timeline.

    Each row (t_i, label_i) becomes segment [t_i, t_{i+1}) with its converted
    label; the last segment ends at end_time. Adjacent segments that convert
    to the same class stay distinct so their shared edge remains a boundary.
    A positive first-row time gets a leading silence segment.
    """
    raw.validate()
    segments: list[Segment] = []
    if raw.rows[0][0] > 0:
        segments.append(Segment(0.0, raw.rows[0][0], FunctionLabel.SILENCE))
    times = [t for t, _ in raw.rows] + [raw.end_time]
    for (t, label), t_next in zip(raw.rows, times[1:]):
        converted = convert_label(label)
        if isinstance(converted, _EndMarker):
            raise AnnotationStructureError(
                f"row at {t} uses the reserved end marker as a label"
            )
        if t_next <= t:
            raise AnnotationValidationError(f"zero-duration segment at {t}")
        segments.append(Segment(t, t_next, converted))
    timeline = SegmentTimeline(tuple(segments), raw.end_time)
    timeline.validate()
    return timeline
