"""Deterministic synthetic songs for desk-scale training and tests.

Each function class gets an injective timbre recipe (a small sinusoid chord
plus noise), so a frame's class is recoverable from its spectrum and the
overfit ceiling is frame accuracy 1.0 on clean section interiors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from structura.annotation import FunctionLabel
from structura.features import SAMPLE_RATE, AudioClip, write_wav

CROSSFADE = 0.05  # seconds of linear crossfade at section joins
MIN_SECTION_SECONDS = 2.0


@dataclass(frozen=True)
class Timbre:
    frequencies: tuple[float, ...]
    noise_level: float


DEFAULT_RECIPES: dict[FunctionLabel, Timbre] = {
    FunctionLabel.INTRO: Timbre((196.0, 784.0), 0.010),
    FunctionLabel.VERSE: Timbre((262.0, 330.0, 392.0), 0.010),
    FunctionLabel.CHORUS: Timbre((349.0, 440.0, 523.0, 698.0), 0.010),
    FunctionLabel.BRIDGE: Timbre((294.0, 370.0, 587.0), 0.010),
    FunctionLabel.INST: Timbre((1047.0, 1319.0), 0.010),
    FunctionLabel.OUTRO: Timbre((147.0, 220.0), 0.010),
    FunctionLabel.SILENCE: Timbre((), 0.003),
}


@dataclass(frozen=True)
class SyntheticSpec:
    sections: tuple[tuple[FunctionLabel, float], ...]
    seed: int = 0
    recipes: dict[FunctionLabel, Timbre] = field(
        default_factory=lambda: dict(DEFAULT_RECIPES)
    )

    def __post_init__(self):
        if not self.sections:
            raise ValueError("need at least one section")
        for label, dur in self.sections:
            if dur < MIN_SECTION_SECONDS:
                raise ValueError(f"section {label} shorter than 2 s")

    @property
    def duration(self) -> float:
        return sum(d for _, d in self.sections)


def _render_section(
    timbre: Timbre, start: float, n_samples: int, rng: np.random.Generator,
    phases: np.ndarray,
) -> np.ndarray:
    t = start + np.arange(n_samples) / SAMPLE_RATE
    signal = rng.normal(0.0, timbre.noise_level, size=n_samples)
    if timbre.frequencies:
        amp = 0.5 / len(timbre.frequencies)
        for freq, phase in zip(timbre.frequencies, phases):
            signal += amp * np.sin(2.0 * np.pi * freq * t + phase)
    return signal


def generate_synthetic_song(spec: SyntheticSpec) -> tuple[AudioClip, str]:
    """Render audio plus the matching annotation text ("<time> <label>" rows
    and a final end row); bit-identical for a fixed seed.

    Sections overlap-add across each join with complementary 50 ms linear
    ramps, so the crossfade sums to unit weight.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.duration
    n_total = round(total * SAMPLE_RATE)
    out = np.zeros(n_total)
    fade = round(CROSSFADE / 2 * SAMPLE_RATE)  # extension on each side of a join

    starts = np.concatenate(([0.0], np.cumsum([d for _, d in spec.sections])))
    annotation_lines = []
    last = len(spec.sections) - 1
    for i, (label, _) in enumerate(spec.sections):
        phases = rng.uniform(0.0, 2.0 * np.pi, size=len(spec.recipes[label].frequencies))
        lo = round(starts[i] * SAMPLE_RATE)
        hi = round(starts[i + 1] * SAMPLE_RATE)
        ext_lo = lo - fade if i > 0 else lo
        ext_hi = hi + fade if i < last else min(hi, n_total)
        section = _render_section(
            spec.recipes[label], ext_lo / SAMPLE_RATE, ext_hi - ext_lo, rng, phases
        )
        weight = np.ones(ext_hi - ext_lo)
        if i > 0:
            weight[: 2 * fade] = np.linspace(0.0, 1.0, 2 * fade, endpoint=False)
        if i < last:
            weight[-2 * fade :] *= np.linspace(1.0, 0.0, 2 * fade, endpoint=False)
        out[ext_lo:ext_hi] += section * weight
        annotation_lines.append(f"{starts[i]:.6f} {label.value}")
    annotation_lines.append(f"{total:.6f} end")
    clip = AudioClip(samples=np.clip(out, -1.0, 1.0), sample_rate=SAMPLE_RATE)
    return clip, "\n".join(annotation_lines) + "\n"


def random_section_plan(
    rng: np.random.Generator,
    min_sections: int = 5,
    max_sections: int = 8,
    duration_range: tuple[float, float] = (4.0, 10.0),
) -> tuple[tuple[FunctionLabel, float], ...]:
    """Plausible pop-ish plan: intro, a chorus-bearing middle, outro."""
    n_middle = int(rng.integers(min_sections, max_sections + 1)) - 2
    middle_pool = [
        FunctionLabel.VERSE,
        FunctionLabel.CHORUS,
        FunctionLabel.BRIDGE,
        FunctionLabel.INST,
        FunctionLabel.SILENCE,
    ]
    labels = [FunctionLabel.INTRO]
    labels += [middle_pool[int(rng.integers(len(middle_pool)))] for _ in range(n_middle)]
    if FunctionLabel.CHORUS not in labels and n_middle > 0:
        labels[1 + int(rng.integers(n_middle))] = FunctionLabel.CHORUS
    labels.append(FunctionLabel.OUTRO)
    lo, hi = duration_range
    return tuple((lab, float(rng.uniform(lo, hi))) for lab in labels)


def make_dataset(
    out_dir: str | Path,
    n_songs: int,
    seed: int = 0,
    min_sections: int = 5,
    max_sections: int = 8,
    duration_range: tuple[float, float] = (4.0, 10.0),
) -> Path:
    """Write WAVs, annotations, and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_songs):
        plan = random_section_plan(rng, min_sections, max_sections, duration_range)
        spec = SyntheticSpec(sections=plan, seed=int(rng.integers(2**31)))
        clip, annotation = generate_synthetic_song(spec)
        wav_path = out / f"song{i:03d}.wav"
        txt_path = out / f"song{i:03d}.txt"
        write_wav(wav_path, clip.samples)
        txt_path.write_text(annotation, encoding="utf-8")
        entries.append(
            {"audio": wav_path.name, "annotation": txt_path.name, "split": "train"}
        )
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps({"seed": seed, "entries": entries}, indent=2), encoding="utf-8"
    )
    return manifest_path
