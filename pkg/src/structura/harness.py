"""Dataset manifests, chunk enumeration, augmentation, the training loop,
and cross-validation orchestration."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from structura import loss as loss_mod
from structura import model as model_mod
from structura.annotation import SegmentTimeline, parse_annotation, repair_no_function, to_timeline
from structura.features import FeatureConfig, load_wav, stft_log_mel
from structura.inference import analyze_song, plan_chunks
from structura.metrics import EvalFrameGrid, MetricReport, corpus_average, evaluate_pair
from structura.model import ModelConfig, NonFiniteLossError, TrainingBatch
from structura.optim import Adam
from structura.targets import FrameGrid, TokenSequence, build_targets, make_token_sequence

SEED_ENV_VAR = "STRUCTURA_SEED"


class ConfigurationError(ValueError):
    """Invalid training/cross-validation setup."""


@dataclass(frozen=True)
class ManifestEntry:
    audio: Path
    annotation: Path
    split: str = "train"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int = 0

    def validate(self) -> None:
        for entry in self.entries:
            if not entry.audio.exists():
                raise ConfigurationError(f"missing audio file {entry.audio}")
            if not entry.annotation.exists():
                raise ConfigurationError(f"missing annotation file {entry.annotation}")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    entries = tuple(
        ManifestEntry(
            audio=path.parent / e["audio"],
            annotation=path.parent / e["annotation"],
            split=e.get("split", "train"),
        )
        for e in payload["entries"]
    )
    manifest = DatasetManifest(entries=entries, seed=int(payload.get("seed", 0)))
    manifest.validate()
    return manifest


@dataclass
class SongData:
    """Everything training needs for one song, precomputed once."""

    name: str
    timeline: SegmentTimeline
    spec_values: np.ndarray  # (n_frames, n_mels)
    boundary_target: np.ndarray  # (n_frames,)
    function_target: np.ndarray  # (n_frames, 7)
    duration: float
    grid: FrameGrid
    samples: np.ndarray | None = None  # kept for waveform augmentation
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)


def load_song(entry: ManifestEntry, feature_config: FeatureConfig | None = None) -> SongData:
    feature_config = feature_config or FeatureConfig()
    clip = load_wav(entry.audio)
    timeline = to_timeline(
        repair_no_function(parse_annotation(entry.annotation.read_text(encoding="utf-8")))
    )
    spec = stft_log_mel(clip, feature_config)
    grid = FrameGrid(hop=feature_config.frame_hop_seconds, n_frames=spec.n_frames)
    targets = build_targets(timeline, grid)
    return SongData(
        name=entry.audio.stem,
        timeline=timeline,
        spec_values=spec.values,
        boundary_target=targets.boundary_curve,
        function_target=targets.function_curves.T.copy(),
        duration=timeline.total_duration,
        grid=grid,
        samples=clip.samples,
        feature_config=feature_config,
    )


@dataclass(frozen=True)
class ChunkRef:
    song_index: int
    first_frame: int
    start: float
    end: float


def enumerate_training_chunks(
    songs: list[SongData], window: float = 24.0, hop: float = 3.0
) -> list[ChunkRef]:
    """Global chunk list across songs (24-s window, 3-s hop, final chunk padded)."""
    chunks: list[ChunkRef] = []
    for idx, song in enumerate(songs):
        plan = plan_chunks(song.duration, frame_hop=song.grid.hop, window=window, hop=hop)
        for c in plan.chunks:
            chunks.append(ChunkRef(idx, c.first_frame, c.start, c.end))
    return chunks


@dataclass(frozen=True)
class AugmentConfig:
    noise_prob: float = 0.5
    gain_prob: float = 0.5
    filter_prob: float = 0.0  # optional high/low-pass stage
    snr_db_range: tuple[float, float] = (20.0, 40.0)
    gain_db_range: tuple[float, float] = (-6.0, 6.0)
    cutoff_hz_range: tuple[float, float] = (60.0, 4000.0)


def augment(
    samples: np.ndarray,
    seed: int,
    config: AugmentConfig | None = None,
    sample_rate: int = 16000,
) -> np.ndarray:
    """Seeded waveform augmentation: additive noise at a random SNR, random
    gain, and (behind a flag) a first-order high/low-pass applied as a
    zero-phase magnitude response."""
    config = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    out = np.asarray(samples, dtype=np.float64).copy()
    if rng.random() < config.noise_prob:
        snr_db = rng.uniform(*config.snr_db_range)
        power = np.mean(out**2)
        if power > 0:
            noise_power = power / (10.0 ** (snr_db / 10.0))
            out = out + rng.normal(0.0, np.sqrt(noise_power), size=out.shape)
    if rng.random() < config.gain_prob:
        gain_db = rng.uniform(*config.gain_db_range)
        out = out * (10.0 ** (gain_db / 20.0))
    if rng.random() < config.filter_prob:
        cutoff = rng.uniform(*config.cutoff_hz_range)
        highpass = rng.random() < 0.5
        freqs = np.fft.rfftfreq(out.size, 1.0 / sample_rate)
        ratio = freqs / cutoff
        if highpass:
            response = ratio / np.sqrt(1.0 + ratio**2)
        else:
            response = 1.0 / np.sqrt(1.0 + ratio**2)
        out = np.fft.irfft(np.fft.rfft(out) * response, n=out.size)
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batches_per_epoch: int = 50
    batch_size: int = 16
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    patience: int = 2
    val_fraction: float = 0.1
    seed: int = 0
    use_ctl: bool = True
    augment_audio: bool = False
    precision: str = "float32"  # float64 available for diagnostics

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


def paper_scale_train_config(**overrides) -> TrainConfig:
    base = dict(epochs=100, batches_per_epoch=500, batch_size=128)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: loss_mod.LossConfig = field(default_factory=loss_mod.LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def apply_seed_override(config: RunConfig) -> RunConfig:
    """STRUCTURA_SEED in the environment overrides both config seeds."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return config
    seed = int(raw)
    return RunConfig(
        model=replace(config.model, seed=seed),
        loss=config.loss,
        train=replace(config.train, seed=seed),
    )


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.strikes = 0
        self.best_epoch = -1

    def update(self, value: float, epoch: int) -> bool:
        """Returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.strikes = 0
            return False
        self.strikes += 1
        return self.strikes >= self.patience


def chunk_features(
    song: SongData,
    ref: ChunkRef,
    window: int,
    augment_seed: int | None = None,
    augment_config: AugmentConfig | None = None,
) -> np.ndarray:
    """Chunk spectrogram (window, n_mels); with a seed, the chunk's waveform
    is augmented and re-analyzed instead of slicing the cached features."""
    if augment_seed is None or song.samples is None:
        out = np.zeros((window, song.spec_values.shape[1]))
        lo = ref.first_frame
        hi = min(song.grid.n_frames, lo + window)
        out[: hi - lo] = song.spec_values[lo:hi]
        return out
    fc = song.feature_config
    lo_s = ref.first_frame * fc.samples_per_frame
    hi_s = lo_s + window * fc.samples_per_frame
    audio = np.zeros(hi_s - lo_s)
    src_hi = min(song.samples.size, hi_s)
    if src_hi > lo_s:
        audio[: src_hi - lo_s] = song.samples[lo_s:src_hi]
    audio = augment(audio, augment_seed, augment_config, fc.sample_rate)
    from structura.features import AudioClip

    return stft_log_mel(AudioClip(audio, fc.sample_rate), fc).values[:window]


def assemble_batch(
    songs: list[SongData],
    chunks: list[ChunkRef],
    indices: np.ndarray,
    model_config: ModelConfig,
    augment_seeds: list[int] | None = None,
    augment_config: AugmentConfig | None = None,
) -> TrainingBatch:
    window = model_config.chunk_frames
    n_mels = model_config.n_mels
    batch = len(indices)
    spec = np.zeros((batch, 1, window, n_mels))
    boundary = np.zeros((batch, window))
    function = np.zeros((batch, window, 7))
    tokens: list[TokenSequence] = []
    for row, chunk_idx in enumerate(indices):
        ref = chunks[int(chunk_idx)]
        song = songs[ref.song_index]
        seed = augment_seeds[row] if augment_seeds is not None else None
        spec[row, 0] = chunk_features(song, ref, window, seed, augment_config)
        lo = ref.first_frame
        hi = min(song.grid.n_frames, lo + window)
        take = hi - lo
        boundary[row, :take] = song.boundary_target[lo:hi]
        function[row, :take] = song.function_target[lo:hi]
        tokens.append(
            make_token_sequence(song.timeline, (ref.start, min(ref.end, song.duration)))
        )
    return TrainingBatch(spec=spec, boundary=boundary, function=function, tokens=tokens)


@dataclass
class TrainingResult:
    checkpoint_path: Path
    log_path: Path
    best_val: float
    best_epoch: int
    epochs_run: int
    stopped: str  # "completed" | "early" | "nan"


def _validation_loss(
    songs: list[SongData],
    chunks: list[ChunkRef],
    val_indices: np.ndarray,
    params,
    run: RunConfig,
) -> float:
    from structura import autodiff

    total = 0.0
    count = 0
    batch_size = run.train.batch_size
    with autodiff.no_grad():
        for lo in range(0, len(val_indices), batch_size):
            idx = val_indices[lo : lo + batch_size]
            batch = assemble_batch(songs, chunks, idx, run.model)
            _, summary = model_mod.batch_losses(
                batch, params, run.model, run.loss, use_ctl=run.train.use_ctl
            )
            total += summary.combined * len(idx)
            count += len(idx)
    return total / max(1, count)


def run_training(
    songs: list[SongData], run: RunConfig, out_dir: str | Path
) -> TrainingResult:
    """Seeded epochs of uniformly drawn chunks with chunk-level validation
    split, best-validation checkpointing, and early stopping."""
    from threadpoolctl import threadpool_limits

    from structura import autodiff

    # Oversubscribed BLAS pools lose badly on this model's many small
    # matmuls; one thread is consistently fastest.
    with threadpool_limits(limits=1), autodiff.use_dtype(np.dtype(run.train.precision)):
        return _run_training_inner(songs, run, out_dir)


def _run_training_inner(
    songs: list[SongData], run: RunConfig, out_dir: str | Path
) -> TrainingResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    checkpoint_path = out / "checkpoint.bin"

    chunks = enumerate_training_chunks(songs)
    rng = np.random.default_rng(run.train.seed)
    order = rng.permutation(len(chunks))
    n_val = max(1, int(round(run.train.val_fraction * len(chunks))))
    if n_val >= len(chunks):
        raise ConfigurationError("not enough chunks for a validation split")
    val_indices = order[:n_val]
    train_indices = order[n_val:]

    params = model_mod.init_spectnt(run.model)
    optimizer = Adam(
        params,
        learning_rate=run.train.learning_rate,
        weight_decay=run.train.weight_decay,
    )
    stopper = EarlyStopper(run.train.patience)
    stopped = "completed"
    best_saved = False
    epoch = -1

    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(run.train.epochs):
            try:
                for step in range(run.train.batches_per_epoch):
                    draw = train_indices[
                        rng.integers(0, len(train_indices), size=run.train.batch_size)
                    ]
                    seeds = None
                    if run.train.augment_audio:
                        seeds = [int(s) for s in rng.integers(2**31, size=len(draw))]
                    batch = assemble_batch(songs, chunks, draw, run.model, seeds)
                    summary = model_mod.train_step(
                        batch, params, optimizer, run.model, run.loss,
                        use_ctl=run.train.use_ctl,
                    )
                    log.write(
                        json.dumps(
                            {
                                "type": "step",
                                "epoch": epoch,
                                "step": step,
                                "bce_boundary": summary.boundary,
                                "bce_function": summary.function,
                                "ctl": summary.ctl,
                                "combined": summary.combined,
                            }
                        )
                        + "\n"
                    )
            except NonFiniteLossError as exc:
                log.write(
                    json.dumps({"type": "abort", "epoch": epoch, "reason": str(exc)})
                    + "\n"
                )
                stopped = "nan"
                if not best_saved:
                    model_mod.save_checkpoint(checkpoint_path, params, run.model)
                    best_saved = True
                break

            val = _validation_loss(songs, chunks, val_indices, params, run)
            improved = val < stopper.best
            log.write(
                json.dumps(
                    {
                        "type": "epoch",
                        "epoch": epoch,
                        "val_combined": val,
                        "improved": improved,
                    }
                )
                + "\n"
            )
            if improved:
                model_mod.save_checkpoint(checkpoint_path, params, run.model)
                best_saved = True
            if stopper.update(val, epoch):
                stopped = "early"
                break

    if not best_saved:
        model_mod.save_checkpoint(checkpoint_path, params, run.model)
    return TrainingResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        best_val=stopper.best,
        best_epoch=stopper.best_epoch,
        epochs_run=epoch + 1,
        stopped=stopped,
    )


def evaluate_songs(
    songs: list[SongData],
    params,
    model_config: ModelConfig,
    grid: EvalFrameGrid | None = None,
    mode: str = "multipoint",
) -> list[MetricReport]:
    grid = grid or EvalFrameGrid()
    reports = []
    for song in songs:
        result = analyze_song(
            song.spec_values, params, model_config, mode=mode, duration=song.duration
        )
        reports.append(evaluate_pair(result.segments, song.timeline, grid))
    return reports


@dataclass
class CrossValidationResult:
    fold_reports: list[list[MetricReport]]
    aggregate: dict


def _fold_partition(n_songs: int, n_folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n_songs)
    return [order[i::n_folds] for i in range(n_folds)]


def run_cross_validation(
    manifests: list[DatasetManifest],
    run: RunConfig,
    out_dir: str | Path,
    n_folds: int = 4,
    min_fold_size: int = 4,
) -> CrossValidationResult:
    """K-fold over one manifest, or leave-one-dataset-out over several."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = [[load_song(e) for e in m.entries] for m in manifests]

    folds: list[tuple[list[SongData], list[SongData]]] = []
    if len(manifests) == 1:
        songs = datasets[0]
        rng = np.random.default_rng(run.train.seed)
        parts = _fold_partition(len(songs), n_folds, rng)
        for test_idx in parts:
            if len(test_idx) < min_fold_size:
                raise ConfigurationError(
                    f"fold of {len(test_idx)} songs is below the minimum {min_fold_size}"
                )
            test = [songs[i] for i in test_idx]
            train = [songs[i] for i in range(len(songs)) if i not in set(test_idx.tolist())]
            folds.append((train, test))
    else:
        for hold_out in range(len(datasets)):
            test = datasets[hold_out]
            train = [s for i, d in enumerate(datasets) if i != hold_out for s in d]
            folds.append((train, test))

    fold_reports: list[list[MetricReport]] = []
    for fold_idx, (train, test) in enumerate(folds):
        train_names = {s.name for s in train}
        assert not train_names & {s.name for s in test}, "test song leaked into training"
        result = run_training(train, run, out / f"fold{fold_idx}")
        params, config = model_mod.load_checkpoint(result.checkpoint_path)
        fold_reports.append(evaluate_songs(test, params, config))
    aggregate = corpus_average([r for fold in fold_reports for r in fold])
    return CrossValidationResult(fold_reports=fold_reports, aggregate=aggregate)
