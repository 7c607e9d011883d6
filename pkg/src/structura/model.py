"""Spectral-temporal transformer (multi-point) and a convolutional
instant-prediction baseline, built on the local autodiff engine.

The multi-point model: a small 2-D residual front-end over (time, mel),
then per block a spectral encoder that attends across frequency positions
of each frame and aggregates them into a per-frame class token, followed by
a temporal encoder that applies self-attention over the token sequence.
A linear head emits one 8-way sigmoid row per input frame (7 function
curves + 1 boundary curve).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from structura import autodiff, loss as loss_mod
from structura.autodiff import Tensor
from structura.targets import TokenSequence

CHECKPOINT_MAGIC = b"STRC"
CHECKPOINT_VERSION = 1


class ModelContractError(ValueError):
    """Input violates a shape or configuration contract."""


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN/inf; carries the offending loss values."""


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    spectral_dim: int = 24
    spectral_heads: int = 2
    temporal_dim: int = 24
    temporal_heads: int = 2
    resnet_kernel: int = 3
    resnet_channels: int = 8
    ffn_ratio: int = 2
    n_classes: int = 8
    chunk_frames: int = 125
    n_mels: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.spectral_dim % self.spectral_heads:
            raise ModelContractError("spectral_dim must divide by spectral_heads")
        if self.temporal_dim % self.temporal_heads:
            raise ModelContractError("temporal_dim must divide by temporal_heads")
        if self.n_classes != 8:
            raise ModelContractError("n_classes must be 8 (7 functions + boundary)")
        if self.resnet_kernel % 2 != 1:
            raise ModelContractError("resnet_kernel must be odd")
        if self.n_mels % 4:
            raise ModelContractError("n_mels must divide by 4 (two 2x poolings)")

    @property
    def n_freq_positions(self) -> int:
        return self.n_mels // 4


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def paper_scale_config(**overrides) -> ModelConfig:
    base = dict(
        n_blocks=5,
        spectral_dim=96,
        spectral_heads=4,
        temporal_dim=96,
        temporal_heads=8,
        resnet_channels=48,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-frame activations for one chunk, strictly inside (0, 1)."""

    function_probs: np.ndarray  # (T, 7)
    boundary_probs: np.ndarray  # (T,)

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "PredictionMatrix":
        probs = np.clip(autodiff.sigmoid_values(logits), 1e-12, 1.0 - 1e-12)
        return cls(function_probs=probs[:, :7], boundary_probs=probs[:, 7])


# parameter shapes and initialization ----------------------------------------


def _encoder_shapes(prefix: str, dim: int, ffn_ratio: int) -> dict[str, tuple[int, ...]]:
    hidden = ffn_ratio * dim
    return {
        f"{prefix}.ln1.g": (dim,),
        f"{prefix}.ln1.b": (dim,),
        f"{prefix}.attn.q.w": (dim, dim),
        f"{prefix}.attn.q.b": (dim,),
        f"{prefix}.attn.k.w": (dim, dim),
        f"{prefix}.attn.k.b": (dim,),
        f"{prefix}.attn.v.w": (dim, dim),
        f"{prefix}.attn.v.b": (dim,),
        f"{prefix}.attn.out.w": (dim, dim),
        f"{prefix}.attn.out.b": (dim,),
        f"{prefix}.ln2.g": (dim,),
        f"{prefix}.ln2.b": (dim,),
        f"{prefix}.ffn.fc1.w": (dim, hidden),
        f"{prefix}.ffn.fc1.b": (hidden,),
        f"{prefix}.ffn.fc2.w": (hidden, dim),
        f"{prefix}.ffn.fc2.b": (dim,),
    }


def spectnt_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config.resnet_channels
    k = config.resnet_kernel
    ds, dt = config.spectral_dim, config.temporal_dim
    shapes: dict[str, tuple[int, ...]] = {
        "frontend.conv_in.w": (c, 1, k, k),
        "frontend.conv_in.b": (c,),
    }
    for stage in range(2):
        shapes[f"frontend.stage{stage}.conv1.w"] = (c, c, k, k)
        shapes[f"frontend.stage{stage}.conv1.b"] = (c,)
        shapes[f"frontend.stage{stage}.conv2.w"] = (c, c, k, k)
        shapes[f"frontend.stage{stage}.conv2.b"] = (c,)
    shapes["frontend.embed.w"] = (c, ds)
    shapes["frontend.embed.b"] = (ds,)
    shapes["frontend.freq_pos"] = (1, 1, config.n_freq_positions, ds)
    shapes["frontend.fct_token"] = (1, 1, 1, ds)
    for b in range(config.n_blocks):
        shapes.update(_encoder_shapes(f"block{b}.spectral", ds, config.ffn_ratio))
        shapes[f"block{b}.to_temporal.w"] = (ds, dt)
        shapes[f"block{b}.to_temporal.b"] = (dt,)
        shapes.update(_encoder_shapes(f"block{b}.temporal", dt, config.ffn_ratio))
        shapes[f"block{b}.to_fct.w"] = (dt, ds)
        shapes[f"block{b}.to_fct.b"] = (ds,)
    shapes["final_ln.g"] = (ds,)
    shapes["final_ln.b"] = (ds,)
    shapes["head.w"] = (ds, config.n_classes)
    shapes["head.b"] = (config.n_classes,)
    return shapes


def instant_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    base = config.resnet_channels
    plan = [base, base, 2 * base, 2 * base, 4 * base, 4 * base, 4 * base]
    k = config.resnet_kernel
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = 1
    for i, out_ch in enumerate(plan):
        shapes[f"conv{i}.w"] = (out_ch, in_ch, k, k)
        shapes[f"conv{i}.b"] = (out_ch,)
        in_ch = out_ch
    shapes["fc1.w"] = (in_ch, in_ch)
    shapes["fc1.b"] = (in_ch,)
    shapes["fc2.w"] = (in_ch, config.n_classes)
    shapes["fc2.b"] = (config.n_classes,)
    return shapes


def flat_transformer_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Temporal-only baseline of equal depth and per-position width.

    Without the per-frame aggregation token, a time-token must carry the
    whole spectral slice, so its model width is n_freq_positions * spectral_dim.
    """
    width = config.n_freq_positions * config.spectral_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for b in range(config.n_blocks):
        shapes.update(_encoder_shapes(f"block{b}", width, config.ffn_ratio))
    return shapes


def parameter_count(shapes_or_params: dict) -> int:
    total = 0
    for value in shapes_or_params.values():
        shape = value.shape if isinstance(value, Tensor) else value
        total += int(np.prod(shape))
    return total


def init_parameters(
    shapes: dict[str, tuple[int, ...]], seed: int
) -> dict[str, Tensor]:
    """Scaled-uniform fan-in for weights, zeros for biases, ones for LN gains.

    Deterministic: a single seeded generator consumed in shape-dict order.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf == "b":
            data = np.zeros(shape)
        elif name.endswith(("freq_pos", "fct_token")):
            data = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "w":
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            bound = float(np.sqrt(1.0 / fan_in))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            raise ModelContractError(f"no initialization rule for {name}")
        params[name] = Tensor(data, requires_grad=True)
    return params


def init_spectnt(config: ModelConfig) -> dict[str, Tensor]:
    return init_parameters(spectnt_param_shapes(config), config.seed)


def init_instant(config: ModelConfig) -> dict[str, Tensor]:
    return init_parameters(instant_param_shapes(config), config.seed)


# building blocks -------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return autodiff.layer_norm(x, gain, bias, eps)


def linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    w = params[f"{prefix}.w"]
    if x.ndim > 2:  # fold leading dims so the matmul is a single GEMM
        shape = x.shape
        out = x.reshape((-1, shape[-1])) @ w + params[f"{prefix}.b"]
        return out.reshape(shape[:-1] + (w.shape[1],))
    return x @ w + params[f"{prefix}.b"]


def attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    n_batch, n_tokens, dim = x.shape
    head_dim = dim // heads

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape((n_batch, n_tokens, heads, head_dim)).transpose(0, 2, 1, 3)

    q = split_heads(linear(x, params, f"{prefix}.q"))
    k = split_heads(linear(x, params, f"{prefix}.k"))
    v = split_heads(linear(x, params, f"{prefix}.v"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(head_dim))
    weights = autodiff.softmax(scores, axis=-1)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape((n_batch, n_tokens, dim))
    return linear(mixed, params, f"{prefix}.out")


def encoder_layer(
    x: Tensor, params: dict[str, Tensor], prefix: str, heads: int
) -> Tensor:
    attended = x + attention(
        layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]),
        params,
        f"{prefix}.attn",
        heads,
    )
    normed = layer_norm(
        attended, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"]
    )
    ffn = linear(autodiff.relu(linear(normed, params, f"{prefix}.ffn.fc1")), params, f"{prefix}.ffn.fc2")
    return attended + ffn


def residual_stage(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = autodiff.relu(autodiff.conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"]))
    h = autodiff.conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    return autodiff.relu(x + h)


def pool_freq_2(x: Tensor) -> Tensor:
    n_batch, channels, n_time, n_freq = x.shape
    if n_freq % 2:
        x = x[:, :, :, : n_freq - 1]
        n_freq -= 1
    return x.reshape((n_batch, channels, n_time, n_freq // 2, 2)).mean(axis=4)


def pool_2x2(x: Tensor) -> Tensor:
    n_batch, channels, height, width = x.shape
    if height >= 2 and height % 2:
        x = x[:, :, : height - 1, :]
        height -= 1
    if width >= 2 and width % 2:
        x = x[:, :, :, : width - 1]
        width -= 1
    h2 = height // 2 if height >= 2 else 1
    w2 = width // 2 if width >= 2 else 1
    folded = x.reshape((n_batch, channels, h2, height // h2, w2, width // w2))
    return folded.mean(axis=(3, 5))


def time_positional_encoding(n_frames: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding, length-agnostic along the time axis."""
    position = np.arange(n_frames)[:, None]
    idx = np.arange(dim)[None, :]
    angles = position / np.power(10000.0, (2 * (idx // 2)) / dim)
    pe = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return pe


def resnet_receptive_field(config: ModelConfig) -> int:
    """Temporal half-width (in frames) reachable through the conv front-end."""
    n_convs = 1 + 2 * 2  # input conv plus two stages of two convs
    return n_convs * (config.resnet_kernel // 2)


# forward passes --------------------------------------------------------------


def _frontend(x: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    h = autodiff.relu(
        autodiff.conv2d(x, params["frontend.conv_in.w"], params["frontend.conv_in.b"])
    )
    h = pool_freq_2(h)
    h = residual_stage(h, params, "frontend.stage0")
    h = pool_freq_2(h)
    h = residual_stage(h, params, "frontend.stage1")
    # (B, C, T, F4) -> (B, T, F4, spectral_dim)
    h = h.transpose(0, 2, 3, 1)
    return linear(h, params, "frontend.embed") + params["frontend.freq_pos"]


def spectnt_logits(
    x,
    params: dict[str, Tensor],
    config: ModelConfig,
    disable_temporal: bool = False,
) -> Tensor:
    """Logits (B, T, n_classes) for a batch of chunks shaped (B, 1, T, n_mels)."""
    x = autodiff.ensure_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[3] != config.n_mels:
        raise ModelContractError(f"expected (B, 1, T, {config.n_mels}), got {x.shape}")
    n_batch, _, n_frames, _ = x.shape
    spec_seq = _frontend(x, params, config)
    n_freq = spec_seq.shape[2]
    ds, dt = config.spectral_dim, config.temporal_dim

    pe = time_positional_encoding(n_frames, ds)[None, :, None, :]
    fct = autodiff.broadcast_to(params["frontend.fct_token"], (n_batch, n_frames, 1, ds))
    fct = fct + Tensor(pe)

    for b in range(config.n_blocks):
        seq = autodiff.concat([fct, spec_seq], axis=2)
        folded = seq.reshape((n_batch * n_frames, n_freq + 1, ds))
        folded = encoder_layer(folded, params, f"block{b}.spectral", config.spectral_heads)
        seq = folded.reshape((n_batch, n_frames, n_freq + 1, ds))
        fct = seq[:, :, 0:1, :]
        spec_seq = seq[:, :, 1:, :]
        stream = linear(fct.reshape((n_batch, n_frames, ds)), params, f"block{b}.to_temporal")
        if not disable_temporal:
            stream = encoder_layer(stream, params, f"block{b}.temporal", config.temporal_heads)
        fct = linear(stream, params, f"block{b}.to_fct").reshape((n_batch, n_frames, 1, ds))

    frame_embed = layer_norm(
        fct.reshape((n_batch, n_frames, ds)), params["final_ln.g"], params["final_ln.b"]
    )
    return linear(frame_embed, params, "head")


def instant_logits(x, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Logits (B, n_classes) for the chunk-center instant."""
    x = autodiff.ensure_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[3] != config.n_mels:
        raise ModelContractError(f"expected (B, 1, T, {config.n_mels}), got {x.shape}")
    h = x
    n_convs = 7
    for i in range(n_convs):
        h = autodiff.relu(autodiff.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"]))
        if i in (1, 3, 5):
            h = pool_2x2(h)
    pooled = h.mean(axis=(2, 3))  # (B, C)
    hidden = autodiff.relu(linear(pooled, params, "fc1"))
    return linear(hidden, params, "fc2")


def spectnt_forward(
    spec_values: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
    disable_temporal: bool = False,
) -> PredictionMatrix:
    """Multi-point prediction for one chunk shaped (chunk_frames, n_mels)."""
    if spec_values.shape != (config.chunk_frames, config.n_mels):
        raise ModelContractError(
            f"expected chunk shape {(config.chunk_frames, config.n_mels)}, "
            f"got {spec_values.shape}"
        )
    with autodiff.no_grad():
        logits = spectnt_logits(
            spec_values[None, None], params, config, disable_temporal=disable_temporal
        )
    return PredictionMatrix.from_logits(logits.data[0])


def instant_forward(
    spec_values: np.ndarray, params: dict[str, Tensor], config: ModelConfig
) -> np.ndarray:
    """Single 8-vector of probabilities for the chunk's center frame."""
    if spec_values.shape != (config.chunk_frames, config.n_mels):
        raise ModelContractError(
            f"expected chunk shape {(config.chunk_frames, config.n_mels)}, "
            f"got {spec_values.shape}"
        )
    with autodiff.no_grad():
        logits = instant_logits(spec_values[None, None], params, config)
    return np.clip(autodiff.sigmoid_values(logits.data[0]), 1e-12, 1.0 - 1e-12)


# training --------------------------------------------------------------------


@dataclass
class TrainingBatch:
    spec: np.ndarray  # (B, 1, T, n_mels)
    boundary: np.ndarray  # (B, T)
    function: np.ndarray  # (B, T, 7)
    tokens: list[TokenSequence] = field(default_factory=list)


@dataclass(frozen=True)
class StepLosses:
    boundary: float
    function: float
    ctl: float
    combined: float


def compute_gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backward pass; returns one gradient per parameter (zeros if unused)."""
    if not np.isfinite(loss.data):
        raise NonFiniteLossError(f"loss is {loss.data}")
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def batch_losses(
    batch: TrainingBatch,
    params: dict[str, Tensor],
    model_config: ModelConfig,
    loss_config: loss_mod.LossConfig,
    use_ctl: bool = True,
) -> tuple[Tensor, StepLosses]:
    logits = spectnt_logits(batch.spec, params, model_config)
    boundary_loss = loss_mod.weighted_bce_logits(
        logits[:, :, 7], batch.boundary, loss_config.boundary_pos_weight
    )
    function_loss = loss_mod.weighted_bce_logits(
        logits[:, :, :7], batch.function, loss_config.function_pos_weight
    )
    if use_ctl and loss_config.ctl_weight > 0 and batch.tokens:
        ctl = loss_mod.ctl_batch(logits[:, :, :7], batch.tokens)
    else:
        ctl = Tensor(0.0)
    combined = loss_mod.combine(boundary_loss, function_loss, ctl, loss_config)
    summary = StepLosses(
        boundary=float(boundary_loss.data),
        function=float(function_loss.data),
        ctl=float(ctl.data),
        combined=float(combined.data),
    )
    return combined, summary


def train_step(
    batch: TrainingBatch,
    params: dict[str, Tensor],
    optimizer,
    model_config: ModelConfig,
    loss_config: loss_mod.LossConfig,
    use_ctl: bool = True,
) -> StepLosses:
    """One optimization step; raises NonFiniteLossError on NaN/inf loss."""
    combined, summary = batch_losses(batch, params, model_config, loss_config, use_ctl)
    if not np.isfinite(summary.combined):
        raise NonFiniteLossError(f"non-finite training loss: {summary}")
    compute_gradients(combined, params)
    optimizer.step()
    return summary


# checkpoints -----------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig) -> None:
    """Single-file binary: JSON manifest (names/shapes, format version,
    model config) followed by little-endian float64 tensor data."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model": asdict(config),
        "tensors": [
            {"name": name, "shape": list(p.data.shape)} for name, p in params.items()
        ],
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ModelContractError(f"{path}: not a checkpoint file")
        (manifest_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        if manifest["format_version"] != CHECKPOINT_VERSION:
            raise ModelContractError(
                f"unsupported checkpoint version {manifest['format_version']}"
            )
        params: dict[str, Tensor] = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            params[entry["name"]] = Tensor(data.copy(), requires_grad=True)
    config = ModelConfig(**manifest["model"])
    return params, config
