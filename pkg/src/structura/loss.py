"""Training losses: weighted BCE over activation curves, the 0.9/0.1
combination, and the monotonic-alignment sequence loss (CTL).

The CTL term scores -log of the total probability that the frame-wise class
distributions align monotonically with the ordered section tokens: alignments
assign token indices to frames, start on the first token, end on the last,
and advance by at most one token per frame. The dynamic program below is the
normative definition; ctl_loss_bruteforce re-derives it by enumeration.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from structura import autodiff
from structura.autodiff import Tensor
from structura.targets import TokenSequence

ROW_SUM_TOL = 1e-6
BRUTEFORCE_MAX_FRAMES = 12
BRUTEFORCE_MAX_TOKENS = 5


class LossContractError(ValueError):
    """Inputs violate a loss precondition (shape or stochasticity)."""


class InfeasibleAlignmentError(ValueError):
    """More tokens than frames: no monotonic alignment exists."""


@dataclass(frozen=True)
class LossConfig:
    boundary_weight: float = 0.9
    function_weight: float = 0.1
    ctl_weight: float = 0.1
    boundary_pos_weight: float = 3.0
    function_pos_weight: float = 1.0

    def __post_init__(self):
        if abs(self.boundary_weight + self.function_weight - 1.0) > 1e-12:
            raise ValueError("boundary_weight + function_weight must equal 1.0")
        if self.ctl_weight < 0:
            raise ValueError("ctl_weight must be >= 0")
        if min(self.boundary_pos_weight, self.function_pos_weight) < 1.0:
            raise ValueError("positive-class weights must be >= 1")


def weighted_bce(pred: np.ndarray, target: np.ndarray, pos_weight: float = 1.0) -> float:
    """Mean over frames of -[w*y*log(p) + (1-y)*log(1-p)]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LossContractError(
            f"prediction shape {pred.shape} != target shape {target.shape}"
        )
    if np.any(pred <= 0.0) or np.any(pred >= 1.0):
        raise LossContractError("predictions must lie strictly in (0, 1)")
    terms = -(pos_weight * target * np.log(pred) + (1.0 - target) * np.log1p(-pred))
    return float(terms.mean())


def weighted_bce_logits(logits: Tensor, target: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Same loss computed from logits; stable at saturated predictions."""
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise LossContractError(
            f"logit shape {logits.shape} != target shape {target.shape}"
        )
    pos = autodiff.mul(autodiff.softplus(-logits), pos_weight * target)
    neg = autodiff.mul(autodiff.softplus(logits), 1.0 - target)
    return autodiff.tmean(autodiff.add(pos, neg))


def combine(boundary_loss, function_loss, ctl_loss_value, config: LossConfig):
    """boundary_weight * B + function_weight * (F + ctl_weight * C).

    Works on plain floats and on autodiff Tensors.
    """
    return config.boundary_weight * boundary_loss + config.function_weight * (
        function_loss + config.ctl_weight * ctl_loss_value
    )


def _validated_log_probs(probs: np.ndarray, tokens: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise LossContractError("probability matrix must be 2-D (frames x classes)")
    n_frames = probs.shape[0]
    if len(tokens) == 0:
        raise LossContractError("token sequence is empty")
    if len(tokens) > n_frames:
        raise InfeasibleAlignmentError(
            f"{len(tokens)} tokens cannot align to {n_frames} frames"
        )
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
        raise LossContractError("probability rows must sum to 1")
    if np.any(probs < 0.0):
        raise LossContractError("probabilities must be non-negative")
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    return log_probs, tokens.class_indices()


def ctl_loss(probs: np.ndarray, tokens: TokenSequence) -> float:
    """-log total alignment probability by log-space dynamic programming."""
    log_probs, classes = _validated_log_probs(probs, tokens)
    n_frames, n_tokens = log_probs.shape[0], len(classes)
    neg_inf = -np.inf
    alpha = np.full(n_tokens, neg_inf)
    alpha[0] = log_probs[0, classes[0]]
    for t in range(1, n_frames):
        stay = alpha
        advance = np.concatenate(([neg_inf], alpha[:-1]))
        alpha = np.logaddexp(stay, advance) + log_probs[t, classes]
    return float(-alpha[-1])


def ctl_loss_bruteforce(probs: np.ndarray, tokens: TokenSequence) -> float:
    """Oracle: explicit enumeration of every monotonic alignment."""
    probs = np.asarray(probs, dtype=np.float64)
    n_frames, n_tokens = probs.shape[0], len(tokens)
    if n_frames > BRUTEFORCE_MAX_FRAMES or n_tokens > BRUTEFORCE_MAX_TOKENS:
        raise ValueError(
            f"refusing bruteforce beyond {BRUTEFORCE_MAX_FRAMES} frames / "
            f"{BRUTEFORCE_MAX_TOKENS} tokens"
        )
    _validated_log_probs(probs, tokens)
    classes = tokens.class_indices()
    total = 0.0
    # An alignment is a choice of the n_tokens-1 frame gaps where the token
    # index advances.
    for steps in itertools.combinations(range(1, n_frames), n_tokens - 1):
        token_idx = 0
        product = probs[0, classes[0]]
        for t in range(1, n_frames):
            if token_idx + 1 < n_tokens and t in steps:
                token_idx += 1
            product *= probs[t, classes[token_idx]]
        total += product
    if total == 0.0:
        return math.inf
    return -math.log(total)


def ctl_forward_backward(
    probs: np.ndarray, tokens: TokenSequence
) -> tuple[float, np.ndarray]:
    """Loss plus its gradient w.r.t. the probability matrix.

    The backward lattice pass yields posterior occupancy of each (frame,
    token) cell; the gradient of -log(Z) at probs[t, c] is minus the summed
    occupancy of cells whose token has class c, divided by probs[t, c].
    """
    log_probs, classes = _validated_log_probs(probs, tokens)
    n_frames, n_tokens = log_probs.shape[0], len(classes)
    neg_inf = -np.inf

    alpha = np.full((n_frames, n_tokens), neg_inf)
    alpha[0, 0] = log_probs[0, classes[0]]
    for t in range(1, n_frames):
        stay = alpha[t - 1]
        advance = np.concatenate(([neg_inf], alpha[t - 1, :-1]))
        alpha[t] = np.logaddexp(stay, advance) + log_probs[t, classes]
    log_z = alpha[-1, -1]
    if log_z == neg_inf:
        raise LossContractError("total alignment probability is zero")

    # beta[t, s]: suffix mass from (t, s) onward, excluding the emission at t
    beta = np.full((n_frames, n_tokens), neg_inf)
    beta[-1, -1] = 0.0
    for t in range(n_frames - 2, -1, -1):
        emit = log_probs[t + 1, classes]
        stay = beta[t + 1] + emit
        advance = np.concatenate((beta[t + 1, 1:] + emit[1:], [neg_inf]))
        beta[t] = np.logaddexp(stay, advance)

    occupancy = np.exp(alpha + beta - log_z)  # (n_frames, n_tokens)
    grad = np.zeros_like(probs, dtype=np.float64)
    for s, c in enumerate(classes):
        grad[:, c] += occupancy[:, s]
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = np.where(grad > 0.0, -grad / probs, 0.0)
    return float(-log_z), grad


def ctl_gradient(probs: np.ndarray, tokens: TokenSequence) -> np.ndarray:
    return ctl_forward_backward(probs, tokens)[1]


def ctl_term(probs: Tensor, tokens: TokenSequence) -> Tensor:
    """CTL loss as an autodiff node over a row-stochastic probability Tensor."""
    value, grad = ctl_forward_backward(probs.data, tokens)
    return autodiff.custom_op(
        np.asarray(value), (probs,), (lambda g: g * grad,)
    )


def ctl_batch(function_logits: Tensor, token_sequences: list[TokenSequence]) -> Tensor:
    """Mean CTL over a batch; probabilities come from a per-frame softmax."""
    batch = function_logits.shape[0]
    if batch != len(token_sequences):
        raise LossContractError("one token sequence per batch item required")
    total = None
    for i, tokens in enumerate(token_sequences):
        probs = autodiff.softmax(function_logits[i], axis=-1)
        term = ctl_term(probs, tokens)
        total = term if total is None else total + term
    return total * (1.0 / batch)
