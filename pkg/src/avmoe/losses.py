"""Training objectives: attention cross-entropy, CTC, and their weighted total.

Reductions: the attention and CTC terms are sums over target positions /
alignments for one utterance; the training harness divides batch sums by the
batch size only. Balancing losses from multiple MoE layers are averaged so
the beta coefficient keeps its meaning regardless of depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CtcInfeasibleError, DataError
from .moe import LoadStats, load_balance_loss
from .tensor import (
    LOG_ZERO,
    Tensor,
    concat,
    gather_rows,
    log_softmax_rows,
    logaddexp,
    narrow,
    reshape,
    take_along_cols,
    transpose,
    tsum,
)


@dataclass
class LossBundle:
    l_att: Tensor
    l_ctc: Tensor
    l_aux: Tensor
    l_total: Tensor
    alpha: float
    beta: float

    def as_floats(self) -> dict[str, float]:
        return {
            "l_att": self.l_att.item(),
            "l_ctc": self.l_ctc.item(),
            "l_aux": self.l_aux.item(),
            "l_total": self.l_total.item(),
        }


def attention_loss(logits: Tensor, targets: list[int], pad_id: int) -> Tensor:
    """Summed negative log-likelihood of the targets, skipping pad positions."""
    ids = np.asarray(targets, dtype=np.int64)
    if ids.shape[0] != logits.shape[0]:
        raise DataError(
            f"got {ids.shape[0]} targets for {logits.shape[0]} decoder positions"
        )
    if ids.min() < 0 or ids.max() >= logits.shape[1]:
        raise DataError(f"target id out of range for vocab {logits.shape[1]}")
    log_probs = log_softmax_rows(logits)
    picked = take_along_cols(log_probs, ids[:, None]).reshape(ids.shape[0])
    keep = (ids != pad_id).astype(np.float64)
    return -tsum(picked * Tensor(keep))


def min_frames_for(target: list[int]) -> int:
    """Shortest frame count that can emit the target: length plus repeats."""
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def extended_labels(target: list[int], blank_id: int) -> list[int]:
    """Target interleaved with blanks: [b, y1, b, y2, ..., b]."""
    ext = [blank_id]
    for y in target:
        ext.append(y)
        ext.append(blank_id)
    return ext


def ctc_loss(frame_logits: Tensor, target: list[int], blank_id: int = 0) -> Tensor:
    """Negative log-probability of the target under the CTC alignment lattice.

    Log-space forward recursion over the blank-extended label sequence. An
    infeasible target (more symbols plus required separating blanks than
    frames) raises instead of returning infinity: it means the data is bad.
    """
    num_frames, vocab = frame_logits.shape
    if not target:
        raise DataError("CTC target must be non-empty")
    ids = np.asarray(target, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= vocab:
        raise DataError(f"CTC target id out of range for vocab {vocab}")
    if blank_id in target:
        raise DataError(f"CTC target must not contain the blank id {blank_id}")
    needed = min_frames_for(target)
    if num_frames < needed:
        raise CtcInfeasibleError(
            f"target of length {len(target)} needs at least {needed} frames, got {num_frames}"
        )

    ext = extended_labels(target, blank_id)
    states = len(ext)
    log_probs = log_softmax_rows(frame_logits)
    # (num_frames, states): per-frame log-prob of each lattice state's label.
    lattice = transpose(gather_rows(transpose(log_probs), ext))

    # A state may come from two back only if it is a label differing from the
    # label two states earlier (never a blank, never a repeated label).
    skip_ok = np.zeros(states, dtype=np.float64)
    for s in range(2, states):
        if ext[s] != blank_id and ext[s] != ext[s - 2]:
            skip_ok[s] = 1.0
    skip_mask = Tensor(skip_ok)
    skip_off = Tensor((1.0 - skip_ok) * LOG_ZERO)

    log_zero_1 = Tensor(np.full(1, LOG_ZERO))
    log_zero_2 = Tensor(np.full(2, LOG_ZERO))
    rest = Tensor(np.full(states - 2, LOG_ZERO))

    first = reshape(narrow(lattice, 0, 0, 1), (states,))
    alpha = concat([narrow(first, 0, 0, 2), rest], axis=0)
    for t in range(1, num_frames):
        stay = alpha
        step1 = concat([log_zero_1, narrow(alpha, 0, 0, states - 1)], axis=0)
        step2 = concat([log_zero_2, narrow(alpha, 0, 0, states - 2)], axis=0)
        step2 = step2 * skip_mask + skip_off
        frame = reshape(narrow(lattice, 0, t, 1), (states,))
        alpha = logaddexp(logaddexp(stay, step1), step2) + frame

    tail = logaddexp(narrow(alpha, 0, states - 2, 1), narrow(alpha, 0, states - 1, 1))
    return -reshape(tail, ())


def total_loss(
    l_att: Tensor,
    l_ctc: Tensor,
    aux_per_layer: list[Tensor],
    alpha: float = 0.3,
    beta: float = 0.01,
) -> LossBundle:
    """Compose the weighted objective: att + alpha*ctc + beta*mean(aux)."""
    if aux_per_layer:
        l_aux = aux_per_layer[0]
        for extra in aux_per_layer[1:]:
            l_aux = l_aux + extra
        l_aux = l_aux * (1.0 / len(aux_per_layer))
    else:
        l_aux = Tensor(0.0)
    l_total = l_att + l_ctc * alpha + l_aux * beta
    return LossBundle(
        l_att=l_att, l_ctc=l_ctc, l_aux=l_aux, l_total=l_total, alpha=alpha, beta=beta
    )


def batch_balance_losses(per_layer_stats: list[list[LoadStats]], num_experts: int) -> list[Tensor]:
    """Merge per-utterance stats layer by layer and score each layer's balance."""
    merged = [LoadStats.merge(layer_parts) for layer_parts in per_layer_stats]
    return [load_balance_loss(stats, num_experts) for stats in merged]
