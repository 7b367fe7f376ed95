"""Greedy inference for both heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model
from .tensor import Tensor, no_grad


@dataclass
class Hypothesis:
    token_ids: list[int]
    score: float  # summed log-probability of the chosen steps


def _log_softmax_np(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def collapse_ctc_path(path: list[int], blank_id: int) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for token in path:
        if token != prev:
            out.append(token)
        prev = token
    return [t for t in out if t != blank_id]


def ctc_greedy_decode(frame_logits: Tensor | np.ndarray, blank_id: int = 0) -> Hypothesis:
    """Best per-frame path, collapsed. Score is that single path's log-prob."""
    logits = frame_logits.data if isinstance(frame_logits, Tensor) else np.asarray(frame_logits)
    score = 0.0
    path: list[int] = []
    for row in logits:
        log_probs = _log_softmax_np(row)
        best = int(np.argmax(log_probs))
        path.append(best)
        score += float(log_probs[best])
    return Hypothesis(token_ids=collapse_ctc_path(path, blank_id), score=score)


def attention_greedy_decode(model: Model, states: Tensor, max_len: int) -> Hypothesis:
    """Argmax autoregressive decode from sos until eos or the length cap."""
    cfg = model.cfg
    specials = {cfg.blank_id, cfg.sos_id, cfg.eos_id, cfg.pad_id}
    prefix = [cfg.sos_id]
    score = 0.0
    emitted: list[int] = []
    with no_grad():
        for _ in range(max_len):
            logits = model.decode_teacher_forcing(states, prefix)
            log_probs = _log_softmax_np(logits.data[-1])
            best = int(np.argmax(log_probs))
            score += float(log_probs[best])
            if best == cfg.eos_id:
                break
            prefix.append(best)
            emitted.append(best)
    # Stray specials (possible early in training) are dropped from the result.
    return Hypothesis(token_ids=[t for t in emitted if t not in specials], score=score)
