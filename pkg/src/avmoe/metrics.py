"""Word error rate and alignment utilities."""

from __future__ import annotations

from typing import Sequence

from .errors import ScoringError


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    """Edit distance divided by reference length; insertions can push it past 1."""
    if len(ref) == 0:
        raise ScoringError("WER needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


def align_words(ref: Sequence, hyp: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Minimal-cost alignment as (op, ref_index, hyp_index) triples.

    Ops are match/sub (both indices), del (hyp index None), ins (ref index
    None). Ties prefer diagonal moves, then deletions, for determinism.
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dist[i][j] = min(
                dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                dist[i - 1][j] + 1,
                dist[i][j - 1] + 1,
            )
    ops: list[tuple[str, int | None, int | None]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            op = "match" if ref[i - 1] == hyp[j - 1] else "sub"
            ops.append((op, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
        else:
            ops.append(("ins", None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def slot_accuracy(
    ref: Sequence[str], hyp: Sequence[str], slot_words: set[str]
) -> tuple[int, int]:
    """(correct, total) over reference positions whose word is in slot_words.

    A slot counts as correct only when the alignment matches it to an equal
    hypothesis word.
    """
    matched = {r for op, r, _ in align_words(ref, hyp) if op == "match"}
    total = correct = 0
    for i, word in enumerate(ref):
        if word in slot_words:
            total += 1
            correct += i in matched
    return correct, total
