"""Token-level Levenshtein distance and alignment."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

MATCH, SUB, INS, DEL = "match", "sub", "ins", "del"


def _table(a: Sequence, b: Sequence) -> np.ndarray:
    n, m = len(a), len(b)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ai != b[j - 1]))
    return d


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Unit-cost Levenshtein distance between token sequences."""
    return int(_table(a, b)[len(a), len(b)])


def align(a: Sequence, b: Sequence) -> List[Tuple[str, int, int]]:
    """Minimum-cost alignment of ``a`` (source) to ``b`` (target).

    Returns ``(op, i, j)`` triples in left-to-right order, with -1 for the
    missing side of insertions and deletions.  When several operations reach
    a cell at optimal cost the backtrace prefers match, then substitution,
    then insertion, then deletion.
    """
    d = _table(a, b)
    i, j = len(a), len(b)
    ops = []
    while i > 0 or j > 0:
        here = d[i, j]
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and d[i - 1, j - 1] == here:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and a[i - 1] != b[j - 1] and d[i - 1, j - 1] + 1 == here:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j - 1] + 1 == here:
            ops.append((INS, -1, j - 1))
            j -= 1
        else:
            ops.append((DEL, i - 1, -1))
            i -= 1
    ops.reverse()
    return ops
