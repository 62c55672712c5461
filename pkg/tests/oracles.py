"""Brute-force reference implementations used by several test modules."""
import math
from collections import deque

import numpy as np

from segpatch.core import IGNORE_INDEX


def naive_metrics(pred, gt, n=3):
    ious, accs = [], []
    for c in range(n):
        inter = union = tp = pos = 0
        for p, g in zip(pred, gt):
            inter += p == c and g == c
            union += p == c or g == c
            tp += p == c and g == c
            pos += g == c
        if union:
            ious.append(inter / union)
        if pos:
            accs.append(tp / pos)
    return sum(ious) / len(ious), sum(accs) / len(accs)


def naive_effect(a, r, mask):
    dom = [i for i in range(len(a)) if not mask[i]]
    return sum(a[i] != r[i] for i in dom) / len(dom)


def brute_nn(y, attacked, ignore=IGNORE_INDEX):
    out = y.copy()
    src = [(r, c) for r in range(y.shape[0]) for c in range(y.shape[1]) if y[r, c] not in (attacked, ignore)]
    for r, c in zip(*np.nonzero(y == attacked)):
        # nearest by Manhattan distance over attacked pixels only; ties to the lowest class
        dist = bfs_distances(y == attacked, (r, c))
        best = min(((dist.get(s, math.inf), y[s]) for s in src))
        out[r, c] = best[1]
    return out


def bfs_distances(passable, start):
    H, W = passable.shape
    seen = {start: 0}
    q = deque([start])
    out = {}
    while q:
        r, c = q.popleft()
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < H and 0 <= cc < W and (rr, cc) not in seen and (rr, cc) not in out:
                if passable[rr, cc]:
                    seen[(rr, cc)] = seen[(r, c)] + 1
                    q.append((rr, cc))
                else:
                    out[(rr, cc)] = seen[(r, c)] + 1
    return out
