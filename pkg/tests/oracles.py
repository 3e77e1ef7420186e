"""Independent reference implementations used by the tests."""
import itertools

import numpy as np

ALPHABET = "abc"
ALL_STRINGS = ["".join(p) for n in range(7) for p in itertools.product(ALPHABET, repeat=n)]


def brute_force_distances(strings, alphabet):
    """All-pairs shortest paths in the graph whose edges are single edits.

    Independent of any dynamic program: distances come from powers of the
    one-edit adjacency matrix. Paths never need strings longer than the longer
    endpoint (do deletions first), so the closed set of short strings suffices.
    """
    index = {s: i for i, s in enumerate(strings)}
    n = len(strings)
    adj = np.zeros((n, n), dtype=bool)
    for s, i in index.items():
        for k in range(len(s) + 1):
            for ch in alphabet:
                t = s[:k] + ch + s[k:]
                if t in index:
                    adj[i, index[t]] = True
        for k in range(len(s)):
            adj[i, index[s[:k] + s[k + 1:]]] = True
            for ch in alphabet:
                adj[i, index[s[:k] + ch + s[k + 1:]]] = True
    dist = np.full((n, n), -1, dtype=np.int64)
    reach = np.eye(n, dtype=bool)
    dist[reach] = 0
    adj_f = adj.astype(np.float32)
    step = 0
    while (dist < 0).any():
        step += 1
        reach = (reach.astype(np.float32) @ adj_f) > 0
        dist[reach & (dist < 0)] = step
    return dist
