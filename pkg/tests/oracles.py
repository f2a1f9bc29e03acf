"""Independent brute-force reference implementations."""
import itertools


def mining_oracle(dists, labels, margin):
    """Exhaustive semi-hard selection with the documented fallbacks, pure Python."""
    n = len(labels)
    out = []
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            dap = dists[a][p]
            negs = [q for q in range(n) if labels[q] != labels[a]]
            semi = [q for q in negs if dap < dists[a][q] < dap + margin]
            beyond = [q for q in negs if dists[a][q] > dap]
            if semi:
                best = min(semi, key=lambda q: (dists[a][q], q))
                branch = 0
            elif beyond:
                best = min(beyond, key=lambda q: (dists[a][q], q))
                branch = 1
            else:
                best = min(negs, key=lambda q: (-dists[a][q], q))
                branch = 2
            out.append((a, p, best, branch))
    return out


def rle_count(labels):
    """Number of runs of ones via run-length encoding."""
    return sum(1 for value, _ in itertools.groupby(labels) if value == 1)
