"""Independent metric oracles: plain Python loops, no KD-trees, no numpy reductions."""

import math


def sq(a, b):
    dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
    return dx * dx + dy * dy + dz * dz


def oracle_cd(x, y):
    x, y = x.tolist(), y.tolist()
    fwd = [min(sq(a, b) for b in y) for a in x]
    bwd = [min(sq(b, a) for a in x) for b in y]
    return math.fsum(fwd) / len(fwd) + math.fsum(bwd) / len(bwd)


def oracle_mmd(gen, ref):
    return math.fsum(min(oracle_cd(r, g) for g in gen) for r in ref) / len(ref)


def oracle_cov(gen, ref):
    hit = set()
    for g in gen:
        dists = [oracle_cd(r, g) for r in ref]
        hit.add(dists.index(min(dists)))
    return len(hit) / len(ref)


def oracle_1nna(gen, ref):
    pool = [(c, False) for c in gen] + [(c, True) for c in ref]
    correct = 0
    for i, (a, label) in enumerate(pool):
        best, best_labels = math.inf, []
        for j, (b, other) in enumerate(pool):
            if i == j:
                continue
            d = oracle_cd(a, b) if i < j else oracle_cd(b, a)
            if d < best:
                best, best_labels = d, [other]
            elif d == best:
                best_labels.append(other)
        correct += any(best_labels) == label
    return correct / len(pool)


def oracle_tmd(comps):
    k = len(comps)
    rows = []
    for i in range(k):
        rows.append(math.fsum(oracle_cd(comps[min(i, j)], comps[max(i, j)])
                              for j in range(k) if j != i) / (k - 1))
    return math.fsum(rows) / k


def oracle_uhd(partial, comps):
    vals = []
    for c in comps:
        worst = 0.0
        for p in partial.tolist():
            worst = max(worst, math.sqrt(min(sq(p, q) for q in c.tolist())))
        vals.append(worst)
    return math.fsum(vals) / len(vals)


