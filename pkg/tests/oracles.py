"""Independent reference implementations used by the tests.

Everything here is dense, slow and written straight from the definitions,
sharing no code with the package beyond plain numpy.
"""
from __future__ import annotations

import itertools

import numpy as np


def dense_transitions(A):
    A = np.asarray(A, dtype=float)

    def rownorm(M):
        out = np.zeros_like(M)
        for i in range(M.shape[0]):
            s = M[i].sum()
            if s != 0:
                out[i] = M[i] / s
        return out

    return rownorm(A), rownorm(A.T)


def diffusion_conv(X, A, W, b, K):
    """sum_d (F^d X) W_fwd[d] + (R^d X) W_rev[d] + b, with explicit matrix powers.

    X is [n, F]; W is [2K*F, R] laid out per step as (forward, reverse).
    """
    Fm, Rm = dense_transitions(A)
    f = X.shape[1]
    out = np.zeros((X.shape[0], W.shape[1])) + b
    for d in range(K):
        Wf = W[2 * d * f:(2 * d + 1) * f]
        Wr = W[(2 * d + 1) * f:(2 * d + 2) * f]
        out += np.linalg.matrix_power(Fm, d) @ X @ Wf
        out += np.linalg.matrix_power(Rm, d) @ X @ Wr
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def dcgru_cell(x, h, A, cell):
    """One cell step for a single sample; ``cell`` maps gate -> (W, b, K)."""
    W, b, K = cell["reset"]
    r = sigmoid(diffusion_conv(np.hstack([x, h]), A, W, b, K))
    W, b, K = cell["update"]
    u = sigmoid(diffusion_conv(np.hstack([x, h]), A, W, b, K))
    W, b, K = cell["candidate"]
    c = np.tanh(diffusion_conv(np.hstack([x, r * h]), A, W, b, K))
    return u * h + (1 - u) * c


def seq2seq(inputs, tod, A, enc, dec, proj_w, proj_b, teacher=None, node_mask=None):
    """Encoder-decoder for one sample: inputs [P, n, F], tod [Q] -> [Q, n, 1].

    Decoder step q sees [previous speed, target time of day]; the first
    previous speed is zero, later ones come from ``teacher`` if given.
    """
    n = inputs.shape[1]
    R = proj_w.shape[0]
    mask = np.ones(n) if node_mask is None else np.asarray(node_mask, float)
    hs = [np.zeros((n, R)) for _ in enc]
    for t in range(inputs.shape[0]):
        x = inputs[t]
        for i, cell in enumerate(enc):
            hs[i] = dcgru_cell(x, hs[i], A, cell)
            x = hs[i]
    prev = np.zeros((n, 1))
    outs = []
    for q in range(len(tod)):
        x = np.hstack([prev, (tod[q] * mask)[:, None]])
        for i, cell in enumerate(dec):
            hs[i] = dcgru_cell(x, hs[i], A, cell)
            x = hs[i]
        y = x @ proj_w + proj_b
        outs.append(y)
        prev = teacher[q] if teacher is not None else y
    return np.stack(outs)


def cells_from_params(params):
    """Translate package ModelParameters into plain (W, b, K) dicts."""
    def conv(layer):
        return {g: (getattr(layer, g).weight.data.copy(), getattr(layer, g).bias.data.copy(), getattr(layer, g).K)
                for g in ("reset", "update", "candidate")}
    return ([conv(layer) for layer in params.encoder], [conv(layer) for layer in params.decoder],
            params.proj_weight.data.copy(), params.proj_bias.data.copy())


def wilcoxon_enumeration(diffs):
    """P(T+ <= observed) over all 2^n sign flips of |d| (zeros dropped, average ranks)."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    a = np.abs(d)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1
        i = j + 1
    t_obs = ranks[d > 0].sum()
    hits = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        t = sum(r for r, s in zip(ranks, signs) if s)
        hits += t <= t_obs + 1e-9
        total += 1
    return hits / total


def best_cut_bruteforce(W, k, max_size):
    """Minimum symmetric edge cut over all assignments with part sizes <= max_size (tiny graphs)."""
    W = np.asarray(W, float)
    S = np.maximum(W, W.T)
    np.fill_diagonal(S, 0)
    n = S.shape[0]
    best = np.inf
    best_part = None
    for labels in itertools.product(range(k), repeat=n):
        if labels[0] != 0:
            continue  # label symmetry
        sizes = np.bincount(labels, minlength=k)
        if sizes.max() > max_size or sizes.min() == 0:
            continue
        lab = np.array(labels)
        cut = S[lab[:, None] != lab[None, :]].sum() / 2
        if cut < best - 1e-15:
            best, best_part = cut, lab
    return best, best_part


def metrics(forecast, truth, floor=1.0):
    """(mae, rmse, mape%) for one node's flattened values."""
    f = np.ravel(forecast)
    y = np.ravel(truth)
    e = f - y
    keep = np.abs(y) >= floor
    mape = 100 * np.mean(np.abs(e[keep]) / np.abs(y[keep])) if keep.any() else np.nan
    return np.mean(np.abs(e)), np.sqrt(np.mean(e ** 2)), mape


def two_clique_distances():
    """Two 4-cliques (unit distances) bridged by one distance-2 pair."""
    d = []
    for clique in (range(4), range(4, 8)):
        for i in clique:
            for j in clique:
                if i != j:
                    d.append((str(i), str(j), 1.0))
    d += [("3", "4", 2.0), ("4", "3", 2.0)]
    return d, [str(i) for i in range(8)]


def random_geometric(rng, n=200, radius=0.13):
    """Unit-square geometric graph as (distance triplets, node ids); distances in km-ish units."""
    pts = rng.uniform(size=(n, 2))
    ids = [f"g{i:03d}" for i in range(n)]
    trip = []
    for i in range(n):
        for j in range(n):
            if i != j:
                d = float(np.hypot(*(pts[i] - pts[j])))
                if d <= radius:
                    trip.append((ids[i], ids[j], 1000.0 * d))
    return trip, ids


def cut_of(W, labels):
    S = np.maximum(W, W.T)
    np.fill_diagonal(S, 0)
    lab = np.asarray(labels)
    return S[lab[:, None] != lab[None, :]].sum() / 2


def best_random_balanced_cut(W, k, rng, trials=100):
    """Minimum cut over ``trials`` uniformly shuffled, equal-as-possible assignments."""
    n = W.shape[0]
    base = np.arange(n) % k
    return min(cut_of(W, rng.permutation(base)) for _ in range(trials))
