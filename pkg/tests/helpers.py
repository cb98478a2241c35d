"""Small generators and brute-force oracles shared by the test modules."""

from fractions import Fraction

import numpy as np


def unit_rows(rng, n, dim, dtype=np.float64):
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(dtype)


def loop_maxsim(q, d, metric="cosine"):
    """Nested-loop MaxSim with plain Python floats."""
    total = 0.0
    for qi in np.asarray(q, dtype=np.float64).tolist():
        best = -float("inf")
        for dj in np.asarray(d, dtype=np.float64).tolist():
            if metric == "cosine":
                s = sum(a * b for a, b in zip(qi, dj))
            else:
                s = -sum((a - b) ** 2 for a, b in zip(qi, dj))
            best = max(best, s)
        total += best
    return total


def naive_rr(ranking, relevant, cutoff=10):
    for rank, doc in enumerate(ranking[:cutoff], 1):
        if doc in relevant:
            return Fraction(1, rank)
    return Fraction(0)


def naive_recall(ranking, relevant, k):
    if not relevant:
        return Fraction(0)
    return Fraction(len(set(ranking[:k]) & relevant), len(relevant))


def naive_ap(ranking, relevant):
    if not relevant:
        return Fraction(0)
    hits, total = 0, Fraction(0)
    for rank, doc in enumerate(ranking, 1):
        if doc in relevant:
            hits += 1
            total += Fraction(hits, rank)
    return total / len(relevant)


def random_eval_instance(rng, n_queries=None, pool=40):
    """Random run/qrels pair with some queries sharing no relevant docs with the run."""
    n_queries = n_queries or int(rng.integers(1, 8))
    run, qrels = {}, {}
    for qi in range(n_queries):
        qid = f"q{qi}"
        docs = [f"d{j}" for j in rng.permutation(pool)[: int(rng.integers(0, pool))]]
        run[qid] = docs
        qrels[qid] = {f"d{j}" for j in rng.choice(pool, size=int(rng.integers(1, 6)), replace=False)}
    return run, qrels


def central_difference(loss_fn, weights, h=1e-4):
    """Entry-wise central finite differences of ``loss_fn`` at ``weights``."""
    out = np.zeros_like(weights)
    for idx in np.ndindex(weights.shape):
        up, down = weights.copy(), weights.copy()
        up[idx] += h
        down[idx] -= h
        out[idx] = (loss_fn(up) - loss_fn(down)) / (2 * h)
    return out


def relative_errors(analytic, numeric):
    den = np.maximum(np.abs(analytic), np.abs(numeric))
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, np.abs(analytic - numeric) / safe, 0.0)
