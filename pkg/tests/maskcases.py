"""Randomised checks of the drop-mask invariants, shared by unit and acceptance tests."""

import numpy as np

from droptop import debias


def random_case(rng):
    h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
    c, c2 = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    hl, wl = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
    f_first = np.abs(rng.normal(size=(c, h, w)))
    f_last = np.abs(rng.normal(size=(c2, hl, wl)))
    tied = bool(rng.random() < 0.3)
    if tied:
        # coarse values force ties in the attention map
        f_first = np.round(f_first * 2) / 2
        f_last = np.round(f_last * 2) / 2
    gamma = float(rng.uniform(0, 100))
    kappa = float(rng.uniform(0, gamma))
    return f_first, f_last, kappa, gamma, tied


def positive_scale(rng, tied):
    # with exact ties only power-of-two factors keep every tie bit-exact
    if tied:
        return float(2.0 ** int(rng.integers(-6, 7)))
    return float(rng.uniform(0.01, 100))


def check_hard(rng):
    """Return a list of violated invariant names for one random case."""
    f_first, f_last, kappa, gamma, tied = random_case(rng)
    h, w = f_first.shape[1:]
    att = debias.fuse(f_first, f_last)
    n_k, n_r = debias.stabilize(kappa, gamma, h, w)
    m = debias.hard_mask(att, n_k, n_r, rng).values
    bad = []
    if int((m == 0).sum()) != n_k + n_r or not np.isin(m, (0.0, 1.0)).all():
        bad.append("zero_count")
    # brute-force oracle: sort by (-value, index)
    flat = att.reshape(-1)
    top = sorted(range(flat.size), key=lambda i: (-flat[i], i))[:n_k]
    if (m.reshape(-1)[top] != 0).any():
        bad.append("top_masked")
    s = positive_scale(rng, tied)
    scaled = debias.fuse(f_first * s, f_last)
    if set(debias.top_order(scaled)[:n_k]) != set(debias.top_order(att)[:n_k]):
        bad.append("scale_invariance")
    return bad


def check_soft(rng):
    f_first, f_last, _, _, _ = random_case(rng)
    att = debias.fuse(f_first, f_last)
    n = att.size
    n_k = int(rng.integers(1, n + 1))
    m = debias.soft_mask(att, n_k).values.reshape(-1)
    bad = []
    if not ((m > 0) & (m <= 1)).all():
        bad.append("soft_range")
    order = debias.top_order(att)
    expect = np.ones(n)
    expect[order[:n_k]] = np.arange(1, n_k + 1) / n_k
    if not np.allclose(m, expect, rtol=0, atol=1e-6):
        bad.append("soft_rank_linear")
    return bad


def run(n_cases, seed=0):
    rng = np.random.default_rng(seed)
    failures = {}
    for _ in range(n_cases):
        for name in check_hard(rng) + check_soft(rng):
            failures[name] = failures.get(name, 0) + 1
    return failures
