from collections import Counter
from itertools import combinations

import numpy as np
import pytest

from ddsr.diffusion import (
    D3pmSchedule,
    GenerationStats,
    complete_prefix,
    d3pm_forward,
    d3pm_generate_batch,
    d3pm_noise,
    d3pm_posterior,
    forward_mask_step,
    forward_to,
    generate,
    generate_batch,
    one_hot,
    token_matrix,
)
from ddsr.expr import MAX_CONSTANTS, TokenLibrary, bfs_decode, has_nested_trig, n_constants


def uniform_model(d):
    def model(X, t):
        return np.full(X.shape, 1.0 / d)

    return model


def fixed_model(lib, M, symbols):
    target = one_hot(lib.ids(symbols), lib, M)

    def model(X, t):
        return np.broadcast_to(target, X.shape).copy()

    return model


def test_mask_step_zeroes_one_row(lib2):
    x0 = token_matrix(lib2.ids(["+", "x1", "x2"]), lib2, 4)
    x1 = forward_mask_step(x0, np.random.default_rng(0))
    assert x1.t == 1 and len(x1.masked) == 1
    q = x1.masked[0]
    assert not x1.rows[q].any()
    keep = [i for i in range(4) if i != q]
    assert np.array_equal(x1.rows[keep], x0.rows[keep])


def test_forward_to_limits(lib2):
    x0 = token_matrix(lib2.ids(["x1"]), lib2, 4)
    rng = np.random.default_rng(0)
    assert forward_to(x0, 0, rng) == x0
    full = forward_to(x0, 4, rng)
    assert not full.rows.any() and sorted(full.masked) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        forward_mask_step(full, rng)
    with pytest.raises(ValueError):
        forward_to(x0, 5, rng)


def test_forward_trajectory_masks_each_index_once(lib2):
    rng = np.random.default_rng(1)
    M = 7
    x0 = token_matrix(lib2.ids(["+", "x1", "x2"]), lib2, M)
    for _ in range(10_000):
        xm = x0
        for step in range(M):
            xm = forward_mask_step(xm, rng)
            assert xm.t == step + 1 == len(set(xm.masked))
        assert sorted(xm.masked) == list(range(M))


def test_forward_to_subsets_uniform(lib2):
    rng = np.random.default_rng(2)
    x0 = token_matrix(lib2.ids(["+", "x1", "x2"]), lib2, 4)
    trials = 100_000
    counts = Counter(frozenset(forward_to(x0, 2, rng).masked) for _ in range(trials))
    assert set(counts) == {frozenset(c) for c in combinations(range(4), 2)}
    for c in counts.values():
        assert abs(c / trials - 1 / 6) < 0.01


def test_complete_prefix(lib2):
    toks = np.array(lib2.ids(["+", "x1", "x2", "x1"]))
    assert complete_prefix(toks, np.array([True, True, True, False]), lib2) == 3
    assert complete_prefix(toks, np.array([True, False, True, True]), lib2) is None


def test_generate_follows_point_mass_model(lib2):
    M = 8
    model = fixed_model(lib2, M, ["*", "sin", "x2", "x1"])
    for seed in range(20):
        assert generate(model, lib2, M, np.random.default_rng(seed)) == tuple(lib2.ids(["*", "sin", "x2", "x1"]))


def test_generate_uniform_model_10k():
    lib = TokenLibrary(2)
    M = 32
    stats = GenerationStats()
    seqs = generate_batch(uniform_model(lib.d), lib, M, 10_000, np.random.default_rng(3), stats)
    assert stats.steps <= M
    for s in seqs:
        status, tree = bfs_decode(s, lib)
        assert status == "complete" and len(s) <= M
        assert n_constants(tree) <= MAX_CONSTANTS and not has_nested_trig(tree)


def test_generate_single_position():
    lib = TokenLibrary(1)
    seqs = generate_batch(uniform_model(lib.d), lib, 1, 50, np.random.default_rng(4))
    assert all(len(s) == 1 and lib.arity[s[0]] == 0 for s in seqs)


def test_generation_preserves_revealed_tokens(lib2):
    """A spy model records the inputs: a revealed row never changes."""
    M = 10
    seen = []

    def spy(X, t):
        seen.append(X.copy())
        return np.full(X.shape, 1.0 / lib2.d)

    seqs = generate_batch(spy, lib2, M, 1, np.random.default_rng(5))
    for prev, nxt in zip(seen, seen[1:]):
        shown = prev[0].any(axis=1)
        assert np.array_equal(prev[0][shown], nxt[0][shown])
        assert nxt[0].any(axis=1).sum() == shown.sum() + 1
    last = seen[-1][0]
    shown = np.flatnonzero(last.any(axis=1))
    assert all(s < M for s in shown)
    assert len(seqs[0]) >= 1


def test_generation_is_seeded(lib2):
    a = generate_batch(uniform_model(lib2.d), lib2, 12, 30, np.random.default_rng(8))
    b = generate_batch(uniform_model(lib2.d), lib2, 12, 30, np.random.default_rng(8))
    assert a == b


# ---------------------------------------------------------------- D3PM


def test_d3pm_qbar_rows_and_convergence():
    d = 17
    sched = D3pmSchedule(tuple([0.99] * 1000), d)
    for t in (0, 1, 10, 500, 1000):
        Qb = sched.Qbar(t)
        assert np.allclose(Qb.sum(axis=1), 1.0, atol=1e-12, rtol=0)
    tv = 0.5 * np.abs(sched.Qbar(1000) - 1.0 / d).sum(axis=1)
    assert tv.max() < 1e-3
    with pytest.raises(ValueError):
        sched.Qbar(1001)


def test_d3pm_qbar_matches_matrix_product():
    rng = np.random.default_rng(0)
    sched = D3pmSchedule(tuple(rng.uniform(0.5, 1.0, size=6)), 5)
    prod = np.eye(5)
    for t in range(1, 7):
        prod = prod @ sched.Q(t)
        assert np.allclose(prod, sched.Qbar(t), atol=1e-14)


def test_d3pm_forward_limits():
    rng = np.random.default_rng(1)
    x0 = rng.dirichlet(np.ones(6), size=4)
    ident = D3pmSchedule((1.0, 1.0), 6)
    assert np.allclose(d3pm_forward(x0, ident, 2), x0)
    mix = D3pmSchedule((0.0,), 6)
    assert np.allclose(d3pm_forward(x0, mix, 1), 1 / 6)
    rnd = D3pmSchedule(tuple(rng.uniform(size=5)), 6)
    assert np.allclose(d3pm_forward(x0, rnd, 5).sum(1), 1.0, atol=1e-12, rtol=0)


def test_d3pm_posterior_examples():
    d = 3
    x0 = np.eye(d)[[0, 2]]
    sched = D3pmSchedule((1.0, 0.9), d)
    assert np.allclose(d3pm_posterior(x0, x0, sched, 1), x0)
    near = D3pmSchedule((0.99, 0.98), d)
    post = d3pm_posterior(x0, x0, near, 2)
    assert np.array_equal(post.argmax(1), [0, 2])
    # hand evaluation of the posterior for x_t = x_0 = e_0 at t=2
    b1, b2 = 0.99, 0.98
    qt = b2 * np.eye(d)[0] + (1 - b2) / d
    qb1 = b1 * np.eye(d)[0] + (1 - b1) / d
    want = qt * qb1 / (qt * qb1).sum()
    assert np.allclose(post[0], want, atol=1e-12)
    rng = np.random.default_rng(2)
    xt = rng.dirichlet(np.ones(d), size=5)
    p0 = rng.dirichlet(np.ones(d), size=5)
    assert np.allclose(d3pm_posterior(xt, p0, near, 2).sum(1), 1.0, atol=1e-9)


def test_d3pm_degenerate_posterior_is_uniform():
    d = 4
    sched = D3pmSchedule((1.0,), d)
    xt = np.eye(d)[[1]]
    x0 = np.eye(d)[[2]]  # impossible pair when nothing is mixed in
    assert np.allclose(d3pm_posterior(xt, x0, sched, 1), 0.25)


def test_d3pm_noise_and_generation():
    lib = TokenLibrary(2)
    M = 8
    sched = D3pmSchedule.linear(M, lib.d)
    assert sched.betas[0] == 0.99 and abs(sched.betas[-1] - 0.80) < 1e-15
    rng = np.random.default_rng(3)
    Xt = d3pm_noise(one_hot(lib.ids(["x1"]), lib, M), sched, 3, rng)
    assert np.array_equal(Xt.sum(1), np.ones(M))
    seqs = d3pm_generate_batch(uniform_model(lib.d), lib, sched, M, 200, rng)
    for s in seqs:
        assert bfs_decode(s, lib)[0] == "complete" and len(s) <= M
