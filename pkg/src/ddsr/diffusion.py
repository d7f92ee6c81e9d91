"""Single-token masking diffusion and the D3PM baseline.

Forward process: each step zeroes one more row of the ``M x d`` one-hot
token matrix, chosen uniformly among the rows still visible. Generation
runs it backwards: starting from the all-masked matrix the denoiser
predicts every row, a full valid sequence is sampled with the revealed
tokens pinned, and one more position (uniform over the masked ones) is
revealed. It stops as soon as the revealed prefix is a complete tree.

A denoiser is any callable ``model(X, t) -> probs`` taking ``X`` of shape
``(n, M, d)`` and integer steps ``t`` of shape ``(n,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import grammar
from .expr import TokenLibrary

Denoiser = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TokenMatrix:
    rows: np.ndarray
    masked: tuple[int, ...] = ()
    origin_length: int = 0

    @property
    def t(self) -> int:
        return len(self.masked)

    @property
    def M(self) -> int:
        return self.rows.shape[0]


def one_hot(seq: Sequence[int], lib: TokenLibrary, M: int) -> np.ndarray:
    """One-hot ``M x d`` matrix, PAD rows after the sequence."""
    if len(seq) > M:
        raise ValueError(f"sequence of length {len(seq)} exceeds M={M}")
    X = np.zeros((M, lib.d))
    ids = list(seq) + [lib.pad_id] * (M - len(seq))
    X[np.arange(M), ids] = 1.0
    return X


def token_matrix(seq: Sequence[int], lib: TokenLibrary, M: int) -> TokenMatrix:
    return TokenMatrix(one_hot(seq, lib, M), (), len(seq))


def forward_mask_step(xm: TokenMatrix, rng: np.random.Generator) -> TokenMatrix:
    if xm.t >= xm.M:
        raise ValueError("every row is already masked")
    taken = set(xm.masked)
    visible = [i for i in range(xm.M) if i not in taken]
    q = visible[int(rng.integers(len(visible)))]
    rows = xm.rows.copy()
    rows[q] = 0.0
    return replace(xm, rows=rows, masked=xm.masked + (q,))


def forward_to(x0: TokenMatrix, t: int, rng: np.random.Generator) -> TokenMatrix:
    if x0.t != 0:
        raise ValueError("forward_to starts from an unmasked matrix")
    if not 0 <= t <= x0.M:
        raise ValueError(f"t={t} outside [0, {x0.M}]")
    xm = x0
    for _ in range(t):
        xm = forward_mask_step(xm, rng)
    return xm


def complete_prefix(tokens: np.ndarray, revealed: np.ndarray, lib: TokenLibrary) -> int | None:
    """Length of the complete tree formed by the revealed prefix, if any."""
    pending = 1
    for i in range(tokens.shape[0]):
        if not revealed[i]:
            return None
        pending += int(lib.arity[tokens[i]]) - 1
        if pending == 0:
            return i + 1
    return None


@dataclass
class GenerationStats:
    steps: int = 0
    pin_conflicts: int = 0  # rows whose first pinned draw conflicted
    resampled: int = 0  # redraws spent on those rows
    fallbacks: int = 0  # rows that reused the previous intermediate


def generate_batch(
    model: Denoiser,
    lib: TokenLibrary,
    M: int,
    n: int,
    rng: np.random.Generator,
    stats: GenerationStats | None = None,
) -> list[tuple[int, ...]]:
    """Generate ``n`` complete sequences by reverse masked diffusion.

    Rows whose batched draw hits a pin conflict (a trig the feasibility
    table cannot anticipate) are redrawn exactly by depth-first search.
    Only if that search gives up is the previous intermediate estimate,
    consistent with every pin by construction, reused (``fallbacks``).
    """
    stats = stats if stats is not None else GenerationStats()
    d = lib.d
    tokens = np.full((n, M), -1, dtype=np.int64)
    revealed = np.zeros((n, M), dtype=bool)
    witness = np.full((n, M), lib.pad_id, dtype=np.int64)
    result: list[tuple[int, ...] | None] = [None] * n
    active = np.arange(n)
    t = M
    while active.size and t > 0:
        X = np.zeros((active.size, M, d))
        rev = revealed[active]
        bi, pi = np.nonzero(rev)
        X[bi, pi, tokens[active][bi, pi]] = 1.0
        probs = model(X, np.full(active.size, t, dtype=np.int64))
        pins = np.where(rev, tokens[active], -1)
        inter = _sample_pinned(probs, pins, lib, rng, M, stats)
        bad = inter[:, 0] < 0
        stats.fallbacks += int(bad.sum())
        inter[bad] = witness[active][bad]
        witness[active] = inter

        # reveal one masked position per row, uniformly
        u = rng.random(active.size)
        n_masked = (~rev).sum(axis=1)
        pick = np.floor(u * n_masked).astype(np.int64)
        order = np.argsort(rev, axis=1, kind="stable")  # masked positions first, ascending
        pos = order[np.arange(active.size), pick]
        tokens[active, pos] = inter[np.arange(active.size), pos]
        revealed[active, pos] = True
        t -= 1
        stats.steps += 1

        still = []
        for b in active:
            L = complete_prefix(tokens[b], revealed[b], lib)
            if L is not None:
                result[b] = tuple(int(x) for x in tokens[b, :L])
            else:
                still.append(b)
        active = np.array(still, dtype=np.int64)
    assert all(r is not None for r in result), "generation left an incomplete sequence"
    return result  # type: ignore[return-value]


def _sample_pinned(probs, pins, lib, rng, M, stats):
    n = probs.shape[0]
    out = np.full((n, M), -1, dtype=np.int64)
    seqs, conflict = grammar.sample_batch(probs, lib, rng, pins)
    stats.pin_conflicts += int(conflict.sum())
    for b in range(n):
        seq = seqs[b]
        if conflict[b]:
            stats.resampled += 1
            seq = grammar.sample_pinned_row(probs[b], pins[b], lib, rng)
            if seq is None:
                continue
        out[b] = seq + [lib.pad_id] * (M - len(seq))
    return out


def generate(model: Denoiser, lib: TokenLibrary, M: int, rng: np.random.Generator) -> tuple[int, ...]:
    return generate_batch(model, lib, M, 1, rng)[0]


# ---------------------------------------------------------------- D3PM


@dataclass(frozen=True)
class D3pmSchedule:
    betas: tuple[float, ...]
    d: int

    @classmethod
    def linear(cls, T: int, d: int, start: float = 0.99, end: float = 0.80) -> "D3pmSchedule":
        return cls(tuple(float(b) for b in np.linspace(start, end, T)), d)

    @property
    def T(self) -> int:
        return len(self.betas)

    def Q(self, t: int) -> np.ndarray:
        b = self.betas[t - 1]
        return b * np.eye(self.d) + (1.0 - b) / self.d

    def Qbar(self, t: int) -> np.ndarray:
        """Cumulative transition ``Q_1 ... Q_t`` (identity at ``t=0``).

        Matrices of the form ``b I + (1-b) 11^T/d`` are closed under
        products with ``b = prod(b_s)``.
        """
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        bbar = float(np.prod(self.betas[:t]))
        return bbar * np.eye(self.d) + (1.0 - bbar) / self.d


def d3pm_forward(x0: np.ndarray, sched: D3pmSchedule, t: int) -> np.ndarray:
    return x0 @ sched.Qbar(t)


def d3pm_posterior(xt: np.ndarray, x0: np.ndarray, sched: D3pmSchedule, t: int) -> np.ndarray:
    """Row-wise ``q(x_{t-1} | x_t, x_0)``; degenerate rows become uniform."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside [1, {sched.T}]")
    num = (xt @ sched.Q(t).T) * (x0 @ sched.Qbar(t - 1))
    den = np.sum((x0 @ sched.Qbar(t)) * xt, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        post = num / den
    s = post.sum(axis=-1, keepdims=True)
    ok = np.isfinite(s) & (s > 0) & (den > 0)
    uniform = np.full_like(post, 1.0 / post.shape[-1])
    return np.where(ok, post / np.where(ok, s, 1.0), uniform)


def d3pm_noise(x0: np.ndarray, sched: D3pmSchedule, t: int, rng: np.random.Generator) -> np.ndarray:
    """Sample one-hot ``X_t`` from ``q(X_t | X_0)``."""
    p = d3pm_forward(x0, sched, t)
    return _categorical_one_hot(p, rng)


def _categorical_one_hot(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])[..., None] * cum[..., -1:]
    idx = np.minimum((cum < u).sum(axis=-1), p.shape[-1] - 1)
    out = np.zeros_like(p)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def d3pm_generate_batch(
    model: Denoiser,
    lib: TokenLibrary,
    sched: D3pmSchedule,
    M: int,
    n: int,
    rng: np.random.Generator,
) -> list[tuple[int, ...]]:
    """Ablation sampler: uniform noise, ancestral posterior steps, and a
    grammar-constrained draw from the final step's distribution."""
    d = lib.d
    X = _categorical_one_hot(np.full((n, M, d), 1.0 / d), rng)
    for t in range(sched.T, 0, -1):
        p0 = model(X, np.full(n, t, dtype=np.int64))
        post = d3pm_posterior(X, p0, sched, t)
        if t > 1:
            X = _categorical_one_hot(post, rng)
    seqs, _ = grammar.sample_batch(post, lib, rng)
    return [tuple(s) for s in seqs]
