"""Grammar-constrained sampling of level-order token sequences.

A token is allowed at a position only if the partial sequence can still
be finished inside the ``M``-token budget, at most ``MAX_CONSTANTS``
constant placeholders are used and no sin/cos lands below another sin/cos.
Rows whose masked probability mass is zero fall back to the uniform
distribution over the allowed tokens.

The batched sampler also accepts *pins*: tokens fixed at given positions
(the already-revealed tokens during diffusion generation). A backward
feasibility table over the pending-slot count keeps the free choices
compatible with the pins; the conflict it cannot see (a pinned trig
token ending up under another trig token) is reported per row, and
``sample_pinned_row`` resolves such rows exactly by depth-first search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expr import MAX_CONSTANTS, TokenLibrary


@dataclass
class ConstraintState:
    """Incremental grammar state of one partial sequence."""

    lib: TokenLibrary
    M: int
    partial: list[int] = field(default_factory=list)
    pending_arity: int = 1
    constants_used: int = 0
    # trig ancestry per slot; slot i is filled by position i
    trig_ancestry: list[bool] = field(default_factory=lambda: [False])

    @property
    def remaining_budget(self) -> int:
        return self.M - len(self.partial)

    @property
    def complete(self) -> bool:
        return self.pending_arity == 0

    def push(self, tok: int) -> None:
        lib = self.lib
        pos = len(self.partial)
        if pos >= self.M:
            raise ValueError("token budget exhausted")
        if not valid_token_mask(self, pos)[tok]:
            raise ValueError(f"token {lib.symbol(tok)!r} not allowed at position {pos}")
        self.partial.append(tok)
        if tok == lib.pad_id:
            return
        a = int(lib.arity[tok])
        inside = self.trig_ancestry[pos] or bool(lib.is_trig[tok])
        self.trig_ancestry.extend([inside] * a)
        self.pending_arity += a - 1
        self.constants_used += int(lib.is_const[tok])


def valid_token_mask(state: ConstraintState, position: int) -> np.ndarray:
    """Boolean vector over the library: which tokens may go at ``position``."""
    lib = state.lib
    if position != len(state.partial):
        raise ValueError("position must equal the length of the partial sequence")
    mask = np.zeros(lib.d, dtype=bool)
    if state.complete:
        mask[lib.pad_id] = True
        return mask
    after = state.M - position - 1
    for tok, spec in enumerate(lib.tokens):
        if tok == lib.pad_id:
            continue
        if state.pending_arity - 1 + spec.arity > after:
            continue
        if lib.is_const[tok] and state.constants_used >= MAX_CONSTANTS:
            continue
        if lib.is_trig[tok] and state.trig_ancestry[position]:
            continue
        mask[tok] = True
    return mask


def constrained_sample(probs: np.ndarray, lib: TokenLibrary, rng: np.random.Generator) -> list[int]:
    """Draw one complete sequence from an ``M x d`` matrix of row distributions."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[1] != lib.d:
        raise ValueError(f"expected an M x {lib.d} matrix, got {probs.shape}")
    seqs, _ = sample_batch(probs[None], lib, rng)
    return seqs[0]


def feasible_pending(pins: np.ndarray, lib: TokenLibrary) -> np.ndarray:
    """``good[b, i, p]``: from pending count ``p`` before position ``i`` a
    completion consistent with the pins of row ``b`` exists."""
    n, M = pins.shape
    P = M + 2
    good = np.zeros((n, M + 1, P), dtype=bool)
    good[:, M, 0] = True
    pin_arity = np.where(pins >= 0, lib.arity[np.clip(pins, 0, None)], -1)
    is_pad_pin = pins == lib.pad_id
    p_idx = np.arange(P)
    for i in range(M - 1, -1, -1):
        nxt = good[:, i + 1]
        # free position: PAD keeps p=0, otherwise move p by -1, 0 or +1
        shifted_dn = np.zeros_like(nxt)
        shifted_dn[:, 1:] = nxt[:, :-1]
        shifted_up = np.zeros_like(nxt)
        shifted_up[:, :-1] = nxt[:, 1:]
        free = shifted_dn | nxt | shifted_up
        free[:, 0] = nxt[:, 0]
        row = free
        fixed = pins[:, i] >= 0
        if fixed.any():
            a = pin_arity[:, i]
            # pinned non-PAD of arity a: p >= 1 and p - 1 + a feasible next
            tgt = np.clip(p_idx[None, :] - 1 + a[:, None], 0, P - 1)
            pinned = np.take_along_axis(nxt, tgt, axis=1) & (p_idx[None, :] >= 1)
            pad_row = np.zeros_like(nxt)
            pad_row[:, 0] = nxt[:, 0]
            pinned = np.where(is_pad_pin[:, i : i + 1], pad_row, pinned)
            row = np.where(fixed[:, None], pinned, free)
        good[:, i] = row
    return good


def sample_batch(
    probs: np.ndarray,
    lib: TokenLibrary,
    rng: np.random.Generator,
    pins: np.ndarray | None = None,
) -> tuple[list[list[int]], np.ndarray]:
    """Sample one sequence per row of ``probs`` (n x M x d).

    Returns the sequences (PAD stripped) and a boolean ``conflict`` array
    marking rows whose pins could not be honoured; the sequence returned
    for a conflicting row is unspecified and must be discarded.
    """
    n, M, d = probs.shape
    if pins is None:
        pins = np.full((n, M), -1, dtype=np.int64)
    good = feasible_pending(pins, lib)
    P = M + 2

    arity = lib.arity
    pad = lib.pad_id
    nonpad = np.ones(d, dtype=bool)
    nonpad[pad] = False
    # pinned constants still to come strictly after each position
    pinned_c = (pins == lib.const_id).astype(np.int64)
    c_after = np.concatenate([np.cumsum(pinned_c[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((n, 1), np.int64)], axis=1)
    # trig pins, padded so child slots past the end read False
    trig_pin = np.zeros((n, M + 2), dtype=bool)
    trig_pin[:, :M] = (pins >= 0) & lib.is_trig[np.clip(pins, 0, None)]

    pending = np.ones(n, dtype=np.int64)
    used = np.zeros(n, dtype=np.int64)
    anc = np.zeros((n, M + 2), dtype=bool)
    next_slot = np.ones(n, dtype=np.int64)
    out = np.full((n, M), pad, dtype=np.int64)
    conflict = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    for i in range(M):
        if not (pending > 0).any() and not (pins[:, i:] >= 0).any():
            break
        nxt = good[:, i + 1]
        tgt = np.clip(pending[:, None] - 1 + arity[None, :], 0, P - 1)
        valid = np.take_along_axis(nxt, tgt, axis=1) & nonpad[None, :]
        valid &= ~(lib.is_trig[None, :] & anc[:, i : i + 1])
        # no token may put a pinned trig child under a trig
        under = anc[:, i : i + 1] | lib.is_trig[None, :]
        slot = np.minimum(next_slot, M)
        hits = ((arity >= 1)[None, :] & trig_pin[rows, slot][:, None]) | ((arity == 2)[None, :] & trig_pin[rows, slot + 1][:, None])
        valid &= ~(under & hits)
        over = (used + 1 + c_after[:, i]) > MAX_CONSTANTS
        valid[:, lib.const_id] &= ~over
        done = pending == 0
        valid[done] = False
        valid[done, pad] = True
        conflict |= ~valid.any(axis=1)

        w = probs[:, i, :] * valid
        total = w.sum(axis=1)
        empty = ~(total > 0)
        if empty.any():
            w[empty] = valid[empty].astype(float)
        cum = np.cumsum(w, axis=1)
        u = 1.0 - rng.random(n)
        x = u * cum[:, -1]
        tok = (cum < x[:, None]).sum(axis=1)
        tok = np.minimum(tok, d - 1)
        # guard against rounding landing on a zero-weight tail entry
        bad = ~valid[rows, tok]
        if bad.any():
            tok[bad] = d - 1 - np.argmax(valid[bad][:, ::-1], axis=1)

        pinned = pins[:, i] >= 0
        if pinned.any():
            ok = valid[rows, np.clip(pins[:, i], 0, d - 1)]
            conflict |= pinned & ~ok
            tok = np.where(pinned & ok, pins[:, i], tok)

        out[:, i] = tok
        a = arity[tok]
        live = ~done
        child_anc = anc[:, i] | lib.is_trig[tok]
        has1 = live & (a >= 1)
        anc[rows[has1], next_slot[has1]] = child_anc[has1]
        has2 = live & (a == 2)
        anc[rows[has2], next_slot[has2] + 1] = child_anc[has2]
        next_slot = np.where(live, next_slot + a, next_slot)
        used += lib.is_const[tok].astype(np.int64) * live
        pending = np.where(live, pending - 1 + a, pending)

    seqs = [[int(t) for t in row if t != pad] for row in out]
    return seqs, conflict


def sample_pinned_row(
    probs: np.ndarray,
    pins: np.ndarray,
    lib: TokenLibrary,
    rng: np.random.Generator,
    max_nodes: int = 200_000,
) -> list[int] | None:
    """One constrained draw honouring every pin, by depth-first search.

    The state at a position is the trig flag of every pending slot in
    level order plus the constants used so far, which decides exactly
    which continuations exist. Tokens are drawn from the masked row as
    in ``sample_batch``; a choice whose subtree of states has no
    completion is struck from the row and the draw repeated. Failed
    states are remembered. Returns ``None`` when no completion exists
    or the search exceeds ``max_nodes`` expansions.
    """
    M, d = probs.shape
    pins = np.asarray(pins, dtype=np.int64)
    # plain lists: the search touches a handful of tiny rows many times
    good = feasible_pending(pins[None], lib)[0].tolist()
    P = M + 2
    pad, const_id = lib.pad_id, lib.const_id
    arity = lib.arity.tolist()
    trig = lib.is_trig.tolist()
    rows = probs.tolist()
    pin = pins.tolist()
    c_after = np.concatenate([np.cumsum((pins == const_id)[::-1])[::-1][1:], [0]]).tolist()
    pad_tail = [bool(np.all((pins[i:] < 0) | (pins[i:] == pad))) for i in range(M + 1)]
    trig_pins = [j for j in range(M) if pin[j] >= 0 and trig[pin[j]]]
    dead: set = set()
    budget = [max_nodes]
    out: list[int] = []

    def visit(i, queue, used):
        if not queue:
            return pad_tail[i]
        if i == M:
            return False
        key = (i, queue, used)
        if key in dead:
            return False
        # a trig pin must not sit in a slot already under a trig, and one
        # still to be allocated needs a pending slot outside any trig
        end = i + len(queue)
        for j in trig_pins:
            if j >= end:
                if all(queue):
                    return False
                break
            if j >= i and queue[j - i]:
                return False
        budget[0] -= 1
        if budget[0] < 0:
            return False
        under = queue[0]
        nxt = good[i + 1]
        base = len(queue) - 1
        cap = used + 1 + c_after[i] <= MAX_CONSTANTS
        cands = [pin[i]] if pin[i] >= 0 else range(d)
        valid = [
            tok for tok in cands
            if tok != pad and nxt[min(base + arity[tok], P - 1)] and not (under and trig[tok])
            and (cap or tok != const_id)
        ]
        row = rows[i]
        while valid:
            w = [row[tok] for tok in valid]
            total = sum(w)
            if not total > 0:
                w, total = [1.0] * len(valid), float(len(valid))
            x = (1.0 - rng.random()) * total
            acc, j = 0.0, len(valid) - 1
            for k, wk in enumerate(w):
                acc += wk
                if acc >= x:
                    j = k
                    break
            tok = valid.pop(j)
            out.append(tok)
            child = under or trig[tok]
            if visit(i + 1, queue[1:] + (child,) * arity[tok], used + (tok == const_id)):
                return True
            out.pop()
        dead.add(key)
        return False

    return out if visit(0, (False,), 0) else None
