"""Risk-seeking reinforcement learning of the diffusion denoiser.

Each epoch samples a batch of expressions, fits their constants, keeps
the top ``alpha`` percent and merges them into a long short-term buffer
whose minimum reward is the advantage baseline. The denoiser then takes
``C`` Adam steps on the token-wise clipped, KL-regularised surrogate plus
an entropy bonus, and finally the worst ``alpha`` percent of the buffer
is dropped.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import diffusion, net
from .constfit import fit_constants, fitted_tree
from .expr import Node, TokenLibrary, bfs_decode, simplified_complexity

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    B: int = 1000
    alpha: float = 5.0
    gamma: float = 1e-4
    lambda_: float = 0.0005
    epsilon: float = 0.2
    beta: float = 0.01
    C: int = 5
    G: int = 5
    N: int = 600
    oversampling: int = 3
    seed: int = 0
    M: int = 32
    E: int = 16
    F: int = 2048
    diffusion: str = "masked"
    policy: str = "grpo"
    buffer: str = "lst"
    clip_form: str = "ppo"
    loss_positions: str = "all"
    const_init: str = "ones"
    d3pm_beta_start: float = 0.99
    d3pm_beta_end: float = 0.80
    stop_reward: float | None = None

    _CHOICES = {
        "diffusion": ("masked", "d3pm"),
        "policy": ("grpo", "rspg"),
        "buffer": ("lst", "st"),
        "clip_form": ("ppo", "literal"),
        "loss_positions": ("all", "masked"),
        "const_init": ("ones", "uniform"),
    }

    def __post_init__(self) -> None:
        for key, allowed in self._CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.B < 1 or self.C < 0 or self.G < 1 or self.N < 0 or self.oversampling < 1:
            raise ValueError("B, G, oversampling must be >= 1 and C, N >= 0")
        if not 0 < self.alpha <= 100:
            raise ValueError("alpha is a percentage in (0, 100]")
        if self.M < 1:
            raise ValueError("M must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "TrainerConfig":
        """Build from JSON keys (``lambda`` maps to ``lambda_``); unknown keys raise."""
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {}
        for key, value in raw.items():
            attr = "lambda_" if key == "lambda" else key
            if attr not in names or key == "lambda_":
                raise ValueError(f"unknown config key {key!r}")
            kw[attr] = value
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lambda_")
        return dict(sorted(out.items()))


# ---------------------------------------------------------------- candidates


@dataclass(frozen=True)
class Candidate:
    seq: tuple[int, ...]
    tree: Node
    reward: float
    nrmse: float
    epoch: int
    complexity: int

    @property
    def sort_key(self):
        return (-self.reward, self.complexity, self.seq)


def reward_from_nrmse(err: float) -> float:
    return 1.0 / (1.0 + err) if math.isfinite(err) else 0.0


def reward(tree: Node, X: np.ndarray, y: np.ndarray) -> float:
    """``1 / (1 + NRMSE)`` of a tree with bound constants; 0 if non-finite."""
    from .constfit import nrmse
    from .expr import compile_tree

    pred = compile_tree(tree)(np.asarray(X, dtype=float))
    return reward_from_nrmse(nrmse(pred, np.asarray(y, dtype=float)))


def select_top(batch: Sequence[Candidate], alpha: float) -> list[Candidate]:
    """Best ``ceil(len * alpha / 100)`` by reward, then complexity, then sequence."""
    if not batch:
        raise ValueError("empty batch")
    k = math.ceil(len(batch) * alpha / 100.0 - 1e-12)
    return sorted(batch, key=lambda c: c.sort_key)[:k]


@dataclass
class RiskBuffer:
    alpha: float
    pool: dict[tuple[int, ...], Candidate] = field(default_factory=dict)

    @property
    def r_alpha(self) -> float:
        return min((c.reward for c in self.pool.values()), default=0.0)

    def __len__(self) -> int:
        return len(self.pool)

    def members(self) -> list[Candidate]:
        return sorted(self.pool.values(), key=lambda c: c.sort_key)

    def union(self, incoming: Iterable[Candidate]) -> "RiskBuffer":
        for cand in incoming:
            old = self.pool.get(cand.seq)
            if old is None or cand.reward > old.reward:
                self.pool[cand.seq] = cand
        return self

    def trim(self) -> "RiskBuffer":
        """Drop the ``ceil(|pool| * alpha / 100)`` lowest-reward members."""
        k = math.ceil(len(self.pool) * self.alpha / 100.0 - 1e-12)
        if k:
            for cand in self.members()[len(self.pool) - k :]:
                del self.pool[cand.seq]
        return self


def buffer_update(buf: RiskBuffer, incoming: Iterable[Candidate]) -> RiskBuffer:
    return buf.union(incoming)


# ---------------------------------------------------------------- objectives


@dataclass
class PolicyBatch:
    """Inputs of one gradient step for a set of buffered candidates."""

    X: np.ndarray  # (n, M, d) noised token matrices
    t: np.ndarray  # (n,)
    x0: np.ndarray  # (n, M) clean token ids
    loss_mask: np.ndarray  # (n, M) positions in the likelihood
    ent_mask: np.ndarray  # (n, M) positions in the entropy bonus
    adv: np.ndarray  # (n,) reward - R_alpha
    p_old: np.ndarray | None = None  # (n, M) old-policy probability of x0
    logp_ref: np.ndarray | None = None  # (n, M, d) reference log-probabilities
    skipped: int = 0


def _log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _token_grad(probs, x0):
    g = -probs.copy()
    np.put_along_axis(g, x0[..., None], np.take_along_axis(g, x0[..., None], -1) + 1.0, axis=-1)
    return g  # d log p(x0) / d logits


def clipped_term(h, A, epsilon: float, clip_form: str = "ppo"):
    """Clipped token term and its derivative with respect to ``h``.

    ``ppo`` is ``min(h*A, clip(h)*A)``; ``literal`` is ``min(h, clip(h))*A``,
    which differs only for negative advantages.
    """
    h, A = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(A, dtype=float))
    hc = np.clip(h, 1.0 - epsilon, 1.0 + epsilon)
    if clip_form == "ppo":
        u, v = h * A, hc * A
        return np.minimum(u, v), np.where(u <= v, A, 0.0)
    if clip_form == "literal":
        return np.minimum(h, hc) * A, np.where(h <= 1.0 + epsilon, A, 0.0)
    raise ValueError(f"unknown clip form {clip_form!r}")


def grpo_head(batch: PolicyBatch, epsilon: float, beta: float, norm: float, clip_form: str = "ppo"):
    """Head for ``net.loss_and_gradient`` giving the negated surrogate."""

    def head(probs, logits):
        logp = _log_softmax(logits)
        tok_lp = np.take_along_axis(logp, batch.x0[..., None], -1)[..., 0]
        mask = batch.loss_mask.astype(float)
        with np.errstate(divide="ignore", over="ignore"):
            h = np.exp(tok_lp - np.log(batch.p_old))
        h = np.where(mask > 0, h, 1.0)
        term, dterm = clipped_term(h, batch.adv[:, None], epsilon, clip_form)
        kl = (probs * (logp - batch.logp_ref)).sum(-1)
        J = ((term - beta * kl) * mask).sum(-1) / norm
        dkl = probs * (logp - batch.logp_ref - kl[..., None])
        dJ = (dterm * h)[..., None] * _token_grad(probs, batch.x0) - beta * dkl
        dJ *= (mask / norm)[..., None]
        return -J, -dJ

    return head


def rspg_head(batch: PolicyBatch, norm: float):
    """Negated risk-seeking policy-gradient objective."""

    def head(probs, logits):
        logp = _log_softmax(logits)
        tok_lp = np.take_along_axis(logp, batch.x0[..., None], -1)[..., 0]
        coef = batch.adv * (batch.adv >= 0) / norm
        mask = batch.loss_mask.astype(float)
        J = coef * (tok_lp * mask).sum(-1)
        dJ = (coef[:, None] * mask)[..., None] * _token_grad(probs, batch.x0)
        return -J, -dJ

    return head


def entropy_head(batch: PolicyBatch, scale: float):
    """Negated ``scale`` x mean entropy over the entropy positions."""

    def head(probs, logits):
        logp = _log_softmax(logits)
        H = -(probs * logp).sum(-1)
        mask = batch.ent_mask.astype(float)
        count = max(mask.sum(), 1.0)
        val = scale * (H * mask).sum(-1) / count
        dH = -probs * (logp + H[..., None])
        d = (scale * mask / count)[..., None] * dH
        return -val, -d

    return head


def combined_head(*heads):
    def head(probs, logits):
        total_v, total_d = 0.0, 0.0
        for h in heads:
            v, d = h(probs, logits)
            total_v = total_v + v
            total_d = total_d + d
        return total_v, total_d

    return head


def mean_entropy(probs: np.ndarray, mask: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        H = -np.where(probs > 0, probs * np.log(probs), 0.0).sum(-1)
    m = mask.astype(float)
    return float((H * m).sum() / max(m.sum(), 1.0))


def grpo_objective(params: net.NetParams, batch: PolicyBatch, cfg: TrainerConfig) -> float:
    """Value of the clipped, KL-regularised token-wise surrogate."""
    norm = cfg.B * cfg.alpha / 100.0
    probs, (logits, _) = net.forward(params, batch.X, batch.t, keep=True)
    v, _ = grpo_head(batch, cfg.epsilon, cfg.beta, norm, cfg.clip_form)(probs, logits)
    return float(-np.sum(v))


def rspg_gradient(params: net.NetParams, batch: PolicyBatch, cfg: TrainerConfig) -> dict[str, np.ndarray]:
    """Ascent direction of the risk-seeking policy gradient."""
    norm = cfg.B * cfg.alpha / 100.0
    _, g = net.loss_and_gradient(params, batch.X, batch.t, rspg_head(batch, norm))
    return {k: -v for k, v in g.items()}


def entropy_gradient(params: net.NetParams, batch: PolicyBatch, cfg: TrainerConfig) -> dict[str, np.ndarray]:
    """Ascent direction of ``lambda`` x mean entropy."""
    _, g = net.loss_and_gradient(params, batch.X, batch.t, entropy_head(batch, cfg.lambda_))
    return {k: -v for k, v in g.items()}


# ---------------------------------------------------------------- engine


@dataclass
class TrainResult:
    status: str
    best: Candidate | None
    curve: list[dict[str, float]]
    params: net.NetParams | None = None
    stats: dict[str, int] = field(default_factory=dict)


class Engine:
    """Holds the library, data, denoiser parameters and fit cache of a run."""

    def __init__(
        self,
        X: np.ndarray,
        y: np.ndarray,
        cfg: TrainerConfig,
        rng: np.random.Generator | None = None,
        denoiser: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    ):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.lib = TokenLibrary(self.X.shape[1])
        self.sigma = float(np.std(self.y)) if np.std(self.y) > 0 else 1.0
        ncfg = net.NetConfig(M=cfg.M, d=self.lib.d, E=cfg.E, F=cfg.F)
        self.params = net.init_params(ncfg, self.rng)
        self.adam = net.AdamState.for_params(self.params, lr=cfg.gamma)
        self.sched = diffusion.D3pmSchedule.linear(cfg.M, self.lib.d, cfg.d3pm_beta_start, cfg.d3pm_beta_end)
        self._fits: dict[tuple[int, ...], tuple[Node, float, int]] = {}
        self.gen_stats = diffusion.GenerationStats()
        self.counters = {"skipped_tokens": 0, "nonfinite_steps": 0, "fits": 0}
        # fixed denoiser for tests and oracles; None means the trained network
        self.denoiser = denoiser

    # -- sampling

    def generate(self, n: int) -> list[tuple[int, ...]]:
        model = self.denoiser
        if model is None:
            model = net.Model(self.params, masked_only=self.cfg.diffusion == "masked")
        if self.cfg.diffusion == "d3pm":
            return diffusion.d3pm_generate_batch(model, self.lib, self.sched, self.cfg.M, n, self.rng)
        return diffusion.generate_batch(model, self.lib, self.cfg.M, n, self.rng, self.gen_stats)

    def evaluate_seq(self, seq: tuple[int, ...], epoch: int) -> Candidate:
        hit = self._fits.get(seq)
        if hit is None:
            status, tree = bfs_decode(seq, self.lib)
            if status != "complete":
                raise AssertionError(f"generator produced an {status} sequence")
            init = None
            if self.cfg.const_init == "uniform":
                # per-sequence seed keeps the fit a pure function of the sequence
                sub = np.random.default_rng([self.cfg.seed, *seq])
                init = sub.uniform(-1, 1, size=sum(1 for n in tree if n.sym == "c"))
            res = fit_constants(tree, self.X, self.y, init=init, sigma=self.sigma)
            self.counters["fits"] += 1
            err = float("inf") if res.failed else res.nrmse
            ft = fitted_tree(tree, res)
            hit = (ft, err, simplified_complexity(ft))
            self._fits[seq] = hit
        tree, err, cx = hit
        return Candidate(seq, tree, reward_from_nrmse(err), err, epoch, cx)

    def sample_batch(self, epoch: int) -> list[Candidate]:
        cfg = self.cfg
        budget = cfg.oversampling * cfg.B
        seen: dict[tuple[int, ...], None] = {}
        while budget > 0 and len(seen) < cfg.B:
            # draws are iid, so asking only for the shortfall keeps the
            # "first B distinct" law while skipping wasted generations
            n = min(budget, cfg.B - len(seen))
            budget -= n
            for seq in self.generate(n):
                seen.setdefault(seq)
        return [self.evaluate_seq(s, epoch) for s in seen]

    # -- gradient steps

    def policy_batch(self, members: Sequence[Candidate], r_alpha: float, old: net.NetParams, ref: net.NetParams) -> PolicyBatch:
        cfg, lib, M = self.cfg, self.lib, self.cfg.M
        n = len(members)
        x0 = np.full((n, M), lib.pad_id, dtype=np.int64)
        for i, c in enumerate(members):
            x0[i, : len(c.seq)] = c.seq
        nonpad = x0 != lib.pad_id
        t = self.rng.integers(1, M + 1, size=n)
        X = np.zeros((n, M, lib.d))
        if cfg.diffusion == "masked":
            masked = np.zeros((n, M), dtype=bool)
            for i, c in enumerate(members):
                xm = diffusion.forward_to(diffusion.token_matrix(c.seq, lib, M), int(t[i]), self.rng)
                X[i] = xm.rows
                masked[i, list(xm.masked)] = True
            ent_mask = masked & nonpad
            loss_mask = nonpad if cfg.loss_positions == "all" else ent_mask
        else:
            for i, c in enumerate(members):
                X[i] = diffusion.d3pm_noise(diffusion.one_hot(c.seq, lib, M), self.sched, int(t[i]), self.rng)
            ent_mask = loss_mask = nonpad
        adv = np.array([c.reward - r_alpha for c in members])
        batch = PolicyBatch(X, t, x0, loss_mask.copy(), ent_mask, adv)
        if cfg.policy == "grpo":
            p_old = net.forward(old, X, t)
            batch.p_old = np.take_along_axis(p_old, x0[..., None], -1)[..., 0]
            zero = (batch.p_old <= 0) & batch.loss_mask
            if zero.any():
                batch.skipped = int(zero.sum())
                batch.loss_mask &= ~zero
                batch.p_old = np.where(zero, 1.0, batch.p_old)
            _, (ref_logits, _) = net.forward(ref, X, t, keep=True)
            batch.logp_ref = _log_softmax(ref_logits)
        return batch

    def gradient_step(self, batch: PolicyBatch) -> float:
        cfg = self.cfg
        norm = cfg.B * cfg.alpha / 100.0
        if cfg.policy == "grpo":
            pol = grpo_head(batch, cfg.epsilon, cfg.beta, norm, cfg.clip_form)
        else:
            pol = rspg_head(batch, norm)
        head = combined_head(pol, entropy_head(batch, cfg.lambda_))
        probs_box = {}

        def spy(probs, logits):
            probs_box["p"] = probs
            return head(probs, logits)

        _, grads = net.loss_and_gradient(self.params, batch.X, batch.t, spy)
        self.params, self.adam = net.adam_step(self.params, grads, self.adam)
        self.counters["skipped_tokens"] += batch.skipped
        return mean_entropy(probs_box["p"], batch.ent_mask)


def sample_batch(
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainerConfig,
    rng: np.random.Generator | None = None,
    denoiser: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> list[Candidate]:
    """One epoch's distinct, fitted candidates from a fresh engine."""
    return Engine(X, y, cfg, rng, denoiser).sample_batch(0)


def train(
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainerConfig,
    rng: np.random.Generator | None = None,
    on_epoch: Callable[[dict[str, float]], None] | None = None,
) -> TrainResult:
    """Run the training loop on the training split ``(X, y)``."""
    eng = Engine(X, y, cfg, rng)
    buf = RiskBuffer(cfg.alpha)
    best: Candidate | None = None
    curve: list[dict[str, float]] = []
    ref = old = eng.params
    t0 = time.perf_counter()
    for epoch in range(cfg.N):
        if epoch % cfg.G == 0:
            ref = eng.params.copy()
        old = eng.params.copy()
        batch = eng.sample_batch(epoch)
        top = select_top(batch, cfg.alpha)
        if cfg.buffer == "lst":
            buf.union(top)
            members = buf.members()
        else:
            members = top
        r_alpha = min(c.reward for c in members)
        for c in members:
            if best is None or c.sort_key < best.sort_key:
                best = c
        entropies = []
        for _ in range(cfg.C):
            pb = eng.policy_batch(members, r_alpha, old, ref)
            try:
                entropies.append(eng.gradient_step(pb))
            except net.NonFiniteLoss as exc:
                eng.counters["nonfinite_steps"] += 1
                log.warning("epoch %d: skipped gradient step (%s)", epoch, exc)
        if cfg.buffer == "lst":
            buf.trim()
        row = {
            "epoch": epoch,
            "best_reward": best.reward if best else 0.0,
            "mean_reward": float(np.mean([c.reward for c in batch])),
            "r_alpha": r_alpha,
            "mean_entropy": float(np.mean(entropies)) if entropies else float("nan"),
            "wall_seconds": time.perf_counter() - t0,
        }
        curve.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d best %.6f mean %.4f", epoch, row["best_reward"], row["mean_reward"])
        if cfg.stop_reward is not None and best is not None and best.reward >= cfg.stop_reward:
            break
    stats = dict(eng.counters)
    stats.update(
        pin_conflicts=eng.gen_stats.pin_conflicts,
        resampled=eng.gen_stats.resampled,
        fallbacks=eng.gen_stats.fallbacks,
    )
    if best is None:
        return TrainResult("no candidates", None, curve, eng.params, stats)
    return TrainResult("ok", best, curve, eng.params, stats)
