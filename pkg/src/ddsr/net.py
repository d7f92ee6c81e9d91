"""Single-head encoder/decoder transformer denoiser in plain numpy.

The embedded token matrix (plus a two-part sinusoidal encoding of the row
position and the diffusion step) feeds both the encoder and the decoder;
the decoder cross-attends to the encoder output. Blocks are pre-norm
residual, attention is unmasked, there is no dropout. Backpropagation is
written out by hand; ``tests/test_net.py`` checks it against central
finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LN_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    M: int
    d: int
    E: int = 16
    F: int = 2048
    T: int | None = None  # largest diffusion step fed to the encoding, defaults to M

    def __post_init__(self) -> None:
        if self.E % 2:
            raise ValueError(f"embedding width must be even, got {self.E}")

    @property
    def max_step(self) -> int:
        return self.M if self.T is None else self.T


def positional_encoding(l: float, t: float, width: int) -> np.ndarray:
    """First half encodes the position ``l``, second half the step ``t``."""
    if width % 2:
        raise ValueError(f"width must be even, got {width}")
    half = width // 2
    m = np.arange(half)
    freq = 10000.0 ** (4 * (m // 2) / width)
    trig = np.where(m % 2 == 0, 0, 1)

    def part(v: float) -> np.ndarray:
        a = v / freq
        return np.where(trig == 0, np.sin(a), np.cos(a))

    return np.concatenate([part(l), part(t)])


def _pe_tables(cfg: NetConfig) -> tuple[np.ndarray, np.ndarray]:
    half = cfg.E // 2
    pos = np.stack([positional_encoding(l, 0, cfg.E)[:half] for l in range(cfg.M)])
    step = np.stack([positional_encoding(0, t, cfg.E)[half:] for t in range(cfg.max_step + 1)])
    return pos, step


# ---------------------------------------------------------------- parameters

_ATTN = ("q", "k", "v", "o")


def _shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    E, F, d = cfg.E, cfg.F, cfg.d
    s: dict[str, tuple[int, ...]] = {"emb": (d, E)}

    def norm(name):
        s[f"{name}_g"] = (E,)
        s[f"{name}_b"] = (E,)

    def attn(name):
        for p in _ATTN:
            s[f"{name}_{p}w"] = (E, E)
            s[f"{name}_{p}b"] = (E,)

    def ff(name):
        s[f"{name}_w1"] = (E, F)
        s[f"{name}_b1"] = (F,)
        s[f"{name}_w2"] = (F, E)
        s[f"{name}_b2"] = (E,)

    norm("enc_ln1"), attn("enc_att"), norm("enc_ln2"), ff("enc_ff"), norm("enc_lnf")
    norm("dec_ln1"), attn("dec_self"), norm("dec_ln2"), attn("dec_cross")
    norm("dec_ln3"), ff("dec_ff"), norm("dec_lnf")
    s["out_w"] = (E, d)
    s["out_b"] = (d,)
    return s


@dataclass
class NetParams:
    cfg: NetConfig
    arrays: dict[str, np.ndarray]
    _pe: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def copy(self) -> "NetParams":
        return NetParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.cfg, {k: v.astype(dtype) for k, v in self.arrays.items()})

    @property
    def pe(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pe is None:
            self._pe = _pe_tables(self.cfg)
        return self._pe

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(cfg: NetConfig, rng: np.random.Generator) -> NetParams:
    """Projections uniform in +-1/sqrt(E), biases zero, norms at identity."""
    bound = 1.0 / np.sqrt(cfg.E)
    arrays = {}
    for name, shape in _shapes(cfg).items():
        if name.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return NetParams(cfg, arrays)


def zeros_like(params: NetParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


# ---------------------------------------------------------------- layers


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def _ln_bwd(dy, cache):
    xh, inv, g = cache
    N = xh.shape[-1]
    dxh = dy * g
    dx = inv / N * (N * dxh - dxh.sum(-1, keepdims=True) - xh * (dxh * xh).sum(-1, keepdims=True))
    return dx, (dy * xh).reshape(-1, N).sum(0), dy.reshape(-1, N).sum(0)


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _att_fwd(p, name, xq, xkv):
    E = xq.shape[-1]
    q = xq @ p[f"{name}_qw"] + p[f"{name}_qb"]
    k = xkv @ p[f"{name}_kw"] + p[f"{name}_kb"]
    v = xkv @ p[f"{name}_vw"] + p[f"{name}_vb"]
    scale = 1.0 / np.sqrt(E)
    a = _softmax(np.matmul(q, np.swapaxes(k, -1, -2)) * scale)
    o = np.matmul(a, v)
    return o @ p[f"{name}_ow"] + p[f"{name}_ob"], (xq, xkv, q, k, v, a, o, scale)


def _lin_grads(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]), dy.reshape(-1, dy.shape[-1]).sum(0)


def _att_bwd(p, name, dy, cache, g):
    xq, xkv, q, k, v, a, o, scale = cache
    g[f"{name}_ow"], g[f"{name}_ob"] = _lin_grads(o, dy)
    do = dy @ p[f"{name}_ow"].T
    da = np.matmul(do, np.swapaxes(v, -1, -2))
    dv = np.matmul(np.swapaxes(a, -1, -2), do)
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dq = np.matmul(ds, k)
    dk = np.matmul(np.swapaxes(ds, -1, -2), q)
    g[f"{name}_qw"], g[f"{name}_qb"] = _lin_grads(xq, dq)
    g[f"{name}_kw"], g[f"{name}_kb"] = _lin_grads(xkv, dk)
    g[f"{name}_vw"], g[f"{name}_vb"] = _lin_grads(xkv, dv)
    dxq = dq @ p[f"{name}_qw"].T
    dxkv = dk @ p[f"{name}_kw"].T + dv @ p[f"{name}_vw"].T
    return dxq, dxkv


def _ff_fwd(p, name, x, keep=True):
    pre = x @ p[f"{name}_w1"]
    pre += p[f"{name}_b1"]
    if not keep:
        # inference only: reuse the wide buffer, it dominates memory traffic
        np.maximum(pre, 0.0, out=pre)
        return pre @ p[f"{name}_w2"] + p[f"{name}_b2"], None
    h = np.maximum(pre, 0.0)
    return h @ p[f"{name}_w2"] + p[f"{name}_b2"], (x, pre, h)


def _ff_bwd(p, name, dy, cache, g):
    x, pre, h = cache
    g[f"{name}_w2"], g[f"{name}_b2"] = _lin_grads(h, dy)
    dh = (dy @ p[f"{name}_w2"].T) * (pre > 0)
    g[f"{name}_w1"], g[f"{name}_b1"] = _lin_grads(x, dh)
    return dh @ p[f"{name}_w1"].T


# ---------------------------------------------------------------- model


def embed(params: NetParams, X: np.ndarray, t: np.ndarray, positional: bool = True) -> np.ndarray:
    dtype = params["emb"].dtype
    h = np.asarray(X, dtype=dtype) @ params["emb"]
    if positional:
        pos, step = params.pe
        t = np.asarray(t, dtype=np.int64)
        if t.min() < 0 or t.max() >= step.shape[0]:
            raise ValueError(f"diffusion step outside [0, {step.shape[0] - 1}]")
        n, M = X.shape[:2]
        pe = np.concatenate(
            [np.broadcast_to(pos[None, :M], (n, M, pos.shape[1])), np.broadcast_to(step[t][:, None, :], (n, M, step.shape[1]))],
            axis=-1,
        )
        h = h + pe.astype(dtype)
    return h


def forward(params: NetParams, X: np.ndarray, t, positional: bool = True, keep: bool = False, rows=None):
    """Row distributions ``q(X_0)`` of shape ``(n, M, d)``.

    With ``keep=True`` also returns ``(logits, cache)`` for ``backward``.
    ``rows`` (inference only) is an ``(n, M)`` mask of the rows whose
    output is needed; the position-wise decoder head runs only there and
    the other rows are returned as uniform.
    """
    X = np.asarray(X)
    cfg = params.cfg
    if X.ndim != 3 or X.shape[1] != cfg.M or X.shape[2] != cfg.d:
        raise ValueError(f"expected (n, {cfg.M}, {cfg.d}) input, got {X.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (X.shape[0],))
    p = params.arrays
    x = embed(params, X, t, positional)

    a1, c_eln1 = _ln_fwd(x, p["enc_ln1_g"], p["enc_ln1_b"])
    att, c_eatt = _att_fwd(p, "enc_att", a1, a1)
    h1 = x + att
    a2, c_eln2 = _ln_fwd(h1, p["enc_ln2_g"], p["enc_ln2_b"])
    ff, c_eff = _ff_fwd(p, "enc_ff", a2, keep)
    h2 = h1 + ff
    mem, c_elnf = _ln_fwd(h2, p["enc_lnf_g"], p["enc_lnf_b"])

    b1, c_dln1 = _ln_fwd(x, p["dec_ln1_g"], p["dec_ln1_b"])
    sa, c_dself = _att_fwd(p, "dec_self", b1, b1)
    y1 = x + sa
    b2, c_dln2 = _ln_fwd(y1, p["dec_ln2_g"], p["dec_ln2_b"])
    ca, c_dcross = _att_fwd(p, "dec_cross", b2, mem)
    y2 = y1 + ca
    if rows is not None and not keep:
        probs = np.full(y2.shape[:2] + (cfg.d,), 1.0 / cfg.d, dtype=y2.dtype)
        y2 = y2[rows]
        b3, _ = _ln_fwd(y2, p["dec_ln3_g"], p["dec_ln3_b"])
        o, _ = _ln_fwd(y2 + _ff_fwd(p, "dec_ff", b3, False)[0], p["dec_lnf_g"], p["dec_lnf_b"])
        probs[rows] = _softmax(o @ p["out_w"] + p["out_b"])
        return probs
    b3, c_dln3 = _ln_fwd(y2, p["dec_ln3_g"], p["dec_ln3_b"])
    ff2, c_dff = _ff_fwd(p, "dec_ff", b3, keep)
    y3 = y2 + ff2
    o, c_dlnf = _ln_fwd(y3, p["dec_lnf_g"], p["dec_lnf_b"])
    logits = o @ p["out_w"] + p["out_b"]
    probs = _softmax(logits)
    if not keep:
        return probs
    cache = (X, c_eln1, c_eatt, c_eln2, c_eff, c_elnf, c_dln1, c_dself, c_dln2, c_dcross, c_dln3, c_dff, c_dlnf, o)
    return probs, (logits, cache)


def backward(params: NetParams, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of a scalar with respect to every parameter block, given
    its gradient ``dlogits`` with respect to the output logits."""
    p = params.arrays
    X, c_eln1, c_eatt, c_eln2, c_eff, c_elnf, c_dln1, c_dself, c_dln2, c_dcross, c_dln3, c_dff, c_dlnf, o = cache
    g: dict[str, np.ndarray] = {}
    g["out_w"], g["out_b"] = _lin_grads(o, dlogits)
    do = dlogits @ p["out_w"].T
    dy3, g["dec_lnf_g"], g["dec_lnf_b"] = _ln_bwd(do, c_dlnf)

    db3 = _ff_bwd(p, "dec_ff", dy3, c_dff, g)
    dy2_ln, g["dec_ln3_g"], g["dec_ln3_b"] = _ln_bwd(db3, c_dln3)
    dy2 = dy3 + dy2_ln

    db2, dmem = _att_bwd(p, "dec_cross", dy2, c_dcross, g)
    dy1_ln, g["dec_ln2_g"], g["dec_ln2_b"] = _ln_bwd(db2, c_dln2)
    dy1 = dy2 + dy1_ln

    dq, dkv = _att_bwd(p, "dec_self", dy1, c_dself, g)
    dx_ln, g["dec_ln1_g"], g["dec_ln1_b"] = _ln_bwd(dq + dkv, c_dln1)
    dx = dy1 + dx_ln

    dh2, g["enc_lnf_g"], g["enc_lnf_b"] = _ln_bwd(dmem, c_elnf)
    da2 = _ff_bwd(p, "enc_ff", dh2, c_eff, g)
    dh1_ln, g["enc_ln2_g"], g["enc_ln2_b"] = _ln_bwd(da2, c_eln2)
    dh1 = dh2 + dh1_ln
    dq, dkv = _att_bwd(p, "enc_att", dh1, c_eatt, g)
    dx_ln, g["enc_ln1_g"], g["enc_ln1_b"] = _ln_bwd(dq + dkv, c_eln1)
    dx = dx + dh1 + dx_ln

    g["emb"] = X.reshape(-1, X.shape[-1]).T.astype(dx.dtype) @ dx.reshape(-1, dx.shape[-1])
    return g


class NonFiniteLoss(ArithmeticError):
    def __init__(self, index: int):
        super().__init__(f"non-finite loss contribution at batch index {index}")
        self.index = index


def loss_and_gradient(params: NetParams, X: np.ndarray, t, head, positional: bool = True):
    """Run ``head(probs, logits) -> (per_sample_loss, dloss/dlogits)`` on the
    network output and backpropagate. Returns ``(loss, grads)`` with the
    loss summed over the batch."""
    probs, (logits, cache) = forward(params, X, t, positional=positional, keep=True)
    per_sample, dlogits = head(probs, logits)
    per_sample = np.asarray(per_sample)
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NonFiniteLoss(int(bad[0]))
    return float(per_sample.sum()), backward(params, cache, dlogits)


class Model:
    """Callable denoiser view of a parameter set (``model(X, t) -> probs``)."""

    def __init__(self, params: NetParams, dtype=np.float32, chunk: int = 32, masked_only: bool = False):
        self.params = params.astype(dtype)
        self.chunk = chunk
        # masked diffusion only reads the distributions of masked (all-zero) rows
        self.masked_only = masked_only

    def __call__(self, X: np.ndarray, t) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (X.shape[0],))
        rows = ~X.any(axis=-1) if self.masked_only else None
        out = [
            forward(self.params, X[i : i + self.chunk], t[i : i + self.chunk],
                    rows=None if rows is None else rows[i : i + self.chunk])
            for i in range(0, X.shape[0], self.chunk)
        ]
        return np.concatenate(out).astype(np.float64)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: NetParams, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), lr=lr, **kw)


def adam_step(params: NetParams, grad: dict[str, np.ndarray], state: AdamState) -> tuple[NetParams, AdamState]:
    """One bias-corrected Adam descent step; returns new params and state."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new, m_new, v_new = {}, {}, {}
    for k, w in params.arrays.items():
        gk = grad[k]
        m = b1 * state.m[k] + (1.0 - b1) * gk
        v = b2 * state.v[k] + (1.0 - b2) * gk * gk
        new[k] = w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        m_new[k], v_new[k] = m, v
    out_state = AdamState(m_new, v_new, state.lr, b1, b2, state.eps, step)
    return NetParams(params.cfg, new), out_state


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DDSRCKPT"


def save_params(path: str | Path, params: NetParams) -> None:
    """``DDSRCKPT`` + u64 LE header length + UTF-8 JSON header + float64 LE data.

    The header lists the config and ``[name, shape]`` blocks in data order.
    """
    cfg = params.cfg
    names = list(_shapes(cfg))
    header = {
        "config": {"M": cfg.M, "d": cfg.d, "E": cfg.E, "F": cfg.F, "T": cfg.T},
        "blocks": [[n, list(params.arrays[n].shape)] for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for n in names:
            fh.write(np.ascontiguousarray(params.arrays[n], dtype="<f8").tobytes())


def load_params(path: str | Path) -> NetParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hl,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hl].decode("utf-8"))
    cfg = NetConfig(**header["config"])
    off = 16 + hl
    arrays = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return NetParams(cfg, arrays)
