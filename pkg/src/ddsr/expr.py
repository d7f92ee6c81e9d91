"""Expression trees over a fixed token vocabulary.

Trees are immutable ``Node`` records. The token sequence used by the
generator is the breadth-first (level-order) linearisation of a tree, so
siblings sit next to each other and the root is always position 0.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

MAX_CONSTANTS = 10
TRIG = frozenset({"sin", "cos"})
UNARY = ("sin", "cos", "log", "sqrt", "exp")
BINARY = ("+", "-", "*", "/", "^")
PAD = "PAD"

VARIABLE, LITERAL, CONSTANT, UNARY_KIND, BINARY_KIND, PAD_KIND = (
    "variable",
    "literal-one",
    "constant-placeholder",
    "unary",
    "binary",
    "pad",
)
_ARITY = {VARIABLE: 0, LITERAL: 0, CONSTANT: 0, PAD_KIND: 0, UNARY_KIND: 1, BINARY_KIND: 2}


@dataclass(frozen=True)
class Token:
    symbol: str
    kind: str
    arity: int


@dataclass(frozen=True)
class TokenLibrary:
    """Ordered vocabulary ``{1, c, x1..xk} + unary + binary + PAD``."""

    input_dim: int
    tokens: tuple[Token, ...] = field(init=False)

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        toks = [Token("1", LITERAL, 0), Token("c", CONSTANT, 0)]
        toks += [Token(f"x{i + 1}", VARIABLE, 0) for i in range(self.input_dim)]
        toks += [Token(s, UNARY_KIND, 1) for s in UNARY]
        toks += [Token(s, BINARY_KIND, 2) for s in BINARY]
        toks.append(Token(PAD, PAD_KIND, 0))
        object.__setattr__(self, "tokens", tuple(toks))
        index = {tok.symbol: i for i, tok in enumerate(toks)}
        object.__setattr__(self, "_index", index)
        arity = np.array([t.arity for t in toks], dtype=np.int64)
        object.__setattr__(self, "arity", arity)
        object.__setattr__(self, "is_trig", np.array([t.symbol in TRIG for t in toks]))
        object.__setattr__(self, "is_const", np.array([t.kind == CONSTANT for t in toks]))
        object.__setattr__(self, "pad_id", index[PAD])
        object.__setattr__(self, "const_id", index["c"])

    @property
    def d(self) -> int:
        return len(self.tokens)

    def id(self, symbol: str) -> int:
        return self._index[symbol]

    def ids(self, symbols: Sequence[str]) -> list[int]:
        return [self._index[s] for s in symbols]

    def symbol(self, token_id: int) -> str:
        return self.tokens[token_id].symbol


@dataclass(frozen=True)
class Node:
    """One tree node. ``value`` is set only on constant leaves."""

    sym: str
    children: tuple["Node", ...] = ()
    value: float | None = None

    def __iter__(self) -> Iterator["Node"]:
        """Level-order iteration."""
        queue = deque([self])
        while queue:
            node = queue.popleft()
            yield node
            queue.extend(node.children)

    def size(self) -> int:
        return sum(1 for _ in self)

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)

    @property
    def is_number(self) -> bool:
        return self.sym == "1" or (self.sym == "c" and self.value is not None)

    @property
    def number(self) -> float:
        return 1.0 if self.sym == "1" else float(self.value)


def const(value: float) -> Node:
    return Node("c", (), float(value))


def parse_prefix(text: str) -> Node:
    """Build a tree from a whitespace-separated prefix string.

    Numbers become bound constant leaves, so ``"* 3 x1"`` is ``3*x1``.
    Mostly a convenience for tests and fixtures.
    """
    items = text.split()
    pos = 0

    def build() -> Node:
        nonlocal pos
        if pos >= len(items):
            raise ValueError(f"truncated prefix expression: {text!r}")
        sym = items[pos]
        pos += 1
        if sym in BINARY:
            return Node(sym, (build(), build()))
        if sym in UNARY:
            return Node(sym, (build(),))
        if sym == "1" or sym == "c" or (sym.startswith("x") and sym[1:].isdigit()):
            return Node(sym)
        try:
            return const(float(sym))
        except ValueError:
            raise ValueError(f"unknown symbol {sym!r}") from None

    root = build()
    if pos != len(items):
        raise ValueError(f"trailing tokens in {text!r}")
    return root


def constants(tree: Node) -> list[float | None]:
    """Constant-placeholder values in level order."""
    return [n.value for n in tree if n.sym == "c"]


def n_constants(tree: Node) -> int:
    return sum(1 for n in tree if n.sym == "c")


def bind_constants(tree: Node, values: Sequence[float]) -> Node:
    """Return a copy with the level-ordered ``c`` leaves bound to ``values``."""
    slots = [n for n in tree if n.sym == "c"]
    if len(slots) != len(values):
        raise ValueError(f"tree has {len(slots)} constants, got {len(values)} values")
    mapping = {id(n): float(v) for n, v in zip(slots, values)}

    def rebuild(node: Node) -> Node:
        if node.sym == "c":
            return const(mapping[id(node)])
        if not node.children:
            return node
        return Node(node.sym, tuple(rebuild(c) for c in node.children))

    return rebuild(tree)


def has_nested_trig(tree: Node) -> bool:
    def walk(node: Node, inside: bool) -> bool:
        is_trig = node.sym in TRIG
        if is_trig and inside:
            return True
        return any(walk(c, inside or is_trig) for c in node.children)

    return walk(tree, False)


# ---------------------------------------------------------------- BFS codec

COMPLETE, INCOMPLETE, INVALID = "complete", "incomplete", "invalid"


def bfs_encode(tree: Node, lib: TokenLibrary) -> tuple[int, ...]:
    return tuple(lib.id(n.sym) for n in tree)


def bfs_decode(seq: Sequence[int], lib: TokenLibrary) -> tuple[str, Node | None]:
    """Rebuild a tree from a level-order token sequence.

    Returns ``(status, tree)``; the tree is only present when complete.
    Trailing PAD tokens after a complete tree are accepted.
    """
    ids = list(seq)
    d = lib.d
    pending = 1
    end = None
    for pos, tok in enumerate(ids):
        if not 0 <= tok < d:
            return INVALID, None
        if end is not None:
            if tok != lib.pad_id:
                return INVALID, None
            continue
        if tok == lib.pad_id:
            return INVALID, None
        pending += lib.tokens[tok].arity - 1
        if pending == 0:
            end = pos + 1
    if end is None:
        return INCOMPLETE, None

    # children of level-order node i occupy a contiguous run of later slots
    syms = [lib.tokens[t].symbol for t in ids[:end]]
    arities = [lib.tokens[t].arity for t in ids[:end]]
    first_child = []
    nxt = 1
    for a in arities:
        first_child.append(nxt)
        nxt += a
    built: list[Node | None] = [None] * end
    for i in range(end - 1, -1, -1):
        kids = tuple(built[first_child[i] + j] for j in range(arities[i]))
        built[i] = Node(syms[i], kids)
    return COMPLETE, built[0]


# ---------------------------------------------------------------- evaluation

def _safe_power(a, b):
    with np.errstate(all="ignore"):
        out = np.power(a, b)
    # real semantics: negative base with non-integer exponent has no real value
    bad = (np.asarray(a) < 0) & (np.asarray(b) != np.round(b))
    if np.any(bad):
        out = np.where(bad, np.nan, out)
    return out


def _apply(sym: str, args):
    if sym == "+":
        return args[0] + args[1]
    if sym == "-":
        return args[0] - args[1]
    if sym == "*":
        return args[0] * args[1]
    if sym == "/":
        return args[0] / args[1]
    if sym == "^":
        return _safe_power(args[0], args[1])
    if sym == "sin":
        return np.sin(args[0])
    if sym == "cos":
        return np.cos(args[0])
    if sym == "log":
        a = args[0]
        return np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), np.nan)
    if sym == "sqrt":
        return np.sqrt(args[0])
    if sym == "exp":
        return np.exp(args[0])
    raise ValueError(f"not an operator: {sym}")


def compile_tree(tree: Node) -> Callable[[np.ndarray, np.ndarray | None], np.ndarray]:
    """Compile to ``f(X, consts)`` evaluating row-wise over ``X`` (n x k).

    ``consts`` overrides the bound constants in level order. Passing a
    column array of shape ``(q, 1)`` per constant broadcasts, so ``q``
    constant vectors are evaluated in one call (used by the LM Jacobian).
    """
    slot = {id(n): i for i, n in enumerate(n for n in tree if n.sym == "c")}
    bound = np.array([v if v is not None else np.nan for v in constants(tree)], dtype=float)

    def build(node: Node):
        sym = node.sym
        if sym == "c":
            k = slot[id(node)]
            return lambda X, c: c[k]
        if sym == "1":
            one = np.float64(1.0)  # numpy scalar so 1/(1-1) gives inf, not an exception
            return lambda X, c: one
        if not node.children:
            j = int(sym[1:]) - 1
            return lambda X, c: X[:, j]
        fs = [build(ch) for ch in node.children]
        if len(fs) == 1:
            f0 = fs[0]
            return lambda X, c: _apply(sym, (f0(X, c),))
        f0, f1 = fs
        return lambda X, c: _apply(sym, (f0(X, c), f1(X, c)))

    body = build(tree)

    def run(X: np.ndarray, consts: np.ndarray | None = None) -> np.ndarray:
        c = bound if consts is None else consts
        with np.errstate(all="ignore"):
            out = body(X, c)
            return np.broadcast_to(out, np.broadcast_shapes(np.shape(out), (X.shape[0],))).astype(float)

    return run


def evaluate(tree: Node, X: np.ndarray) -> np.ndarray:
    """Row-wise value of a complete tree with bound constants.

    Domain violations give ``nan``/``inf`` rather than raising.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    for n in tree:
        if n.sym.startswith("x") and int(n.sym[1:]) > X.shape[1]:
            raise ValueError(f"{n.sym} out of range for {X.shape[1]} inputs")
        if n.sym == "c" and n.value is None:
            raise ValueError("unbound constant")
    out = compile_tree(tree)(X)
    return np.where(np.isfinite(out), out, np.nan)


# ---------------------------------------------------------------- simplifier

MAX_REWRITES = 1000


def _fold(sym: str, vals: list[float]) -> float | None:
    with np.errstate(all="ignore"):
        v = float(_apply(sym, tuple(np.float64(x) for x in vals)))
    return v if np.isfinite(v) else None


def _is(node: Node, value: float) -> bool:
    return node.is_number and node.number == value


def _rewrite(node: Node) -> Node | None:
    """One local rewrite at ``node`` or None when no rule fires."""
    sym, ch = node.sym, node.children
    if ch and all(c.is_number for c in ch):
        v = _fold(sym, [c.number for c in ch])
        if v is not None:
            return const(v)
    if len(ch) != 2:
        return None
    a, b = ch
    if sym == "+":
        if _is(b, 0.0):
            return a
        if _is(a, 0.0):
            return b
    elif sym == "-":
        if _is(b, 0.0):
            return a
        if a == b and _total(a):
            return const(0.0)
        # 0 - (0 - x) -> x
        if _is(a, 0.0) and b.sym == "-" and _is(b.children[0], 0.0):
            return b.children[1]
        # x - (0 - y) -> x + y
        if b.sym == "-" and _is(b.children[0], 0.0):
            return Node("+", (a, b.children[1]))
    elif sym == "*":
        if _is(b, 1.0):
            return a
        if _is(a, 1.0):
            return b
        if (_is(a, 0.0) and _total(b)) or (_is(b, 0.0) and _total(a)):
            return const(0.0)
    elif sym == "/":
        if _is(b, 1.0):
            return a
        # x/x is still undefined at the isolated zeros of x
        if a == b and not a.is_number and _total(a):
            return const(1.0)
    elif sym == "^":
        if _is(b, 1.0):
            return a
        if _is(b, 0.0):
            return const(1.0)
    if sym in ("+", "*"):
        merged = _merge_constants(sym, a, b)
        if merged is not None:
            return merged
    return None


_TOTAL = frozenset({"+", "-", "*", "sin", "cos", "1"})


def _total(node: Node) -> bool:
    """Finite for every finite input (overflow aside), with bound constants.

    Annihilating rules (x*0, x-x, x/x) only fire on such subtrees so a
    domain error inside x is not silently dropped.
    """
    return all(n.sym in _TOTAL or n.sym.startswith("x") or (n.sym == "c" and n.value is not None) for n in node)


def _merge_constants(op: str, a: Node, b: Node) -> Node | None:
    """(x op k1) op k2 -> x op (k1 op k2), in either operand order."""
    if a.is_number and not b.is_number:
        a, b = b, a
    if not b.is_number or a.sym != op or a.is_number:
        return None
    inner_l, inner_r = a.children
    if inner_r.is_number and not inner_l.is_number:
        x, k = inner_l, inner_r
    elif inner_l.is_number and not inner_r.is_number:
        x, k = inner_r, inner_l
    else:
        return None
    v = _fold(op, [k.number, b.number])
    if v is None:
        return None
    return Node(op, (x, const(v)))


def simplify(tree: Node) -> Node:
    """Apply the rewrite rules bottom-up until nothing changes.

    Stops after ``MAX_REWRITES`` rewrites and returns the current tree.
    """
    budget = [MAX_REWRITES]

    def go(node: Node) -> Node:
        if node.children:
            kids = tuple(go(c) for c in node.children)
            if kids != node.children:
                node = Node(node.sym, kids, node.value)
        while budget[0] > 0:
            new = _rewrite(node)
            if new is None:
                break
            budget[0] -= 1
            node = go(new) if new.children else new
        return node

    current = tree
    while budget[0] > 0:
        nxt = go(current)
        if nxt == current:
            break
        current = nxt
    return current


def simplified_complexity(tree: Node) -> int:
    return simplify(tree).size()


# ---------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}


def to_infix(tree: Node) -> str:
    """Deterministic infix form; constants printed with 9 significant digits."""
    sym = tree.sym
    if sym == "c":
        return "c" if tree.value is None else format(tree.value, ".9g")
    if not tree.children:
        return sym
    if len(tree.children) == 1:
        return f"{sym}({to_infix(tree.children[0])})"
    a, b = tree.children

    def wrap(child: Node, right: bool) -> str:
        s = to_infix(child)
        if child.sym in _PREC:
            pc, pp = _PREC[child.sym], _PREC[sym]
            if pc < pp or (pc == pp and (right or sym == "^")):
                return f"({s})"
        elif child.sym == "c" and child.value is not None and child.value < 0:
            return f"({s})"
        return s

    return f"{wrap(a, False)} {sym} {wrap(b, True)}"
