import numpy as np
import pytest
from hypothesis import settings

from ddsr.expr import BINARY, UNARY, Node, TokenLibrary, const

settings.register_profile("ddsr", deadline=None, max_examples=200)
settings.load_profile("ddsr")


@pytest.fixture
def lib2():
    return TokenLibrary(2)


def random_tree(rng: np.random.Generator, k: int, max_size: int, bound: bool = True) -> Node:
    """Random tree with at most ``max_size`` nodes, no nested trig."""

    def grow(budget: int, in_trig: bool) -> tuple[Node, int]:
        r = rng.random()
        if budget >= 3 and r < 0.35:
            op = BINARY[rng.integers(len(BINARY))]
            left, used = grow((budget - 1) // 2, in_trig)
            right, used2 = grow(budget - 1 - used, in_trig)
            return Node(op, (left, right)), 1 + used + used2
        if budget >= 2 and r < 0.55:
            ops = [u for u in UNARY if not (in_trig and u in ("sin", "cos"))]
            op = ops[rng.integers(len(ops))]
            child, used = grow(budget - 1, in_trig or op in ("sin", "cos"))
            return Node(op, (child,)), 1 + used
        leaf = rng.integers(k + 2)
        if leaf == 0:
            return Node("1"), 1
        if leaf == 1:
            return (const(float(np.round(rng.uniform(-3, 3), 3))) if bound else Node("c")), 1
        return Node(f"x{leaf - 1}"), 1

    return grow(max_size, False)[0]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.line(num))
