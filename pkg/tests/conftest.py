import numpy as np
from hypothesis import strategies as st

from yieldforge import expr as E

UNARY = ("sin", "cos", "exp", "log", "neg", "sqrt", "abs")
BINARY = ("add", "sub", "mul", "div", "pow")

leaf = st.one_of(
    st.floats(-5, 5, allow_nan=False).map(lambda v: E.Const(round(v, 3))),
    st.integers(0, 1).map(E.Var),
)


def _extend(children):
    return st.one_of(
        st.tuples(st.sampled_from(UNARY), children).map(lambda t: E.Unary(*t)),
        st.tuples(st.sampled_from(BINARY), children, children).map(lambda t: E.Binary(*t)),
    )


trees = st.recursive(leaf, _extend, max_leaves=16).filter(lambda t: E.depth(t) <= 6)


def central_fd(tree, i, x, h):
    xp = np.array(x, dtype=float)
    xm = xp.copy()
    xp[i] += h
    xm[i] -= h
    fp, fm = E.evaluate(tree, xp), E.evaluate(tree, xm)
    if isinstance(fp, E.DomainViolation) or isinstance(fm, E.DomainViolation):
        return None
    return (fp - fm) / (2 * h)


def pytest_terminal_summary(terminalreporter):
    rows = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                rows.append((props["criterion"], props["verdict"], props["detail"]))
    if rows:
        terminalreporter.section("acceptance criteria")
        for n, verdict, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
