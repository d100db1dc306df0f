"""Genetic-programming symbolic regression over expression trees.

Population evolution with tournament selection, subtree crossover, three
mutation kinds and gradient-based constant fitting. A Pareto archive keeps,
for each complexity, the lowest-loss expression seen so far; the front is the
subset whose loss strictly improves on every simpler entry.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import expr as E

PENALTY = 1e6
ISLAND_STRIDE = 10_007

UNARY_DEFAULT = ("sin", "cos", "exp", "log")
BINARY_DEFAULT = ("add", "sub", "mul", "div")


class MissingSelection(ValueError):
    pass


@dataclass
class GpConfig:
    population_size: int = 500
    generations: int = 40
    tournament_size: int = 5
    crossover_prob: float = 0.7
    mutation_prob: float = 0.25
    max_depth: int = 6
    operator_set: tuple[str, ...] = BINARY_DEFAULT + UNARY_DEFAULT
    constant_range: tuple[float, float] = (-5.0, 5.0)
    const_opt_steps: int = 20
    const_opt_lr: float = 0.05
    const_opt_fraction: float = 0.1
    polish_steps: int = 300
    parsimony_pressure: float = 1e-3
    elitism: int = 5
    init_depth: tuple[int, int] = (2, 4)
    islands: int = 1  # independent populations whose archives are merged
    rng_seed: int = 0

    def __post_init__(self):
        self.operator_set = tuple(self.operator_set)
        self.constant_range = tuple(self.constant_range)
        self.init_depth = tuple(self.init_depth)
        if not (0 <= self.crossover_prob <= 1 and 0 <= self.mutation_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.crossover_prob + self.mutation_prob > 1:
            raise ValueError("crossover_prob + mutation_prob must not exceed 1")
        if self.max_depth < 2:
            raise ValueError("max_depth must be at least 2")
        if self.tournament_size < 1 or self.population_size < 2:
            raise ValueError("population and tournament sizes must be positive")
        if self.islands < 1:
            raise ValueError("islands must be at least 1")
        unknown = set(self.operator_set) - set(E.UNARY_OPS) - set(E.BINARY_OPS)
        if unknown:
            raise ValueError(f"unknown operators {sorted(unknown)}")

    @property
    def unary(self) -> tuple[str, ...]:
        return tuple(op for op in self.operator_set if op in E.UNARY_OPS)

    @property
    def binary(self) -> tuple[str, ...]:
        return tuple(op for op in self.operator_set if op in E.BINARY_OPS)


# ---------------------------------------------------------------------------
# fitness


def _as_columns(X) -> np.ndarray:
    """Accepts (N,) or (N, d) samples; returns (d, N) columns for evaluation."""
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X.T


def residual_squares(expr: E.Expr, X, y) -> np.ndarray:
    cols = _as_columns(X)
    with np.errstate(all="ignore"):
        pred = E.evaluate_array(expr, cols)
        r2 = (pred - y) ** 2
    # a point never costs more than a domain violation, so the mean stays finite
    return np.where(np.isfinite(r2), np.minimum(r2, PENALTY), PENALTY)


def fitness(expr: E.Expr, X, y) -> float:
    """MSE; every point with a domain violation or overflow costs PENALTY
    (squared residuals are capped at the same value)."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("fitness needs data")
    return float(np.mean(residual_squares(expr, X, y)))


# ---------------------------------------------------------------------------
# random trees and variation


def random_tree(rng: np.random.Generator, depth: int, n_vars: int, config: GpConfig, full: bool = False) -> E.Expr:
    """Grow (or full) tree of depth at most ``depth``."""
    lo, hi = config.constant_range
    unary, binary = config.unary, config.binary
    if depth <= 0 or (not full and rng.random() < 0.3):
        if rng.random() < 0.6:
            return E.Var(int(rng.integers(n_vars)))
        return E.Const(round(float(rng.uniform(lo, hi)), 4))
    if unary and (not binary or rng.random() < len(unary) / (len(unary) + 2 * len(binary))):
        return E.Unary(str(rng.choice(unary)), random_tree(rng, depth - 1, n_vars, config, full))
    op = str(rng.choice(binary))
    return E.Binary(
        op,
        random_tree(rng, depth - 1, n_vars, config, full),
        random_tree(rng, depth - 1, n_vars, config, full),
    )


def _random_path(rng: np.random.Generator, tree: E.Expr) -> E.Path:
    paths = [p for p, _ in E.iter_paths(tree)]
    return paths[int(rng.integers(len(paths)))]


def crossover(a: E.Expr, b: E.Expr, rng: np.random.Generator, max_depth: int = 6) -> tuple[E.Expr, E.Expr]:
    """Swap a random subtree of ``a`` with one of ``b``; parents back if too deep."""
    pa, pb = _random_path(rng, a), _random_path(rng, b)
    sa, sb = E.get_subtree(a, pa), E.get_subtree(b, pb)
    ca, cb = E.replace_subtree(a, pa, sb), E.replace_subtree(b, pb, sa)
    if E.depth(ca) > max_depth or E.depth(cb) > max_depth:
        return a, b
    return ca, cb


def mutate(a: E.Expr, rng: np.random.Generator, config: GpConfig, n_vars: int | None = None) -> E.Expr:
    """Point mutation, constant perturbation, or subtree replacement."""
    n_vars = n_vars or max(E.arity(a), 1)
    nodes = list(E.iter_paths(a))
    kinds = ["subtree"]
    op_paths = [
        p for p, n in nodes
        if (isinstance(n, E.Unary) and len(config.unary) > 1 and n.op in config.unary)
        or (isinstance(n, E.Binary) and len(config.binary) > 1 and n.op in config.binary)
    ]
    const_paths = [p for p, n in nodes if isinstance(n, E.Const)]
    if op_paths:
        kinds.append("point")
    if const_paths:
        kinds.append("constant")
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "point":
        path = op_paths[int(rng.integers(len(op_paths)))]
        node = E.get_subtree(a, path)
        pool = config.unary if isinstance(node, E.Unary) else config.binary
        choices = [op for op in pool if op != node.op]
        new_op = str(choices[int(rng.integers(len(choices)))])
        new = E.Unary(new_op, node.child) if isinstance(node, E.Unary) else E.Binary(new_op, node.left, node.right)
        return E.replace_subtree(a, path, new)
    if kind == "constant":
        path = const_paths[int(rng.integers(len(const_paths)))]
        lo, hi = config.constant_range
        c = E.get_subtree(a, path).value + float(rng.normal(0.0, 0.1 * (hi - lo)))
        return E.replace_subtree(a, path, E.Const(c))
    path = _random_path(rng, a)
    budget = config.max_depth - len(path)
    sub = random_tree(rng, int(rng.integers(0, min(budget, config.init_depth[1]) + 1)), n_vars, config)
    return E.replace_subtree(a, path, sub)


# ---------------------------------------------------------------------------
# constant optimization


class _GradCache:
    """Compiled value/derivative functions keyed by the lifted tree shape."""

    def __init__(self, maxsize: int = 4096):
        self.store: dict = {}
        self.maxsize = maxsize

    def get(self, lifted: E.Expr, n_vars: int, k: int):
        key = (lifted, n_vars)
        hit = self.store.get(key)
        if hit is None:
            derivs = [E.differentiate(lifted, n_vars + j) for j in range(k)]
            if len(self.store) >= self.maxsize:
                self.store.clear()
            hit = self.store[key] = E.compile_many([lifted, *derivs])
        return hit


_CACHE = _GradCache()


def optimize_constants(
    expr: E.Expr, X, y, steps: int = 20, lr: float = 0.05, n_vars: int | None = None
) -> E.Expr:
    """Adam on the MSE w.r.t. the tree's constants, using symbolic derivatives.

    Returns the best constants visited (never worse than the input).
    """
    vals = E.constants(expr)
    if not vals or steps <= 0:
        return expr
    cols = _as_columns(X)
    y = np.asarray(y, dtype=float)
    n_vars = n_vars or cols.shape[0]
    lifted, c0 = E.lift_constants(expr, n_vars)
    value_and_grad = _CACHE.get(lifted, n_vars, len(vals))
    c = np.array(c0, dtype=float)
    m = np.zeros_like(c)
    v = np.zeros_like(c)
    b1, b2, eps = 0.9, 0.999, 1e-8

    n = y.size
    best_c, best_loss = c.copy(), fitness(expr, X, y)
    with np.errstate(all="ignore"):
        for t in range(1, steps + 2):
            out = value_and_grad([*cols, *c])
            r = out[0] - y
            loss = float(r @ r) / n
            if not np.isfinite(loss):
                break
            if loss < best_loss:
                best_loss, best_c = loss, c.copy()
            if t > steps:
                break
            J = np.array([np.broadcast_to(d, r.shape) for d in out[1:]])
            g = 2.0 * (J @ r) / n
            if not np.all(np.isfinite(g)):
                break
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            c = c - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    if np.array_equal(best_c, np.asarray(c0)):
        return expr
    return E.with_constants(expr, best_c.tolist())


# ---------------------------------------------------------------------------
# Pareto front


@dataclass
class FrontEntry:
    expr: E.Expr
    complexity: int
    loss: float


@dataclass
class ParetoFront:
    entries: list[FrontEntry] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def best(self) -> FrontEntry:
        return min(self.entries, key=lambda e: e.loss)

    def at_most(self, max_complexity: int) -> FrontEntry | None:
        ok = [e for e in self.entries if e.complexity <= max_complexity]
        return min(ok, key=lambda e: e.loss) if ok else None

    def expr_string(self, e: FrontEntry) -> str:
        return E.to_string(E.rename(e.expr, self.names) if self.names else e.expr)

    def to_records(self) -> list[dict]:
        return [{"complexity": e.complexity, "loss": e.loss, "expr": self.expr_string(e)} for e in self.entries]

    def to_json(self) -> str:
        return json.dumps(self.to_records(), indent=1)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["complexity", "loss", "expr"])
            for r in self.to_records():
                w.writerow([r["complexity"], repr(r["loss"]), r["expr"]])

    @classmethod
    def from_records(cls, records: list[dict], names: Sequence[str] | None = None) -> "ParetoFront":
        names = list(names or [])
        entries = [FrontEntry(E.parse(r["expr"], names or None), int(r["complexity"]), float(r["loss"])) for r in records]
        return cls(entries, names)


class Archive:
    """Lowest loss per complexity; monotone by construction."""

    def __init__(self):
        self.best: dict[int, tuple[float, E.Expr]] = {}

    def offer(self, expr: E.Expr, loss: float) -> None:
        if not math.isfinite(loss):
            return
        c = E.complexity(expr)
        cur = self.best.get(c)
        if cur is None or loss < cur[0]:
            self.best[c] = (loss, expr)

    def front(self, names=None) -> ParetoFront:
        entries, best_loss = [], math.inf
        for c in sorted(self.best):
            loss, ex = self.best[c]
            if loss < best_loss:
                entries.append(FrontEntry(ex, c, loss))
                best_loss = loss
        return ParetoFront(entries, list(names or []))


# ---------------------------------------------------------------------------
# evolution


def _tournament(rng, scores: np.ndarray, k: int) -> int:
    idx = rng.integers(0, scores.size, size=k)
    return int(idx[np.argmin(scores[idx])])


def evolve(
    X,
    y,
    config: GpConfig,
    names: Sequence[str] | None = None,
    on_generation: Callable[[int, ParetoFront], None] | None = None,
) -> ParetoFront:
    """Run GP and return the Pareto front of (complexity, MSE).

    Deterministic for a given config (including ``rng_seed``) and data. With
    ``islands > 1`` island k runs on its own with seed ``rng_seed + 10007 k``
    (island 0 is the single-population run) and the archives are merged.
    """
    if config.islands > 1:
        merged = Archive()
        for k in range(config.islands):
            sub = GpConfig(**{**asdict(config), "islands": 1, "rng_seed": config.rng_seed + ISLAND_STRIDE * k})
            for e in evolve(X, y, sub, names, on_generation):
                merged.offer(e.expr, e.loss)
        return merged.front(names)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("evolve needs data")
    cols = _as_columns(X)
    n_vars = cols.shape[0]
    rng = np.random.default_rng(config.rng_seed)
    cache: dict[E.Expr, float] = {}

    def loss_of(t: E.Expr) -> float:
        v = cache.get(t)
        if v is None:
            v = cache[t] = fitness(t, X, y)
        return v

    archive = Archive()

    def offer(t: E.Expr, loss: float) -> None:
        archive.offer(t, loss)
        s = E.simplify(t)
        if s != t:
            archive.offer(s, loss_of(s))

    archive.offer(E.Const(float(np.mean(y))), float(np.var(y)))

    lo_d, hi_d = config.init_depth
    hi_d = min(hi_d, config.max_depth)
    depths = list(range(lo_d, hi_d + 1))
    pop = [
        random_tree(rng, depths[k % len(depths)], n_vars, config, full=bool(k % 2))
        for k in range(config.population_size)
    ]

    for gen in range(config.generations):
        losses = np.array([loss_of(t) for t in pop])
        sizes = np.array([E.complexity(t) for t in pop])
        scores = losses * (1.0 + config.parsimony_pressure * sizes)
        order = np.argsort(scores, kind="stable")
        n_opt = max(1, int(config.const_opt_fraction * len(pop)))
        for k in order[:n_opt]:
            t = optimize_constants(pop[k], X, y, config.const_opt_steps, config.const_opt_lr, n_vars)
            if t is not pop[k]:
                pop[k] = t
                losses[k] = loss_of(t)
                scores[k] = losses[k] * (1.0 + config.parsimony_pressure * E.complexity(t))
        for t, loss in zip(pop, losses):
            offer(t, float(loss))
        if on_generation is not None:
            on_generation(gen, archive.front(names))
        if gen == config.generations - 1:
            break

        order = np.argsort(scores, kind="stable")
        nxt = [pop[k] for k in order[: config.elitism]]
        while len(nxt) < config.population_size:
            r = rng.random()
            a = pop[_tournament(rng, scores, config.tournament_size)]
            if r < config.crossover_prob:
                b = pop[_tournament(rng, scores, config.tournament_size)]
                c1, c2 = crossover(a, b, rng, config.max_depth)
                nxt.append(c1)
                if len(nxt) < config.population_size:
                    nxt.append(c2)
            elif r < config.crossover_prob + config.mutation_prob:
                nxt.append(mutate(a, rng, config, n_vars))
            else:
                nxt.append(a)
        pop = nxt

    if config.polish_steps > 0:
        for c in sorted(archive.best):
            loss, t = archive.best[c]
            p = optimize_constants(t, X, y, config.polish_steps, config.const_opt_lr, n_vars)
            if p is not t:
                offer(p, loss_of(p))
    return archive.front(names)


# ---------------------------------------------------------------------------
# distillation and assembly


def _distill_one(args) -> ParetoFront:
    x, f, config, name = args
    return evolve(x, f, config, names=[name])


def distill(model, samples_per_fn: int = 256, config: GpConfig | None = None, n_jobs: int = 1) -> list[ParetoFront]:
    """One univariate GP run per shape function on uniform samples over [0, 1].

    Feature i uses seed ``config.rng_seed + i``. Variable ``x0`` of each front is
    the normalized feature.
    """
    from .shapefn import forward_batch

    config = config or GpConfig()
    grid = np.linspace(0.0, 1.0, samples_per_fn)
    jobs = []
    for i, net in enumerate(model.shape_fns):
        cfg = GpConfig(**{**asdict(config), "rng_seed": config.rng_seed + i})
        jobs.append((grid, forward_batch(net, grid).output, cfg, f"{model.feature_names[i]}_bar"))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(_distill_one, jobs))
    return [_distill_one(j) for j in jobs]


def assemble(model, chosen: Sequence[E.Expr | None]) -> E.Expr:
    """Substitute one univariate expression per feature (in its normalized
    variable ``x0``) into the NAM/QNM sum. The result is in raw inputs, scaled
    by the model's target scale, and simplified."""
    if len(chosen) != model.D or any(c is None for c in chosen):
        missing = [i for i in range(model.D) if i >= len(chosen) or chosen[i] is None]
        raise MissingSelection(f"no expression chosen for feature(s) {missing}")
    norm = model.normalization
    g = []
    for i, c in enumerate(chosen):
        if norm is None:
            xbar = E.Var(i)
        else:
            xbar = E.Binary("div", E.Binary("sub", E.Var(i), E.Const(float(norm.lo[i]))), E.Const(float(norm.span[i])))
        g.append(E.substitute(c, {0: xbar}))

    terms: list[E.Expr] = []
    for i in range(model.D):
        if model.w[i] != 0.0:
            terms.append(E.Binary("mul", E.Const(float(model.w[i])), g[i]))
    for (i, j), v in zip(model.pairs, model.w_hat):
        if v != 0.0:
            terms.append(E.Binary("mul", E.Const(float(v)), E.Binary("mul", g[i], g[j])))
    if not terms:
        return E.Const(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = E.Binary("add", total, t)
    if model.target_scale != 1.0:
        total = E.Binary("mul", E.Const(float(model.target_scale)), total)
    return E.rename(E.simplify(total), model.feature_names)
