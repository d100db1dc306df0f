"""Interpretability checks on fitted yield models.

Convexity of a distilled surface rho = c4 + c1 sin(c2 theta + c3) reduces to a
quadratic in X = sin(c2 theta + c3) from the polar curvature condition
r^2 + 2 r'^2 - r r'' >= 0. The general check projects the principal-stress
Hessian onto the tangent plane of the level set at on-surface samples.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import expr as E
from .data import TWO_PI, Surface, bisect_radius, principal_stresses
from .plasticity import SingularPoint, YieldModelHandle, _stress_maps, yield_gradient

# ---------------------------------------------------------------------------
# sinusoid form


@dataclass(frozen=True)
class Sinusoid:
    """a * sin(b * x + c) + d"""

    a: float
    b: float
    c: float
    d: float

    def __call__(self, x):
        return self.a * np.sin(self.b * np.asarray(x, dtype=float) + self.c) + self.d


def _affine(node, is_atom):
    """(slope, offset, atom) if node == slope * atom + offset, else None."""
    if is_atom(node):
        return 1.0, 0.0, node
    if isinstance(node, E.Const):
        return 0.0, node.value, None
    if isinstance(node, E.Unary) and node.op == "neg":
        r = _affine(node.child, is_atom)
        return None if r is None else (-r[0], -r[1], r[2])
    if not isinstance(node, E.Binary):
        return None
    L, R = _affine(node.left, is_atom), _affine(node.right, is_atom)
    if L is None or R is None:
        return None
    if node.op in ("add", "sub"):
        if L[2] is not None and R[2] is not None and L[2] != R[2]:
            return None
        sgn = 1.0 if node.op == "add" else -1.0
        return L[0] + sgn * R[0], L[1] + sgn * R[1], L[2] if L[2] is not None else R[2]
    if node.op == "mul":
        if L[2] is None:
            return L[1] * R[0], L[1] * R[1], R[2]
        if R[2] is None:
            return R[1] * L[0], R[1] * L[1], L[2]
        return None
    if node.op == "div" and R[2] is None and R[1] != 0.0:
        return L[0] / R[1], L[1] / R[1], L[2]
    return None


def match_sinusoid(node: E.Expr, var: int = 0) -> Sinusoid | None:
    """Recognize a * sin(b x + c) + d (or the cos equivalent) in one variable."""

    def is_wave(n):
        if not (isinstance(n, E.Unary) and n.op in ("sin", "cos")):
            return False
        inner = _affine(n.child, lambda m: isinstance(m, E.Var) and m.index == var)
        return inner is not None and inner[2] is not None

    outer = _affine(node, is_wave)
    if outer is None or outer[2] is None or outer[0] == 0.0:
        return None
    a, d, wave = outer
    b, c, _ = _affine(wave.child, lambda m: isinstance(m, E.Var) and m.index == var)
    if b == 0.0:
        return None
    if wave.op == "cos":
        c += math.pi / 2
    return Sinusoid(a, b, c, d)



def polar_coefficients(handle: YieldModelHandle, p: float = 0.0) -> list[float] | None:
    """(c1, c2, c3, c4) when the surface at pressure ``p`` is rho = c1 sin(c2 theta + c3) + c4.

    Requires a symbolic model that is affine in rho with a sinusoidal theta
    part; returns None otherwise.
    """
    if handle.kind != "symbolic" or "rho" not in handle.names or "theta" not in handle.names:
        return None
    ir, it = handle.names.index("rho"), handle.names.index("theta")
    fixed = {i: E.Const(float(handle.extras[n])) for i, n in enumerate(handle.names) if n in handle.extras}
    if "p" in handle.names:
        fixed[handle.names.index("p")] = E.Const(float(p))
    if any(n in ("s1", "s2", "s3") for n in handle.names):
        return None
    base = E.substitute(handle.expr, fixed)
    g = E.simplify(E.substitute(base, {ir: E.Const(0.0)}))
    wave = match_sinusoid(g, it)
    if wave is None:
        return None
    # slope in rho, checked to be constant on a few rays
    rho = np.array([1.0, 10.0, 100.0, 1000.0])
    th = np.array([0.1, 1.3, 2.9, 4.4])
    cols = [np.zeros(4) for _ in handle.names]
    cols[ir], cols[it] = rho, th
    f = E.compile_array(base)
    cols0 = list(cols)
    cols0[ir] = np.zeros(4)
    slope = (f(cols) - f(cols0)) / rho
    if not np.all(np.isfinite(slope)) or slope[0] == 0.0 or np.ptp(slope) > 1e-9 * abs(slope[0]):
        return None
    alpha = float(slope[0])
    return [-wave.a / alpha, wave.b, wave.c, -wave.d / alpha]

# ---------------------------------------------------------------------------
# convexity


@dataclass
class PolarConvexity:
    mode: str
    coefficients: list[float]  # c1..c4
    A1: float
    A2: float
    A3: float
    discriminant: float
    roots: list[float]
    violation: list[tuple[float, float]]  # X intervals inside [-1, 1] where convexity fails

    @property
    def convex(self) -> bool:
        return not self.violation

    def condition(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.A1 * X * X + self.A2 * X + self.A3

    def to_dict(self) -> dict:
        return asdict(self) | {"convex": self.convex}


def polar_convexity(c1: float, c2: float, c3: float, c4: float) -> PolarConvexity:
    """Convexity of rho = c1 sin(c2 theta + c3) + c4 as a polar curve."""
    A1 = c1 * c1 * (1.0 - c2 * c2)
    A2 = c1 * c4 * (2.0 + c2 * c2)
    A3 = c4 * c4 + 2.0 * c1 * c1 * c2 * c2
    disc = A2 * A2 - 4.0 * A1 * A3
    if A1 != 0.0 and disc >= 0.0:
        sq = math.sqrt(disc)
        roots = sorted([(-A2 - sq) / (2 * A1), (-A2 + sq) / (2 * A1)])
    elif A1 == 0.0 and A2 != 0.0:
        roots = [-A3 / A2]
    else:
        roots = []
    # sign of the quadratic is constant between consecutive breakpoints
    cuts = [-1.0] + [r for r in roots if -1.0 < r < 1.0] + [1.0]
    q = lambda X: A1 * X * X + A2 * X + A3
    violation = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if q(0.5 * (lo + hi)) < 0.0:
            if violation and violation[-1][1] == lo:
                violation[-1] = (violation[-1][0], hi)
            else:
                violation.append((lo, hi))
    return PolarConvexity("polar-analytic", [c1, c2, c3, c4], A1, A2, A3, disc, roots, violation)


def stress_hessian(handle: YieldModelHandle, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of the yield function in principal stresses.

    Symbolic models use exact second derivatives in the cylindrical variables
    plus the curvature of the coordinate maps; neural ones a central
    difference of the analytic gradient.
    """
    sigma = np.asarray(sigma, dtype=float)
    if handle.kind == "neural":
        g = yield_gradient(handle, sigma).dphi_dsigma
        h = 1e-6 * max(float(np.linalg.norm(sigma)), 1.0)
        H = np.empty((3, 3))
        for j in range(3):
            d = np.zeros(3)
            d[j] = h
            H[:, j] = (yield_gradient(handle, sigma + d).dphi_dsigma - yield_gradient(handle, sigma - d).dphi_dsigma) / (2 * h)
        return g, 0.5 * (H + H.T)
    values, grads, hess = _stress_maps(sigma)
    x = {**values, **handle.extras}
    cols = [np.array([x[n]]) for n in handle.names]
    n = len(handle.names)
    cache = getattr(handle, "_hess_fns", None)
    if cache is None:
        d1 = [E.differentiate(handle.expr, i) for i in range(n)]
        cache = [[E.compile_array(E.differentiate(d1[i], j)) for j in range(n)] for i in range(n)]
        handle._hess_fns = cache
    dx = handle.input_gradient(x)
    J = np.array([grads[m] if m in grads else np.zeros(3) for m in handle.names])
    Hx = np.array([[float(cache[i][j](cols)[0]) for j in range(n)] for i in range(n)])
    H = J.T @ Hx @ J
    for m, d in zip(handle.names, dx):
        if m in hess:
            H = H + d * hess[m]
    return J.T @ dx, 0.5 * (H + H.T)


@dataclass
class HessianConvexity:
    mode: str
    n_samples: int
    n_excluded: int
    min_eigenvalues: np.ndarray = field(repr=False)
    violation_fraction: float = 0.0
    degenerate: bool = False

    @property
    def violations(self) -> np.ndarray:
        return self.min_eigenvalues < 0

    def to_dict(self) -> dict:
        e = self.min_eigenvalues[np.isfinite(self.min_eigenvalues)]
        return {
            "mode": self.mode,
            "n_samples": self.n_samples,
            "n_excluded": self.n_excluded,
            "violation_fraction": self.violation_fraction,
            "degenerate": self.degenerate,
            "min_eigenvalue": float(e.min()) if e.size else None,
            "eigenvalue_quantiles": np.quantile(e, [0.0, 0.25, 0.5, 0.75, 1.0]).tolist() if e.size else [],
        }


def hessian_convexity(handle, sigma_samples, rel_tol: float = 1e-8) -> HessianConvexity:
    """Curvature of the level set phi = 0 at on-surface principal stresses.

    The Hessian is projected onto the tangent plane (orthogonal to grad phi) and
    divided by |grad phi|; the sublevel set is locally convex where the smaller
    projected eigenvalue is not negative. Eigenvalues below
    -rel_tol * (|l1| + |l2|) count as violations, the rest are clipped to zero.
    Samples where the model or the Lode angle is undefined are excluded.
    A bare expression or string is read over (p, rho, theta).
    """
    if not isinstance(handle, YieldModelHandle):
        handle = YieldModelHandle.symbolic(handle)
    S = np.atleast_2d(np.asarray(sigma_samples, dtype=float))
    mins = np.full(len(S), np.nan)
    flat = True
    for k, s in enumerate(S):
        try:
            g, H = stress_hessian(handle, s)
        except SingularPoint:
            continue
        gn = float(np.linalg.norm(g))
        if not (np.isfinite(gn) and gn > 0 and np.all(np.isfinite(H))):
            continue
        n = g / gn
        # orthonormal basis of the tangent plane
        T = np.linalg.svd(np.eye(3) - np.outer(n, n))[0][:, :2]
        lam = np.linalg.eigvalsh(T.T @ H @ T / gn)
        scale = float(np.abs(lam).sum())
        if scale > 0:
            flat = False
        lo = float(lam[0])
        mins[k] = lo if lo < -rel_tol * scale else max(lo, 0.0)
    ok = np.isfinite(mins)
    n_ok = int(ok.sum())
    frac = float(np.mean(mins[ok] < 0)) if n_ok else 0.0
    return HessianConvexity("hessian-numeric", len(S), len(S) - n_ok, mins, frac, flat and n_ok > 0)


# ---------------------------------------------------------------------------
# symmetry


@dataclass
class SymmetryReport:
    k_p: int
    theta: np.ndarray = field(repr=False)
    theta_hat: np.ndarray | None = field(repr=False)
    errors: np.ndarray = field(repr=False)  # (k_p - 1, n_theta)
    per_n: list[dict] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(r["max_error"] for r in self.per_n) if self.per_n else 0.0

    def to_dict(self) -> dict:
        return {"k_p": self.k_p, "max_error": self.max_error, "per_n": self.per_n}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["theta"] + (["theta_hat"] if self.theta_hat is not None else [])
            w.writerow(head + [f"err_n{n}" for n in range(1, self.k_p)])
            for k in range(self.theta.size):
                row = [repr(float(self.theta[k]))]
                if self.theta_hat is not None:
                    row.append(repr(float(self.theta_hat[k])))
                w.writerow(row + [repr(float(e)) for e in self.errors[:, k]])


def _wrap_half_period(t):
    """Reduce an angle modulo pi into (-pi/2, pi/2]."""
    return t - math.pi * np.ceil(t / math.pi - 0.5)


def symmetry_error(
    model,
    k_p: int,
    n_theta: int = 200_000,
    theta_hat: tuple[float, float] | None = None,
    wrap: bool = False,
    p: float = 0.0,
    rho: float = 200.0,
) -> SymmetryReport:
    """Rotational-symmetry defect |phi(theta) - phi(theta + 2 n pi / k_p)|, n = 1..k_p-1.

    ``model`` is a handle evaluated at fixed ``p`` and ``rho``, or any callable
    of theta. Rotated angles are passed through unreduced unless ``wrap``. When ``theta_hat = (c2, c3)``
    the argmax is also reported as c2 theta + c3, reduced modulo pi (the defect
    of a single sinusoid has period pi in that variable).
    """
    if k_p < 2:
        raise ValueError("k_p must be at least 2")
    value_fn = (lambda t: model.value_cyl(p, rho, t)) if isinstance(model, YieldModelHandle) else model
    theta = TWO_PI * np.arange(n_theta) / n_theta
    base = np.asarray(value_fn(theta), dtype=float)
    errs = np.empty((k_p - 1, n_theta))
    per_n = []
    th_hat = None if theta_hat is None else theta_hat[0] * theta + theta_hat[1]
    for n in range(1, k_p):
        t = theta + TWO_PI * n / k_p
        if wrap:
            t = np.mod(t, TWO_PI)
        errs[n - 1] = np.abs(base - np.asarray(value_fn(t), dtype=float))
        k = int(np.nanargmax(errs[n - 1]))
        rec = {"n": n, "max_error": float(errs[n - 1, k]), "argmax_theta": float(theta[k])}
        if th_hat is not None:
            rec["argmax_theta_hat"] = float(_wrap_half_period(th_hat[k]))
        per_n.append(rec)
    return SymmetryReport(k_p, theta, th_hat, errs, per_n)


# ---------------------------------------------------------------------------
# surface comparison


def ray_radius(handle: YieldModelHandle, p, theta, lo, hi, extras: dict | None = None) -> np.ndarray:
    """rho where the model crosses zero on each ray in [lo, hi]; NaN if unbracketed."""
    p = np.asarray(p, dtype=float)
    theta = np.asarray(theta, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), p.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), p.shape).copy()
    f = lambda r, m=slice(None): handle.value_cyl(p[m], r, theta[m], None if extras is None else {k: np.asarray(v)[m] for k, v in extras.items()})
    flo, fhi = f(lo), f(hi)
    ok = np.isfinite(flo) & np.isfinite(fhi) & (np.sign(flo) != np.sign(fhi))
    out = np.full(p.shape, np.nan)
    if ok.any():
        out[ok] = bisect_radius(lambda r: f(r, ok), lo[ok], hi[ok], iters=80)
    return out


@dataclass
class SurfaceComparison:
    rms: float
    max_abs: float
    n_points: int
    n_failed: int
    rel_errors: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"rms": self.rms, "max_abs": self.max_abs, "n_points": self.n_points, "n_failed": self.n_failed}


def surface_rms(handle: YieldModelHandle, benchmark: Surface, bracket=(0.5, 2.0)) -> SurfaceComparison:
    """Relative radial error of the model surface against benchmark samples.

    Each benchmark ray is searched on [bracket[0], bracket[1]] times the true
    radius; rays without a sign change are counted as failures.
    """
    extras = {n: benchmark.extras[:, k] for k, n in enumerate(benchmark.extra_names) if n in handle.names} or None
    r = ray_radius(handle, benchmark.p, benchmark.theta, bracket[0] * benchmark.rho, bracket[1] * benchmark.rho, extras)
    rel = (r - benchmark.rho) / benchmark.rho
    good = np.isfinite(rel)
    rms = float(np.sqrt(np.mean(rel[good] ** 2))) if good.any() else math.nan
    mx = float(np.max(np.abs(rel[good]))) if good.any() else math.nan
    return SurfaceComparison(rms, mx, rel.size, int((~good).sum()), rel)


def surface_samples(handle: YieldModelHandle, p_grid, theta_grid, bracket) -> np.ndarray:
    """On-surface principal stresses on a (p, theta) grid; unbracketed rays dropped."""
    P, T = np.meshgrid(np.asarray(p_grid, dtype=float), np.asarray(theta_grid, dtype=float), indexing="ij")
    P, T = P.ravel(), T.ravel()
    r = ray_radius(handle, P, T, bracket[0], bracket[1])
    ok = np.isfinite(r)
    return principal_stresses(P[ok], r[ok], T[ok])


def write_json(report, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict() if hasattr(report, "to_dict") else report, fh, indent=2)

