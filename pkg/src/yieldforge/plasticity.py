"""Implicit return mapping in principal stress space for any yield model.

The model is evaluated on cylindrical coordinates (p, rho, theta) of the
principal stresses; its stress gradient follows from the chain rule

    dp/dsigma     = (1, 1, 1) / 3
    drho/dsigma   = s / rho
    dtheta/dsigma = (a e2 - b e1) / rho^2,   a = s . e1,  b = s . e2

Perfect plasticity with an associative flow rule: the plastic strain
increment is dlambda * dphi/dsigma.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as E
from .data import E1, E2, ONES, cylindrical_coords, principal_stresses
from .qnm import QnmModel, combine, shape_values
from .shapefn import derivative

# names a symbolic yield expression may use, all functions of principal stress
STRESS_VARS = ("p", "rho", "theta", "s1", "s2", "s3")


class SingularPoint(ValueError):
    pass


class NoConvergence(RuntimeError):
    def __init__(self, iterations: int, residual: float, step: int | None = None):
        self.iterations = iterations
        self.residual = residual
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"return mapping did not converge{where}: {iterations} iterations, residual {residual:.3e}")


@dataclass(frozen=True)
class ElasticParams:
    K: float
    mu: float

    def __post_init__(self):
        if self.K <= 0 or self.mu <= 0:
            raise ValueError("bulk and shear moduli must be positive")

    @classmethod
    def from_E_nu(cls, E_mod: float, nu: float) -> "ElasticParams":
        return cls(E_mod / (3.0 * (1.0 - 2.0 * nu)), E_mod / (2.0 * (1.0 + nu)))


def elastic_moduli(params: ElasticParams) -> np.ndarray:
    """Principal-axes stiffness: K + 4mu/3 on the diagonal, K - 2mu/3 off it."""
    K, mu = params.K, params.mu
    C = np.full((3, 3), K - 2.0 * mu / 3.0)
    np.fill_diagonal(C, K + 4.0 * mu / 3.0)
    return C


# ---------------------------------------------------------------------------
# yield models


def _stress_maps(sigma: np.ndarray):
    """Values, gradients and Hessians (w.r.t. sigma) of every STRESS_VARS entry."""
    p, rho, theta = cylindrical_coords(sigma)[0]
    if rho <= 0.0:
        raise SingularPoint("Lode angle undefined on the hydrostatic axis")
    s = sigma - p
    a, b = s @ E1, s @ E2
    n = s / rho
    P = np.eye(3) - np.outer(ONES, ONES) / 3.0
    r4 = rho**4
    values = {"p": p, "rho": rho, "theta": theta, "s1": sigma[0], "s2": sigma[1], "s3": sigma[2]}
    grads = {
        "p": ONES / 3.0,
        "rho": n,
        "theta": (a * E2 - b * E1) / rho**2,
        "s1": np.array([1.0, 0.0, 0.0]),
        "s2": np.array([0.0, 1.0, 0.0]),
        "s3": np.array([0.0, 0.0, 1.0]),
    }
    t_aa, t_bb, t_ab = 2 * a * b / r4, -2 * a * b / r4, (b * b - a * a) / r4
    zero = np.zeros((3, 3))
    hess = {
        "p": zero,
        "rho": (P - np.outer(n, n)) / rho,
        "theta": t_aa * np.outer(E1, E1) + t_bb * np.outer(E2, E2) + t_ab * (np.outer(E1, E2) + np.outer(E2, E1)),
        "s1": zero,
        "s2": zero,
        "s3": zero,
    }
    return values, grads, hess


@dataclass
class YieldModelHandle:
    """Either a trained neural model or a symbolic expression over stress variables.

    ``names`` lists the variable name of each input: for neural models the
    model's feature names, for symbolic ones the expression variables. Inputs
    that are not stress variables are held at the values in ``extras``.
    """

    kind: str
    model: QnmModel | None = None
    expr: E.Expr | None = None
    names: list[str] = field(default_factory=list)
    extras: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "neural":
            if self.model is None:
                raise ValueError("neural handle needs a model")
            self.names = list(self.names or self.model.feature_names)
        elif self.kind == "symbolic":
            if self.expr is None:
                raise ValueError("symbolic handle needs an expression")
            if not self.names:
                self.names = list(STRESS_VARS[: max(E.arity(self.expr), 1)])
            self._grad_fns = [E.compile_array(E.differentiate(self.expr, i)) for i in range(len(self.names))]
            self._fn = E.compile_array(self.expr)
        else:
            raise ValueError(f"unknown handle kind {self.kind!r}")
        for n in self.names:
            if n not in STRESS_VARS and n not in self.extras:
                raise ValueError(f"input {n!r} is neither a stress variable nor a fixed extra")

    @classmethod
    def neural(cls, model: QnmModel, extras=None) -> "YieldModelHandle":
        return cls("neural", model=model, extras=dict(extras or {}))

    @classmethod
    def symbolic(cls, expr, names: Sequence[str] = ("p", "rho", "theta"), extras=None) -> "YieldModelHandle":
        if isinstance(expr, str):
            expr = E.parse(expr, list(names))
        return cls("symbolic", expr=expr, names=list(names), extras=dict(extras or {}))

    def _columns(self, p, rho, theta, extras=None):
        p, rho, theta = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (p, rho, theta)))
        cols = {"p": p, "rho": rho, "theta": theta}
        if any(n in self.names for n in ("s1", "s2", "s3")):
            S = principal_stresses(p, rho, theta)
            cols.update(s1=S[:, 0], s2=S[:, 1], s3=S[:, 2])
        for k, v in {**self.extras, **(extras or {})}.items():
            cols[k] = np.broadcast_to(np.asarray(v, dtype=float), p.shape)
        return [cols[n] for n in self.names]

    def value_cyl(self, p, rho, theta, extras: dict | None = None) -> np.ndarray:
        """Yield value on cylindrical coordinates (broadcasts). ``extras`` overrides
        the fixed non-stress inputs, per point if given as arrays."""
        cols = self._columns(p, rho, theta, extras)
        if self.kind == "symbolic":
            return self._fn(cols)
        X = np.column_stack(cols)
        m = self.model
        Xn = m.normalization.apply(X) if m.normalization is not None else X
        return m.target_scale * combine(m, shape_values(m, Xn))

    def input_gradient(self, x: dict[str, float]) -> np.ndarray:
        """d phi / d input for each name in ``self.names`` at one point."""
        cols = [np.array([x[n]]) for n in self.names]
        if self.kind == "symbolic":
            return np.array([float(g(cols)[0]) for g in self._grad_fns])
        m = self.model
        X = np.array([[c[0] for c in cols]])
        Xn = m.normalization.apply(X)[0] if m.normalization is not None else X[0]
        span = m.normalization.span if m.normalization is not None else np.ones(m.D)
        F = shape_values(m, Xn)[0]
        dF = np.array([derivative(net, Xn[i])[0] for i, net in enumerate(m.shape_fns)])
        # d/df_i of sum_{k<=l} w_hat_kl f_k f_l, the QNM higher-order terms
        hot = np.zeros(m.D)
        for (i, j), v in zip(m.pairs, m.w_hat):
            hot[i] += v * F[j]
            hot[j] += v * F[i]
        return m.target_scale * (m.w + hot) * dF / span

    def value(self, sigma) -> float:
        p, rho, theta = cylindrical_coords(np.asarray(sigma, dtype=float))[0]
        return float(self.value_cyl(p, rho, theta)[0])


@dataclass
class YieldEval:
    phi: float
    dphi_dsigma: np.ndarray


def yield_gradient(handle: YieldModelHandle, sigma) -> YieldEval:
    """Value and principal-stress gradient through the cylindrical transform."""
    sigma = np.asarray(sigma, dtype=float)
    values, grads, _ = _stress_maps(sigma)
    x = {**values, **handle.extras}
    dx = handle.input_gradient(x)
    g = np.zeros(3)
    for name, d in zip(handle.names, dx):
        if name in grads:
            g += d * grads[name]
    phi = float(handle.value_cyl(values["p"], values["rho"], values["theta"])[0])
    return YieldEval(phi, g)


# ---------------------------------------------------------------------------
# return mapping


@dataclass
class MaterialState:
    eps_e: np.ndarray  # principal elastic strains
    sigma: np.ndarray  # principal stresses
    n_A: np.ndarray  # principal directions as columns
    dlambda: float
    phi: float
    iterations: int = 0
    residual: float = 0.0

    def stress_tensor(self) -> np.ndarray:
        return (self.n_A * self.sigma) @ self.n_A.T

    def strain_tensor(self) -> np.ndarray:
        return (self.n_A * self.eps_e) @ self.n_A.T


def _principal(eps) -> tuple[np.ndarray, np.ndarray]:
    eps = np.asarray(eps, dtype=float)
    if eps.shape == (3,):
        return eps.copy(), np.eye(3)
    if eps.shape != (3, 3):
        raise ValueError("strain must be a principal 3-vector or a 3x3 tensor")
    off = eps - np.diag(np.diag(eps))
    if not np.any(off):
        return np.diag(eps).copy(), np.eye(3)
    vals, vecs = np.linalg.eigh(0.5 * (eps + eps.T))
    return vals, vecs


_SINGULAR_KICK = np.array([2.0, -1.0, -1.0]) / math.sqrt(6.0)


def return_map(
    handle: YieldModelHandle,
    params: ElasticParams,
    eps_e_trial,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> MaterialState:
    """Elastic predictor, then Newton on the 4-residual

        r = [eps_e - eps_trial + dlambda dphi/dsigma(C eps_e);  phi(C eps_e)]

    with unknowns scaled by the trial strain and stress magnitudes, a central
    finite-difference Jacobian and step halving when the residual grows.
    """
    C = elastic_moduli(params)
    eps_tr, n_A = _principal(eps_e_trial)
    sig_tr = C @ eps_tr
    phi_tr = handle.value(sig_tr)
    if not np.isfinite(phi_tr):
        raise NoConvergence(0, math.inf)
    if phi_tr <= 0.0:
        return MaterialState(eps_tr, sig_tr, n_A, 0.0, phi_tr)

    sig_scale = max(float(np.linalg.norm(sig_tr)), 1e-300)
    eps_scale = max(float(np.linalg.norm(eps_tr)), 1e-300)
    if cylindrical_coords(sig_tr)[0, 1] < 1e-9 * sig_scale:
        # nudge off the hydrostatic axis along a fixed deviator
        eps_tr = eps_tr + 1e-8 * eps_scale * _SINGULAR_KICK
        sig_tr = C @ eps_tr

    def residual(z: np.ndarray) -> np.ndarray:
        eps_e = z[:3] * eps_scale
        dl = z[3] * eps_scale
        ye = yield_gradient(handle, C @ eps_e)
        r = np.empty(4)
        r[:3] = (eps_e - eps_tr + dl * ye.dphi_dsigma) / eps_scale
        r[3] = ye.phi / sig_scale
        return r

    g0 = yield_gradient(handle, sig_tr).dphi_dsigma
    dl0 = phi_tr / float(g0 @ C @ g0)
    z = np.append(eps_tr, dl0) / eps_scale
    r = residual(z)
    norm = float(np.linalg.norm(r))
    h = 1e-7
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise NoConvergence(it, norm)
        it += 1
        J = np.empty((4, 4))
        for j in range(4):
            dz = np.zeros(4)
            dz[j] = h
            J[:, j] = (residual(z + dz) - residual(z - dz)) / (2 * h)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise NoConvergence(it, norm) from None
        alpha = 1.0
        for _ in range(11):
            trial = z + alpha * step
            try:
                r_new = residual(trial)
            except SingularPoint:
                r_new = np.full(4, np.inf)
            n_new = float(np.linalg.norm(r_new))
            if np.isfinite(n_new) and n_new < norm:
                break
            alpha *= 0.5
        else:
            if not np.isfinite(n_new):
                raise NoConvergence(it, norm)
        z, r, norm = trial, r_new, n_new
    eps_e = z[:3] * eps_scale
    sigma = C @ eps_e
    return MaterialState(eps_e, sigma, n_A, float(z[3] * eps_scale), handle.value(sigma), it, norm)


@dataclass
class PathStep:
    step: int
    strain: np.ndarray  # total principal strain
    sigma: np.ndarray
    dlambda: float
    phi: float


def drive_path(
    handle: YieldModelHandle,
    params: ElasticParams,
    strain_path: Sequence,
    tol: float = 1e-10,
    max_iter: int = 50,
    eps_e0=None,
) -> list[PathStep]:
    """Apply strain increments one by one; the elastic predictor is the previous
    elastic strain plus the increment. Principal 3-vector increments keep the
    principal axes fixed; 3x3 tensors are re-diagonalized each step."""
    tensor = any(np.shape(d) == (3, 3) for d in strain_path)
    eps_e = np.zeros((3, 3)) if tensor else np.zeros(3)
    if eps_e0 is not None:
        eps_e = np.asarray(eps_e0, dtype=float).copy()
    total = np.zeros_like(eps_e)
    out = []
    for k, d in enumerate(strain_path):
        d = np.asarray(d, dtype=float)
        if tensor and d.shape == (3,):
            d = np.diag(d)
        total = total + d
        try:
            st = return_map(handle, params, eps_e + d, tol, max_iter)
        except NoConvergence as e:
            raise NoConvergence(e.iterations, e.residual, step=k) from None
        if tensor:
            eps_e = st.strain_tensor()
            sig = st.stress_tensor()
            strain_out, sig_out = np.diag(total).copy(), np.diag(sig).copy()
        else:
            eps_e = st.eps_e
            strain_out, sig_out = total.copy(), st.sigma
        out.append(PathStep(k, strain_out, sig_out, st.dlambda, st.phi))
    return out


def write_history_csv(history: Sequence[PathStep], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "eps1", "eps2", "eps3", "sig1", "sig2", "sig3", "dlambda", "phi"])
        for h in history:
            w.writerow([h.step, *map(repr, map(float, h.strain)), *map(repr, map(float, h.sigma)), repr(h.dlambda), repr(h.phi)])
