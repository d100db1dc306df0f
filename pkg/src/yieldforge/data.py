"""Stress-space benchmark surfaces, level-set augmentation and dataset I/O.

Cylindrical (Lode) coordinates of a principal-stress triple sigma:

    p     = mean(sigma)
    s     = sigma - p                      deviator, lies in the pi-plane
    rho   = |s|
    theta = atan2(s . e2, s . e1) mod 2 pi

with e1 = (2, -1, -1)/sqrt(6) and e2 = (0, 1, -1)/sqrt(2). This choice puts
theta = 0 on the sigma_1 axis projection and satisfies
cos(3 theta) = (3 sqrt(3) / 2) J3 / J2^(3/2) for every theta in [0, 2 pi),
so the angle is a full-circle extension of the usual Lode angle. At rho = 0
theta is undefined and reported as 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from . import expr as E

E1 = np.array([2.0, -1.0, -1.0]) / math.sqrt(6.0)
E2 = np.array([0.0, 1.0, -1.0]) / math.sqrt(2.0)
ONES = np.ones(3)
TWO_PI = 2.0 * math.pi


class ThetaUndefined(ValueError):
    pass


class InvalidParams(ValueError):
    pass


class RootNotBracketed(ValueError):
    def __init__(self, count: int, first: tuple):
        self.count = count
        self.first = first
        super().__init__(f"no admissible rho at {count} grid point(s); first at {first}")


class InvalidBand(ValueError):
    pass


# ---------------------------------------------------------------------------
# coordinates


@dataclass(frozen=True)
class CylindricalStress:
    p: float
    rho: float
    theta: float


def cylindrical_coords(S) -> np.ndarray:
    """(N, 3) principal stresses -> (N, 3) columns p, rho, theta."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    p = S.mean(axis=1)
    dev = S - p[:, None]
    a, b = dev @ E1, dev @ E2
    rho = np.hypot(a, b)
    theta = np.mod(np.arctan2(b, a), TWO_PI)
    theta = np.where(rho > 0, theta, 0.0)
    # mod can round a tiny negative angle up to exactly 2 pi
    theta = np.where(theta >= TWO_PI, 0.0, theta)
    return np.column_stack([p, rho, theta])


def to_cylindrical(sigma, strict: bool = False) -> CylindricalStress:
    """Principal stresses -> (p, rho, theta). Hydrostatic states get theta = 0,
    or raise ThetaUndefined when ``strict``."""
    p, rho, theta = cylindrical_coords(sigma)[0]
    if rho == 0.0 and strict:
        raise ThetaUndefined("Lode angle undefined on the hydrostatic axis")
    return CylindricalStress(float(p), float(rho), float(theta))


def principal_stresses(p, rho, theta) -> np.ndarray:
    """Inverse transform; broadcasts, returns (..., 3)."""
    p, rho, theta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, rho, theta)))
    return (
        p[..., None] * ONES
        + (rho * np.cos(theta))[..., None] * E1
        + (rho * np.sin(theta))[..., None] * E2
    )


def from_cylindrical(c: CylindricalStress) -> np.ndarray:
    return principal_stresses(c.p, c.rho, c.theta)


def lode_parameter(S) -> np.ndarray:
    """3 sqrt(3) s1 s2 s3 / (2 J2^{3/2}); 0 on the hydrostatic axis."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    dev = S - S.mean(axis=1, keepdims=True)
    J2 = 0.5 * np.sum(dev * dev, axis=1)
    num = 3.0 * math.sqrt(3.0) * np.prod(dev, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / (2.0 * J2**1.5)
    return np.where(J2 > 0, out, 0.0)


# ---------------------------------------------------------------------------
# surfaces


RadiusFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class Surface:
    """On-surface samples on a (p, theta, extras...) tensor grid.

    ``radius`` recomputes rho on any grid, which level-set labeling uses to
    build a denser copy of the surface.
    """

    p: np.ndarray
    rho: np.ndarray
    theta: np.ndarray
    extras: np.ndarray  # (N, n_extra)
    extra_names: list[str]
    grids: dict[str, np.ndarray]
    radius: RadiusFn
    generator: str
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.p.size

    @property
    def feature_names(self) -> list[str]:
        return ["p", "rho", "theta", *self.extra_names]

    def features(self) -> np.ndarray:
        return np.column_stack([self.p, self.rho, self.theta, self.extras])

    def principal(self) -> np.ndarray:
        return principal_stresses(self.p, self.rho, self.theta)


def _mesh(grids: dict[str, np.ndarray], extra_names: list[str]):
    axes = [grids["p"], grids["theta"], *(grids[n] for n in extra_names)]
    mesh = np.meshgrid(*axes, indexing="ij")
    p, theta = mesh[0].ravel(), mesh[1].ravel()
    extras = np.column_stack([m.ravel() for m in mesh[2:]]) if extra_names else np.zeros((p.size, 0))
    return p, theta, extras


def _build(grids, extra_names, radius, generator, params) -> Surface:
    p, theta, extras = _mesh(grids, extra_names)
    rho = radius(p, theta, extras)
    return Surface(p, rho, theta, extras, list(extra_names), grids, radius, generator, params)


def theta_grid(n: int, lo: float = 0.0, hi: float = TWO_PI) -> np.ndarray:
    """n angles on [lo, hi), endpoint excluded."""
    return lo + (hi - lo) * np.arange(n) / n


def flower_radius(k_p: float, A_p: float, sigma_y: float) -> RadiusFn:
    def radius(p, theta, extras=None):
        return sigma_y / (math.sqrt(1.5) * (1.0 + A_p * np.sin(k_p * theta)))

    return radius


def flower_value(p, rho, theta, k_p=3, A_p=0.325, sigma_y=250.0):
    return math.sqrt(1.5) * rho * (1.0 + A_p * np.sin(k_p * theta)) - sigma_y


def flower_surface(
    k_p: float = 3,
    A_p: float = 0.325,
    sigma_y: float = 250.0,
    n_p: int = 20,
    n_theta: int = 120,
    p_range=(-1000.0, 1000.0),
) -> Surface:
    """Pressure-independent surface sqrt(3/2) rho (1 + A sin(k theta)) = sigma_y."""
    if abs(A_p) >= 1.0:
        raise InvalidParams("petal amplitude must satisfy |A_p| < 1")
    if n_p < 1 or n_theta < 1:
        raise InvalidParams("grid sizes must be positive")
    grids = {"p": np.linspace(*p_range, n_p), "theta": theta_grid(n_theta)}
    params = dict(k_p=k_p, A_p=A_p, sigma_y=sigma_y, n_p=n_p, n_theta=n_theta, p_range=list(p_range))
    return _build(grids, [], flower_radius(k_p, A_p, sigma_y), "flower", params)


def bisect_radius(
    f: Callable[[np.ndarray], np.ndarray], lo: np.ndarray, hi: np.ndarray, iters: int = 200
) -> np.ndarray:
    """Vectorized bisection for f(rho) = 0 on [lo, hi]; caller guarantees a sign change."""
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        left = np.sign(fm) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fm, flo)
        hi = np.where(left, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(np.abs(hi), 1.0)):
            break
    return 0.5 * (lo + hi)


def mn_beta(phi_f_deg: float) -> float:
    s2 = math.sin(math.radians(phi_f_deg)) ** 2
    return (9.0 - s2) / (1.0 - s2)


def matsuoka_nakai_value(S, beta: float) -> np.ndarray:
    """(I1 I2)^{1/3} - (beta I3)^{1/3}, compression positive; negative inside the cone."""
    S = np.atleast_2d(S)
    s1, s2, s3 = S[:, 0], S[:, 1], S[:, 2]
    I1 = s1 + s2 + s3
    I2 = s1 * s2 + s2 * s3 + s3 * s1
    I3 = s1 * s2 * s3
    return np.cbrt(I1 * I2) - np.cbrt(beta * I3)


def matsuoka_nakai_radius(beta: float) -> RadiusFn:
    def radius(p, theta, extras=None):
        p = np.asarray(p, dtype=float)
        theta = np.asarray(theta, dtype=float)
        # the admissible cone ends where the smallest principal stress reaches 0;
        # m is the smallest component of the unit deviatoric direction (< 0)
        m = (np.outer(np.cos(theta), E1) + np.outer(np.sin(theta), E2)).min(axis=1)
        hi = np.where(p > 0, -p / m, 0.0)
        lo = np.zeros_like(p)

        def f(r):
            return matsuoka_nakai_value(principal_stresses(p, r, theta), beta)

        rho = bisect_radius(f, lo, hi)
        return np.where(p > 0, rho, 0.0)

    return radius


def matsuoka_nakai_surface(
    phi_f: float = 30.0, n_p: int = 20, n_theta: int = 60, p_range=(0.0, 1000.0)
) -> Surface:
    """Matsuoka-Nakai cone on a (p, theta) grid; the apex p = 0 maps to rho = 0."""
    if not 0.0 < phi_f < 90.0:
        raise InvalidParams("friction angle must lie in (0, 90) degrees")
    if p_range[0] < 0:
        raise RootNotBracketed(1, (p_range[0], 0.0))
    beta = mn_beta(phi_f)
    grids = {"p": np.linspace(*p_range, n_p), "theta": theta_grid(n_theta)}
    params = dict(phi_f=phi_f, beta=beta, n_p=n_p, n_theta=n_theta, p_range=list(p_range))
    return _build(grids, [], matsuoka_nakai_radius(beta), "matsuoka-nakai", params)


STRESS_NAMES = ("p", "rho", "theta", "s1", "s2", "s3")


def user_value_fn(expr: E.Expr, names: list[str], extra_names: list[str]):
    """Vectorized f(p, rho, theta, extras) for an expression over ``names``.

    Names may be any of p, rho, theta, s1, s2, s3, lode, or an extra feature.
    """
    fn = E.compile_array(expr)
    for n in names:
        if n not in STRESS_NAMES and n != "lode" and n not in extra_names:
            raise InvalidParams(f"unbound variable {n!r}")

    def value(p, rho, theta, extras):
        p, rho, theta = np.broadcast_arrays(p, rho, theta)
        S = principal_stresses(p, rho, theta).reshape(-1, 3)
        cols = {"p": p, "rho": rho, "theta": theta, "s1": S[:, 0], "s2": S[:, 1], "s3": S[:, 2]}
        if "lode" in names:
            cols["lode"] = lode_parameter(S)
        for k, n in enumerate(extra_names):
            cols[n] = extras[:, k]
        return fn([np.asarray(cols[n], dtype=float).reshape(-1) for n in names])

    return value


def user_surface(
    text_or_expr,
    names: list[str],
    grids: dict[str, np.ndarray],
    rho_bracket=(0.0, 1e4),
) -> Surface:
    """Surface of a user expression, rho found by bisection along each ray.

    ``grids`` holds 1-D arrays for p, theta and any extra (non-stress) feature;
    extra features are every grid key besides p and theta, in insertion order.
    """
    expr = E.parse(text_or_expr, names) if isinstance(text_or_expr, str) else text_or_expr
    extra_names = [k for k in grids if k not in ("p", "theta")]
    value = user_value_fn(expr, list(names), extra_names)
    lo_r, hi_r = rho_bracket

    def radius(p, theta, extras):
        p = np.asarray(p, dtype=float)
        theta = np.asarray(theta, dtype=float)
        lo = np.full_like(p, lo_r)
        hi = np.full_like(p, hi_r)
        f = lambda r: value(p, r, theta, extras)
        flo, fhi = f(lo), f(hi)
        ok = np.isfinite(flo) & np.isfinite(fhi) & (np.sign(flo) != np.sign(fhi))
        exact = flo == 0.0
        bad = ~(ok | exact)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise RootNotBracketed(int(bad.sum()), (float(p[k]), float(theta[k])))
        return np.where(exact, lo, bisect_radius(f, lo, hi))

    grids = {k: np.asarray(v, dtype=float) for k, v in grids.items()}
    params = dict(expr=E.to_string(E.rename(expr, names)), names=list(names), rho_bracket=list(rho_bracket))
    surf = _build(grids, extra_names, radius, "user-expr", params)
    surf.params["grid_sizes"] = {k: int(v.size) for k, v in grids.items()}
    return surf



# Gurson-like porous-metal surface in units of the matrix yield stress (2 here),
# with void fraction v as an extra feature
POROUS_EXPR = "(1.5*rho^2)/4 + 2*v*(exp(3*p/4) + exp(-3*p/4))/2 - 1 - v^2"
POROUS_NAMES = ("p", "rho", "theta", "v")


def porous_grids(n_p: int = 20, n_theta: int = 30, n_v: int = 10) -> dict[str, np.ndarray]:
    return {"p": np.linspace(0.0, 1.8, n_p), "theta": theta_grid(n_theta), "v": np.linspace(0.063, 0.065, n_v)}


def porous_surface(n_p: int = 20, n_theta: int = 30, n_v: int = 10) -> Surface:
    return user_surface(POROUS_EXPR, list(POROUS_NAMES), porous_grids(n_p, n_theta, n_v), (0.0, 10.0))

# ---------------------------------------------------------------------------
# level-set augmentation


@dataclass
class Dataset:
    X: np.ndarray
    phi: np.ndarray
    feature_names: list[str]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.phi.size

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_names.index(name)]

    def write_csv(self, path) -> None:
        """CSV with 17 significant digits (bit-exact round trip) plus a JSON sidecar."""
        path = Path(path)
        data = np.column_stack([self.X, self.phi])
        header = ",".join([*self.feature_names, "phi"])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
        Path(str(path) + ".json").write_text(json.dumps(self.provenance, indent=1, default=_jsonable))

    @classmethod
    def read_csv(cls, path) -> "Dataset":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        side = Path(str(path) + ".json")
        prov = json.loads(side.read_text()) if side.exists() else {}
        if header[-1] != "phi":
            raise ValueError("last CSV column must be phi")
        return cls(data[:, :-1], data[:, -1], header[:-1], prov)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def refine_grids(grids: dict[str, np.ndarray], extra_names: list[str], factor: int = 10) -> dict[str, np.ndarray]:
    """Denser p and theta grids that contain the original nodes; extras unchanged."""
    p = grids["p"]
    if p.size > 1:
        p_f = np.interp(np.arange((p.size - 1) * factor + 1) / factor, np.arange(p.size), p)
    else:
        p_f = p.copy()
    th = grids["theta"]
    n = th.size
    span = (th[1] - th[0]) * n if n > 1 else TWO_PI
    th_f = th[0] + span * np.arange(n * factor) / (n * factor)
    out = {"p": p_f, "theta": th_f}
    for k in extra_names:
        out[k] = grids[k]
    return out


def augment_levelset(
    surface: Surface,
    N_phi: int = 11,
    band=(0.85, 1.15),
    refine: int = 10,
    lode: bool = False,
) -> Dataset:
    """Scale each surface point radially over the band and label it with the
    signed nearest-point distance (principal-stress space) to a ``refine``-times
    denser sampling of the same surface. Negative inside (scale < 1).

    Distances are taken within the slice of equal extra features.
    """
    lo, hi = band
    if len(surface) == 0:
        raise InvalidBand("surface is empty")
    if N_phi < 1 or N_phi % 2 == 0:
        raise InvalidBand("N_phi must be odd so the on-surface level is included")
    if not (0 < lo <= 1.0 <= hi) or (N_phi > 1 and lo == hi):
        raise InvalidBand(f"band {band} must bracket 1")
    scales = np.linspace(lo, hi, N_phi)
    scales[N_phi // 2] = 1.0

    fine_grids = refine_grids(surface.grids, surface.extra_names, refine)
    fp, fth, fext = _mesh(fine_grids, surface.extra_names)
    frho = surface.radius(fp, fth, fext)
    fine_S = principal_stresses(fp, frho, fth)

    n = len(surface)
    P = np.tile(surface.p, N_phi)
    TH = np.tile(surface.theta, N_phi)
    EXT = np.tile(surface.extras, (N_phi, 1))
    SC = np.repeat(scales, n)
    R = SC * np.tile(surface.rho, N_phi)
    S = principal_stresses(P, R, TH)

    dist = np.empty(P.size)
    if surface.extra_names:
        keys_fine = [tuple(r) for r in fext]
        keys = [tuple(r) for r in EXT]
        groups: dict[tuple, list[int]] = {}
        for k, key in enumerate(keys_fine):
            groups.setdefault(key, []).append(k)
        qgroups: dict[tuple, list[int]] = {}
        for k, key in enumerate(keys):
            qgroups.setdefault(key, []).append(k)
        for key, idx in qgroups.items():
            tree = cKDTree(fine_S[groups[key]])
            dist[idx] = tree.query(S[idx])[0]
    else:
        dist = cKDTree(fine_S).query(S)[0]
    phi = np.sign(SC - 1.0) * dist
    phi[SC == 1.0] = 0.0

    cols = [P, R, TH, EXT]
    names = ["p", "rho", "theta", *surface.extra_names]
    if lode:
        cols.append(lode_parameter(S))
        names.append("lode")
    X = np.column_stack(cols)
    prov = {
        "generator": surface.generator,
        "parameters": surface.params,
        "N_phi": N_phi,
        "band": list(band),
        "refine": refine,
        "positions": "radial scaling of rho at fixed p, theta",
        "labels": "signed nearest-point distance in principal-stress space",
        "noise": 0.0,
        "seed": None,
    }
    return Dataset(X, phi, names, prov)


def add_radial_noise(dataset: Dataset, amplitude_fraction: float, seed: int) -> Dataset:
    """Multiply every rho by (1 + u), u ~ U(-a, a); labels stay attached to the
    clean positions, so the noise lives in the inputs."""
    if not 0.0 <= amplitude_fraction < 1.0:
        raise InvalidParams("amplitude fraction must lie in [0, 1)")
    X = dataset.X.copy()
    if amplitude_fraction > 0:
        rng = np.random.default_rng(seed)
        k = dataset.feature_names.index("rho")
        X[:, k] *= 1.0 + rng.uniform(-amplitude_fraction, amplitude_fraction, X.shape[0])
    prov = dict(dataset.provenance, noise=amplitude_fraction, seed=seed)
    return Dataset(X, dataset.phi.copy(), list(dataset.feature_names), prov)


# ---------------------------------------------------------------------------
# synthetic regression sets


def toy_shapes(x1, x2, x3):
    f1 = 3.0 * (x1**3 - x1)
    f2 = 1.0 / (x2 + 1.2)
    f3 = 1.5 * (-(x3**2) + 0.3 * np.sin(10 * np.pi * x3) + 0.4)
    return f1, f2, f3


def toy_4d_mean(X) -> np.ndarray:
    X = np.atleast_2d(X)
    f1, f2, f3 = toy_shapes(X[:, 0], X[:, 1], X[:, 2])
    return f1 + 0.25 * f2 * f3


def toy_4d_dataset(n: int = 500, seed: int = 0, noise_std: float = 0.1) -> Dataset:
    """f1(x1) + 0.25 f2(x2) f3(x3) + N(0, noise); x4 is irrelevant."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 4))
    y = toy_4d_mean(X) + rng.normal(0.0, noise_std, n)
    return Dataset(X, y, ["x1", "x2", "x3", "x4"], {"generator": "toy4d", "n": n, "seed": seed, "noise_std": noise_std})


def pyramid_dataset(n: int = 500, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    y = np.abs(X[:, 0] - X[:, 1]) + np.abs(X[:, 0] + X[:, 1])
    return Dataset(X, y, ["x1", "x2"], {"generator": "pyramid", "n": n, "seed": seed})


NGUYEN12 = "x^4 - x^3 + 0.5*y^2 - y"


def nguyen12_dataset(n: int = 500, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    x, y = X[:, 0], X[:, 1]
    t = x**4 - x**3 + 0.5 * y**2 - y
    return Dataset(X, t, ["x", "y"], {"generator": "nguyen12", "n": n, "seed": seed})
