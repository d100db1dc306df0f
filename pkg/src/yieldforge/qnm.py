"""Additive (NAM) and quadratic (QNM) feature models built from shape functions.

    NAM:  y = sum_i w_i f_i(x_i)
    QNM:  y = sum_i w_i f_i(x_i) + sum_{i<=j} w_hat_ij f_i(x_i) f_j(x_j)

Inputs are mapped affinely into [0, 1] per feature before entering the
shape functions. Targets may be divided by a stored ``target_scale`` so the
bounded shape functions see O(1) values; ``yield_value`` undoes both maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .shapefn import AdamState, ShapeFnNet, adam_step, backward_from_cache, forward_batch, init_shapefn


class DimensionMismatch(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    def __init__(self, epoch: int, value: float):
        self.epoch = epoch
        self.value = value
        super().__init__(f"loss became {value} at epoch {epoch}")


def pair_indices(D: int) -> list[tuple[int, int]]:
    """Upper-triangular (i, j) pairs with i <= j, row-major; D(D+1)/2 of them."""
    return [(i, j) for i in range(D) for j in range(i, D)]


@dataclass
class Normalization:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, X) -> "Normalization":
        X = np.asarray(X, dtype=float)
        return cls(X.min(axis=0), X.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        s = self.hi - self.lo
        return np.where(s > 0, s, 1.0)

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.lo) / self.span

    def invert(self, Xn) -> np.ndarray:
        return np.asarray(Xn, dtype=float) * self.span + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["lo"], dtype=float), np.asarray(d["hi"], dtype=float))


@dataclass
class SparsityConfig:
    alpha_lo: float = 0.0
    alpha_ho: float = 0.0

    def __post_init__(self):
        if self.alpha_lo < 0 or self.alpha_ho < 0:
            raise ValueError("sparsity weights must be non-negative")


@dataclass
class QnmModel:
    shape_fns: list[ShapeFnNet]
    w: np.ndarray
    w_hat: np.ndarray  # length D(D+1)/2 in pair_indices order; empty for NAM
    mode: str = "NAM"
    normalization: Normalization | None = None
    feature_names: list[str] = field(default_factory=list)
    target_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("NAM", "QNM"):
            raise ValueError(f"mode must be NAM or QNM, got {self.mode!r}")
        D = len(self.shape_fns)
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(D)]
        if self.mode == "NAM":
            self.w_hat = np.zeros(0)
        elif self.w_hat.size != D * (D + 1) // 2:
            raise DimensionMismatch(f"QNM needs {D * (D + 1) // 2} quadratic weights, got {self.w_hat.size}")

    @property
    def D(self) -> int:
        return len(self.shape_fns)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return pair_indices(self.D) if self.mode == "QNM" else []

    def w_hat_matrix(self) -> np.ndarray:
        """Upper-triangular D x D table of the quadratic weights."""
        Wm = np.zeros((self.D, self.D))
        for (i, j), v in zip(self.pairs, self.w_hat):
            Wm[i, j] = v
        return Wm

    def params(self) -> list[np.ndarray]:
        ps = [p for net in self.shape_fns for p in net.params()]
        ps.append(self.w)
        if self.mode == "QNM":
            ps.append(self.w_hat)
        return ps

    def copy(self) -> "QnmModel":
        return QnmModel(
            [n.copy() for n in self.shape_fns],
            self.w.copy(),
            self.w_hat.copy(),
            self.mode,
            None if self.normalization is None else Normalization(self.normalization.lo.copy(), self.normalization.hi.copy()),
            list(self.feature_names),
            self.target_scale,
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "D": self.D,
            "feature_names": self.feature_names,
            "target_scale": self.target_scale,
            "normalization": None if self.normalization is None else self.normalization.to_dict(),
            "w": self.w.tolist(),
            "w_hat": [{"i": i, "j": j, "val": float(v)} for (i, j), v in zip(self.pairs, self.w_hat)],
            "shape_fns": [n.to_dict() for n in self.shape_fns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QnmModel":
        D = int(d["D"])
        nets = [ShapeFnNet.from_dict(s) for s in d["shape_fns"]]
        w_hat = np.zeros(D * (D + 1) // 2 if d["mode"] == "QNM" else 0)
        lookup = {p: k for k, p in enumerate(pair_indices(D))}
        for e in d.get("w_hat", []):
            w_hat[lookup[(int(e["i"]), int(e["j"]))]] = e["val"]
        norm = d.get("normalization")
        return cls(
            nets,
            np.asarray(d["w"], dtype=float),
            w_hat,
            d["mode"],
            None if norm is None else Normalization.from_dict(norm),
            list(d.get("feature_names", [])),
            float(d.get("target_scale", 1.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "QnmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_model(
    D: int,
    mode: str = "NAM",
    *,
    M: int = 20,
    sigma_v: float = 1.0,
    hidden_sizes=(40, 20, 20),
    seed: int = 0,
    feature_names=None,
    w_init: float = 1.0,
) -> QnmModel:
    """Fresh model; shape function i is seeded with ``seed * 1000 + i``."""
    nets = [init_shapefn(M, sigma_v, hidden_sizes, seed * 1000 + i) for i in range(D)]
    rng = np.random.default_rng(seed)
    w = rng.uniform(-w_init, w_init, D)
    w_hat = rng.uniform(-w_init, w_init, D * (D + 1) // 2) if mode == "QNM" else np.zeros(0)
    return QnmModel(nets, w, w_hat, mode, feature_names=list(feature_names or []))


# ---------------------------------------------------------------------------
# evaluation


def _check_dim(model: QnmModel, Xn: np.ndarray) -> np.ndarray:
    Xn = np.asarray(Xn, dtype=float)
    if Xn.ndim == 1:
        Xn = Xn[None, :]
    if Xn.shape[1] != model.D:
        raise DimensionMismatch(f"model has D={model.D}, input has {Xn.shape[1]} columns")
    return Xn


def shape_values(model: QnmModel, Xn) -> np.ndarray:
    """(N, D) matrix of f_i(x_i) on normalized inputs."""
    Xn = _check_dim(model, Xn)
    F = np.empty_like(Xn)
    for i, net in enumerate(model.shape_fns):
        u, inv = np.unique(Xn[:, i], return_inverse=True)
        F[:, i] = forward_batch(net, u).output[inv]
    return F


def combine(model: QnmModel, F: np.ndarray) -> np.ndarray:
    y = F @ model.w
    for (i, j), v in zip(model.pairs, model.w_hat):
        y = y + v * F[:, i] * F[:, j]
    return y


def predict_batch(model: QnmModel, Xn) -> np.ndarray:
    return combine(model, shape_values(model, Xn))


def predict(model: QnmModel, x) -> float:
    """Model output at one normalized input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch("predict takes a single input vector")
    return float(predict_batch(model, x)[0])


def yield_value(model: QnmModel, X_raw) -> np.ndarray:
    """Prediction in label units from raw (un-normalized) inputs."""
    Xn = model.normalization.apply(X_raw) if model.normalization is not None else X_raw
    return model.target_scale * predict_batch(model, Xn)


@dataclass
class LossTerms:
    mse: float
    sparsity_term: float

    @property
    def total(self) -> float:
        return self.mse + self.sparsity_term


def sparsity_term(model: QnmModel, sparsity: SparsityConfig) -> float:
    return float(sparsity.alpha_lo * np.abs(model.w).sum() + sparsity.alpha_ho * np.abs(model.w_hat).sum())


def loss(model: QnmModel, Xn, y, sparsity: SparsityConfig | None = None) -> LossTerms:
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise EmptyBatch("loss needs at least one sample")
    sparsity = sparsity or SparsityConfig()
    r = predict_batch(model, Xn) - y
    return LossTerms(float(np.mean(r * r)), sparsity_term(model, sparsity))


class _UniqueInputs:
    """Per-feature unique values so each net runs once per distinct input."""

    def __init__(self, Xn: np.ndarray):
        self.values, self.inverse = [], []
        for i in range(Xn.shape[1]):
            u, inv = np.unique(Xn[:, i], return_inverse=True)
            self.values.append(u)
            self.inverse.append(inv)


def loss_and_grads(
    model: QnmModel, Xn, y, sparsity: SparsityConfig, _uniq: _UniqueInputs | None = None
) -> tuple[LossTerms, list[np.ndarray]]:
    """Total loss and its gradient for every array in ``model.params()``.

    The L1 term uses sign() as subgradient, 0 at 0. A non-finite loss comes
    back with an empty gradient list.
    """
    Xn = _check_dim(model, Xn)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n == 0:
        raise EmptyBatch("loss needs at least one sample")
    uniq = _uniq or _UniqueInputs(Xn)
    caches = [forward_batch(net, u) for net, u in zip(model.shape_fns, uniq.values)]
    F = np.column_stack([c.output[inv] for c, inv in zip(caches, uniq.inverse)])
    r = combine(model, F) - y
    terms = LossTerms(float(np.mean(r * r)), sparsity_term(model, sparsity))
    if not np.isfinite(terms.total):
        return terms, []
    g = 2.0 * r / n

    gw = F.T @ g + sparsity.alpha_lo * np.sign(model.w)
    dF = g[:, None] * model.w[None, :]
    gwh = np.zeros_like(model.w_hat)
    for k, (i, j) in enumerate(model.pairs):
        gwh[k] = np.dot(g, F[:, i] * F[:, j])
        v = model.w_hat[k]
        dF[:, i] += g * v * F[:, j]
        dF[:, j] += g * v * F[:, i]
    gwh += sparsity.alpha_ho * np.sign(model.w_hat)

    grads: list[np.ndarray] = []
    for i, (net, cache) in enumerate(zip(model.shape_fns, caches)):
        up = np.bincount(uniq.inverse[i], weights=dF[:, i], minlength=uniq.values[i].size)
        grads.extend(backward_from_cache(net, cache, up).params())
    grads.append(gw)
    if model.mode == "QNM":
        grads.append(gwh)
    return terms, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 4000
    lr: float = 0.005
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    seed: int = 0
    batch_size: int | None = None  # None: full batch


@dataclass
class TrainingTrace:
    epoch: list[int] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    sparsity: list[float] = field(default_factory=list)
    w: list[np.ndarray] = field(default_factory=list)
    w_hat: list[np.ndarray] = field(default_factory=list)

    def record(self, epoch: int, terms: LossTerms, model: QnmModel) -> None:
        self.epoch.append(epoch)
        self.mse.append(terms.mse)
        self.sparsity.append(terms.sparsity_term)
        self.w.append(model.w.copy())
        self.w_hat.append(model.w_hat.copy())

    def write_csv(self, path, model: QnmModel) -> None:
        names = [f"w_{n}" for n in model.feature_names]
        names += [f"w_hat_{model.feature_names[i]}_{model.feature_names[j]}" for i, j in model.pairs]
        rows = [",".join(["epoch", "mse", "sparsity", *names])]
        for e, m, s, w, wh in zip(self.epoch, self.mse, self.sparsity, self.w, self.w_hat):
            vals = [repr(float(v)) for v in (m, s, *w, *wh)]
            rows.append(",".join([str(e), *vals]))
        Path(path).write_text("\n".join(rows) + "\n")


def train(model: QnmModel, Xn, y, config: TrainConfig) -> tuple[QnmModel, TrainingTrace]:
    """Joint Adam on every shape-function parameter, w and w_hat.

    The trace holds the loss and weights *before* each epoch's update.
    """
    Xn = _check_dim(model, Xn)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise EmptyBatch("training set is empty")
    model = model.copy()
    trace = TrainingTrace()
    state = AdamState.for_params(model.params(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    n = y.shape[0]
    full = _UniqueInputs(Xn) if config.batch_size is None or config.batch_size >= n else None
    for epoch in range(config.epochs):
        if full is not None:
            batches = [(Xn, y, full)]
        else:
            order = rng.permutation(n)
            batches = [
                (Xn[idx], y[idx], None)
                for idx in (order[s : s + config.batch_size] for s in range(0, n, config.batch_size))
            ]
        for bi, (xb, yb, ub) in enumerate(batches):
            terms, grads = loss_and_grads(model, xb, yb, config.sparsity, ub)
            if not np.isfinite(terms.total):
                raise DivergenceDetected(epoch, terms.total)
            if bi == 0:
                trace.record(epoch, terms, model)
            adam_step(model.params(), grads, state)
    return model, trace



def fit_dataset(
    X_raw,
    y_raw,
    mode: str = "NAM",
    config: TrainConfig | None = None,
    *,
    feature_names: Sequence[str] | None = None,
    scale_target: bool = True,
    **init_kwargs,
) -> tuple[QnmModel, TrainingTrace]:
    """Normalize inputs to [0, 1], divide targets by max |y| and train.

    ``init_kwargs`` go to :func:`init_model`; its seed defaults to the
    training seed.
    """
    X_raw = np.asarray(X_raw, dtype=float)
    y_raw = np.asarray(y_raw, dtype=float)
    config = config or TrainConfig()
    norm = Normalization.fit(X_raw)
    scale = float(np.max(np.abs(y_raw))) if scale_target and y_raw.size else 1.0
    scale = scale if scale > 0 else 1.0
    init_kwargs.setdefault("seed", config.seed)
    model = init_model(X_raw.shape[1], mode, feature_names=feature_names, **init_kwargs)
    model.normalization = norm
    model.target_scale = scale
    return train(model, norm.apply(X_raw), y_raw / scale, config)

# ---------------------------------------------------------------------------
# interpretation


@dataclass
class FeatureTerm:
    term: str
    indices: tuple[int, ...]
    coefficient: float

    @property
    def magnitude(self) -> float:
        return abs(self.coefficient)


@dataclass
class FeatureReport:
    terms: list[FeatureTerm]
    samples: dict[str, tuple[np.ndarray, np.ndarray]]  # feature name -> (x, f(x)) on [0, 1]

    def to_dict(self) -> dict:
        return {
            "terms": [{"term": t.term, "coefficient": t.coefficient, "abs": t.magnitude} for t in self.terms],
            "samples": {k: {"x": x.tolist(), "f": f.tolist()} for k, (x, f) in self.samples.items()},
        }


def feature_report(model: QnmModel, n_samples: int = 256) -> FeatureReport:
    """Terms ranked by |coefficient| (stable on ties) plus shape-function samples."""
    names = model.feature_names
    terms = [FeatureTerm(f"w_{names[i]}", (i,), float(model.w[i])) for i in range(model.D)]
    terms += [
        FeatureTerm(f"w_hat_{names[i]}_{names[j]}", (i, j), float(v)) for (i, j), v in zip(model.pairs, model.w_hat)
    ]
    terms.sort(key=lambda t: -t.magnitude)
    grid = np.linspace(0.0, 1.0, n_samples)
    samples = {names[i]: (grid, forward_batch(net, grid).output) for i, net in enumerate(model.shape_fns)}
    return FeatureReport(terms, samples)
