"""Single-input single-output ARX identification.

Difference equation (``m`` is the sample number)::

    y(m) + a1 y(m-1) + ... + a_na y(m-na) = b1 u(m-nk) + ... + b_nb u(m-nb-nk+1) + e(m)

Rows start at ``m0 = max(na, nb + nk - 1)``, the first sample whose regressors
are all available. Least squares is solved with a column-pivoted QR
factorization so rank deficiency is detected from the pivots.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.signal import lfilter, lfiltic

__all__ = [
    "MAX_ORDER",
    "MAX_DELAY",
    "IntervalTooShortError",
    "RankDeficientError",
    "ArxOrders",
    "OrderBounds",
    "ArxModel",
    "FreeRunResult",
    "GridCell",
    "ModelSelectionResult",
    "build_regression",
    "fit_least_squares",
    "fit_arx",
    "one_step_predict",
    "simulate_free_run",
    "aic",
    "grid_search",
    "select_best",
    "model_to_json",
    "model_from_json",
    "save_model",
    "load_model",
]

MAX_ORDER = 5
MAX_DELAY = 5
DIVERGENCE_LIMIT = 1e6


class IntervalTooShortError(ValueError):
    """Not enough samples for more regression rows than unknowns."""


class RankDeficientError(np.linalg.LinAlgError):
    """The regression matrix is numerically rank deficient."""


@dataclass(frozen=True, order=True)
class ArxOrders:
    n_a: int
    n_b: int
    n_k: int

    def __post_init__(self):
        for name, value, lo, hi in (
            ("n_a", self.n_a, 1, MAX_ORDER),
            ("n_b", self.n_b, 1, MAX_ORDER),
            ("n_k", self.n_k, 0, MAX_DELAY),
        ):
            if int(value) != value or not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
            object.__setattr__(self, name, int(value))

    @property
    def start_index(self) -> int:
        return max(self.n_a, self.n_b + self.n_k - 1)

    @property
    def n_params(self) -> int:
        return self.n_a + self.n_b

    def tie_key(self) -> tuple[int, int, int]:
        """Preference among equal scores: fewer parameters, then shorter delay, then lower n_a."""
        return (self.n_params, self.n_k, self.n_a)

    def __str__(self) -> str:
        return f"({self.n_a},{self.n_b},{self.n_k})"


@dataclass(frozen=True)
class OrderBounds:
    """Inclusive ranges of the order/delay search grid."""

    n_a: tuple[int, int] = (1, MAX_ORDER)
    n_b: tuple[int, int] = (1, MAX_ORDER)
    n_k: tuple[int, int] = (0, MAX_DELAY)

    def cells(self) -> list[ArxOrders]:
        return [
            ArxOrders(na, nb, nk)
            for na in range(self.n_a[0], self.n_a[1] + 1)
            for nb in range(self.n_b[0], self.n_b[1] + 1)
            for nk in range(self.n_k[0], self.n_k[1] + 1)
        ]


@dataclass(frozen=True)
class ArxModel:
    orders: ArxOrders
    a: np.ndarray
    b: np.ndarray
    fit_mse: float
    n_samples_used: int

    def __post_init__(self):
        a = np.array(self.a, dtype=float).ravel()
        b = np.array(self.b, dtype=float).ravel()
        if a.size != self.orders.n_a or b.size != self.orders.n_b:
            raise ValueError("coefficient lengths do not match the model orders")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("coefficients must be finite")
        if not self.fit_mse >= 0:
            raise ValueError("fit_mse must be non-negative")
        a.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.a, self.b])

    @property
    def start_index(self) -> int:
        return self.orders.start_index

    def transfer_polynomials(self) -> tuple[np.ndarray, np.ndarray]:
        """(numerator, denominator) in powers of the backward shift operator."""
        num = np.zeros(self.orders.n_k + self.orders.n_b)
        num[self.orders.n_k:] = self.b
        den = np.concatenate([[1.0], self.a])
        return num, den

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(np.roots(np.concatenate([[1.0], self.a]))) < 1.0))

    def __eq__(self, other):
        if not isinstance(other, ArxModel):
            return NotImplemented
        return (
            self.orders == other.orders
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
            and self.fit_mse == other.fit_mse
            and self.n_samples_used == other.n_samples_used
        )

    __hash__ = None


def _as_pair(y, u) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if y.ndim != 1 or u.ndim != 1:
        raise ValueError("y and u must be one-dimensional")
    if y.size != u.size:
        raise ValueError(f"y and u lengths differ ({y.size} vs {u.size})")
    return y, u


def _design(y: np.ndarray, u: np.ndarray, orders: ArxOrders, start: int) -> np.ndarray:
    n = y.size
    cols = [-y[start - i:n - i] for i in range(1, orders.n_a + 1)]
    cols += [u[start - orders.n_k - j + 1:n - orders.n_k - j + 1] for j in range(1, orders.n_b + 1)]
    return np.column_stack(cols)


def build_regression(y, u, orders: ArxOrders, start: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Regression matrix and target for samples ``max(m0, start) .. N-1``.

    Row ``m`` is ``[-y(m-1) .. -y(m-na), u(m-nk) .. u(m-nb-nk+1)]`` and the
    target is ``y(m)``. ``start`` lets several models share one row range.

    Raises
    ------
    IntervalTooShortError
        If there are not more rows than unknowns.
    """
    y, u = _as_pair(y, u)
    m0 = orders.start_index if start is None else max(orders.start_index, int(start))
    rows = y.size - m0
    if rows <= orders.n_params:
        raise IntervalTooShortError(
            f"interval too short: {y.size} samples give {max(rows, 0)} rows for "
            f"{orders.n_params} unknowns at orders {orders}"
        )
    return _design(y, u, orders, m0), y[m0:].copy()


def _pivoted_qr_solve(phi: np.ndarray, target: np.ndarray, n_rows: int) -> np.ndarray:
    q, r, perm = qr(phi, mode="economic", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(r))
    cols = phi.shape[1]
    tol = diag[0] * max(n_rows, cols) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.count_nonzero(diag > tol))
    if rank < cols:
        raise RankDeficientError(f"rank deficient: numerical rank {rank} < {cols} columns")
    theta = np.empty(cols)
    theta[perm] = solve_triangular(r, q.T @ target, check_finite=False)
    return theta


def fit_least_squares(phi, target) -> tuple[np.ndarray, float]:
    """Least-squares coefficients via pivoted QR and the mean squared residual.

    Raises
    ------
    RankDeficientError
        When the numerical rank, judged on the QR pivots relative to the
        largest one, is below the column count.
    """
    phi = np.asarray(phi, dtype=float)
    target = np.asarray(target, dtype=float)
    rows, cols = phi.shape
    if rows <= cols:
        raise IntervalTooShortError(f"need more rows than columns, got {rows}x{cols}")
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(target))):
        raise ValueError("regression data must be finite")
    theta = _pivoted_qr_solve(phi, target, rows)
    resid = target - phi @ theta
    return theta, float(np.mean(resid * resid))


def fit_arx(y, u, orders: ArxOrders, start: int | None = None) -> ArxModel:
    phi, target = build_regression(y, u, orders, start)
    theta, mse = fit_least_squares(phi, target)
    return ArxModel(orders, theta[:orders.n_a], theta[orders.n_a:], mse, target.size)


def one_step_predict(model: ArxModel, y_measured, u) -> np.ndarray:
    """One-step-ahead predictions for samples ``m0 .. N-1`` from measured past outputs."""
    y, u = _as_pair(y_measured, u)
    m0 = model.start_index
    if y.size <= m0:
        raise IntervalTooShortError(f"need more than {m0} samples, got {y.size}")
    return _design(y, u, model.orders, m0) @ model.theta


@dataclass(frozen=True)
class FreeRunResult:
    values: np.ndarray
    diverged: bool
    diverged_at: int | None = None  # index into ``values`` where |y| first exceeded the limit


def simulate_free_run(model: ArxModel, y_init, u) -> FreeRunResult:
    """Simulate the model driven by ``u`` alone, seeded with ``m0`` measured outputs.

    Returns predictions for samples ``m0 .. N-1``. Once ``|y|`` exceeds
    1e6 the run is flagged as diverged and the remaining samples are NaN.
    """
    y_init = np.asarray(y_init, dtype=float)
    u = np.asarray(u, dtype=float)
    m0 = model.start_index
    if y_init.size != m0:
        raise ValueError(f"y_init must hold exactly m0={m0} samples, got {y_init.size}")
    if u.size <= m0:
        raise IntervalTooShortError(f"need more than {m0} input samples, got {u.size}")
    num, den = model.transfer_polynomials()
    past_y = y_init[::-1][:den.size - 1]
    past_u = u[:m0][::-1][:num.size - 1]
    zi = lfiltic(num, den, past_y, past_u)
    with np.errstate(over="ignore", invalid="ignore"):
        out, _ = lfilter(num, den, u[m0:], zi=zi)
    bad = ~(np.abs(out) <= DIVERGENCE_LIMIT)
    if np.any(bad):
        first = int(np.argmax(bad))
        out[first:] = np.nan
        return FreeRunResult(out, True, first)
    return FreeRunResult(out, False, None)


def aic(fit_mse: float, n_rows: int, orders: ArxOrders) -> float:
    """``n_rows * ln(fit_mse) + 2 * (n_a + n_b)``; a perfect fit scores ``-inf``."""
    if not (fit_mse >= 0 and math.isfinite(fit_mse)):
        raise ValueError(f"fit_mse must be finite and non-negative, got {fit_mse}")
    if n_rows < 1:
        raise ValueError("n_rows must be positive")
    if fit_mse == 0:
        return -math.inf
    return n_rows * math.log(fit_mse) + 2 * orders.n_params


@dataclass(frozen=True)
class GridCell:
    orders: ArxOrders
    model: ArxModel | None
    aic: float | None
    failure: str | None = None

    @property
    def mse(self) -> float | None:
        return None if self.model is None else self.model.fit_mse


@dataclass(frozen=True)
class ModelSelectionResult:
    best_by_mse: ArxModel
    best_by_aic: ArxModel
    grid: dict = field(repr=False)  # ArxOrders -> GridCell, in canonical order

    def absent(self) -> list[ArxOrders]:
        return [o for o, c in self.grid.items() if c.model is None]

    def best(self, selection: str = "mse") -> ArxModel:
        if selection == "mse":
            return self.best_by_mse
        if selection == "aic":
            return self.best_by_aic
        raise ValueError(f"unknown selection mode {selection!r}")


class _CompressedProblem:
    """Shared QR of every lagged column an order grid can use.

    For rows at or beyond the grid's largest ``m0`` the data matrix
    ``[-y lags, u lags, y]`` is factored once; a cell's least-squares problem
    then reduces to the matching columns of the triangular factor, stacked
    with the few extra rows that only that cell's smaller ``m0`` admits. The
    orthogonal factor preserves residual norms, so the reduced problem has
    the same solution as the full one.
    """

    def __init__(self, y: np.ndarray, u: np.ndarray, cells: Sequence[ArxOrders]):
        self.y, self.u = y, u
        self.na_max = max(c.n_a for c in cells)
        self.lag_max = max(c.n_k + c.n_b - 1 for c in cells)
        self.common_start = max(c.start_index for c in cells)
        n = y.size
        s = self.common_start
        if n - s <= 0:
            self.r = None
            return
        cols = [-y[s - i:n - i] for i in range(1, self.na_max + 1)]
        cols += [u[s - lag:n - lag] for lag in range(0, self.lag_max + 1)]
        cols.append(y[s:])
        block = np.column_stack(cols)
        if block.shape[0] > block.shape[1]:
            self.r = qr(block, mode="r", check_finite=False)[0][:block.shape[1]]
        else:
            self.r = block

    def solve(self, orders: ArxOrders) -> np.ndarray:
        n = self.y.size
        m0 = orders.start_index
        rows = n - m0
        if rows <= orders.n_params:
            raise IntervalTooShortError(
                f"interval too short: {rows} rows for {orders.n_params} unknowns at orders {orders}"
            )
        col_idx = list(range(orders.n_a)) + [
            self.na_max + orders.n_k + j for j in range(orders.n_b)
        ]
        parts_phi, parts_t = [], []
        if self.r is not None:
            parts_phi.append(self.r[:, col_idx])
            parts_t.append(self.r[:, -1])
        if m0 < self.common_start:
            extra_end = min(self.common_start, n)
            sub_y = self.y[:extra_end]
            sub_u = self.u[:extra_end]
            parts_phi.append(_design(sub_y, sub_u, orders, m0))
            parts_t.append(sub_y[m0:])
        phi = np.vstack(parts_phi)
        target = np.concatenate(parts_t)
        return _pivoted_qr_solve(phi, target, rows)


def _evaluate_cell(problem: _CompressedProblem, y, u, orders: ArxOrders) -> GridCell:
    try:
        theta = problem.solve(orders)
    except (IntervalTooShortError, RankDeficientError) as exc:
        return GridCell(orders, None, None, str(exc))
    # residuals on the full rows: identical algebra to one_step_predict
    phi, target = build_regression(y, u, orders)
    resid = target - phi @ theta
    mse = float(np.mean(resid * resid))
    model = ArxModel(orders, theta[:orders.n_a], theta[orders.n_a:], mse, target.size)
    return GridCell(orders, model, aic(mse, target.size, orders))


def grid_search(
    y,
    u,
    bounds: OrderBounds | None = None,
    evaluation_order: Iterable[ArxOrders] | None = None,
) -> ModelSelectionResult:
    """Fit every order/delay cell and pick the best by MSE and by AIC.

    Ties on the score go to fewer parameters, then smaller delay, then
    smaller ``n_a``. ``evaluation_order`` only changes the visiting order;
    the result never depends on it.

    Raises
    ------
    IntervalTooShortError
        When no cell can be fitted.
    """
    y, u = _as_pair(y, u)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(u))):
        raise ValueError("y and u must be finite")
    cells = (bounds or OrderBounds()).cells()
    visit = list(evaluation_order) if evaluation_order is not None else cells
    if sorted(visit) != sorted(cells):
        raise ValueError("evaluation_order must be a permutation of the grid cells")
    problem = _CompressedProblem(y, u, cells)
    results = {orders: _evaluate_cell(problem, y, u, orders) for orders in visit}
    grid = {orders: results[orders] for orders in cells}
    fitted = [c for c in grid.values() if c.model is not None]
    if not fitted:
        reasons = sorted({c.failure for c in grid.values()})
        raise IntervalTooShortError("no grid cell could be fitted: " + "; ".join(reasons[:3]))
    best_mse = select_best(fitted, "mse")
    best_aic = select_best(fitted, "aic")
    return ModelSelectionResult(best_mse.model, best_aic.model, grid)


def select_best(cells: Iterable[GridCell], score: str = "mse") -> GridCell:
    """Lowest ``mse`` or ``aic`` among fitted cells, ties broken by :meth:`ArxOrders.tie_key`."""
    if score not in ("mse", "aic"):
        raise ValueError(f"score must be 'mse' or 'aic', got {score!r}")
    fitted = [c for c in cells if c.model is not None]
    if not fitted:
        raise ValueError("no fitted cell to choose from")
    return min(fitted, key=lambda c: (getattr(c, score), c.orders.tie_key()))


def _fmt(x: float) -> str:
    # 17 significant digits always round-trip a binary64
    return f"{float(x):.16e}"


def model_to_json(model: ArxModel, feature: str, interval_label: str) -> str:
    fields = [
        ("feature", json.dumps(str(feature))),
        ("interval_label", json.dumps(str(interval_label))),
        ("n_a", str(model.orders.n_a)),
        ("n_b", str(model.orders.n_b)),
        ("n_k", str(model.orders.n_k)),
        ("a", "[" + ", ".join(_fmt(v) for v in model.a) + "]"),
        ("b", "[" + ", ".join(_fmt(v) for v in model.b) + "]"),
        ("fit_mse", _fmt(model.fit_mse)),
        ("n_samples_used", str(int(model.n_samples_used))),
    ]
    return "{\n" + ",\n".join(f'  "{k}": {v}' for k, v in fields) + "\n}\n"


def model_from_json(text: str) -> tuple[ArxModel, str, str]:
    """Parse a model file; returns ``(model, feature, interval_label)``."""
    data = json.loads(text)
    orders = ArxOrders(data["n_a"], data["n_b"], data["n_k"])
    model = ArxModel(
        orders,
        [float(v) for v in data["a"]],
        [float(v) for v in data["b"]],
        float(data["fit_mse"]),
        int(data["n_samples_used"]),
    )
    return model, data["feature"], data["interval_label"]


def save_model(model: ArxModel, path, feature: str, interval_label: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model_to_json(model, feature, interval_label), encoding="utf-8")
    return path


def load_model(path) -> tuple[ArxModel, str, str]:
    return model_from_json(Path(path).read_text(encoding="utf-8"))
