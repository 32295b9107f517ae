"""Vectorized evaluation of alpha expressions over a Panel.

Each instrument column is computed independently; there is no
cross-sectional mixing inside any operator. Rolling operators use a
full-window policy: until N observations are present, and whenever any
value inside the window is NaN (Count excepted), the output cell is NaN.
Numeric edge cases (division by zero, logs of non-positive values,
zero-variance correlations) are NaN by contract, never exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dsl import ConstLeaf, Expr, FieldLeaf, Node
from .panel import Panel, TradingCalendar, Universe


@dataclass(frozen=True)
class SignalMatrix:
    """T x n factor values aligned with the source panel; NaN = undefined."""

    calendar: TradingCalendar
    universe: Universe
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        shape = (len(self.calendar), len(self.universe))
        if values.shape != shape:
            raise ValueError(f"signal shape {values.shape} does not match panel {shape}")
        if values.flags.writeable:
            values = values.copy()
            values.flags.writeable = False
        object.__setattr__(self, "values", values)


def evaluate(expr: Expr, panel: Panel) -> SignalMatrix:
    values = _eval(expr, panel)
    values.flags.writeable = False
    return SignalMatrix(panel.calendar, panel.universe, values)


def evaluate_batch(exprs: list[Expr], panel: Panel) -> list[SignalMatrix]:
    return [evaluate(e, panel) for e in exprs]


def _eval(expr: Expr, panel: Panel) -> np.ndarray:
    T, n = panel.num_days, panel.num_instruments
    if isinstance(expr, FieldLeaf):
        return panel.fields[expr.kind].copy()
    if isinstance(expr, ConstLeaf):
        return np.full((T, n), expr.value)
    assert isinstance(expr, Node)
    name = expr.op.name
    kids = [_eval(c, panel) for c in expr.children]
    with np.errstate(all="ignore"):
        if name in _ELEMENTWISE:
            return _ELEMENTWISE[name](expr, *kids)
        return _ROLLING[name](expr, *kids)


# ---------------------------------------------------------------------------
# elementwise operators
# ---------------------------------------------------------------------------

def _nan_where(result: np.ndarray, *operands: np.ndarray) -> np.ndarray:
    mask = np.isnan(operands[0])
    for other in operands[1:]:
        mask |= np.isnan(other)
    return np.where(mask, np.nan, result)


def _ew_add(expr, x, y):
    return x + y


def _ew_sub(expr, x, y):
    return x - y


def _ew_mul(expr, x, y):
    return x * y


def _ew_div(expr, x, y):
    return np.where(y == 0, np.nan, x / y)


def _ew_log(expr, x):
    return np.where(x > 0, np.log(x), np.nan)


def _ew_abs(expr, x):
    return np.abs(x)


def _ew_sign(expr, x):
    return np.sign(x)


def _ew_power(expr, x):
    p = expr.reals[0]
    out = np.power(x, p)
    if p < 0:
        out = np.where(x == 0, np.nan, out)
    return _nan_where(out, x)


def _compare(op):
    def run(expr, x, y):
        return _nan_where(op(x, y).astype(np.float64), x, y)

    return run


def _ew_if(expr, cond, x, y):
    return _nan_where(np.where(cond != 0, x, y), cond, x, y)


def _ew_and(expr, x, y):
    return _nan_where(((x != 0) & (y != 0)).astype(np.float64), x, y)


def _ew_or(expr, x, y):
    return _nan_where(((x != 0) | (y != 0)).astype(np.float64), x, y)


def _ew_not(expr, x):
    return _nan_where((x == 0).astype(np.float64), x)


_ELEMENTWISE = {
    "Add": _ew_add,
    "Sub": _ew_sub,
    "Mul": _ew_mul,
    "Div": _ew_div,
    "Log": _ew_log,
    "Abs": _ew_abs,
    "Sign": _ew_sign,
    "Power": _ew_power,
    "Gt": _compare(np.greater),
    "Lt": _compare(np.less),
    "Ge": _compare(np.greater_equal),
    "Le": _compare(np.less_equal),
    "Eq": _compare(np.equal),
    "Ne": _compare(np.not_equal),
    "If": _ew_if,
    "And": _ew_and,
    "Or": _ew_or,
    "Not": _ew_not,
}


# ---------------------------------------------------------------------------
# rolling operators
# ---------------------------------------------------------------------------

def _windowed(x: np.ndarray, N: int, kernel, *, min_window: int = 1) -> np.ndarray:
    """Apply kernel over trailing windows; NaN until the window is full or
    whenever the window contains NaN."""
    T, n = x.shape
    out = np.full((T, n), np.nan)
    if N < min_window or N > T:
        return out
    swv = sliding_window_view(x, N, axis=0)  # (T-N+1, n, N)
    vals = kernel(swv)
    bad = np.isnan(swv).any(axis=-1)
    out[N - 1 :] = np.where(bad, np.nan, vals)
    return out


def _windowed2(x, y, N: int, kernel, *, min_window: int = 1) -> np.ndarray:
    T, n = x.shape
    out = np.full((T, n), np.nan)
    if N < min_window or N > T:
        return out
    sx = sliding_window_view(x, N, axis=0)
    sy = sliding_window_view(y, N, axis=0)
    vals = kernel(sx, sy)
    bad = np.isnan(sx).any(axis=-1) | np.isnan(sy).any(axis=-1)
    out[N - 1 :] = np.where(bad, np.nan, vals)
    return out


def _central_moments(swv, orders):
    N = swv.shape[-1]
    mean = swv.mean(axis=-1)
    dev = swv - mean[..., None]
    return mean, {k: (dev**k).mean(axis=-1) for k in orders}


_SPREAD_FLOOR = 1e-12


def _constant_window(s) -> np.ndarray:
    """Windows whose spread is at float rounding scale count as constant.

    Values that are equal in exact arithmetic often arrive a few ulp apart
    (summation order differs between paths); scale-invariant statistics
    like Corr or Kurt would amplify that noise into arbitrary output. Such
    windows hit the zero-variance contract instead.
    """
    hi, lo = s.max(axis=-1), s.min(axis=-1)
    scale = np.maximum(np.abs(hi), np.abs(lo))
    return hi - lo <= _SPREAD_FLOOR * scale


def _roll_mean(expr, x):
    return _windowed(x, expr.windows[0], lambda s: s.mean(axis=-1))


def _roll_sum(expr, x):
    return _windowed(x, expr.windows[0], lambda s: s.sum(axis=-1))


def _roll_max(expr, x):
    return _windowed(x, expr.windows[0], lambda s: s.max(axis=-1))


def _roll_min(expr, x):
    return _windowed(x, expr.windows[0], lambda s: s.min(axis=-1))


def _roll_med(expr, x):
    return _windowed(x, expr.windows[0], lambda s: np.median(s, axis=-1))


def _roll_var(expr, x):
    N = expr.windows[0]

    def kernel(s):
        dev = s - s.mean(axis=-1)[..., None]
        return np.where(_constant_window(s), 0.0, (dev * dev).sum(axis=-1) / (N - 1))

    return _windowed(x, N, kernel, min_window=2)


def _roll_std(expr, x):
    N = expr.windows[0]

    def kernel(s):
        dev = s - s.mean(axis=-1)[..., None]
        var = np.where(_constant_window(s), 0.0, (dev * dev).sum(axis=-1) / (N - 1))
        return np.sqrt(var)

    return _windowed(x, N, kernel, min_window=2)


def _roll_mad(expr, x):
    def kernel(s):
        mad = np.abs(s - s.mean(axis=-1)[..., None]).mean(axis=-1)
        return np.where(_constant_window(s), 0.0, mad)

    return _windowed(x, expr.windows[0], kernel)


def _roll_rank(expr, x):
    N = expr.windows[0]

    def kernel(s):
        cur = s[..., -1:]
        less = (s < cur).sum(axis=-1)
        equal = (s == cur).sum(axis=-1)
        return (less + (equal + 1.0) / 2.0) / N

    return _windowed(x, N, kernel)


def _roll_quantile(expr, x):
    q = expr.reals[0]

    def kernel(s):
        return np.quantile(s, q, axis=-1, method="linear")

    return _windowed(x, expr.windows[0], kernel)


def _roll_count(expr, x):
    N = expr.windows[0]
    T, n = x.shape
    out = np.full((T, n), np.nan)
    if N > T:
        return out
    swv = sliding_window_view(x, N, axis=0)
    out[N - 1 :] = (~np.isnan(swv)).sum(axis=-1).astype(np.float64)
    return out


def _roll_ref(expr, x):
    N = expr.windows[0]
    T, n = x.shape
    out = np.full((T, n), np.nan)
    if N < T:
        out[N:] = x[:-N]
    return out


def _roll_delta(expr, x):
    return x - _roll_ref(expr, x)


def _rows_since(argext):
    def kernel(s):
        # reversing puts the most recent value first, so argmax/argmin's
        # first-occurrence rule lands on the latest tied extremum
        return argext(s[..., ::-1], axis=-1).astype(np.float64)

    return kernel


def _roll_idxmax(expr, x):
    return _windowed(x, expr.windows[0], _rows_since(np.argmax))


def _roll_idxmin(expr, x):
    return _windowed(x, expr.windows[0], _rows_since(np.argmin))


def _roll_skew(expr, x):
    N = expr.windows[0]

    def kernel(s):
        _, m = _central_moments(s, (2, 3))
        m2 = np.where(_constant_window(s) | (m[2] == 0), np.nan, m[2])
        g1 = m[3] / m2**1.5
        return g1 * np.sqrt(N * (N - 1.0)) / (N - 2.0)

    return _windowed(x, N, kernel, min_window=3)


def _roll_kurt(expr, x):
    N = expr.windows[0]

    def kernel(s):
        _, m = _central_moments(s, (2, 4))
        m2 = np.where(_constant_window(s) | (m[2] == 0), np.nan, m[2])
        g2 = m[4] / m2**2 - 3.0
        return ((N + 1.0) * g2 + 6.0) * (N - 1.0) / ((N - 2.0) * (N - 3.0))

    return _windowed(x, N, kernel, min_window=4)


def _time_weights(N: int) -> tuple[np.ndarray, float]:
    t = np.arange(N, dtype=np.float64)
    centered = t - (N - 1) / 2.0
    return centered, float((centered * centered).sum())


def _snap_zero(values: np.ndarray, s) -> np.ndarray:
    """Collinear or palindromic windows make slope/residual exactly zero in
    real arithmetic while float paths leave rounding dust; snap it away so
    downstream division-by-zero behavior does not depend on summation
    order."""
    scale = np.abs(s).max(axis=-1)
    return np.where(np.abs(values) <= _SPREAD_FLOOR * scale, 0.0, values)


def _roll_slope(expr, x):
    N = expr.windows[0]
    tc, denom = _time_weights(N)

    def kernel(s):
        slope = _snap_zero((s * tc).sum(axis=-1) / denom, s)
        return np.where(_constant_window(s), 0.0, slope)

    return _windowed(x, N, kernel, min_window=2)


def _roll_resi(expr, x):
    N = expr.windows[0]
    tc, denom = _time_weights(N)

    def kernel(s):
        slope = (s * tc).sum(axis=-1) / denom
        fitted_last = s.mean(axis=-1) + slope * (N - 1) / 2.0
        resi = _snap_zero(s[..., -1] - fitted_last, s)
        return np.where(_constant_window(s), 0.0, resi)

    return _windowed(x, N, kernel, min_window=2)


def _roll_rsquare(expr, x):
    N = expr.windows[0]
    tc, denom = _time_weights(N)

    def kernel(s):
        slope = (s * tc).sum(axis=-1) / denom
        dev = s - s.mean(axis=-1)[..., None]
        sst = np.where(_constant_window(s), 0.0, (dev * dev).sum(axis=-1))
        return slope * slope * denom / np.where(sst == 0, np.nan, sst)

    return _windowed(x, N, kernel, min_window=2)


def _roll_corr(expr, x, y):
    N = expr.windows[0]

    def kernel(sx, sy):
        dx = sx - sx.mean(axis=-1)[..., None]
        dy = sy - sy.mean(axis=-1)[..., None]
        sxx = (dx * dx).sum(axis=-1)
        syy = (dy * dy).sum(axis=-1)
        sxy = (dx * dy).sum(axis=-1)
        denom = np.sqrt(sxx * syy)
        degenerate = _constant_window(sx) | _constant_window(sy) | (denom == 0)
        return sxy / np.where(degenerate, np.nan, denom)

    return _windowed2(x, y, N, kernel)


def _roll_cov(expr, x, y):
    N = expr.windows[0]

    def kernel(sx, sy):
        dx = sx - sx.mean(axis=-1)[..., None]
        dy = sy - sy.mean(axis=-1)[..., None]
        cov = (dx * dy).sum(axis=-1) / (N - 1)
        return np.where(_constant_window(sx) | _constant_window(sy), 0.0, cov)

    return _windowed2(x, y, N, kernel, min_window=2)


_ROLLING = {
    "Mean": _roll_mean,
    "Sum": _roll_sum,
    "Max": _roll_max,
    "Min": _roll_min,
    "Med": _roll_med,
    "Var": _roll_var,
    "Std": _roll_std,
    "Mad": _roll_mad,
    "Rank": _roll_rank,
    "Quantile": _roll_quantile,
    "Count": _roll_count,
    "Ref": _roll_ref,
    "Delta": _roll_delta,
    "IdxMax": _roll_idxmax,
    "IdxMin": _roll_idxmin,
    "Skew": _roll_skew,
    "Kurt": _roll_kurt,
    "Slope": _roll_slope,
    "Resi": _roll_resi,
    "Rsquare": _roll_rsquare,
    "Corr": _roll_corr,
    "Cov": _roll_cov,
}
