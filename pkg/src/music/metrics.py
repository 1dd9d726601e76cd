"""Relative L2 errors, sparsity accounting and seed aggregation."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .network import active_count

__all__ = [
    "rel_l2",
    "fullfield_rel_l2",
    "per_variable_mean",
    "error_evolution",
    "sparsity_percent",
    "aggregate",
    "ErrorReport",
    "REPORT_COLUMNS",
]


def _vals(a):
    return np.asarray(getattr(a, "values", a), dtype=float)


def rel_l2(truth, pred):
    """``||u - u_hat|| / ||u||`` over the flattened arrays."""
    u, p = _vals(truth), _vals(pred)
    if u.shape != p.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {p.shape}")
    den = float(np.linalg.norm(u.ravel()))
    if den == 0.0:
        raise ValueError("truth has zero norm")
    return float(np.linalg.norm((u - p).ravel())) / den


def fullfield_rel_l2(truths, preds):
    """Relative L2 of the stacked vector of all variables."""
    truths, preds = list(truths), list(preds)
    if len(truths) != len(preds) or not truths:
        raise ValueError("need matching, nonempty truth and prediction lists")
    num = den = 0.0
    for t, p in zip(truths, preds):
        u, q = _vals(t), _vals(p)
        if u.shape != q.shape:
            raise ValueError(f"shape mismatch: {u.shape} vs {q.shape}")
        num += float(np.sum((u - q) ** 2))
        den += float(np.sum(u * u))
    if den == 0.0:
        raise ValueError("truth has zero norm")
    return math.sqrt(num / den)


def per_variable_mean(truths, preds):
    return float(np.mean([rel_l2(t, p) for t, p in zip(truths, preds)]))


def error_evolution(truth, pred):
    """Relative L2 per saved time level (axis 0); NaN where the truth level is zero."""
    u, p = _vals(truth), _vals(pred)
    if u.shape != p.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {p.shape}")
    n = u.shape[0]
    num = np.sqrt(np.sum((u - p).reshape(n, -1) ** 2, axis=1))
    den = np.sqrt(np.sum(u.reshape(n, -1) ** 2, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def sparsity_percent(params, mode="gated"):
    """Percentage of weights and biases still active."""
    return 100.0 * active_count(params, mode) / params.n_params


def aggregate(values):
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("nothing to aggregate")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


REPORT_COLUMNS = ("run", "window", "variable", "rel_l2", "sparsity_percent")


@dataclass
class ErrorReport:
    """Per-variable and full-field errors of one run, with optional windows."""

    run: str
    rows: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    sparsity: float = float("nan")

    def add(self, window, truths, preds, names):
        for name, t, p in zip(names, truths, preds):
            self.rows.append((window, name, rel_l2(t, p)))
        self.rows.append((window, "fullfield", fullfield_rel_l2(truths, preds)))
        self.rows.append((window, "mean_of_vars", per_variable_mean(truths, preds)))
        for name, t, p in zip(names, truths, preds):
            self.traces[(window, name)] = error_evolution(t, p)
        return self

    def value(self, window, variable="fullfield"):
        for w, v, e in self.rows:
            if w == window and v == variable:
                return e
        raise KeyError((window, variable))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# schema", "error_report", "1"])
        w.writerow(REPORT_COLUMNS)
        for window, var, err in self.rows:
            w.writerow([self.run, window, var, repr(float(err)), repr(float(self.sparsity))])
        return buf.getvalue()

    def traces_csv(self, times):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# schema", "error_trace", "1"])
        w.writerow(["window", "variable", "t", "rel_l2"])
        for (window, var), tr in self.traces.items():
            ts = times[window] if isinstance(times, dict) else times
            for t, e in zip(ts, tr):
                w.writerow([window, var, repr(float(t)), repr(float(e))])
        return buf.getvalue()
