"""Next-event density, expectation-based time/node prediction and metrics.

A *model* here is anything with ``intensity_functions(seq)`` returning one
callable per event: the ``i``-th maps an array of times ``t >= t_i`` to the
``(len(t), K)`` intensities given events ``0..i``. Both the GRPP model and
:class:`grpp.hawkes.MHPParams` satisfy this.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .eventstore import Dataset, EventSequence

SURVIVAL_TOL = 1e-4
POINTS_PER_SCALE = 200
MAX_SCALES = 100


class NonIntegrableTailError(RuntimeError):
    pass


@dataclass
class Prediction:
    t_hat: float
    k_hat: int
    truncation_mass: float
    node_mass: np.ndarray | None = None


@dataclass
class Metrics:
    rmse: float
    accuracy: float
    n_events: int
    truncation_mass_max: float = 0.0

    def to_json(self) -> dict:
        return {"rmse": self.rmse, "accuracy": self.accuracy,
                "n_events": self.n_events, "truncation_mass_max": self.truncation_mass_max}


def _last_regime(model, history: EventSequence):
    if len(history) == 0:
        raise ValueError("history must contain at least one event")
    return model.intensity_functions(history)[-1], float(history.times[-1])


def next_event_density(model, history: EventSequence, t: float, points: int = 2001) -> float:
    """p(t) = lambda(t) exp(-int_{t_i}^t lambda) with a trapezoid inner integral."""
    fn, t0 = _last_regime(model, history)
    if t < t0:
        raise ValueError(f"t={t} precedes the last event at {t0}")
    grid = np.linspace(t0, t, points)
    lam = fn(grid).sum(axis=1)
    Lam = np.trapezoid(lam, grid) if t > t0 else 0.0
    return float(lam[-1] * math.exp(-Lam))


def _cumtrapz(y, x):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
    return out


def _integrate_regime(fn, t0: float, scale: float, survival_tol=SURVIVAL_TOL,
                      points_per_scale=POINTS_PER_SCALE, max_scales=MAX_SCALES):
    """Grid over [t0, t0 + H], H doubled until survival < tol.

    Returns (grid, lam (n, K), survival (n,)).
    """
    horizon = scale
    while True:
        n = max(int(round(points_per_scale * horizon / scale)), 2) + 1
        grid = t0 + np.linspace(0.0, horizon, n)
        lam = fn(grid)
        surv = np.exp(-_cumtrapz(lam.sum(axis=1), grid))
        if surv[-1] < survival_tol:
            return grid, lam, surv
        if horizon * 2 > max_scales * scale:
            if surv[-1] < 1e-2:
                return grid, lam, surv
            raise NonIntegrableTailError(
                f"survival {surv[-1]:.3g} after {horizon:.4g} time units "
                f"({horizon / scale:.0f}x the time scale)")
        horizon *= 2


def _default_scale(fn, history: EventSequence, t0: float) -> float:
    times = history.times
    if len(times) >= 2:
        gap = (times[-1] - times[0]) / (len(times) - 1)
        if gap > 0:
            return float(gap)
    rate = float(fn(np.array([t0])).sum())
    return 1.0 / rate


def predict_from_regime(fn, t0: float, scale: float, **kw) -> Prediction:
    grid, lam, surv = _integrate_regime(fn, t0, scale, **kw)
    # per-interval probability mass, split across nodes by averaged rates
    mass = surv[:-1] - surv[1:]
    lam_mid = 0.5 * (lam[1:] + lam[:-1])
    share = lam_mid / lam_mid.sum(axis=1, keepdims=True)
    node_mass = (mass[:, None] * share).sum(axis=0)
    tail = float(surv[-1])
    # E[t] = t0 + int_0^H S dt + E[t - H | t > H] S(H); the last term treats
    # the uncaptured tail as exponential at the horizon's total rate
    t_hat = t0 + float(np.trapezoid(surv, grid))
    rate_h = float(lam[-1].sum())
    if tail > 0 and rate_h > 0:
        t_hat += tail / rate_h
    k_hat = int(np.argmax(node_mass))  # first max wins ties
    return Prediction(t_hat, k_hat, tail, node_mass)


def predict(model, history: EventSequence, scale: float | None = None, **kw) -> Prediction:
    fn, t0 = _last_regime(model, history)
    if scale is None:
        scale = _default_scale(fn, history, t0)
    return predict_from_regime(fn, t0, scale, **kw)


def predict_time(model, history: EventSequence, scale: float | None = None, **kw) -> float:
    return predict(model, history, scale, **kw).t_hat


def predict_node(model, history: EventSequence, scale: float | None = None, **kw) -> int:
    return predict(model, history, scale, **kw).k_hat


def evaluate(model, test: Dataset, scale: float | None = None, predictions_out=None,
             predictor=None, **kw) -> Metrics:
    """Predict every event after the first from its prefix.

    ``scale`` sets the quadrature grid (points per scale) and defaults to the
    mean inter-event time of ``test``. ``predictor(seq, i)`` may replace the
    quadrature predictor; it must return a :class:`Prediction` for event
    ``i + 1`` given events ``0..i``.
    """
    if scale is None:
        scale = mean_gap(test)
    sq_err = 0.0
    correct = 0
    count = 0
    tail_max = 0.0
    rows = []
    for s_idx, seq in enumerate(test):
        if len(seq) < 2:
            raise ValueError(f"test sequence {s_idx} has fewer than 2 events")
        fns = model.intensity_functions(seq) if predictor is None else None
        times, nodes = seq.times, seq.nodes
        for i in range(len(seq) - 1):
            if predictor is None:
                pred = predict_from_regime(fns[i], float(times[i]), scale, **kw)
            else:
                pred = predictor(seq, i)
            sq_err += (pred.t_hat - times[i + 1]) ** 2
            correct += int(pred.k_hat == nodes[i + 1])
            count += 1
            tail_max = max(tail_max, pred.truncation_mass)
            rows.append((seq.seq_id if seq.seq_id is not None else str(s_idx), i + 1,
                         float(times[i + 1]), pred.t_hat, int(nodes[i + 1]), pred.k_hat))
    if predictions_out is not None:
        write_predictions(predictions_out, rows)
    if count == 0:
        return Metrics(0.0, 0.0, 0, 0.0)
    return Metrics(math.sqrt(sq_err / count), correct / count, count, tail_max)


def mean_gap(data: Dataset) -> float:
    gaps = [np.diff(s.times) for s in data if len(s) >= 2]
    gaps = np.concatenate(gaps) if gaps else np.array([])
    if len(gaps) == 0:
        raise ValueError("no inter-event gaps in data")
    return float(gaps.mean())


def write_predictions(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "index", "t_true", "t_hat", "k_true", "k_hat"])
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), r[4], r[5]])


def write_metrics(path, m: Metrics) -> None:
    with open(path, "w") as fh:
        json.dump(m.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- baselines


def baseline_metrics(train: Dataset, test: Dataset) -> Metrics:
    """Most-frequent training node and last time + mean training gap."""
    counts = np.bincount(np.concatenate([s.nodes for s in train]), minlength=train.K)
    k_star = int(np.argmax(counts))
    gap = mean_gap(train)
    sq, correct, n = 0.0, 0, 0
    for seq in test:
        t, k = seq.times, seq.nodes
        sq += float(np.sum((t[:-1] + gap - t[1:]) ** 2))
        correct += int(np.sum(k[1:] == k_star))
        n += len(t) - 1
    return Metrics(math.sqrt(sq / n), correct / n, n, 0.0)
