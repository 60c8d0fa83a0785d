"""Objective and optimizer: sequence NLL + gamma * KL graph regularizer, Adam
with global-norm clipping, early stopping on validation NLL.

The objective minimized is ``NLL + gamma * L_graph`` where NLL is the
*negative* log-likelihood (first event conditioned on, compensator over
``[t_first, T]``).
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .eventstore import Dataset, EventSequence
from .model import GRPPModel, encode_sequence, infectivity, regime_intensities

log = logging.getLogger(__name__)

GRAPH_EPS = 1e-8
# cap on the (regimes x samples x history x d) tensor per block
_BLOCK_ELEMENTS = 2_000_000


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.001
    dropout: float = 0.2
    gamma: float = 0.01
    mc_samples: int = 5
    eval_points: int = 50
    clip_norm: float = 5.0
    seed: int = 0
    disable_graph_propagation: bool = False
    disable_history_attention: bool = False
    patience: int = 10
    m: int = 128
    d: int = 128
    tau: float = 0.0
    graph_norm: str = "global"
    threads: int = 1

    def __post_init__(self):
        for name in ("epochs", "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "mc_samples", "m", "d", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eval_points < 2:
            raise ValueError("eval_points must be >= 2")
        if not self.learning_rate > 0 or not self.clip_norm > 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.gamma < 0 or self.tau < 0:
            raise ValueError("gamma and tau must be >= 0")
        if self.graph_norm not in ("global", "row"):
            raise ValueError("graph_norm must be 'global' or 'row'")
        if self.disable_graph_propagation and self.disable_history_attention:
            raise ValueError("at most one ablation flag may be set")

    @property
    def ablation(self) -> str:
        if self.disable_graph_propagation:
            return "wogp"
        if self.disable_history_attention:
            return "woat"
        return "none"

    @property
    def effective_gamma(self) -> float:
        # woGP drops the regularizer together with the propagation model
        return 0.0 if self.disable_graph_propagation else self.gamma


# ---------------------------------------------------------------- config files


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key '{name}': expected a boolean, got {raw!r}")
    try:
        return {"int": int, "float": float, "str": str}.get(typ, typ)(raw)
    except ValueError:
        raise ValueError(f"config key '{name}': cannot parse {raw!r} as {typ}") from None


def config_field_types() -> dict:
    return {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = config_field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        out[key] = _coerce(key, value, types[key])
    return out


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    values.update(overrides or {})
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# ---------------------------------------------------------------- objective


def _trapezoid_weights(points: int) -> np.ndarray:
    w = np.full(points, 1.0 / (points - 1))
    w[0] = w[-1] = 0.5 / (points - 1)
    return w


def integration_grid(seq: EventSequence, integration: str = "trapezoid", points: int = 50,
                     samples: int = 5, rng=None):
    """Evaluation times per regime and matching quadrature weights.

    Column 0 of ``ts`` is the next event time (the horizon for the last
    regime) and carries zero weight.
    """
    times = seq.times
    ends = np.append(times[1:], seq.horizon)
    length = ends - times
    if integration == "mc":
        if rng is None:
            raise ValueError("Monte Carlo integration needs an rng")
        frac = rng.uniform(size=(len(times), samples))
        w = np.repeat(length[:, None] / samples, samples, axis=1)
    elif integration == "trapezoid":
        frac = np.broadcast_to(np.linspace(0.0, 1.0, points), (len(times), points))
        w = length[:, None] * _trapezoid_weights(points)[None, :]
    else:
        raise ValueError(f"unknown integration {integration!r}")
    ts = np.concatenate([ends[:, None], times[:, None] + frac * length[:, None]], axis=1)
    return ts, w


def sequence_nll(model: GRPPModel, s: EventSequence, P=None, integration: str = "trapezoid",
                 points: int = 50, samples: int = 5, rng=None, dropout=None, grid=None):
    """-sum log lambda_{v_i}(t_i) for i >= 1 plus the compensator over
    [t_0, T]. Returns a float (or a Var on a tape)."""
    if len(s) < 2:
        raise ValueError("sequence_nll needs at least 2 events")
    P = model.params if P is None else P
    times, nodes = s.times, s.nodes
    n = len(times)
    ts, w = grid if grid is not None else integration_grid(s, integration, points, samples, rng)
    Hs = encode_sequence(P, nodes, model.nbrs, model.ablation, dropout)
    d = model.d
    per_row = ts.shape[1] * n * d
    block = max(1, _BLOCK_ELEMENTS // per_row)
    total = 0.0
    for lo in range(0, n, block):
        rows = np.arange(lo, min(n, lo + block))
        lam = regime_intensities(P, Hs, times, ts[rows], model.ablation, rows=rows)
        integral = nx.sum(nx.mul(nx.sum(lam[:, 1:, :], axis=-1), w[rows]))
        scored = rows[rows < n - 1]
        if len(scored):
            ev = lam[(np.arange(len(scored)), 0, nodes[scored + 1])]
            total = nx.add(total, nx.sub(integral, nx.sum(nx.log(ev))))
        else:
            total = nx.add(total, integral)
    if not isinstance(total, nx.Var) and not np.isfinite(total):
        raise FloatingPointError(_locate_nonfinite(model, s, P, ts, w))
    return total


def _locate_nonfinite(model, s, P, ts, w) -> str:
    Hs = encode_sequence(P, s.nodes, model.nbrs, model.ablation)
    lam = regime_intensities(P, nx.value_of(Hs), s.times, ts, model.ablation)
    bad = np.flatnonzero(~np.isfinite(lam).all(axis=(1, 2)))
    where = f"interval {int(bad[0])}" if len(bad) else "event term"
    return f"non-finite NLL in sequence {s.seq_id!r}, {where}"


def graph_transform(A, mode: str = "global", eps: float = GRAPH_EPS):
    """softplus(A) + eps, normalized globally or per row."""
    Ah = nx.add(nx.softplus(A), eps)
    if mode == "row":
        return nx.div(Ah, nx.reshape(nx.sum(Ah, axis=1), (-1, 1)))
    return nx.div(Ah, nx.sum(Ah))


def graph_reg(A, E, mode: str = "global", eps: float = GRAPH_EPS):
    """KL(E_hat || A_hat) between the normalized connection matrix and the
    softplus-normalized infectivity matrix."""
    E = np.asarray(E, dtype=np.float64) + eps
    if mode == "row":
        Eh = E / E.sum(axis=1, keepdims=True)
    else:
        Eh = E / E.sum()
    Ah = graph_transform(A, mode, eps)
    kl = nx.sum(nx.mul(Eh, nx.sub(np.log(Eh), nx.log(Ah))))
    if mode == "row":
        kl = nx.div(kl, E.shape[0])
    return kl


def total_loss(model: GRPPModel, batch, E, gamma: float, P=None, mode: str = "global",
               **nll_kw):
    """Mean sequence NLL over ``batch`` plus ``gamma`` times the graph term."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    P = model.params if P is None else P
    loss = 0.0
    for s in batch:
        loss = nx.add(loss, sequence_nll(model, s, P, **nll_kw))
    loss = nx.div(loss, float(len(batch)))
    if gamma > 0:
        A = infectivity(P["H0"], P["Omega"])
        loss = nx.add(loss, nx.mul(gamma, graph_reg(A, E, mode)))
    return loss


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


def clip_global_norm(g: np.ndarray, max_norm: float):
    norm = float(np.sqrt(np.dot(g, g)))
    if norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


# ---------------------------------------------------------------- training


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_nll: float = float("inf")
    ablation: str = "none"
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return sum(1 for r in self.rows if r["epoch"] > 0)

    def write_csv(self, path, include_seconds: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "valid_nll", "valid_graph_loss", "seconds"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["valid_nll"]),
                            repr(r["valid_graph_loss"]),
                            f"{r['seconds']:.3f}" if include_seconds else ""])

    def to_json(self) -> dict:
        return {"ablation": self.ablation, "best_epoch": self.best_epoch,
                "best_valid_nll": self.best_valid_nll, "stopped_early": self.stopped_early,
                "epochs_run": self.epochs_run, "rows": self.rows}


def mean_nll(model: GRPPModel, data, points: int = 50) -> float:
    seqs = [s for s in data if len(s) >= 2]
    if not seqs:
        return float("nan")
    return float(np.mean([sequence_nll(model, s, points=points) for s in seqs]))


def _sequence_grad(job):
    model, seq, values, grid, dropout = job
    P = model.params.with_values(values)
    f = lambda p: sequence_nll(model, seq, p, grid=grid, dropout=dropout)  # noqa: E731
    return nx.evaluate_with_gradients(f, P)


def _batch_gradient(model, batch, values, E, cfg, rng, pool):
    jobs = []
    for s in batch:
        grid = integration_grid(s, "mc", samples=cfg.mc_samples, rng=rng)
        dropout = None
        if cfg.dropout > 0:
            keep = rng.uniform(size=(len(s), model.d + model.m)) >= cfg.dropout
            dropout = keep / (1.0 - cfg.dropout)
        jobs.append((model, s, values, grid, dropout))
    records = list(pool.map(_sequence_grad, jobs)) if pool else [_sequence_grad(j) for j in jobs]
    loss = sum(r.loss for r in records) / len(batch)
    grad = sum(r.gradient for r in records) / len(batch)
    gamma = cfg.effective_gamma
    if gamma > 0:
        reg = nx.evaluate_with_gradients(
            lambda p: nx.mul(gamma, graph_reg(infectivity(p["H0"], p["Omega"]), E,
                                              cfg.graph_norm)),
            model.params.with_values(values))
        loss += reg.loss
        grad = grad + reg.gradient
    return loss, grad


def train(model: GRPPModel, train_data: Dataset, valid_data: Dataset, cfg: TrainConfig,
          E=None, deterministic: bool = True, progress=None):
    """Adam on mini-batches; returns (best model, TrainReport).

    Epoch 0 in the report is the untrained model.
    """
    E = model.E if E is None else np.asarray(E)
    seqs = [s for s in train_data if len(s) >= 2]
    valid = [s for s in valid_data if len(s) >= 2]
    if not seqs or not valid:
        raise ValueError("training and validation data need sequences with >= 2 events")
    if len(seqs) < len(train_data):
        log.warning("skipping %d training sequences with < 2 events", len(train_data) - len(seqs))
    rng = np.random.default_rng(cfg.seed)
    values = np.array(model.params.values, dtype=np.float64, copy=True)
    opt = Adam(len(values), cfg.learning_rate)
    report = TrainReport(ablation=model.ablation)
    pool = None
    if cfg.threads > 1 and not deterministic:
        pool = ProcessPoolExecutor(max_workers=cfg.threads)

    def evaluate_epoch(current: GRPPModel):
        vn = mean_nll(current, valid, cfg.eval_points)
        vg = float(graph_reg(current.infectivity(), E, cfg.graph_norm))
        return vn, vg

    start = time.perf_counter()
    init_train = mean_nll(model, seqs, cfg.eval_points)
    vn, vg = evaluate_epoch(model)
    report.rows.append(dict(epoch=0, train_loss=init_train + cfg.effective_gamma * vg,
                            valid_nll=vn, valid_graph_loss=vg,
                            seconds=time.perf_counter() - start))
    best_values, report.best_valid_nll, report.best_epoch = values.copy(), vn, 0
    stale = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(seqs))
            losses, weights = [], []
            for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [seqs[i] for i in order[lo:lo + cfg.batch_size]]
                try:
                    loss, grad = _batch_gradient(model, batch, values, E, cfg, rng, pool)
                except (nx.NonFiniteError, FloatingPointError) as exc:
                    raise TrainingAborted(f"epoch {epoch}, batch {b}: {exc}") from exc
                if not (np.isfinite(loss) and np.isfinite(grad).all()):
                    raise TrainingAborted(f"epoch {epoch}, batch {b}: non-finite loss {loss}")
                grad, _ = clip_global_norm(grad, cfg.clip_norm)
                values = opt.step(values, grad)
                losses.append(loss)
                weights.append(len(batch))
            current = model.with_params(model.params.with_values(values.copy()))
            vn, vg = evaluate_epoch(current)
            if not np.isfinite(vn):
                raise TrainingAborted(f"epoch {epoch}: non-finite validation NLL")
            report.rows.append(dict(epoch=epoch, train_loss=float(np.average(losses, weights=weights)),
                                    valid_nll=vn, valid_graph_loss=vg,
                                    seconds=time.perf_counter() - t0))
            if progress:
                progress(report.rows[-1])
            if vn < report.best_valid_nll:
                best_values, report.best_valid_nll, report.best_epoch = values.copy(), vn, epoch
                stale = 0
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    report.stopped_early = True
                    break
    finally:
        if pool:
            pool.shutdown()
    best = model.with_params(model.params.with_values(best_values))
    return best, report
