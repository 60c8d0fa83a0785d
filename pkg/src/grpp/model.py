"""GRPP forward pass.

Per event ``i`` (0-based) at node ``v_i``:

* the LSTM cell maps ``[d_{i-1}; x_{v_i}]`` to the positional encoding ``d_i``;
* the embedding of ``v_i`` becomes
  ``tanh(W1 s_u + W2 h_v + W3 d_i)`` where ``s_u`` is an attention-weighted
  average over the in-neighbourhood of the previous event's node ``u``;
* on ``[t_i, t_{i+1})`` the latent intensity is
  ``sum_{j<i} beta_ji h_j * exp(-delta_ji (t - t_j)) + mu_i`` and the event
  intensity is ``softplus(Wf lam_h + bf)``.

Everything is written against :mod:`grpp.numerics`, so the same code gives
plain arrays or a gradient tape depending on what it is fed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .eventstore import EventSequence, neighborhoods

FORMAT_VERSION = 1
ABLATIONS = ("none", "wogp", "woat")


def param_shapes(K: int, m: int, d: int) -> dict:
    return {
        "emb": (K, m),
        "lstm_W": (4 * d, d + m),   # gate rows: input, forget, output, candidate
        "lstm_b": (4 * d,),
        "W1": (d, d),
        "W2": (d, d),
        "W3": (d, d),
        "Ws": (d, d),               # bilinear neighbour score
        "Wmu": (d, d),
        "bmu": (d,),
        "V": (d,),
        "Womega": (d, 2 * d),
        "Wdelta": (d, 2 * d),
        "bdelta": (d,),
        "Wf": (K, d),
        "bf": (K,),
        "Omega": (d, d),
        "H0": (K, d),
    }


@dataclass
class EncoderState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "EncoderState":
        return cls(np.zeros(d), np.zeros(d))


@dataclass
class NodeEmbeddings:
    H: np.ndarray
    last_update: np.ndarray

    @classmethod
    def from_params(cls, params: nx.ParamVector) -> "NodeEmbeddings":
        H = params.array("H0").copy()
        return cls(H, np.zeros(H.shape[0]))


@dataclass
class HistoryCache:
    times: list = field(default_factory=list)
    nodes: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def append(self, t: float, node: int, h) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError("history timestamps must increase")
        self.times.append(float(t))
        self.nodes.append(int(node))
        self.snapshots.append(np.array(nx.value_of(h), copy=True))

    def __len__(self):
        return len(self.times)


def init_params(K: int, m: int, d: int, seed: int) -> nx.ParamVector:
    if min(K, m, d) < 1:
        raise ValueError("K, m and d must all be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    arrays = {}
    for name, shape in param_shapes(K, m, d).items():
        if name == "H0":
            arrays[name] = rng.uniform(-0.1, 0.1, size=shape)
        else:
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return nx.ParamVector.from_arrays(arrays)


def init_model(K: int, m: int, d: int, seed: int):
    params = init_params(K, m, d, seed)
    return params, NodeEmbeddings.from_params(params), EncoderState.zeros(d)


# ---------------------------------------------------------------- single steps


def encode_event(state: EncoderState, v: int, P, dropout_mask=None):
    """One LSTM step on ``[previous encoding; embedding of v]``."""
    d = len(nx.value_of(state.hidden))
    inp = nx.concat([state.hidden, P["emb"][v]])
    if dropout_mask is not None:
        inp = nx.mul(inp, dropout_mask)
    gates = nx.add(nx.matmul(P["lstm_W"], inp), P["lstm_b"])
    sig = nx.sigmoid(gates[: 3 * d])
    cand = nx.tanh(gates[3 * d:])
    cell = nx.add(nx.mul(sig[d: 2 * d], state.cell), nx.mul(sig[:d], cand))
    hidden = nx.mul(sig[2 * d:], nx.tanh(cell))
    return EncoderState(hidden, cell)


def neighbor_attention(h_u, Z, P):
    """Weights q over the rows of ``Z`` with score(h_u, h_z) = h_u^T Ws h_z."""
    return nx.softmax(nx.matmul(Z, nx.matmul(nx.transpose(P["Ws"]), h_u)))


def aggregate_neighbors(H, u: int, nbrs, P):
    """s_u = sum_z q_z h_z over the neighbourhood of ``u``; returns (s_u, q)."""
    rows = [H[z] for z in nbrs]
    Z = nx.stack(rows)
    q = neighbor_attention(H[u], Z, P)
    return nx.matmul(q, Z), q


def propagation_update(h_v, s_u, d_v, P):
    pre = nx.add(nx.matmul(P["W2"], h_v), nx.matmul(P["W3"], d_v))
    if s_u is not None:
        pre = nx.add(pre, nx.matmul(P["W1"], s_u))
    return nx.tanh(pre)


def propagate(emb: NodeEmbeddings, v: int, s_u, d_v, P, t: float = 0.0,
              cache: HistoryCache | None = None) -> NodeEmbeddings:
    """Replace row ``v`` of H; every other row is left untouched."""
    h_new = nx.value_of(propagation_update(emb.H[v], s_u, d_v, P))
    H = emb.H.copy()
    H[v] = h_new
    last = emb.last_update.copy()
    last[v] = t
    if cache is not None:
        cache.append(t, v, h_new)
    return NodeEmbeddings(H, last)


def base_intensity(h_i, P):
    return nx.sigmoid(nx.add(nx.matmul(P["Wmu"], h_i), P["bmu"]))


def history_scores(h_i, Hj, P):
    """omega_ji = V . tanh(Womega [h_i; h_j]) for every row h_j of ``Hj``."""
    d = len(nx.value_of(h_i))
    Wo = P["Womega"]
    a = nx.matmul(Wo[:, :d], h_i)
    b = nx.matmul(Hj, nx.transpose(Wo[:, d:]))
    return nx.matmul(nx.tanh(nx.add(b, a)), P["V"])


def history_attention(h_i, Hj, P):
    """beta over the cached snapshots (exponentiated softmax of the scores)."""
    return nx.softmax(history_scores(h_i, Hj, P))


def excitation_and_decay(h_j, h_i, beta_j, P):
    alpha = nx.mul(beta_j, h_j)
    delta = nx.sigmoid(nx.add(nx.matmul(P["Wdelta"], nx.concat([h_j, h_i])), P["bdelta"]))
    return alpha, delta


def latent_intensity(alphas, deltas, t_hist, mu, t: float, t_i: float | None = None):
    """Sum of exponentially decayed excitations plus the base vector."""
    if t_i is not None and t < t_i:
        raise ValueError(f"t={t} precedes regime start {t_i}")
    out = mu
    for a, dl, tj in zip(alphas, deltas, t_hist):
        out = nx.add(out, nx.mul(a, nx.exp(nx.mul(dl, -(t - tj)))))
    return out


def event_intensity(lam_h, P):
    """softplus(Wf lam_h + bf): strictly positive K-vector (or rows)."""
    return nx.softplus(nx.add(nx.matmul(lam_h, nx.transpose(P["Wf"])), P["bf"]))


def infectivity(H, Omega):
    """A = H Omega H^T, row = source."""
    return nx.matmul(nx.matmul(H, Omega), nx.transpose(H))


# ---------------------------------------------------------------- fused forward


def encode_sequence(P, nodes, nbrs, ablation: str = "none", dropout=None):
    """Run the encoder and graph propagation; returns the (n, d) stack of
    post-update embeddings h_i (the positional encodings under woGP)."""
    d = P.shapes["W1"][0]
    state = EncoderState(np.zeros(d), np.zeros(d))
    H0 = P["H0"]
    rows = {}

    def row(k):
        if k not in rows:
            rows[k] = H0[k]
        return rows[k]

    snaps = []
    for i, v in enumerate(nodes):
        v = int(v)
        state = encode_event(state, v, P, None if dropout is None else dropout[i])
        if ablation == "wogp":
            h = state.hidden
        else:
            s_u = None
            if i > 0:
                u = int(nodes[i - 1])
                Z = nx.stack([row(z) for z in nbrs[u]])
                s_u = nx.matmul(neighbor_attention(row(u), Z, P), Z)
            h = propagation_update(row(v), s_u, state.hidden, P)
            rows[v] = h
        snaps.append(h)
    return nx.stack(snaps)


def history_mask(n: int, ablation: str = "none") -> np.ndarray:
    """mask[i, j] = 1 when event j contributes to regime i."""
    if ablation == "woat":
        return np.eye(n, k=-1)
    return np.tril(np.ones((n, n)), k=-1)


def regime_intensities(P, Hs, times, ts, ablation: str = "none", rows=None):
    """Event intensities for regimes ``rows`` at times ``ts`` (len(rows), S).

    Returns an array/Var of shape (len(rows), S, K).
    """
    n, d = nx.value_of(Hs).shape
    rows = np.arange(n) if rows is None else np.asarray(rows)
    R, S = np.shape(ts)
    mask = history_mask(n, ablation)[rows]                      # (R, n)
    Hi = Hs[rows] if len(rows) != n else Hs
    if ablation == "woat":
        beta = mask
    else:
        Wo = P["Womega"]
        a = nx.matmul(Hi, nx.transpose(Wo[:, :d]))              # (R, d)
        b = nx.matmul(Hs, nx.transpose(Wo[:, d:]))              # (n, d)
        z = nx.tanh(nx.add(nx.reshape(a, (R, 1, d)), nx.reshape(b, (1, n, d))))
        scores = nx.sum(nx.mul(z, P["V"]), axis=-1)             # (R, n)
        beta = nx.softmax(scores, mask=mask)
    alpha = nx.mul(nx.reshape(beta, (R, n, 1)), nx.reshape(Hs, (1, n, d)))
    Wd = P["Wdelta"]
    dj = nx.matmul(Hs, nx.transpose(Wd[:, :d]))
    di = nx.add(nx.matmul(Hi, nx.transpose(Wd[:, d:])), P["bdelta"])
    delta = nx.sigmoid(nx.add(nx.reshape(di, (R, 1, d)), nx.reshape(dj, (1, n, d))))
    mu = nx.sigmoid(nx.add(nx.matmul(Hi, nx.transpose(P["Wmu"])), P["bmu"]))
    dt = (np.asarray(ts)[:, :, None] - np.asarray(times)[None, None, :]) * mask[:, None, :]
    decay = nx.exp(nx.mul(nx.reshape(delta, (R, 1, n, d)), -dt[..., None]))
    excite = nx.sum(nx.mul(nx.reshape(alpha, (R, 1, n, d)), decay), axis=2)
    lam_h = nx.add(excite, nx.reshape(mu, (R, 1, d)))
    lam = event_intensity(nx.reshape(lam_h, (R * S, d)), P)
    return nx.reshape(lam, (R, S, -1))


def regime_function(P, Hs, times, i: int, ablation: str = "none", chunk: int = 4096):
    """No-grad intensity callable for regime ``i`` (events 0..i known)."""
    Hs = np.asarray(Hs)
    times = np.asarray(times)
    d = Hs.shape[1]
    h_i = Hs[i]
    mu = nx.sigmoid(P.array("Wmu") @ h_i + P.array("bmu"))
    if i == 0:
        Hj, tj, beta = Hs[:0], times[:0], np.zeros(0)
    elif ablation == "woat":
        Hj, tj, beta = Hs[i - 1:i], times[i - 1:i], np.ones(1)
    else:
        Hj, tj = Hs[:i], times[:i]
        beta = history_attention(h_i, Hj, P)
    alpha = beta[:, None] * Hj
    Wd = P.array("Wdelta")
    delta = nx.sigmoid(Hj @ Wd[:, :d].T + Wd[:, d:] @ h_i + P.array("bdelta"))
    Wf, bf = P.array("Wf"), P.array("bf")

    def fn(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        out = np.empty((len(ts), len(bf)))
        for lo in range(0, len(ts), chunk):
            t = ts[lo:lo + chunk]
            dt = t[:, None] - tj[None, :]
            lam_h = np.einsum("jd,tjd->td", alpha, np.exp(-delta[None] * dt[:, :, None])) + mu
            out[lo:lo + chunk] = np.logaddexp(0.0, lam_h @ Wf.T + bf)
        return out
    return fn


# ---------------------------------------------------------------- model object


@dataclass
class GRPPModel:
    K: int
    m: int
    d: int
    params: nx.ParamVector
    E: np.ndarray | None = None
    tau: float = 0.0
    ablation: str = "none"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.E is None:
            self.E = np.zeros((self.K, self.K))
        self.E = np.asarray(self.E, dtype=np.float64)
        self.nbrs = neighborhoods(self.E, self.tau)

    @classmethod
    def create(cls, K, m, d, seed=0, E=None, tau=0.0, ablation="none") -> "GRPPModel":
        return cls(K, m, d, init_params(K, m, d, seed), E, tau, ablation, seed)

    def with_params(self, params: nx.ParamVector) -> "GRPPModel":
        return GRPPModel(self.K, self.m, self.d, params, self.E, self.tau,
                         self.ablation, self.seed, dict(self.meta))

    def embeddings(self, seq: EventSequence, P=None, dropout=None):
        P = self.params if P is None else P
        return encode_sequence(P, seq.nodes, self.nbrs, self.ablation, dropout)

    def intensity_functions(self, seq: EventSequence):
        Hs = self.embeddings(seq)
        times = seq.times
        return [regime_function(self.params, Hs, times, i, self.ablation)
                for i in range(len(seq))]

    def infectivity(self) -> np.ndarray:
        return infectivity(self.params.array("H0"), self.params.array("Omega"))

    # -- persistence

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "K": self.K, "m": self.m, "d": self.d, "seed": self.seed,
            "ablation": self.ablation, "tau": self.tau,
            "connection_matrix": self.E.tolist(),
            "shapes": {k: list(v) for k, v in self.params.shapes.items()},
            "values": np.asarray(self.params.values).tolist(),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, obj: dict) -> "GRPPModel":
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"checkpoint format_version {version!r} is not supported "
                             f"(expected {FORMAT_VERSION})")
        shapes = {k: tuple(v) for k, v in obj["shapes"].items()}
        expected = param_shapes(obj["K"], obj["m"], obj["d"])
        if shapes != expected:
            raise ValueError("checkpoint shape registry does not match K, m, d")
        params = nx.ParamVector(np.asarray(obj["values"], dtype=np.float64), shapes)
        return cls(obj["K"], obj["m"], obj["d"], params, np.asarray(obj["connection_matrix"]),
                   obj.get("tau", 0.0), obj.get("ablation", "none"), obj.get("seed", 0),
                   obj.get("meta", {}))

    @classmethod
    def load(cls, path) -> "GRPPModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))
