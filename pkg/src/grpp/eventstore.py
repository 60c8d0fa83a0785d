"""Event sequences, JSONL ingestion, 3:1:1 splitting and the empirical
connection matrix."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SequenceFormatError(ValueError):
    """Malformed or invariant-violating sequence data."""


@dataclass(frozen=True)
class Event:
    t: float
    node: int


@dataclass(frozen=True)
class EventSequence:
    events: tuple
    horizon: float
    seq_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise SequenceFormatError(f"horizon must be finite and > 0, got {self.horizon}")
        prev = -math.inf
        for i, e in enumerate(self.events):
            if not (math.isfinite(e.t) and e.t >= 0):
                raise SequenceFormatError(f"event {i}: timestamp {e.t} must be finite and >= 0")
            if e.t <= prev:
                raise SequenceFormatError(f"event {i}: non-increasing timestamps ({prev} -> {e.t})")
            if e.t > self.horizon:
                raise SequenceFormatError(f"event {i}: timestamp {e.t} beyond horizon {self.horizon}")
            prev = e.t

    def __len__(self):
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events], dtype=np.float64)

    @property
    def nodes(self) -> np.ndarray:
        return np.array([e.node for e in self.events], dtype=np.int64)

    @classmethod
    def from_arrays(cls, times, nodes, horizon, seq_id=None) -> "EventSequence":
        return cls(tuple(Event(float(t), int(k)) for t, k in zip(times, nodes)),
                   float(horizon), seq_id)

    def prefix(self, n: int) -> "EventSequence":
        """First ``n`` events; the horizon is kept."""
        return EventSequence(self.events[:n], self.horizon, self.seq_id)

    def to_json(self) -> dict:
        out = {"events": [{"t": e.t, "node": e.node} for e in self.events],
               "horizon": self.horizon}
        if self.seq_id is not None:
            out["seq_id"] = self.seq_id
        return out


@dataclass(frozen=True)
class Dataset:
    K: int
    sequences: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        for s_idx, seq in enumerate(self.sequences):
            for e_idx, e in enumerate(seq.events):
                if not 0 <= e.node < self.K:
                    raise SequenceFormatError(
                        f"sequence {s_idx}, event {e_idx}: node {e.node} outside [0, {self.K})")

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)


def parse_sequence(obj: dict) -> EventSequence:
    try:
        events = [Event(float(e["t"]), int(e["node"])) for e in obj["events"]]
        horizon = float(obj["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SequenceFormatError(f"bad record: {exc!r}") from exc
    seq_id = obj.get("seq_id")
    return EventSequence(tuple(events), horizon, None if seq_id is None else str(seq_id))


def load_sequences(path, K: int) -> Dataset:
    """Read a JSONL file (one sequence per line) into a validated Dataset."""
    seqs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SequenceFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                seq = parse_sequence(obj)
                for e_idx, e in enumerate(seq.events):
                    if not 0 <= e.node < K:
                        raise SequenceFormatError(
                            f"event {e_idx}: node {e.node} outside [0, {K})")
            except SequenceFormatError as exc:
                raise SequenceFormatError(
                    f"line {lineno} (sequence {len(seqs)}): {exc}") from exc
            seqs.append(seq)
    return Dataset(K, tuple(seqs))


def save_sequences(path, data: Dataset | list) -> None:
    seqs = data.sequences if isinstance(data, Dataset) else data
    with open(path, "w") as fh:
        for seq in seqs:
            fh.write(json.dumps(seq.to_json(), separators=(",", ":")) + "\n")


def infer_num_nodes(path) -> int:
    """Largest node id + 1 in a JSONL file (used when K is not recorded)."""
    top = -1
    with open(path) as fh:
        for line in fh:
            if line.strip():
                for e in json.loads(line)["events"]:
                    top = max(top, int(e["node"]))
    return top + 1


def split(d: Dataset, ratio=(3, 1, 1), seed: int = 0):
    """Seeded shuffle then cut into train/valid/test.

    With the default ratio the sizes are floor(3n/5), floor(n/5) and the
    remainder.
    """
    n = len(d)
    total = sum(ratio)
    if n < total:
        raise ValueError(f"need at least {total} sequences to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = (ratio[0] * n) // total
    n_valid = (ratio[1] * n) // total
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple(Dataset(d.K, tuple(d.sequences[i] for i in part)) for part in parts)


def transition_counts(data: Dataset) -> np.ndarray:
    counts = np.zeros((data.K, data.K), dtype=np.int64)
    for seq in data:
        nodes = seq.nodes
        if len(nodes) > 1:
            np.add.at(counts, (nodes[:-1], nodes[1:]), 1)
    return counts


def estimate_connection_matrix(train: Dataset) -> np.ndarray:
    """E[i, j] = N_ij / max N, N_ij = consecutive i -> j transitions."""
    if len(train) == 0:
        raise ValueError("empty training set")
    counts = transition_counts(train)
    top = counts.max()
    if top == 0:
        return np.zeros(counts.shape)
    return counts / top


def neighborhoods(E: np.ndarray, tau: float = 0.0) -> list:
    """In-neighbours of each node: {z : E[z, u] > tau} plus u itself."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    E = np.asarray(E)
    out = []
    for u in range(E.shape[0]):
        nbrs = set(np.flatnonzero(E[:, u] > tau).tolist())
        nbrs.add(u)
        out.append(sorted(nbrs))
    return out


def write_matrix_csv(path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in M:
            w.writerow([f"{x:.6g}" for x in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(x) for x in row] for row in csv.reader(fh) if row])
