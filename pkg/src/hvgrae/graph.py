"""Dynamic-network data model, dataset I/O and adjacency normalization."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "IngestionError",
    "Snapshot",
    "DynNetwork",
    "check_adjacency",
    "check_network",
    "normalize_adjacency",
    "identity_attributes",
    "load_dataset",
    "save_dataset",
    "split_train_test",
    "subsample_edges",
    "edge_list",
    "half_up",
]


class IngestionError(ValueError):
    """Raised when a dataset directory is malformed."""


def half_up(x: float) -> int:
    # round-half-up; builtin round() is banker's rounding
    return int(np.floor(x + 0.5))


def check_adjacency(adjacency) -> np.ndarray:
    a = np.asarray(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    return a.astype(np.float64)


@dataclass(frozen=True)
class Snapshot:
    t: int
    adjacency: np.ndarray
    attributes: np.ndarray | None = None

    def __post_init__(self):
        a = check_adjacency(self.adjacency)
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        if self.attributes is not None:
            x = np.asarray(self.attributes, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] != a.shape[0]:
                raise ValueError(
                    f"attributes must have {a.shape[0]} rows, got shape {x.shape}"
                )
            if not np.isfinite(x).all():
                raise ValueError("attributes must be finite")
            x.setflags(write=False)
            object.__setattr__(self, "attributes", x)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def edges(self, directed: bool = True) -> np.ndarray:
        return edge_list(self.adjacency, directed)


@dataclass(frozen=True)
class DynNetwork:
    """A time-ordered stream of snapshots over a fixed node universe.

    ``attributed`` is False when the attribute matrices are the synthetic
    identity fallback rather than observed data.
    """

    snapshots: tuple[Snapshot, ...]
    node_count: int
    attr_dim: int
    directed: bool = False
    attributed: bool = True
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "snapshots", tuple(self.snapshots))
        check_network(self)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self):
        return iter(self.snapshots)

    def __getitem__(self, item):
        return self.snapshots[item]

    @property
    def n_timestamps(self) -> int:
        return len(self.snapshots)


def check_network(net: DynNetwork) -> DynNetwork:
    """Validate the shared-shape and contiguity invariants of a network."""
    if not isinstance(net, DynNetwork):
        raise TypeError(f"expected DynNetwork, got {type(net).__name__}")
    if len(net.snapshots) == 0:
        raise ValueError("network has no snapshots")
    t0 = net.snapshots[0].t
    for k, snap in enumerate(net.snapshots):
        if snap.t != t0 + k:
            raise ValueError(f"snapshot indices must be contiguous; got {snap.t} at position {k}")
        if snap.n_nodes != net.node_count:
            raise ValueError(f"snapshot {snap.t} has {snap.n_nodes} nodes, expected {net.node_count}")
        if snap.attributes is None:
            raise ValueError(f"snapshot {snap.t} has no attributes")
        if snap.attributes.shape[1] != net.attr_dim:
            raise ValueError(
                f"snapshot {snap.t} has attribute dim {snap.attributes.shape[1]}, expected {net.attr_dim}"
            )
        if not net.directed and not np.array_equal(snap.adjacency, snap.adjacency.T):
            raise ValueError(f"snapshot {snap.t} is not symmetric in an undirected network")
    return net


def edge_list(adjacency: np.ndarray, directed: bool = True) -> np.ndarray:
    """Return existing edges as an (E, 2) int array; upper triangle only if undirected."""
    a = np.asarray(adjacency)
    if not directed:
        a = np.triu(a)
    src, dst = np.nonzero(a)
    return np.stack([src, dst], axis=1).astype(np.int64)


def normalize_adjacency(adjacency) -> np.ndarray:
    """Symmetric GCN normalization D^-1/2 (A + I) D^-1/2 with row-sum degrees."""
    a = check_adjacency(adjacency)
    a_tilde = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return d_inv_sqrt[:, None] * a_tilde * d_inv_sqrt[None, :]


def identity_attributes(n: int) -> np.ndarray:
    if int(n) != n or n <= 0:
        raise ValueError(f"node count must be a positive integer, got {n}")
    return np.eye(int(n))


_META_KEYS = {"N", "T", "D", "directed"}


def _read_meta(path: str) -> dict:
    meta_path = os.path.join(path, "meta.txt")
    if not os.path.isfile(meta_path):
        raise IngestionError(f"{meta_path}: missing meta file")
    meta = {}
    with open(meta_path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in _META_KEYS:
                raise IngestionError(f"{meta_path}:{lineno}: expected one of N=, T=, D=, directed=")
            try:
                meta[key] = int(value.strip())
            except ValueError:
                raise IngestionError(f"{meta_path}:{lineno}: {key} must be an integer") from None
    for key in ("N", "T"):
        if key not in meta:
            raise IngestionError(f"{meta_path}: missing {key}=")
    meta.setdefault("D", 0)
    meta.setdefault("directed", 0)
    if meta["N"] <= 0 or meta["T"] <= 0 or meta["D"] < 0:
        raise IngestionError(f"{meta_path}: N and T must be positive and D non-negative")
    if meta["directed"] not in (0, 1):
        raise IngestionError(f"{meta_path}: directed must be 0 or 1")
    return meta


def _read_edges(path: str, n: int, directed: bool) -> np.ndarray:
    a = np.zeros((n, n))
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise IngestionError(f"{path}:{lineno}: expected 'src dst', got {line!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: node ids must be integers") from None
            if not (0 <= i < n and 0 <= j < n):
                raise IngestionError(f"{path}:{lineno}: node id out of range [0, {n}) in {line!r}")
            a[i, j] = 1.0
            if not directed:
                a[j, i] = 1.0
    return a


def _read_attrs(path: str, n: int, d: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: non-numeric attribute value") from None
            if len(row) != d:
                raise IngestionError(f"{path}:{lineno}: expected {d} columns, got {len(row)}")
            rows.append(row)
    if len(rows) != n:
        raise IngestionError(f"{path}: expected {n} attribute rows, got {len(rows)}")
    x = np.array(rows, dtype=np.float64).reshape(n, d)
    if not np.isfinite(x).all():
        raise IngestionError(f"{path}: attributes must be finite")
    return x


def load_dataset(path: str) -> DynNetwork:
    """Read a dataset directory (``meta.txt`` plus ``snapshot_<t>.edges/.attrs``)."""
    meta = _read_meta(path)
    n, n_t, d, directed = meta["N"], meta["T"], meta["D"], bool(meta["directed"])

    pattern = re.compile(r"snapshot_(\d+)\.edges$")
    found = sorted(int(m.group(1)) for f in os.listdir(path) if (m := pattern.match(f)))
    expected = list(range(1, n_t + 1))
    if found != expected:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        raise IngestionError(
            f"{path}: snapshot index gap; missing {missing[:5]}, unexpected {extra[:5]}"
        )

    attributed = d > 0
    snapshots = []
    for t in expected:
        a = _read_edges(os.path.join(path, f"snapshot_{t}.edges"), n, directed)
        attr_path = os.path.join(path, f"snapshot_{t}.attrs")
        if attributed:
            if not os.path.isfile(attr_path):
                raise IngestionError(f"{attr_path}: missing attribute file (meta D={d})")
            x = _read_attrs(attr_path, n, d)
        else:
            x = identity_attributes(n)
        snapshots.append(Snapshot(t, a, x))

    return DynNetwork(
        tuple(snapshots),
        node_count=n,
        attr_dim=d if attributed else n,
        directed=directed,
        attributed=attributed,
    )


def save_dataset(net: DynNetwork, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    d = net.attr_dim if net.attributed else 0
    with open(os.path.join(path, "meta.txt"), "w") as fh:
        fh.write(f"N={net.node_count}\nT={len(net)}\nD={d}\ndirected={int(net.directed)}\n")
    for k, snap in enumerate(net.snapshots, 1):
        with open(os.path.join(path, f"snapshot_{k}.edges"), "w") as fh:
            for i, j in snap.edges(net.directed):
                fh.write(f"{i} {j}\n")
        if net.attributed:
            np.savetxt(os.path.join(path, f"snapshot_{k}.attrs"), snap.attributes, delimiter=",", fmt="%.17g")


def _subsample(snap: Snapshot, ratio: float, directed: bool, rng: np.random.Generator) -> Snapshot:
    edges = snap.edges(directed)
    n_edges = len(edges)
    if n_edges == 0 or ratio >= 1.0:
        return snap
    keep = max(1, half_up(ratio * n_edges))
    chosen = edges[np.sort(rng.choice(n_edges, size=keep, replace=False))]
    a = np.zeros_like(snap.adjacency)
    a[chosen[:, 0], chosen[:, 1]] = 1.0
    if not directed:
        a[chosen[:, 1], chosen[:, 0]] = 1.0
    return replace(snap, adjacency=a)


def subsample_edges(net: DynNetwork, train_edge_ratio: float = 1.0, seed: int = 0) -> DynNetwork:
    """Keep max(1, half_up(ratio * |E|)) uniformly chosen edges per snapshot."""
    check_network(net)
    if not 0.0 < train_edge_ratio <= 1.0:
        raise ValueError(f"train_edge_ratio must be in (0, 1], got {train_edge_ratio}")
    rng = np.random.default_rng(seed)
    return replace(net, snapshots=tuple(_subsample(s, train_edge_ratio, net.directed, rng) for s in net))


def split_train_test(
    net: DynNetwork, test_len: int, train_edge_ratio: float = 1.0, seed: int = 0
) -> tuple[DynNetwork, DynNetwork]:
    """Hold out the last ``test_len`` snapshots and edge-subsample the rest."""
    check_network(net)
    if not 1 <= test_len < len(net):
        raise ValueError(f"test_len must be in [1, {len(net)}), got {test_len}")
    if not 0.0 < train_edge_ratio <= 1.0:
        raise ValueError(f"train_edge_ratio must be in (0, 1], got {train_edge_ratio}")
    rng = np.random.default_rng(seed)
    n_train = len(net) - test_len
    train = [_subsample(s, train_edge_ratio, net.directed, rng) for s in net.snapshots[:n_train]]
    test = list(net.snapshots[n_train:])
    return replace(net, snapshots=tuple(train)), replace(net, snapshots=tuple(test))
