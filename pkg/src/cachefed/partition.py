"""Client data partitioning: iid, Dirichlet-skewed, and disjoint-class.

All three schemes split sample *indices*; features never move. The iid
scheme deals each class round-robin so per-client per-class counts differ
by at most one, with the remainder going to the highest-index clients
(16 samples over 10 clients: the first four clients get 1, the last six
get 2). Dirichlet draws per-class client proportions from Dir(alpha) and
assigns multinomially; at small alpha this leaves some shards empty,
which is allowed — empty clients keep their id but are skipped by
sampling. Pathological gives each client a contiguous group of classes,
as equal as possible, remainder classes to the lowest-index clients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from .errors import InfeasibleError
from .features import FeatureDataset
from .rng import derive_rng

SCHEMES = ("iid", "dirichlet", "pathological")

# CLI aliases used in flags and report tags.
SCHEME_ALIASES = {"iid": "iid", "dir": "dirichlet", "pat": "pathological"}
SCHEME_TAGS = {"iid": "iid", "dirichlet": "dir", "pathological": "pat"}


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str
    num_clients: int
    dirichlet_alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        scheme = SCHEME_ALIASES.get(self.scheme, self.scheme)
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        object.__setattr__(self, "scheme", scheme)
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be > 0")


@dataclass(frozen=True, eq=False)
class Partition:
    """Per-client sample indices; shards are disjoint and cover the dataset."""

    shards: tuple[np.ndarray, ...]

    def __post_init__(self):
        shards = tuple(np.asarray(s, dtype=np.int64) for s in self.shards)
        object.__setattr__(self, "shards", shards)

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    @property
    def n_k(self) -> np.ndarray:
        return np.array([len(s) for s in self.shards], dtype=np.int64)

    @property
    def n(self) -> int:
        return int(self.n_k.sum())

    def nonempty_clients(self) -> list[int]:
        return [k for k, shard in enumerate(self.shards) if len(shard) > 0]


def _per_class_counts(total: int, num_clients: int) -> np.ndarray:
    # Remainder goes to the highest-index clients, matching the reference
    # iid example (first clients end up with the smaller count).
    base, rem = divmod(total, num_clients)
    counts = np.full(num_clients, base, dtype=np.int64)
    if rem:
        counts[num_clients - rem :] += 1
    return counts


def partition(dataset: FeatureDataset, spec: PartitionSpec) -> Partition:
    """Assign every dataset index to exactly one client shard."""
    if len(dataset) == 0:
        raise ValueError("cannot partition an empty dataset")
    labels = dataset.labels
    num_classes = dataset.num_classes
    rng = derive_rng(spec.seed, "partition", spec.scheme)
    shards: list[list[int]] = [[] for _ in range(spec.num_clients)]

    if spec.scheme == "pathological":
        if spec.num_clients > num_classes:
            raise InfeasibleError(
                f"pathological partition needs num_clients <= num_classes, "
                f"got {spec.num_clients} clients for {num_classes} classes"
            )
        base, rem = divmod(num_classes, spec.num_clients)
        start = 0
        for k in range(spec.num_clients):
            size = base + (1 if k < rem else 0)
            group = range(start, start + size)
            start += size
            mask = np.isin(labels, list(group))
            shards[k].extend(np.flatnonzero(mask).tolist())
    else:
        for c in range(num_classes):
            idx = np.flatnonzero(labels == c)
            if idx.size == 0:
                continue
            idx = idx[rng.permutation(idx.size)]
            if spec.scheme == "iid":
                counts = _per_class_counts(idx.size, spec.num_clients)
            else:  # dirichlet
                proportions = rng.dirichlet(
                    np.full(spec.num_clients, spec.dirichlet_alpha)
                )
                counts = rng.multinomial(idx.size, proportions)
            stop = np.cumsum(counts)
            start = stop - counts
            for k in range(spec.num_clients):
                shards[k].extend(idx[start[k] : stop[k]].tolist())

    return Partition(tuple(np.sort(np.array(s, dtype=np.int64)) for s in shards))


@dataclass(frozen=True, eq=False)
class HeterogeneityReport:
    """Per-client class histograms and earth-mover distance to the global mix."""

    histograms: np.ndarray  # (num_clients, num_classes) int64
    emd: np.ndarray  # (num_clients,) float64, 0.0 for empty clients

    @property
    def max_emd(self) -> float:
        return float(self.emd.max())

    def to_dict(self) -> dict:
        return {
            "histograms": self.histograms.tolist(),
            "emd": self.emd.tolist(),
            "max_emd": self.max_emd,
        }


def heterogeneity_report(p: Partition, dataset: FeatureDataset) -> HeterogeneityReport:
    """Quantify how far each shard's class mix sits from the global one.

    Distance is the 1-D earth-mover distance between the shard's class
    distribution and the global class distribution on the class-index
    line. Empty shards report 0.
    """
    num_classes = dataset.num_classes
    classes = np.arange(num_classes, dtype=np.float64)
    global_hist = dataset.class_counts().astype(np.float64)
    hists = np.zeros((p.num_clients, num_classes), dtype=np.int64)
    emd = np.zeros(p.num_clients, dtype=np.float64)
    for k, shard in enumerate(p.shards):
        if len(shard) == 0:
            continue
        hists[k] = np.bincount(dataset.labels[shard], minlength=num_classes)
        emd[k] = wasserstein_distance(
            classes, classes, u_weights=hists[k].astype(np.float64), v_weights=global_hist
        )
    return HeterogeneityReport(histograms=hists, emd=emd)


def write_partition(path, p: Partition) -> None:
    """Write `client_id: idx,idx,...` lines plus a JSON sidecar of n_k."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, shard in enumerate(p.shards):
            fh.write(f"{k}: {','.join(str(i) for i in shard.tolist())}\n")
    with open(f"{path}.nk.json", "w", encoding="utf-8") as fh:
        json.dump({"n_k": p.n_k.tolist(), "n": p.n}, fh, indent=2)
        fh.write("\n")


def read_partition(path) -> Partition:
    shards = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            _, _, rest = line.partition(":")
            rest = rest.strip()
            shards.append(
                np.array([int(t) for t in rest.split(",")] if rest else [], dtype=np.int64)
            )
    return Partition(tuple(shards))
