"""Synthetic multi-trip regression data and federated partitions.

Each trip draws inputs from its own Gaussian cluster while all trips share one
bounded ground-truth function ``scale * sin(w . x)``, giving covariate-shift
non-i.i.d. clients when trips are assigned one per client.

Dataset file format (text, one sample per line)::

    # fedconf-dataset 1
    # input_dim=<d> n_samples=<n>
    sample_id,trip_id,split,x0,...,x<d-1>,target

``split`` is ``train``, ``test`` or ``public``; public rows carry the literal
target ``NA``. Floats are written with ``repr`` so they load back bit-exactly.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedconf.errors import ConfigError, FormatError, ParseError
from fedconf.tensor import Matrix, SeededRng

SPLITS = ("train", "test", "public")
DEFAULT_RATIOS = (0.7, 0.2, 0.1)
_MAGIC = "# fedconf-dataset 1"


@dataclass
class TripSpec:
    trip_id: int
    input_dim: int
    cluster_mean: np.ndarray
    cluster_stddev: float = 0.5
    n_samples: int = 2000
    noise_stddev: float = 0.05


@dataclass
class TargetFunction:
    projection: np.ndarray
    scale: float = 1.0
    kind: str = "sin_proj"

    def __call__(self, x: Matrix) -> Matrix:
        return self.scale * np.sin(x @ self.projection.reshape(-1, 1))


def default_trip_specs(n_trips: int = 5, input_dim: int = 8, n_samples: int = 2000,
                       cluster_stddev: float = 0.5, mean_scale: float = 2.0,
                       noise_stddev: float = 0.05) -> list[TripSpec]:
    """Trip k is centred at ``mean_scale * e_k``."""
    if n_trips > input_dim:
        raise ConfigError(f"{n_trips} trips need input_dim >= {n_trips} for unit-vector centres")
    specs = []
    for k in range(n_trips):
        mean = np.zeros(input_dim)
        mean[k] = mean_scale
        specs.append(TripSpec(k, input_dim, mean, cluster_stddev, n_samples, noise_stddev))
    check_separation(specs)
    return specs


def default_target(input_dim: int = 8, frequency: float = 3.0, scale: float = 1.0,
                   projection: str = "uniform", rng: SeededRng | None = None) -> TargetFunction:
    """``scale * sin(w . x)`` with ``|w| = frequency``.

    ``uniform`` puts equal weight on every input axis, so trips centred on
    different unit vectors see the same target distribution and differ only in
    their inputs. ``random`` draws the direction from ``rng`` (seed 0 if omitted).
    """
    if projection == "uniform":
        w = np.ones(input_dim)
    elif projection == "random":
        rng = rng or SeededRng(0).split("target")
        w = rng.normal(input_dim, 1).ravel()
    else:
        raise ConfigError(f"unknown projection {projection!r}")
    return TargetFunction(frequency * w / np.linalg.norm(w), scale)


def check_separation(specs: Sequence[TripSpec]) -> None:
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            gap = float(np.linalg.norm(specs[i].cluster_mean - specs[j].cluster_mean))
            need = 4.0 * max(specs[i].cluster_stddev, specs[j].cluster_stddev)
            if gap < need:
                raise ConfigError(
                    f"trips {specs[i].trip_id} and {specs[j].trip_id} are {gap:.3f} apart, need >= {need:.3f}"
                )


def generate_trip(spec: TripSpec, f: TargetFunction, rng: SeededRng) -> tuple[Matrix, Matrix]:
    if spec.n_samples < 10:
        raise ConfigError(f"trip {spec.trip_id}: need at least 10 samples")
    x = rng.split("inputs").normal(spec.n_samples, spec.input_dim, 0.0, spec.cluster_stddev)
    x = x + spec.cluster_mean.reshape(1, -1)
    y = f(x) + rng.split("noise").normal(spec.n_samples, 1, 0.0, spec.noise_stddev)
    return x, y


def split_counts(n: int, ratios: Sequence[float] = DEFAULT_RATIOS) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; remainder ties go to the earlier split."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios {tuple(ratios)} do not sum to 1")
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass
class Dataset:
    """All samples of all trips with their split labels. Public targets are NaN."""

    ids: np.ndarray
    trip_ids: np.ndarray
    splits: np.ndarray
    inputs: Matrix
    targets: np.ndarray

    def __len__(self) -> int:
        return self.ids.size

    @property
    def trips(self) -> list[int]:
        return sorted(set(int(t) for t in self.trip_ids))

    def select(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self.ids[mask], self.trip_ids[mask], self.splits[mask], self.inputs[mask], self.targets[mask])

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.trip_ids, other.trip_ids)
            and np.array_equal(self.splits, other.splits)
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.targets, other.targets, equal_nan=True)
        )


def build_dataset(trips: Sequence[tuple[Matrix, Matrix]], rng: SeededRng,
                  ratios: Sequence[float] = DEFAULT_RATIOS) -> Dataset:
    """Assign each trip's samples to train/test/public; ids are global and unique."""
    ids, trip_ids, splits, xs, ys = [], [], [], [], []
    offset = 0
    for t, (x, y) in enumerate(trips):
        n = x.shape[0]
        counts = split_counts(n, ratios)
        label = np.empty(n, dtype=object)
        perm = rng.split(f"split-trip{t}").permutation(n)
        start = 0
        for name, c in zip(SPLITS, counts):
            label[perm[start:start + c]] = name
            start += c
        target = y.ravel().copy()
        target[label == "public"] = np.nan
        ids.append(np.arange(offset, offset + n))
        trip_ids.append(np.full(n, t))
        splits.append(label.astype(str))
        xs.append(x)
        ys.append(target)
        offset += n
    return Dataset(np.concatenate(ids), np.concatenate(trip_ids), np.concatenate(splits),
                   np.vstack(xs), np.concatenate(ys))


def generate_dataset(specs: Sequence[TripSpec], f: TargetFunction, rng: SeededRng,
                     ratios: Sequence[float] = DEFAULT_RATIOS) -> Dataset:
    check_separation(specs)
    trips = [generate_trip(s, f, rng.split(f"trip{s.trip_id}")) for s in specs]
    return build_dataset(trips, rng.split("splits"), ratios)


@dataclass(frozen=True)
class PartitionPlan:
    mode: str = "non_iid"
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def __post_init__(self):
        if self.mode not in ("iid", "non_iid"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios {self.ratios} do not sum to 1")


@dataclass
class FederatedData:
    """Private client data plus the shared pools. The public pool has no targets."""

    clients: list[tuple[Matrix, Matrix]]
    public: Matrix
    test_inputs: Matrix
    test_targets: Matrix
    client_ids: list[np.ndarray] = field(default_factory=list)  # sample ids per client
    client_trips: list[np.ndarray] = field(default_factory=list)


def partition(data: Dataset | Sequence[tuple[Matrix, Matrix]], plan: PartitionPlan, n_clients: int,
              rng: SeededRng) -> FederatedData:
    """Deal training samples to clients.

    ``non_iid``: client k gets trip k's train split. ``iid``: all train samples
    are pooled, shuffled and dealt in near-equal shares. Public and test pools
    are the union of the per-trip public and test splits.
    """
    if not isinstance(data, Dataset):
        data = build_dataset(list(data), rng.split("splits"), plan.ratios)
    if n_clients < 1:
        raise ConfigError("need at least one client")
    train = data.select(data.splits == "train")
    trips = data.trips
    if plan.mode == "non_iid":
        if len(trips) < n_clients:
            raise ConfigError(f"non_iid mode needs one trip per client: {len(trips)} trips < {n_clients} clients")
        shares = [np.flatnonzero(train.trip_ids == t) for t in trips[:n_clients]]
    else:
        perm = rng.split("iid-deal").permutation(len(train))
        shares = [np.sort(s) for s in np.array_split(perm, n_clients)]
    clients, ids, client_trips = [], [], []
    for k, idx in enumerate(shares):
        if idx.size == 0:
            raise ConfigError(f"client {k} received no training samples")
        clients.append((train.inputs[idx], train.targets[idx].reshape(-1, 1)))
        ids.append(train.ids[idx])
        client_trips.append(train.trip_ids[idx])
    public = data.inputs[data.splits == "public"]
    test = data.select(data.splits == "test")
    return FederatedData(clients, public, test.inputs, test.targets.reshape(-1, 1), ids, client_trips)


def _fmt(v: float) -> str:
    return "NA" if math.isnan(v) else repr(float(v))


def dump_dataset(data: Dataset) -> str:
    d = data.inputs.shape[1]
    buf = io.StringIO()
    buf.write(f"{_MAGIC}\n# input_dim={d} n_samples={len(data)}\n")
    buf.write(",".join(["sample_id", "trip_id", "split"] + [f"x{i}" for i in range(d)] + ["target"]) + "\n")
    for i in range(len(data)):
        fields = [str(int(data.ids[i])), str(int(data.trip_ids[i])), str(data.splits[i])]
        fields += [repr(float(v)) for v in data.inputs[i]]
        fields.append(_fmt(data.targets[i]))
        buf.write(",".join(fields) + "\n")
    return buf.getvalue()


def save_dataset(data: Dataset, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dump_dataset(data), encoding="ascii")
    tmp.replace(path)


def load_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="ascii") as fh:
        text = fh.read()
    lines = text.split("\n")
    complete = text.endswith("\n")
    if complete:
        lines.pop()
    if len(lines) < 3 or lines[0] != _MAGIC or not lines[1].startswith("# "):
        raise FormatError(f"{path}: missing fedconf-dataset header")
    try:
        meta = dict(kv.split("=") for kv in lines[1][2:].split())
        d, n = int(meta["input_dim"]), int(meta["n_samples"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad header line {lines[1]!r}") from exc
    ids = np.empty(n, dtype=np.int64)
    trips = np.empty(n, dtype=np.int64)
    splits = np.empty(n, dtype=object)
    x = np.empty((n, d))
    y = np.empty(n)
    body = lines[3:]
    if not complete and len(lines) > 3:
        raise ParseError(f"unterminated final row (last complete line {len(lines) - 1})", len(lines))
    if len(body) > n:
        raise ParseError(f"{len(body) - n} rows beyond the declared {n}", 4 + n)
    for i, line in enumerate(body):
        lineno = i + 4
        parts = line.split(",")
        try:
            if len(parts) != d + 4:
                raise ValueError(f"expected {d + 4} fields, got {len(parts)}")
            if parts[2] not in SPLITS:
                raise ValueError(f"unknown split {parts[2]!r}")
            ids[i], trips[i], splits[i] = int(parts[0]), int(parts[1]), parts[2]
            x[i] = [float(v) for v in parts[3:3 + d]]
            if parts[-1] == "NA":
                if parts[2] != "public":
                    raise ValueError("only public rows may have an NA target")
                y[i] = np.nan
            else:
                y[i] = float(parts[-1])
        except ValueError as exc:
            raise ParseError(f"{exc} (last complete line {lineno - 1})", lineno) from exc
    if len(body) < n:
        raise ParseError(f"truncated: {n - len(body)} of {n} rows missing (last complete line {len(body) + 3})",
                         len(body) + 3)
    if np.unique(ids).size != n:
        raise FormatError(f"{path}: duplicate sample ids")
    return Dataset(ids, trips, splits.astype(str), x, y)
