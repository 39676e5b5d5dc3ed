"""Experiment drivers behind the CLI: dataset generation, divergence validation,
method comparison and learning-curve extraction."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedconf.config import ExperimentConfig
from fedconf.confidence import EntropyMode, entropy_rows
from fedconf.datagen import (
    Dataset,
    FederatedData,
    PartitionPlan,
    TargetFunction,
    TripSpec,
    default_target,
    default_trip_specs,
    generate_dataset,
    partition,
)
from fedconf.errors import ConfigError, ParseError
from fedconf.federation import ClientState, FedConfig, RoundMetrics, client_update, run_federation
from fedconf.nn import MlpModel, forward, init_model, mlp_specs, rmse_loss
from fedconf.tensor import SeededRng

log = logging.getLogger(__name__)

METRICS_HEADER = ("round", "method", "seed", "test_rmse", "wall_ms")
CURVE_HEADER = ("round", "mean_test_rmse", "min_test_rmse", "max_test_rmse")


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


# ---------------------------------------------------------------- dataset


def trip_specs(cfg: ExperimentConfig) -> list[TripSpec]:
    return default_trip_specs(cfg.n_trips, cfg.input_dim, cfg.n_samples, cfg.cluster_stddev,
                              cfg.mean_scale, cfg.noise_stddev)


def target_function(cfg: ExperimentConfig) -> TargetFunction:
    rng = SeededRng(cfg.seed).split("target")
    return default_target(cfg.input_dim, cfg.target_frequency, cfg.target_scale, cfg.target_projection, rng)


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    return generate_dataset(trip_specs(cfg), target_function(cfg), SeededRng(cfg.seed).split("data"))


def manifest(cfg: ExperimentConfig, data: Dataset, data_file: str) -> dict:
    f = target_function(cfg)
    counts = {s: int(np.sum(data.splits == s)) for s in ("train", "test", "public")}
    return {
        "dataset_file": data_file,
        "seed": cfg.seed,
        "n_samples": len(data),
        "input_dim": cfg.input_dim,
        "split_counts": counts,
        "target": {"kind": f.kind, "scale": f.scale, "projection": [float(v) for v in f.projection]},
        "trips": [
            {
                "trip_id": s.trip_id,
                "cluster_mean": [float(v) for v in s.cluster_mean],
                "cluster_stddev": s.cluster_stddev,
                "n_samples": s.n_samples,
                "noise_stddev": s.noise_stddev,
            }
            for s in trip_specs(cfg)
        ],
    }


# ---------------------------------------------------------------- divergence validation


@dataclass
class DivergenceResult:
    """Loss matrix plus mean-entropy matrices under both entropy modes.

    Entries are indexed [model i, public j]. An entropy cell is nan when every
    row of Public_j gave Model_i an infinite (degenerate) entropy.
    """

    loss: np.ndarray
    entropies: dict[str, np.ndarray]  # by mode name
    excluded: dict[str, np.ndarray]  # infinite-entropy rows per cell, by mode name
    trips: list[int]
    scored_mode: str = "normalized"

    @property
    def entropy(self) -> np.ndarray:
        return self.entropies[self.scored_mode]

    @property
    def diagonal_minimal(self) -> list[bool]:
        return [int(np.argmin(self.loss[:, j])) == j for j in range(self.loss.shape[1])]

    def entropy_argmin(self, mode: str | None = None) -> list[int | None]:
        ent = self.entropies[mode or self.scored_mode]
        return [int(np.nanargmin(ent[:, j])) if np.any(np.isfinite(ent[:, j])) else None
                for j in range(ent.shape[1])]

    def matches(self, mode: str | None = None) -> list[bool]:
        loss_argmin = [int(np.argmin(self.loss[:, j])) for j in range(self.loss.shape[1])]
        return [e == l for e, l in zip(self.entropy_argmin(mode), loss_argmin)]

    @property
    def entropy_matches_loss(self) -> list[bool]:
        return self.matches()


def divergence_splits(data: Dataset, public_fraction: float,
                      rng: SeededRng) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Per-trip private/public split of the labeled rows.

    The dataset's own public rows carry no targets, so the split is taken over
    each trip's train and test rows. Returns (x_priv, y_priv, x_pub, y_pub) per trip.
    """
    out = []
    for t in data.trips:
        idx = np.flatnonzero((data.trip_ids == t) & (data.splits != "public"))
        n_pub = int(round(public_fraction * idx.size))
        if n_pub < 1 or n_pub >= idx.size:
            raise ConfigError(f"trip {t}: {idx.size} labeled rows cannot be split {public_fraction}")
        perm = idx[rng.split(f"trip{t}").permutation(idx.size)]
        pub, priv = np.sort(perm[:n_pub]), np.sort(perm[n_pub:])
        y = data.targets.reshape(-1, 1)
        out.append((data.inputs[priv], y[priv], data.inputs[pub], y[pub]))
    return out


def train_trip_models(splits, cfg: ExperimentConfig, rng: SeededRng) -> list[MlpModel]:
    train_cfg = FedConfig(local_epochs=cfg.validate_epochs, local_batch=cfg.validate_batch,
                          local_lr=cfg.validate_lr, local_weight_decay=cfg.validate_weight_decay,
                          local_optimizer=cfg.validate_optimizer, dims=cfg.dims)
    specs = mlp_specs(cfg.dims)
    models = []
    for i, (x, y, _, _) in enumerate(splits):
        init = init_model(specs, rng.split("init" if cfg.validate_shared_init else f"init{i}"))
        model, loss = client_update(ClientState(i, x, y), init, train_cfg, rng.split(f"train{i}"))
        log.info("Model_%d trained, final epoch loss %.5f", i, loss)
        models.append(model)
    return models


def run_divergence(data: Dataset, cfg: ExperimentConfig) -> DivergenceResult:
    trips = data.trips
    if len(trips) < 2:
        raise ConfigError(f"divergence validation needs at least 2 trips, dataset has {len(trips)}")
    if data.inputs.shape[1] != cfg.input_dim:
        raise ConfigError(f"dataset input_dim {data.inputs.shape[1]} != config input_dim {cfg.input_dim}")
    rng = SeededRng(cfg.seed).split("validate")
    splits = divergence_splits(data, cfg.validate_public_fraction, rng.split("split"))
    models = train_trip_models(splits, cfg, rng)
    modes = {"normalized": EntropyMode(True, cfg.entropy_epsilon), "raw": EntropyMode(False, cfg.entropy_epsilon)}
    n = len(trips)
    loss = np.empty((n, n))
    ent = {name: np.empty((n, n)) for name in modes}
    excluded = {name: np.zeros((n, n), dtype=np.int64) for name in modes}
    for i, m in enumerate(models):
        for j, (_, _, xp, yp) in enumerate(splits):
            trace = forward(m, xp)
            loss[i, j] = rmse_loss(trace.output, yp)[0]
            for name, mode in modes.items():
                h = entropy_rows(trace.penultimate, mode)
                finite = np.isfinite(h)
                excluded[name][i, j] = int(np.sum(~finite))
                ent[name][i, j] = float(np.mean(h[finite])) if finite.any() else math.nan
    return DivergenceResult(loss, ent, excluded, trips, cfg.entropy_mode)


def grid_csv(matrix: np.ndarray) -> str:
    n, m = matrix.shape
    rows = ["," + ",".join(f"Public_{j}" for j in range(m))]
    for i in range(n):
        rows.append(f"Model_{i}," + ",".join(repr(float(v)) for v in matrix[i]))
    return "\n".join(rows) + "\n"


def divergence_summary(res: DivergenceResult) -> dict:
    h1 = res.diagonal_minimal
    out = {
        "trips": res.trips,
        "scored_entropy_mode": res.scored_mode,
        "hypothesis1_diagonal_minimal": h1,
        "hypothesis1_columns": sum(h1),
        "hypothesis2_entropy_matches_loss": res.entropy_matches_loss,
        "hypothesis2_columns": sum(res.entropy_matches_loss),
        "loss_argmin_per_column": [int(np.argmin(res.loss[:, j])) for j in range(res.loss.shape[1])],
        "by_entropy_mode": {},
    }
    for name in res.entropies:
        out["by_entropy_mode"][name] = {
            "entropy_argmin_per_column": res.entropy_argmin(name),
            "hypothesis2_columns": sum(res.matches(name)),
            "excluded_infinite_rows": res.excluded[name].tolist(),
        }
    return out


# ---------------------------------------------------------------- comparison


@dataclass
class CompareResult:
    metrics: dict[str, list[RoundMetrics]]  # by mode


def run_compare(data: Dataset, cfg: ExperimentConfig) -> CompareResult:
    out: dict[str, list[RoundMetrics]] = {}
    for mode in cfg.modes:
        rows: list[RoundMetrics] = []
        fed: dict[int, FederatedData] = {
            s: partition(data, PartitionPlan(mode), cfg.clients, SeededRng(s).split("partition"))
            for s in cfg.seeds
        }
        for method in cfg.methods:
            for seed in cfg.seeds:
                _, trace = run_federation(fed[seed], cfg.fed_config(method, seed), workers=cfg.workers)
                log.info("%s %s seed %d final test_rmse %.6f", mode, method, seed, trace[-1].test_rmse)
                rows.extend(trace)
        out[mode] = rows
    return CompareResult(out)


def metrics_csv(rows: Sequence[RoundMetrics], record_wall_ms: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.round, r.method, r.seed, repr(float(r.test_rmse)),
                    f"{r.wall_ms:.3f}" if record_wall_ms else ""])
    return buf.getvalue()


def histogram_csv(rows: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("round", "method", "seed", "client", "teacher_count", "local_loss"))
    for r in rows:
        for k, loss in sorted(r.client_losses.items()):
            count = "" if r.teacher_histogram is None else r.teacher_histogram[k]
            w.writerow([r.round, r.method, r.seed, k, count, repr(float(loss))])
    return buf.getvalue()


def read_metrics(text: str) -> list[tuple[int, str, int, float]]:
    """Parse a metrics CSV. Row numbers in errors count the header as row 1."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != METRICS_HEADER:
        raise ParseError(f"expected header {','.join(METRICS_HEADER)!r}, got {header!r}", 1)
    out = []
    for n, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            if len(row) != len(METRICS_HEADER):
                raise ValueError(f"expected {len(METRICS_HEADER)} fields, got {len(row)}")
            rmse = float(row[3])
            if not math.isfinite(rmse) or rmse < 0:
                raise ValueError(f"test_rmse {row[3]!r} is not a finite non-negative number")
            out.append((int(row[0]), row[1], int(row[2]), rmse))
        except ValueError as exc:
            raise ParseError(str(exc), n) from None
    return out


def final_rmse(rows: Sequence[tuple[int, str, int, float]]) -> dict[str, dict[int, float]]:
    """Last-round test RMSE per method and seed."""
    last: dict[tuple[str, int], tuple[int, float]] = {}
    for rnd, method, seed, rmse in rows:
        if (method, seed) not in last or rnd > last[(method, seed)][0]:
            last[(method, seed)] = (rnd, rmse)
    out: dict[str, dict[int, float]] = {}
    for (method, seed), (_, rmse) in sorted(last.items()):
        out.setdefault(method, {})[seed] = rmse
    return out


def relative_improvement(ours: float, base: float) -> float:
    return (base - ours) / base


def compare_summary(per_mode_rows: dict[str, list[tuple[int, str, int, float]]]) -> dict:
    summary = {}
    for mode, rows in per_mode_rows.items():
        finals = final_rmse(rows)
        stats = {
            m: {"mean": float(np.mean(list(v.values()))), "min": min(v.values()), "max": max(v.values()),
                "seeds": len(v)}
            for m, v in finals.items()
        }
        entry: dict = {"final_test_rmse": stats}
        if stats:
            best = min(s["mean"] for s in stats.values())
            entry["best_method"] = min(stats, key=lambda m: (stats[m]["mean"], m))
            entry["gap_to_best"] = {m: (s["mean"] - best) / best for m, s in stats.items()}
        if "confidence_distill" in stats:
            ours = stats["confidence_distill"]["mean"]
            entry["confidence_distill_improvement"] = {
                m: relative_improvement(ours, s["mean"]) for m, s in stats.items() if m != "confidence_distill"
            }
        summary[mode] = entry
    return summary


def summary_text(summary: dict) -> str:
    lines = []
    for mode, entry in summary.items():
        lines.append(f"[{mode}] final-round test RMSE (mean over seeds, min..max)")
        for m, s in entry["final_test_rmse"].items():
            lines.append(f"  {m:<20} {s['mean']:.6f}  ({s['min']:.6f}..{s['max']:.6f}, {s['seeds']} seeds)")
        for m, r in entry.get("confidence_distill_improvement", {}).items():
            lines.append(f"  confidence_distill vs {m}: {100 * r:+.2f}%")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- learning curves


def curves(rows: Sequence[tuple[int, str, int, float]]) -> dict[str, list[tuple[int, float, float, float]]]:
    """Per method: (round, mean, min, max) over seeds, rounds ascending."""
    grouped: dict[str, dict[int, list[float]]] = {}
    for rnd, method, _, rmse in rows:
        grouped.setdefault(method, {}).setdefault(rnd, []).append(rmse)
    return {
        m: [(r, math.fsum(v) / len(v), min(v), max(v)) for r, v in sorted(by_round.items())]
        for m, by_round in grouped.items()
    }


def curve_csv(points: Sequence[tuple[int, float, float, float]]) -> str:
    lines = [",".join(CURVE_HEADER)]
    lines += [f"{r},{mean!r},{lo!r},{hi!r}" for r, mean, lo, hi in points]
    return "\n".join(lines) + "\n"


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
