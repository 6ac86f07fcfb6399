"""Point-forecast error metrics in kilograms and their stratifications."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import TABLE3_BUCKETS, size_bucket
from .errors import ArgumentError


@dataclass(frozen=True)
class Scores:
    rmse_kg: float
    mae_kg: float
    mape_pct: float
    r2: float | None  # None when the targets are constant
    n: int

    def as_dict(self) -> dict:
        return {"rmse_kg": self.rmse_kg, "mae_kg": self.mae_kg, "mape_pct": self.mape_pct, "r2": self.r2, "n": self.n}


@dataclass
class MetricsReport:
    overall: Scores
    per_horizon: list[Scores]
    strata: dict[str, dict] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "overall": self.overall.as_dict(),
            "per_horizon": [s.as_dict() for s in self.per_horizon],
            "strata": self.strata,
        }


def metrics(pred_kg, true_kg) -> Scores:
    """Scores over the flattened (sample x horizon) arrays."""
    p = np.asarray(pred_kg, dtype=float).ravel()
    y = np.asarray(true_kg, dtype=float).ravel()
    if p.shape != y.shape:
        raise ArgumentError(f"prediction shape {np.shape(pred_kg)} != target shape {np.shape(true_kg)}")
    if p.size == 0:
        raise ArgumentError("no samples")
    err = p - y
    rmse = math.sqrt(float(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    nz = y != 0
    mape = float(np.mean(np.abs(err[nz]) / np.abs(y[nz])) * 100.0) if nz.any() else float("nan")
    r2 = None
    # test constancy directly; the float mean of equal values can differ from them
    if y.size >= 2 and np.any(y != y[0]):
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        if ss_tot > 0:
            r2 = 1.0 - float(np.sum(err * err)) / ss_tot
    return Scores(rmse, mae, mape, r2, int(y.size))


def per_horizon(pred_kg, true_kg) -> list[Scores]:
    p = np.atleast_2d(np.asarray(pred_kg, dtype=float))
    y = np.atleast_2d(np.asarray(true_kg, dtype=float))
    if p.shape != y.shape:
        raise ArgumentError(f"prediction shape {p.shape} != target shape {y.shape}")
    return [metrics(p[:, h], y[:, h]) for h in range(p.shape[1])]


def report(pred_kg, true_kg) -> MetricsReport:
    return MetricsReport(metrics(pred_kg, true_kg), per_horizon(pred_kg, true_kg))


def stratify_by_farm_size(pfl: Mapping[str, Scores], local: Mapping[str, Scores], farm_sizes: Mapping[str, int],
                          buckets=TABLE3_BUCKETS) -> dict[str, dict]:
    """Per bucket: farms, improve flags (PFL RMSE < local RMSE) and the improvement rate.

    Buckets with no farm are omitted and listed under ``"_omitted"``.
    """
    out: dict[str, dict] = {}
    for lo, hi, label in buckets:
        farms = sorted((fid for fid in pfl if fid in local and size_bucket(farm_sizes[fid], buckets) == label),
                       key=lambda f: (farm_sizes[f], f))
        if not farms:
            out.setdefault("_omitted", []).append(label)
            continue
        rows = []
        for fid in farms:
            improve = int(pfl[fid].rmse_kg < local[fid].rmse_kg)
            rows.append({"farm_id": fid, "n_animals": farm_sizes[fid], "pfl": pfl[fid].as_dict(),
                         "local": local[fid].as_dict(), "improve": improve})
        out[label] = {"farms": rows, "improvement_rate": sum(r["improve"] for r in rows) / len(rows)}
    return out
