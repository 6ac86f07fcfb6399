"""Experiment configuration, regime dispatch and evaluation in kilograms.

An :class:`ExperimentConfig` is a single JSON document with four sections
(seed, data, model, training). Two short hashes identify it: ``data_hash``
covers what determines the dataset, ``config_hash`` covers everything that
determines a trained model. Both are embedded in every artifact.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from . import data as ds
from . import federated as fd
from . import metrics as mt
from . import model as gm
from .errors import ConfigError
from .model import ModelConfig

# CLI regime name -> (engine regime, aggregation policy)
REGIMES: dict[str, tuple[fd.Regime, fd.Policy]] = {
    "centralized": (fd.Regime.CENTRALIZED, fd.Policy.SIZE),
    "local": (fd.Regime.LOCAL_ONLY, fd.Policy.SIZE),
    "fl": (fd.Regime.FL, fd.Policy.SIZE),
    "fl-sqrt": (fd.Regime.FL, fd.Policy.SQRT),
    "pfl": (fd.Regime.PFL, fd.Policy.SIZE),
    "pfl-sqrt": (fd.Regime.PFL, fd.Policy.SQRT),
    "pfl-finetune": (fd.Regime.PFL_FINETUNE, fd.Policy.SIZE),
}

ALL_STRATUM = "all"
ALL_HORIZON = "all"


def _reject_unknown(d: Mapping, cls, path: str) -> None:
    if not isinstance(d, Mapping):
        raise ConfigError("expected a JSON object", path=path)
    extra = set(d) - {f.name for f in fields(cls)}
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", path=path)


@dataclass
class DataSection:
    preset: str | None = "table3-mix"
    farms: list[ds.FarmSpec] | None = None
    obs_rate: float | None = None  # overrides every farm when set
    noise_sd: float | None = None  # overrides every farm when set
    window_len: int = 12
    horizon: int = 3
    stride: int = 3
    test_fraction: float = 0.2
    normalization: ds.NormalizationSpec = field(default_factory=ds.NormalizationSpec)

    def __post_init__(self):
        if (self.preset is None) == (self.farms is None):
            raise ConfigError("give exactly one of 'preset' or 'farms'", path="data")
        if self.preset is not None and self.preset not in ds.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(ds.PRESETS)}", path="data.preset")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)", path="data.test_fraction")
        for name in ("window_len", "horizon", "stride"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", path=f"data.{name}")
        if self.window_len + self.horizon > ds.N_MONTHS:
            raise ConfigError(f"window_len + horizon must be <= {ds.N_MONTHS}", path="data.window_len")
        if self.obs_rate is not None and not self.obs_rate >= 1:
            raise ConfigError("obs_rate must be >= 1", path="data.obs_rate")
        if self.noise_sd is not None and self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0", path="data.noise_sd")

    def farm_specs(self) -> list[ds.FarmSpec]:
        farms = ds.preset_farms(self.preset) if self.preset is not None else [copy.copy(f) for f in self.farms]
        over = {k: v for k, v in (("obs_rate", self.obs_rate), ("noise_sd", self.noise_sd)) if v is not None}
        return [replace(f, **over) for f in farms] if over else farms

    def params(self) -> ds.DataParams:
        return ds.DataParams(self.window_len, self.horizon, self.stride, self.test_fraction, self.normalization)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "farms": None if self.farms is None else [asdict(f) for f in self.farms],
            "obs_rate": self.obs_rate,
            "noise_sd": self.noise_sd,
            "window_len": self.window_len,
            "horizon": self.horizon,
            "stride": self.stride,
            "test_fraction": self.test_fraction,
            "normalization": self.normalization.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DataSection":
        _reject_unknown(d, cls, "data")
        d = dict(d)
        if d.get("farms") is not None:
            if "preset" not in d:
                d["preset"] = None
            farms = []
            for i, f in enumerate(d["farms"]):
                _reject_unknown(f, ds.FarmSpec, f"data.farms[{i}]")
                try:
                    farms.append(ds.FarmSpec(**f))
                except TypeError as exc:
                    raise ConfigError(str(exc), path=f"data.farms[{i}]") from None
            d["farms"] = farms
        if "normalization" in d:
            d["normalization"] = ds.NormalizationSpec.from_dict(d["normalization"])
        return cls(**d)


@dataclass
class TrainingSection:
    """Hyper-parameters shared by every regime of one experiment."""

    rounds: int = 30
    local_epochs: int = 2
    learning_rate: float = 0.002
    batch_size: int = 16
    optimizer: str = "adam"
    lr_decay: float = 0.93
    finetune_epochs: int = 5
    clip_norm: float | None = None

    def federation(self, regime: str, seed: int, threads: int = 1) -> fd.FederationConfig:
        if regime not in REGIMES:
            raise ConfigError(f"unknown regime {regime!r}; choose from {sorted(REGIMES)}", path="regime")
        engine, policy = REGIMES[regime]
        return fd.FederationConfig(
            rounds=self.rounds, local_epochs=self.local_epochs, learning_rate=self.learning_rate,
            policy=policy, regime=engine, seed=seed, batch_size=self.batch_size,
            finetune_epochs=self.finetune_epochs, clip_norm=self.clip_norm, threads=threads,
            optimizer=self.optimizer, lr_decay=self.lr_decay,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingSection":
        _reject_unknown(d, cls, "training")
        out = cls(**d)
        out.federation("fl", 0)  # validates every field with its path
        return out


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d_h=32, head_hidden=32))
    training: TrainingSection = field(default_factory=TrainingSection)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer", path="seed")
        if self.model.horizon != self.data.horizon:
            raise ConfigError(f"model.horizon {self.model.horizon} != data.horizon {self.data.horizon}",
                              path="model.horizon")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        _reject_unknown(d, cls, "config")
        kw = dict(d)
        if "data" in kw:
            kw["data"] = DataSection.from_dict(kw["data"])
        if "model" in kw:
            try:
                kw["model"] = ModelConfig.from_dict(kw["model"])
            except TypeError as exc:
                raise ConfigError(str(exc), path="model") from None
        if "training" in kw:
            try:
                kw["training"] = TrainingSection.from_dict(kw["training"])
            except TypeError as exc:
                raise ConfigError(str(exc), path="training") from None
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(d)

    @property
    def data_hash(self) -> str:
        return _digest({"seed": self.seed, "data": self.data.to_dict()})

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return _digest(d)

    def stamp(self) -> dict:
        """Provenance fields embedded in every artifact."""
        return {"config_hash": self.config_hash, "data_hash": self.data_hash, "seed": self.seed,
                "tool_version": __version__}


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def bundled_config_names() -> list[str]:
    root = resources.files("fedstock") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path_or_name: str | Path) -> ExperimentConfig:
    """Read a config file, or a bundled config when given its bare name (e.g. ``smoke``)."""
    p = Path(path_or_name)
    if p.is_file():
        return ExperimentConfig.from_json(p.read_text())
    name = str(path_or_name)
    if name in bundled_config_names():
        return ExperimentConfig.from_json((resources.files("fedstock") / "configs" / f"{name}.json").read_text())
    raise ConfigError(f"no config file or bundled config named {name!r}", path="--config")


# -- running ------------------------------------------------------------------

def build_dataset(config: ExperimentConfig) -> ds.SyntheticDataset:
    return ds.build_dataset(config.data.farm_specs(), config.seed, config.data.params())


def make_clients(dataset: ds.SyntheticDataset) -> list[fd.ClientState]:
    """One client per farm, ids in farm order."""
    return [fd.ClientState(i, f.farm_id, dataset.splits[f.farm_id].train) for i, f in enumerate(dataset.farms)]


def train_regime(regime: str, dataset: ds.SyntheticDataset, config: ExperimentConfig,
                 threads: int = 1) -> fd.TrainResult:
    fed = config.training.federation(regime, config.seed, threads)
    return fd.train(fed, make_clients(dataset), config.model)


@dataclass
class RegimeEval:
    """Test-set forecasts in kg for one regime, per farm."""

    regime: str
    pred_kg: dict[str, np.ndarray]
    true_kg: dict[str, np.ndarray]

    def farms(self) -> list[str]:
        return list(self.pred_kg)

    def pooled(self, farm_ids: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
        ids = self.farms() if farm_ids is None else [f for f in farm_ids if f in self.pred_kg]
        return (np.concatenate([self.pred_kg[f] for f in ids]), np.concatenate([self.true_kg[f] for f in ids]))

    def overall(self) -> mt.Scores:
        return mt.metrics(*self.pooled())

    def per_horizon(self) -> list[mt.Scores]:
        return mt.per_horizon(*self.pooled())

    def per_farm(self) -> dict[str, mt.Scores]:
        return {f: mt.metrics(self.pred_kg[f], self.true_kg[f]) for f in self.farms()}


def evaluate(regime: str, params_for, dataset: ds.SyntheticDataset, model_config: ModelConfig) -> RegimeEval:
    """Forecast every farm's test set with ``params_for(farm_id)`` and denormalize to kg.

    Farms without test animals are skipped.
    """
    spec = dataset.params.normalization
    pred, true = {}, {}
    for f in dataset.farms:
        test = dataset.splits[f.farm_id].test
        if not test:
            continue
        mu, _ = gm.predict_many(test, params_for(f.farm_id), model_config)
        pred[f.farm_id] = spec.unscale("weight", mu)
        true[f.farm_id] = spec.unscale("weight", np.stack([i.y for i in test]))
    return RegimeEval(regime, pred, true)


def evaluate_result(regime: str, result: fd.TrainResult, dataset: ds.SyntheticDataset,
                    model_config: ModelConfig) -> RegimeEval:
    return evaluate(regime, result.model_for, dataset, model_config)


# -- reports ------------------------------------------------------------------

REPORT_COLUMNS = ("regime", "stratum", "horizon", "n", "rmse_kg", "mae_kg", "mape_pct", "r2",
                  "config_hash", "seed", "tool_version")


def strata(dataset_farms: Sequence[ds.FarmSpec], farm_ids: Sequence[str]) -> dict[str, list[str]]:
    """``all`` plus every non-empty farm-size bucket, in bucket order."""
    sizes = {f.farm_id: f.n_animals for f in dataset_farms}
    out = {ALL_STRATUM: list(farm_ids)}
    for _, _, label in ds.TABLE3_BUCKETS:
        members = [f for f in farm_ids if ds.size_bucket(sizes[f]) == label]
        if members:
            out[label] = members
    return out


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_rows(evals: Sequence[RegimeEval], farms: Sequence[ds.FarmSpec], stamp: Mapping) -> list[dict]:
    """One row per regime x stratum x horizon (``all`` plus 1..H), sorted by regime then stratum order."""
    rows = []
    for ev in sorted(evals, key=lambda e: e.regime):
        for label, ids in strata(farms, ev.farms()).items():
            p, y = ev.pooled(ids)
            scored = [(ALL_HORIZON, mt.metrics(p, y))] + [(h + 1, s) for h, s in enumerate(mt.per_horizon(p, y))]
            for h, s in scored:
                rows.append({"regime": ev.regime, "stratum": label, "horizon": h, **s.as_dict(),
                             "config_hash": stamp["config_hash"], "seed": stamp["seed"],
                             "tool_version": stamp["tool_version"]})
    return rows


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c)) for c in columns))
    return "\n".join(lines) + "\n"


def summary(evals: Sequence[RegimeEval], farms: Sequence[ds.FarmSpec], stamp: Mapping) -> dict:
    """JSON-ready summary: overall, per-horizon and per-farm scores, plus the farm-size table when possible."""
    by_name = {e.regime: e for e in evals}
    out = {**stamp, "regimes": {}}
    for name in sorted(by_name):
        ev = by_name[name]
        out["regimes"][name] = {
            "overall": ev.overall().as_dict(),
            "per_horizon": [s.as_dict() for s in ev.per_horizon()],
            "per_farm": {f: s.as_dict() for f, s in sorted(ev.per_farm().items())},
        }
    sizes = {f.farm_id: f.n_animals for f in farms}
    personal = next((n for n in ("pfl-finetune", "pfl", "pfl-sqrt") if n in by_name), None)
    if personal and "local" in by_name:
        out["farm_size_table"] = {
            "personalized": personal,
            "strata": mt.stratify_by_farm_size(by_name[personal].per_farm(), by_name["local"].per_farm(), sizes),
        }
    return out
