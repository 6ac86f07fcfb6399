"""Synthetic multi-farm cattle population and the preprocessing pipeline.

Ground truth is a Brody growth curve per animal. Sparse noisy weighings
are drawn from it, then every animal is filled to one record per month of
age (2..24) by following its quantile rank through the population's
age-conditional weight distribution. Each month also gets the distance
to the nearest real weighing and a credibility derived from it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .model import Instance

log = logging.getLogger(__name__)

AGE_MIN = 2
AGE_MAX = 24
AGES = np.arange(AGE_MIN, AGE_MAX + 1)
N_MONTHS = len(AGES)  # 23

FEATURES = ("weight", "age", "distance", "credibility")
N_SEXES = 2
N_BREEDS = 9

# Brody curve defaults: w(a) = A * (1 - b * exp(-k * a)), A = bias * A0 * animal_factor
MATURE_WEIGHT = 650.0
BRODY_B = 0.9
BRODY_K = 0.08
ANIMAL_FACTOR_SD = 0.1

# seed-stream tags keep independent draws from colliding
_STREAM_ANIMAL = 1
_STREAM_SPLIT = 2


@dataclass
class FarmSpec:
    farm_id: str
    n_animals: int
    region_id: int = 0
    state_id: int = 0
    growth_bias: float = 1.0
    noise_sd: float = 5.0
    obs_rate: float = 2.5
    maturation_rate: float | None = None  # farm-level Brody k; None uses the population default

    def __post_init__(self):
        where = f"farms[{self.farm_id}]"
        if int(self.n_animals) < 1:
            raise ConfigError("n_animals must be >= 1", path=f"{where}.n_animals")
        if not self.growth_bias > 0:
            raise ConfigError("growth_bias must be > 0", path=f"{where}.growth_bias")
        if not self.obs_rate >= 1:
            raise ConfigError("obs_rate must be >= 1", path=f"{where}.obs_rate")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0", path=f"{where}.noise_sd")
        if self.maturation_rate is not None and not self.maturation_rate > 0:
            raise ConfigError("maturation_rate must be > 0", path=f"{where}.maturation_rate")
        if self.region_id < 0 or self.state_id < 0:
            raise ConfigError("category ids must be >= 0", path=where)
        self.n_animals = int(self.n_animals)


@dataclass(frozen=True)
class GrowthCurve:
    mature_weight: float
    b: float = BRODY_B
    k: float = BRODY_K

    def __call__(self, age):
        return self.mature_weight * (1.0 - self.b * np.exp(-self.k * np.asarray(age, dtype=float)))


@dataclass
class Animal:
    animal_id: str
    farm_id: str
    static: tuple[int, int, int, int]  # sex, breed, state, nrm_region
    curve: GrowthCurve
    noise_sd: float
    obs_rate: float
    seed: tuple[int, ...]

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class RawWeighing:
    animal_id: str
    age_months: float
    weight_kg: float


@dataclass
class MonthlyTrajectory:
    animal_id: str
    farm_id: str
    static: tuple[int, ...]
    weight_kg: np.ndarray
    observed: np.ndarray
    distance_months: np.ndarray = None
    credibility: np.ndarray = None
    truth_kg: np.ndarray | None = None

    def __post_init__(self):
        self.weight_kg = np.asarray(self.weight_kg, dtype=float)
        self.observed = np.asarray(self.observed, dtype=np.int8)
        if self.weight_kg.shape != (N_MONTHS,) or self.observed.shape != (N_MONTHS,):
            raise ConfigError(f"trajectory {self.animal_id}: need exactly {N_MONTHS} month slots")

    def check(self) -> None:
        """Raise AssertionError if any trajectory invariant is broken."""
        assert self.weight_kg.shape == (N_MONTHS,)
        assert self.observed.any(), "no observed month"
        obs = self.observed == 1
        assert np.all(self.distance_months[obs] == 0)
        assert np.all(self.credibility[obs] == 1)
        assert np.all(self.distance_months >= 0)
        assert np.all((self.credibility > 0) & (self.credibility <= 1))
        order = np.argsort(self.distance_months, kind="stable")
        d, c = self.distance_months[order], self.credibility[order]
        step = np.diff(d) > 0
        assert np.all(np.diff(c)[step] < 0), "credibility not decreasing in distance"


@dataclass(frozen=True)
class NormalizationSpec:
    weight: tuple[float, float] = (0.0, 1000.0)
    age: tuple[float, float] = (float(AGE_MIN), float(AGE_MAX))
    distance: tuple[float, float] = (0.0, float(AGE_MAX - AGE_MIN))
    credibility: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        for name in FEATURES:
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not lo < hi:
                raise ConfigError(f"min must be < max, got [{lo}, {hi}]", path=f"data.normalization.{name}")

    def bounds(self, feature: str) -> tuple[float, float]:
        return getattr(self, feature)

    def scale(self, feature: str, v):
        lo, hi = self.bounds(feature)
        return (np.asarray(v, dtype=float) - lo) / (hi - lo)

    def unscale(self, feature: str, v):
        lo, hi = self.bounds(feature)
        return np.asarray(v, dtype=float) * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name)) for name in FEATURES}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        extra = set(d) - set(FEATURES)
        if extra:
            raise ConfigError(f"unknown features {sorted(extra)}", path="data.normalization")
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass
class NormalizedTrajectory:
    animal_id: str
    farm_id: str
    static: tuple[int, ...]
    features: np.ndarray  # (23, 4): weight, age, distance, credibility in [0, 1]
    observed: np.ndarray
    n_clipped: int = 0


# -- generation --------------------------------------------------------------

def animal_seed(seed: int, farm_index: int, animal_index: int) -> tuple[int, ...]:
    return (int(seed), _STREAM_ANIMAL, int(farm_index), int(animal_index))


def generate_population(
    farm_specs: Sequence[FarmSpec],
    seed: int,
    mature_weight: float = MATURE_WEIGHT,
    brody_b: float = BRODY_B,
    brody_k: float = BRODY_K,
    animal_factor_sd: float = ANIMAL_FACTOR_SD,
) -> list[Animal]:
    """One Animal per head of stock, each with its own derived RNG stream."""
    if not farm_specs:
        raise ConfigError("at least one farm is required", path="data.farms")
    ids = [f.farm_id for f in farm_specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("farm ids must be unique", path="data.farms")
    if not (0 < brody_b < 1 and brody_k > 0 and mature_weight > 0):
        raise ConfigError("Brody parameters need 0 < b < 1, k > 0, A0 > 0", path="data.growth")
    animals = []
    for fi, farm in enumerate(farm_specs):
        for j in range(farm.n_animals):
            s = animal_seed(seed, fi, j)
            rng = np.random.default_rng(s)
            factor = rng.lognormal(0.0, animal_factor_sd) if animal_factor_sd > 0 else 1.0
            static = (int(rng.integers(N_SEXES)), int(rng.integers(N_BREEDS)), farm.state_id, farm.region_id)
            animals.append(Animal(
                animal_id=f"{farm.farm_id}-{j:05d}",
                farm_id=farm.farm_id,
                static=static,
                curve=GrowthCurve(farm.growth_bias * mature_weight * factor, brody_b,
                                  brody_k if farm.maturation_rate is None else farm.maturation_rate),
                noise_sd=farm.noise_sd,
                obs_rate=farm.obs_rate,
                seed=s + (1,),
            ))
    return animals


def sparsify(curve: Callable, obs_rate: float, noise_sd: float, rng: np.random.Generator,
             animal_id: str = "") -> list[RawWeighing]:
    """max(1, Poisson(obs_rate)) weighings at distinct integer ages, sorted by age."""
    if obs_rate < 1:
        raise ConfigError("obs_rate must be >= 1")
    count = min(N_MONTHS, max(1, int(rng.poisson(obs_rate))))
    ages = np.sort(rng.choice(AGES, size=count, replace=False))
    w = curve(ages) + (rng.normal(0.0, noise_sd, size=count) if noise_sd > 0 else 0.0)
    w = np.maximum(w, 1.0)
    return [RawWeighing(animal_id, float(a), float(x)) for a, x in zip(ages, w)]


# -- quantile-track filling --------------------------------------------------

class PopulationQuantiles:
    """Empirical weight distribution at each integer age 2..24.

    The quantile function at an age interpolates linearly between the
    sorted observed weights placed at ranks 0, 1/(n-1), ..., 1.
    """

    def __init__(self, weighings: Iterable[RawWeighing]):
        buckets: dict[int, list[float]] = {int(a): [] for a in AGES}
        for w in weighings:
            buckets[int(round(w.age_months))].append(w.weight_kg)
        populated = [a for a in AGES if buckets[int(a)]]
        if not populated:
            raise ConfigError("no weighings to build population quantiles from")
        self.fallbacks: dict[int, int] = {}
        self._sorted: dict[int, np.ndarray] = {}
        for a in AGES:
            a = int(a)
            if buckets[a]:
                self._sorted[a] = np.sort(np.asarray(buckets[a]))
            else:
                # nearest populated age; ties go to the younger bucket
                src = min(populated, key=lambda p: (abs(p - a), p))
                self.fallbacks[a] = int(src)
        for a, src in self.fallbacks.items():
            self._sorted[a] = self._sorted[src]
        self._grids = {a: self._grid(len(v)) for a, v in self._sorted.items()}
        if self.fallbacks:
            log.warning("quantile buckets with no data fell back to neighbours: %s", self.fallbacks)

    def values(self, age: int) -> np.ndarray:
        return self._sorted[int(age)]

    @staticmethod
    def _grid(n: int) -> np.ndarray:
        return np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])

    def rank(self, age: int, weight: float) -> float:
        v = self._sorted[int(age)]
        if len(v) == 1:
            return 0.5
        return float(np.interp(weight, v, self._grids[int(age)]))

    def quantile(self, age: int, q) -> np.ndarray:
        v = self._sorted[int(age)]
        if len(v) == 1:
            return np.full(np.shape(q), v[0], dtype=float)
        return np.interp(q, self._grids[int(age)], v)


def quantile_track_fill(raw: Sequence[RawWeighing], quantiles: PopulationQuantiles):
    """Monthly weights (23,) and observed flags (23,) for one animal."""
    if not raw:
        raise ConfigError("quantile_track_fill needs at least one observation")
    obs_idx = np.array([int(round(w.age_months)) - AGE_MIN for w in raw])
    obs_w = np.array([w.weight_kg for w in raw])
    ranks = np.array([quantiles.rank(AGE_MIN + i, w) for i, w in zip(obs_idx, obs_w)])
    # np.interp holds the end values constant outside the observed range
    month_ranks = np.interp(np.arange(N_MONTHS), obs_idx, ranks)
    weights = np.array([quantiles.quantile(a, q) for a, q in zip(AGES, month_ranks)], dtype=float)
    weights[obs_idx] = obs_w
    observed = np.zeros(N_MONTHS, dtype=np.int8)
    observed[obs_idx] = 1
    return weights, observed


def locf_fill(raw: Sequence[RawWeighing]) -> np.ndarray:
    """Last observation carried forward (first one carried backward); baseline only."""
    obs_idx = np.array([int(round(w.age_months)) - AGE_MIN for w in raw])
    obs_w = np.array([w.weight_kg for w in raw])
    pos = np.searchsorted(obs_idx, np.arange(N_MONTHS), side="right") - 1
    return obs_w[np.maximum(pos, 0)]


def annotate_distance_credibility(traj: MonthlyTrajectory) -> MonthlyTrajectory:
    obs = np.flatnonzero(traj.observed)
    if obs.size == 0:
        raise ConfigError(f"trajectory {traj.animal_id} has no observed month")
    idx = np.arange(N_MONTHS)
    traj.distance_months = np.abs(idx[:, None] - obs[None, :]).min(axis=1).astype(float)
    traj.credibility = 1.0 / (1.0 + traj.distance_months)
    return traj


def normalize(traj: MonthlyTrajectory, spec: NormalizationSpec) -> NormalizedTrajectory:
    raw = np.stack([traj.weight_kg, AGES.astype(float), traj.distance_months, traj.credibility], axis=1)
    scaled = np.stack([spec.scale(name, raw[:, i]) for i, name in enumerate(FEATURES)], axis=1)
    n_clipped = int(np.count_nonzero((scaled < 0) | (scaled > 1)))
    return NormalizedTrajectory(
        traj.animal_id, traj.farm_id, tuple(traj.static), np.clip(scaled, 0.0, 1.0),
        traj.observed.copy(), n_clipped,
    )


def denormalize_weight(v, spec: NormalizationSpec) -> np.ndarray:
    return spec.unscale("weight", v)


def window_starts(window_len: int, horizon: int, stride: int) -> list[int]:
    if window_len < 1 or horizon < 1 or stride < 1:
        raise ConfigError("window_len, horizon and stride must be >= 1", path="data.window")
    if window_len + horizon > N_MONTHS:
        raise ConfigError(
            f"window_len + horizon = {window_len + horizon} exceeds {N_MONTHS} months", path="data.window"
        )
    return list(range(0, N_MONTHS - window_len - horizon + 1, stride))


def make_instances(traj: NormalizedTrajectory, window_len: int = 12, horizon: int = 3, stride: int = 3) -> list[Instance]:
    out = []
    for s in window_starts(window_len, horizon, stride):
        e = s + window_len
        out.append(Instance(
            x=traj.features[s:e],
            m=traj.observed[s:e, None].astype(float),
            c=traj.static,
            y=traj.features[e:e + horizon, 0],
            farm_id=traj.farm_id,
            animal_id=traj.animal_id,
        ))
    return out


def instance_start_ages(window_len: int = 12, horizon: int = 3, stride: int = 3) -> list[int]:
    return [AGE_MIN + s for s in window_starts(window_len, horizon, stride)]


# -- splitting ---------------------------------------------------------------

@dataclass
class ClientSplit:
    farm_id: str
    train: list[Instance]
    test: list[Instance]
    train_animals: list[str]
    test_animals: list[str]
    flagged: bool = False


def split_animals(animal_ids: Sequence[str], test_fraction: float, rng: np.random.Generator):
    """(train_ids, test_ids, flagged) for one farm; split is by animal."""
    ids = sorted(animal_ids)
    n = len(ids)
    n_test = int(math.floor(test_fraction * n + 0.5))
    if n_test < 1 or n - n_test < 1:
        return ids, [], True
    perm = rng.permutation(n)
    test = sorted(ids[i] for i in perm[:n_test])
    test_set = set(test)
    return [a for a in ids if a not in test_set], test, False


def split_clients(instances: Sequence[Instance], farm_specs: Sequence[FarmSpec], test_fraction: float,
                  seed: int) -> dict[str, ClientSplit]:
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must be in (0, 1)", path="data.test_fraction")
    by_farm: dict[str, list[Instance]] = {f.farm_id: [] for f in farm_specs}
    for inst in instances:
        by_farm[inst.farm_id].append(inst)
    out = {}
    for fi, farm in enumerate(farm_specs):
        insts = by_farm[farm.farm_id]
        animals = sorted({i.animal_id for i in insts})
        rng = np.random.default_rng((int(seed), _STREAM_SPLIT, fi))
        train_ids, test_ids, flagged = split_animals(animals, test_fraction, rng)
        if flagged:
            log.warning("farm %s too small to split (%d animals); all kept in train", farm.farm_id, len(animals))
        test_set = set(test_ids)
        out[farm.farm_id] = ClientSplit(
            farm.farm_id,
            [i for i in insts if i.animal_id not in test_set],
            [i for i in insts if i.animal_id in test_set],
            train_ids, test_ids, flagged,
        )
    return out


# -- presets -----------------------------------------------------------------

TABLE3_BUCKETS = ((0, 50, "<50"), (51, 200, "51-200"), (201, 500, "201-500"),
                  (501, 1000, "501-1000"), (1001, None, ">1000"))

# farm sizes per size stratum; the rest of each farm spec is derived below
_TABLE3_SIZES = (
    (4, 5, 6, 8, 10, 14, 20, 28, 40),
    (52, 55, 58, 62, 70, 85, 110),
    (210, 230),
    (510,),
    (1010,),
)
_TABLE3_BIAS = (0.8, 1.2)
_TABLE3_RATE = (0.05, 0.12)
_TABLE3_NOISE = (4.0, 12.0)


def _spread(lo: float, hi: float, n: int, step: int) -> list[float]:
    """``n`` evenly spaced values visited in a strided order, so neighbours differ."""
    values = np.linspace(lo, hi, n)
    return [round(float(values[i * step % n]), 4) for i in range(n)]


def _preset_table3_mix() -> list[FarmSpec]:
    sizes = [n for bucket in _TABLE3_SIZES for n in bucket]
    n = len(sizes)
    # strides coprime with n, so each bucket mixes fast, slow, heavy and light farms
    biases = _spread(*_TABLE3_BIAS, n, 7)
    rates = _spread(*_TABLE3_RATE, n, 3)
    noise = _spread(*_TABLE3_NOISE, n, 9)
    farms = [FarmSpec(farm_id=f"F{i:02d}", n_animals=size, region_id=i % 10, state_id=i % 8,
                      growth_bias=biases[i], noise_sd=noise[i], obs_rate=2.5, maturation_rate=rates[i])
             for i, size in enumerate(sizes)]
    # the two largest farms take opposite corners of the growth range, so neither curve is typical
    farms[-1] = replace(farms[-1], growth_bias=_TABLE3_BIAS[1], maturation_rate=_TABLE3_RATE[0])
    farms[-2] = replace(farms[-2], growth_bias=_TABLE3_BIAS[0], maturation_rate=_TABLE3_RATE[1])
    return farms


def _preset_smoke() -> list[FarmSpec]:
    return [
        FarmSpec("A", 20, region_id=0, state_id=0, growth_bias=0.9),
        FarmSpec("B", 20, region_id=1, state_id=0, growth_bias=1.1),
    ]


PRESETS: dict[str, Callable[[], list[FarmSpec]]] = {
    "table3-mix": _preset_table3_mix,
    "smoke": _preset_smoke,
}


def preset_farms(name: str) -> list[FarmSpec]:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", path="data.preset") from None


def size_bucket(n_animals: int, buckets=TABLE3_BUCKETS) -> str:
    for lo, hi, label in buckets:
        if n_animals >= lo and (hi is None or n_animals <= hi):
            return label
    raise ValueError(f"no bucket for farm size {n_animals}")


# -- end-to-end pipeline -----------------------------------------------------

@dataclass
class DataParams:
    window_len: int = 12
    horizon: int = 3
    stride: int = 3
    test_fraction: float = 0.2
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)


@dataclass
class SyntheticDataset:
    farms: list[FarmSpec]
    trajectories: list[MonthlyTrajectory]
    splits: dict[str, ClientSplit]
    params: DataParams
    report: dict

    @property
    def train(self) -> list[Instance]:
        return [i for f in self.farms for i in self.splits[f.farm_id].train]

    @property
    def test(self) -> list[Instance]:
        return [i for f in self.farms for i in self.splits[f.farm_id].test]


def fill_population(animals: Sequence[Animal]) -> tuple[list[MonthlyTrajectory], dict]:
    raw = {}
    for a in animals:
        raw[a.animal_id] = sparsify(a.curve, a.obs_rate, a.noise_sd, a.rng(), a.animal_id)
    quantiles = PopulationQuantiles(w for ws in raw.values() for w in ws)
    trajs = []
    for a in animals:
        weights, observed = quantile_track_fill(raw[a.animal_id], quantiles)
        traj = MonthlyTrajectory(a.animal_id, a.farm_id, a.static, weights, observed, truth_kg=a.curve(AGES))
        trajs.append(annotate_distance_credibility(traj))
    n_obs = sum(len(v) for v in raw.values())
    report = {
        "n_weighings": n_obs,
        "mean_weighings_per_animal": n_obs / len(animals),
        "quantile_fallbacks": {str(k): v for k, v in sorted(quantiles.fallbacks.items())},
    }
    return trajs, report


def instances_from_trajectories(trajs: Sequence[MonthlyTrajectory], params: DataParams):
    instances, clipped = [], 0
    for t in trajs:
        nt = normalize(t, params.normalization)
        clipped += nt.n_clipped
        instances.extend(make_instances(nt, params.window_len, params.horizon, params.stride))
    return instances, clipped


def split_from_assignment(instances: Sequence[Instance], farm_specs: Sequence[FarmSpec],
                          test_animals: set[str], flagged: set[str] = frozenset()) -> dict[str, ClientSplit]:
    out = {f.farm_id: ClientSplit(f.farm_id, [], [], [], [], f.farm_id in flagged) for f in farm_specs}
    seen = set()
    for inst in instances:
        cs = out[inst.farm_id]
        is_test = inst.animal_id in test_animals
        (cs.test if is_test else cs.train).append(inst)
        if inst.animal_id not in seen:
            seen.add(inst.animal_id)
            (cs.test_animals if is_test else cs.train_animals).append(inst.animal_id)
    return out


def build_dataset(farm_specs: Sequence[FarmSpec], seed: int, params: DataParams | None = None,
                  **growth) -> SyntheticDataset:
    params = params or DataParams()
    window_starts(params.window_len, params.horizon, params.stride)
    animals = generate_population(farm_specs, seed, **growth)
    trajs, report = fill_population(animals)
    instances, clipped = instances_from_trajectories(trajs, params)
    splits = split_clients(instances, farm_specs, params.test_fraction, seed)
    report["n_clipped_values"] = clipped
    report["unsplit_farms"] = [fid for fid, s in splits.items() if s.flagged]
    return SyntheticDataset(list(farm_specs), trajs, splits, params, report)


# -- serialization -----------------------------------------------------------

def trajectory_record(traj: MonthlyTrajectory, split: str) -> dict:
    sex, breed, state, region = traj.static
    months = [
        [float(traj.weight_kg[i]), int(AGES[i]), float(traj.distance_months[i]),
         float(traj.credibility[i]), int(traj.observed[i])]
        for i in range(N_MONTHS)
    ]
    return {
        "animal_id": traj.animal_id,
        "farm_id": traj.farm_id,
        "split": split,
        "static": {"sex": sex, "breed": breed, "state": state, "nrm_region": region},
        "months": months,
    }


def trajectory_from_record(rec: dict) -> tuple[MonthlyTrajectory, str]:
    st = rec["static"]
    months = np.asarray(rec["months"], dtype=float)
    traj = MonthlyTrajectory(
        rec["animal_id"], rec["farm_id"],
        (int(st["sex"]), int(st["breed"]), int(st["state"]), int(st["nrm_region"])),
        months[:, 0], months[:, 4].astype(np.int8), months[:, 2], months[:, 3],
    )
    return traj, rec["split"]


def farm_filename(farm_id: str) -> str:
    return f"farm_{farm_id}.jsonl"


def write_dataset(ds: SyntheticDataset, out_dir: str | Path, meta: dict) -> dict:
    """One JSONL file per farm plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_farm: dict[str, list[MonthlyTrajectory]] = {f.farm_id: [] for f in ds.farms}
    for t in ds.trajectories:
        by_farm[t.farm_id].append(t)
    farms = []
    for f in ds.farms:
        split = ds.splits[f.farm_id]
        test_ids = set(split.test_animals)
        lines = [
            json.dumps(trajectory_record(t, "test" if t.animal_id in test_ids else "train"), separators=(",", ":"))
            for t in by_farm[f.farm_id]
        ]
        (out_dir / farm_filename(f.farm_id)).write_text("\n".join(lines) + "\n")
        farms.append({
            **asdict(f),
            "file": farm_filename(f.farm_id),
            "n_train_animals": len(split.train_animals),
            "n_test_animals": len(split.test_animals),
            "n_train_instances": len(split.train),
            "n_test_instances": len(split.test),
            "split_flagged": split.flagged,
        })
    manifest = {
        **meta,
        "farms": farms,
        "total_animals": sum(f.n_animals for f in ds.farms),
        "total_train_instances": len(ds.train),
        "total_test_instances": len(ds.test),
        "params": {
            "window_len": ds.params.window_len,
            "horizon": ds.params.horizon,
            "stride": ds.params.stride,
            "test_fraction": ds.params.test_fraction,
            "normalization": ds.params.normalization.to_dict(),
        },
        "report": ds.report,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(data_dir: str | Path) -> tuple[SyntheticDataset, dict]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    p = manifest["params"]
    params = DataParams(p["window_len"], p["horizon"], p["stride"], p["test_fraction"],
                        NormalizationSpec.from_dict(p["normalization"]))
    farm_keys = set(FarmSpec.__dataclass_fields__)
    farms = [FarmSpec(**{k: v for k, v in f.items() if k in farm_keys}) for f in manifest["farms"]]
    trajs, test_ids = [], set()
    for f in manifest["farms"]:
        with open(data_dir / f["file"]) as fh:
            for line in fh:
                if line.strip():
                    traj, split = trajectory_from_record(json.loads(line))
                    trajs.append(traj)
                    if split == "test":
                        test_ids.add(traj.animal_id)
    instances, _ = instances_from_trajectories(trajs, params)
    flagged = {f["farm_id"] for f in manifest["farms"] if f.get("split_flagged")}
    splits = split_from_assignment(instances, farms, test_ids, flagged)
    return SyntheticDataset(farms, trajs, splits, params, manifest.get("report", {})), manifest
