"""GRU growth forecaster with a Gaussian mean / log-variance head.

Pipeline for one animal: static category embeddings are concatenated; each
monthly numeric feature vector is linearly embedded, joined with its mask,
and fed through a single-layer GRU; the last hidden state and the static
embedding go through two dense layers producing ``2H`` outputs
(means, then log-variances).

All forward/backward code is batched over instances of equal length.
A single instance is just a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, EmptySequenceError
from .nn import ParamSet, ParamTensor, Part

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

CATEGORY_NAMES = ("sex", "breed", "state", "nrm_region")


@dataclass(frozen=True)
class ModelConfig:
    d_n: int = 4
    d_m: int = 1
    d_e: int = 16
    d_h: int = 64
    horizon: int = 3
    category_cardinalities: tuple[int, ...] = (2, 9, 8, 10)
    head_hidden: int = 64
    category_names: tuple[str, ...] | None = None
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "category_cardinalities", tuple(int(v) for v in self.category_cardinalities))
        for name in ("d_n", "d_m", "d_e", "d_h", "horizon", "head_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", path=f"model.{name}")
        if len(self.category_cardinalities) < 1:
            raise ConfigError("need at least one categorical feature", path="model.category_cardinalities")
        if any(v < 1 for v in self.category_cardinalities):
            raise ConfigError("cardinalities must be >= 1", path="model.category_cardinalities")
        if self.category_names is not None:
            object.__setattr__(self, "category_names", tuple(self.category_names))
            if len(self.category_names) != len(self.category_cardinalities):
                raise ConfigError("one name per categorical feature", path="model.category_names")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}", path="model.dtype")

    @property
    def n_categories(self) -> int:
        return len(self.category_cardinalities)

    @property
    def feature_names(self) -> tuple[str, ...]:
        if self.category_names is not None:
            return self.category_names
        if len(self.category_cardinalities) == len(CATEGORY_NAMES):
            return CATEGORY_NAMES
        return tuple(f"cat{i}" for i in range(self.n_categories))

    @property
    def d_in(self) -> int:
        return self.d_e + self.d_m

    @property
    def d_fused(self) -> int:
        return self.d_h + self.n_categories * self.d_e

    def to_dict(self) -> dict:
        return {
            "d_n": self.d_n,
            "d_m": self.d_m,
            "d_e": self.d_e,
            "d_h": self.d_h,
            "horizon": self.horizon,
            "category_cardinalities": list(self.category_cardinalities),
            "head_hidden": self.head_hidden,
            "category_names": None if self.category_names is None else list(self.category_names),
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", path="model")
        return cls(**d)


@dataclass
class Instance:
    x: np.ndarray
    m: np.ndarray
    c: tuple[int, ...]
    y: np.ndarray
    farm_id: str = ""
    animal_id: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.m = np.asarray(self.m, dtype=float)
        if self.m.ndim == 1:
            self.m = self.m[:, None]
        self.y = np.asarray(self.y, dtype=float)
        self.c = tuple(int(v) for v in self.c)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise EmptySequenceError(f"instance {self.animal_id!r}: need T >= 1 steps, got x shape {self.x.shape}")
        if self.m.shape[0] != self.x.shape[0]:
            raise DimensionError(f"x has {self.x.shape[0]} steps but m has {self.m.shape[0]}")
        if not np.all((self.m == 0) | (self.m == 1)):
            raise ConfigError("mask entries must be 0 or 1")
        if self.y.ndim != 1 or not np.all(np.isfinite(self.y)):
            raise ConfigError("targets must be a finite vector")

    @property
    def length(self) -> int:
        return self.x.shape[0]


@dataclass
class Prediction:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


def _gru(params: ParamSet) -> dict[str, ParamTensor]:
    return {short: params[full] for short, full in nn.gru_param_names().items()}


def embedding_name(config: ModelConfig, l: int) -> str:
    return f"embed.{config.feature_names[l]}"


HEAD_NAMES = ("head.w1", "head.b1", "head.w2", "head.b2")


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> ParamSet:
    """Seeded initialization; draws happen in parameter order."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    ps = ParamSet()
    for l, vocab in enumerate(config.category_cardinalities):
        ps.add(ParamTensor(embedding_name(config, l), nn.init_embedding(rng, vocab, config.d_e, dt)))
    ps.add(ParamTensor("num.w", nn.init_weight(rng, config.d_e, config.d_n, dt)))
    ps.add(ParamTensor("num.b", np.zeros(config.d_e, dtype=dt)))
    for gate in nn.GRU_GATES:
        ps.add(ParamTensor(f"gru.w_{gate}", nn.init_weight(rng, config.d_h, config.d_in, dt)))
        ps.add(ParamTensor(f"gru.u_{gate}", nn.init_weight(rng, config.d_h, config.d_h, dt)))
        ps.add(ParamTensor(f"gru.b_{gate}", np.zeros(config.d_h, dtype=dt)))
    ps.add(ParamTensor("head.w1", nn.init_weight(rng, config.head_hidden, config.d_fused, dt)), Part.HEAD)
    ps.add(ParamTensor("head.b1", np.zeros(config.head_hidden, dtype=dt)), Part.HEAD)
    ps.add(ParamTensor("head.w2", nn.init_weight(rng, 2 * config.horizon, config.head_hidden, dt)), Part.HEAD)
    ps.add(ParamTensor("head.b2", np.zeros(2 * config.horizon, dtype=dt)), Part.HEAD)
    return ps


def embed_static(c, params: ParamSet, config: ModelConfig) -> np.ndarray:
    """Concatenated embeddings of the categorical codes ``c`` (``(L,)`` or ``(B, L)``)."""
    C = np.asarray(c)
    if C.shape[-1] != config.n_categories:
        raise DimensionError(f"expected {config.n_categories} category codes, got shape {C.shape}")
    parts = [
        nn.embed_lookup(params[embedding_name(config, l)], C[..., l], feature=config.feature_names[l])
        for l in range(config.n_categories)
    ]
    return nn.concat(parts)[0]


@dataclass
class _SeqCache:
    X: np.ndarray  # (T, B, d_n)
    Z: np.ndarray  # (T, B, d_in)
    Hprev: np.ndarray  # (T, B, d_h)
    U: np.ndarray
    R: np.ndarray
    C: np.ndarray
    RH: np.ndarray
    W: np.ndarray
    Uur: np.ndarray


def _fused_gru(params: ParamSet):
    g = _gru(params)
    W = np.concatenate([g["w_update"].value, g["w_reset"].value, g["w_cand"].value])
    b = np.concatenate([g["b_update"].value, g["b_reset"].value, g["b_cand"].value])
    Uur = np.concatenate([g["u_update"].value, g["u_reset"].value])
    return W, b, Uur, g["u_cand"].value


def _encode(X: np.ndarray, M: np.ndarray, params: ParamSet, keep: bool):
    """X: (T, B, d_n), M: (T, B, d_m), time-major. Returns h_T (B, d_h) and cache."""
    T, B, _ = X.shape
    if T == 0:
        raise EmptySequenceError("cannot encode an empty sequence")
    wn, bn = params["num.w"], params["num.b"]
    if X.shape[-1] != wn.shape[1]:
        raise DimensionError(f"numeric features: got {X.shape[-1]}, num.w expects {wn.shape[1]}")
    E = X @ wn.value.T + bn.value
    Z = np.concatenate([E, M], axis=-1)
    W, b, Uur, Uc = _fused_gru(params)
    if Z.shape[-1] != W.shape[1]:
        raise DimensionError(f"GRU input width {Z.shape[-1]} != {W.shape[1]} (check d_m)")
    d_h = Uc.shape[0]
    GX = Z @ W.T + b
    h = np.zeros((B, d_h), dtype=W.dtype)
    if keep:
        Hprev = np.empty((T, B, d_h), dtype=W.dtype)
        Us, Rs, Cs, RHs = (np.empty_like(Hprev) for _ in range(4))
    for t in range(T):
        gx = GX[t]
        gh = h @ Uur.T
        ur = nn.sigmoid(gx[:, :2 * d_h] + gh)
        u, r = ur[:, :d_h], ur[:, d_h:]
        rh = r * h
        c = np.tanh(gx[:, 2 * d_h:] + rh @ Uc.T)
        if keep:
            Hprev[t], Us[t], Rs[t], Cs[t], RHs[t] = h, u, r, c, rh
        h = h + u * (c - h)
    nn.check_finite(h, "gru hidden state")
    cache = _SeqCache(X, Z, Hprev, Us, Rs, Cs, RHs, W, Uur) if keep else None
    return h, cache


def _encode_backward(dh: np.ndarray, cache: _SeqCache, params: ParamSet) -> None:
    T, B, d_h = cache.Hprev.shape
    Uc = params["gru.u_cand"].value
    W, Uur = cache.W, cache.Uur
    dGX = np.empty((T, B, 3 * d_h), dtype=dh.dtype)
    for t in range(T - 1, -1, -1):
        h_prev, u, r, c = cache.Hprev[t], cache.U[t], cache.R[t], cache.C[t]
        da_c = dh * u * (1.0 - c * c)
        da_u = dh * (c - h_prev) * u * (1.0 - u)
        d_rh = da_c @ Uc
        da_r = d_rh * h_prev * r * (1.0 - r)
        dGX[t, :, :d_h] = da_u
        dGX[t, :, d_h:2 * d_h] = da_r
        dGX[t, :, 2 * d_h:] = da_c
        dh = dh * (1.0 - u) + d_rh * r + dGX[t, :, :2 * d_h] @ Uur
    flat = dGX.reshape(T * B, 3 * d_h)
    Hp = cache.Hprev.reshape(T * B, d_h)
    dUur = flat[:, :2 * d_h].T @ Hp
    dUc = flat[:, 2 * d_h:].T @ cache.RH.reshape(T * B, d_h)
    Zf = cache.Z.reshape(T * B, -1)
    dW = flat.T @ Zf
    db = flat.sum(axis=0)
    g = _gru(params)
    for i, gate in enumerate(nn.GRU_GATES):
        sl = slice(i * d_h, (i + 1) * d_h)
        g[f"w_{gate}"].grad += dW[sl]
        g[f"b_{gate}"].grad += db[sl]
    g["u_update"].grad += dUur[:d_h]
    g["u_reset"].grad += dUur[d_h:]
    g["u_cand"].grad += dUc
    d_e = params["num.w"].shape[0]
    dE = (flat @ W)[:, :d_e]
    params["num.w"].grad += dE.T @ cache.X.reshape(T * B, -1)
    params["num.b"].grad += dE.sum(axis=0)


def encode_sequence(x: np.ndarray, m: np.ndarray, params: ParamSet) -> np.ndarray:
    """Final GRU state for ``x`` of shape ``(T, d_n)`` or ``(B, T, d_n)``."""
    x = np.asarray(x, dtype=params["num.w"].value.dtype)
    m = np.asarray(m, dtype=x.dtype)
    if m.ndim == x.ndim - 1:
        m = m[..., None]
    if x.shape[-2] == 0:
        raise EmptySequenceError("cannot encode an empty sequence")
    if x.shape[:-1] != m.shape[:-1]:
        raise DimensionError(f"x shape {x.shape} and m shape {m.shape} disagree on steps")
    single = x.ndim == 2
    X = x[:, None, :] if single else x.transpose(1, 0, 2)
    M = m[:, None, :] if single else m.transpose(1, 0, 2)
    h, _ = _encode(X, M, params, keep=False)
    return h[0] if single else h


@dataclass
class _Cache:
    seq: _SeqCache
    C: np.ndarray
    Htil: np.ndarray
    A1: np.ndarray
    Z1: np.ndarray
    raw_log_var: np.ndarray


def _forward(params: ParamSet, config: ModelConfig, X, M, C, keep: bool):
    """Batched forward. X: (B, T, d_n), M: (B, T, d_m), C: (B, L)."""
    h, seq = _encode(X.transpose(1, 0, 2), M.transpose(1, 0, 2), params, keep)
    ec = embed_static(C, params, config)
    Htil = np.concatenate([h, ec], axis=-1)
    A1 = nn.linear(Htil, params["head.w1"], params["head.b1"])
    Z1 = nn.relu(A1)
    O = nn.linear(Z1, params["head.w2"], params["head.b2"])
    nn.check_finite(O, "prediction head output")
    H = config.horizon
    mu, raw = O[:, :H], O[:, H:]
    log_var = np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)
    cache = _Cache(seq, C, Htil, A1, Z1, raw) if keep else None
    return mu, log_var, cache


def _backward(params: ParamSet, config: ModelConfig, cache: _Cache, dmu, dlog_var) -> None:
    raw = cache.raw_log_var
    draw = dlog_var * ((raw > LOG_VAR_MIN) & (raw < LOG_VAR_MAX))
    dO = np.concatenate([dmu, draw], axis=-1)
    dZ1 = nn.linear_backward(dO, cache.Z1, params["head.w2"], params["head.b2"])
    dA1 = nn.relu_backward(dZ1, cache.A1)
    dHtil = nn.linear_backward(dA1, cache.Htil, params["head.w1"], params["head.b1"])
    d_h = config.d_h
    dEc = dHtil[:, d_h:]
    for l in range(config.n_categories):
        nn.embed_backward(dEc[:, l * config.d_e:(l + 1) * config.d_e],
                          params[embedding_name(config, l)], cache.C[:, l])
    _encode_backward(dHtil[:, :d_h], cache.seq, params)


def nll_terms(mu, log_var, y):
    """Per-instance Gaussian NLL and its gradients wrt mu and log_var."""
    H = y.shape[-1]
    inv = np.exp(-log_var)
    err = y - mu
    loss = (log_var + err * err * inv).sum(axis=-1) / (2.0 * H)
    dmu = -err * inv / H
    dlv = (1.0 - err * err * inv) / (2.0 * H)
    return loss, dmu, dlv


def nll_loss(pred: Prediction, y) -> float:
    y = np.asarray(y, dtype=float)
    if y.shape != pred.mu.shape:
        raise DimensionError(f"target shape {y.shape} != prediction shape {pred.mu.shape}")
    loss, _, _ = nll_terms(pred.mu, pred.log_var, y)
    return float(nn.check_finite(np.asarray(loss), "nll loss"))


def predict(inst: Instance, params: ParamSet, config: ModelConfig) -> Prediction:
    mu, lv = predict_arrays(params, config, inst.x[None], inst.m[None], np.asarray([inst.c]))
    return Prediction(mu[0], lv[0])


def predict_arrays(params: ParamSet, config: ModelConfig, X, M, C):
    dt = params["num.w"].value.dtype
    mu, lv, _ = _forward(params, config, np.asarray(X, dtype=dt), np.asarray(M, dtype=dt), np.asarray(C), keep=False)
    return mu, lv


def predict_many(instances: Sequence[Instance], params: ParamSet, config: ModelConfig, chunk: int = 512):
    """(mu, log_var) arrays of shape (n, H), in input order."""
    n = len(instances)
    H = config.horizon
    mu = np.empty((n, H))
    lv = np.empty((n, H))
    for T, idx in group_by_length(instances).items():
        for s in range(0, len(idx), chunk):
            sel = idx[s:s + chunk]
            X, M, C, _ = stack(instances, sel)
            mu[sel], lv[sel] = predict_arrays(params, config, X, M, C)
    return mu, lv


def group_by_length(instances: Sequence[Instance]) -> dict[int, np.ndarray]:
    lengths = np.fromiter((inst.length for inst in instances), dtype=int, count=len(instances))
    return {int(T): np.flatnonzero(lengths == T) for T in np.unique(lengths)}


def stack(instances: Sequence[Instance], idx) -> tuple[np.ndarray, ...]:
    sel = [instances[i] for i in idx]
    return (
        np.stack([i.x for i in sel]),
        np.stack([i.m for i in sel]),
        np.asarray([i.c for i in sel], dtype=int),
        np.stack([i.y for i in sel]),
    )


def loss_and_grad_arrays(params: ParamSet, config: ModelConfig, X, M, C, Y, scale: float = 1.0) -> float:
    """Accumulate ``scale * d(sum of per-instance NLL)`` into grads; return the scaled loss sum."""
    dt = params["num.w"].value.dtype
    X = np.asarray(X, dtype=dt)
    M = np.asarray(M, dtype=dt)
    Y = np.asarray(Y, dtype=dt)
    if Y.shape[-1] != config.horizon:
        raise DimensionError(f"targets have {Y.shape[-1]} horizons, model predicts {config.horizon}")
    mu, lv, cache = _forward(params, config, X, M, np.asarray(C), keep=True)
    loss, dmu, dlv = nll_terms(mu, lv, Y)
    total = float(loss.sum()) * scale
    nn.check_finite(np.asarray(total), "nll loss")
    _backward(params, config, cache, dmu * scale, dlv * scale)
    return total


def loss_and_grad(params: ParamSet, config: ModelConfig, instances: Sequence[Instance]) -> float:
    """Mean NLL over ``instances``; gradients of that mean are accumulated."""
    n = len(instances)
    total = 0.0
    for _, idx in group_by_length(instances).items():
        X, M, C, Y = stack(instances, idx)
        total += loss_and_grad_arrays(params, config, X, M, C, Y, scale=1.0 / n)
    return total


def mean_loss(params: ParamSet, config: ModelConfig, instances: Sequence[Instance]) -> float:
    mu, lv = predict_many(instances, params, config)
    Y = np.stack([i.y for i in instances])
    loss, _, _ = nll_terms(mu, lv, Y)
    return float(loss.mean())


def point_forecast(pred: Prediction) -> np.ndarray:
    return pred.mu.copy()


def sample_forecast(pred: Prediction, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Independent normal draws per horizon; ``size`` adds a leading sample axis."""
    shape = pred.mu.shape if size is None else (size,) + pred.mu.shape
    return rng.normal(pred.mu, np.exp(0.5 * pred.log_var), size=shape)
