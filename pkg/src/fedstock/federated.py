"""Training regimes: centralized, local-only, FedAvg and personalized FedAvg.

Every regime minimizes the mean Gaussian NLL with mini-batch SGD (or Adam,
with optimizer state kept per client). Shuffling is seeded per (master
seed, client id, round), so results do not depend on the order or the
thread in which clients run.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as gm
from . import nn
from .errors import ArgumentError, ConfigError, NumericError, ProtocolError, TrainingDivergence
from .model import Instance, ModelConfig
from .nn import ParamSet, Part

log = logging.getLogger(__name__)

_STREAM_INIT = 11
_STREAM_SHUFFLE = 12

CENTRAL_ID = 0


class Policy(str, Enum):
    SIZE = "size"
    SQRT = "sqrt"


class Regime(str, Enum):
    CENTRALIZED = "centralized"
    LOCAL_ONLY = "local"
    FL = "fl"
    PFL = "pfl"
    PFL_FINETUNE = "pfl-finetune"


@dataclass
class FederationConfig:
    rounds: int = 30
    local_epochs: int = 2
    learning_rate: float = 0.01
    policy: Policy = Policy.SIZE
    regime: Regime = Regime.FL
    seed: int = 0
    batch_size: int = 1
    finetune_epochs: int = 2
    clip_norm: float | None = None
    threads: int = 1
    optimizer: str = "sgd"
    lr_decay: float = 1.0

    def __post_init__(self):
        self.policy = Policy(self.policy)
        self.regime = Regime(self.regime)
        if int(self.rounds) < 1:
            raise ConfigError("rounds must be >= 1", path="training.rounds")
        if int(self.local_epochs) < 1:
            raise ConfigError("local_epochs must be >= 1", path="training.local_epochs")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", path="training.learning_rate")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1", path="training.batch_size")
        if int(self.finetune_epochs) < 0:
            raise ConfigError("finetune_epochs must be >= 0", path="training.finetune_epochs")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0 when set", path="training.clip_norm")
        if int(self.threads) < 1:
            raise ConfigError("threads must be >= 1", path="training.threads")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", path="training.optimizer")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]", path="training.lr_decay")

    def make_optimizer(self):
        return nn.make_optimizer(self.optimizer, self.learning_rate)

    def round_lr(self, round_index: int) -> float:
        """Learning rate for a 1-based round: geometric decay per round."""
        return self.learning_rate * self.lr_decay ** (round_index - 1)


@dataclass
class ClientState:
    client_id: int
    farm_id: str
    train_data: list[Instance]
    private_head: ParamSet | None = None
    validation: list[Instance] = field(default_factory=list)
    optimizer: nn.SGD | nn.Adam | None = None

    def __post_init__(self):
        if len(self.train_data) < 1:
            raise ArgumentError(f"client {self.farm_id} has no training data")

    @property
    def n(self) -> int:
        return len(self.train_data)


def compute_weights(policy: Policy | str, sizes: Sequence[float]) -> list[float]:
    if len(sizes) == 0:
        raise ArgumentError("compute_weights needs at least one client size")
    n = np.asarray(sizes, dtype=float)
    if np.any(n < 1):
        raise ArgumentError(f"client sizes must be >= 1, got {list(sizes)}")
    raw = n if Policy(policy) is Policy.SIZE else np.sqrt(n)
    return list(raw / raw.sum())


def aggregate(policy: Policy | str, client_params: Sequence[ParamSet], sizes: Sequence[float],
              client_ids: Sequence[int] | None = None, part: Part | None = None) -> ParamSet:
    """Weighted average of parameter sets, summed in ascending client id order.

    With ``part`` given, only tensors tagged with that part are read. A tensor
    that every client uploads bit-identically is returned as is, since the
    rounded weighted sum need not reproduce it exactly.
    """
    if not client_params:
        raise ArgumentError("nothing to aggregate")
    ids = list(range(len(client_params))) if client_ids is None else list(client_ids)
    weights = compute_weights(policy, sizes)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    views = [ps if part is None else ps.select(part) for ps in client_params]
    ref = views[order[0]]
    for i in order[1:]:
        v = views[i]
        if v.names() != ref.names():
            missing = sorted(set(ref.names()) ^ set(v.names()))
            raise ProtocolError(f"client {ids[i]}: parameter paths differ: {missing[:3]}")
        for p in v:
            if p.shape != ref[p.name].shape:
                raise ProtocolError(f"client {ids[i]}: {p.name} has shape {p.shape}, expected {ref[p.name].shape}")
    out = ParamSet()
    for name in ref.names():
        anchor = ref[name].value
        if all(views[i][name].value.tobytes() == anchor.tobytes() for i in order[1:]):
            out.add(nn.ParamTensor(name, anchor.copy()), ref.part(name))
            continue
        acc = np.zeros_like(anchor)
        for i in order:
            acc += weights[i] * views[i][name].value
        out.add(nn.ParamTensor(name, acc), ref.part(name))
    return out


class _Packed:
    """Instances stacked per sequence length for fast mini-batch slicing."""

    def __init__(self, instances: Sequence[Instance]):
        self.n = len(instances)
        self.lengths = np.fromiter((i.length for i in instances), dtype=int, count=self.n)
        self.groups = {}
        self.row = np.empty(self.n, dtype=int)
        for T, idx in gm.group_by_length(instances).items():
            self.groups[T] = gm.stack(instances, idx)
            self.row[idx] = np.arange(len(idx))

    def batch(self, idx: np.ndarray):
        lens = self.lengths[idx]
        for T in np.unique(lens):
            rows = self.row[idx[lens == T]]
            X, M, C, Y = self.groups[int(T)]
            yield X[rows], M[rows], C[rows], Y[rows]


def shuffle_rng(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng((int(seed), _STREAM_SHUFFLE, int(client_id), int(round_index)))


def train_epochs(params: ParamSet, model_config: ModelConfig, data: _Packed, epochs: int, lr,
                 rng: np.random.Generator, batch_size: int = 1, clip_norm: float | None = None,
                 client_id=None, round_index: int | None = None) -> list[float]:
    """In-place training over ``epochs`` shuffled passes; returns the mean step loss per epoch.

    ``lr`` is either a learning rate for plain SGD or an optimizer object.
    """
    opt = nn.SGD(lr) if isinstance(lr, (int, float)) else lr
    trace = []
    for e in range(1, epochs + 1):
        perm = rng.permutation(data.n)
        total = 0.0
        for s in range(0, data.n, batch_size):
            idx = perm[s:s + batch_size]
            scale = 1.0 / len(idx)
            try:
                loss = sum(gm.loss_and_grad_arrays(params, model_config, X, M, C, Y, scale)
                           for X, M, C, Y in data.batch(idx))
            except NumericError as exc:
                raise TrainingDivergence(client_id, e, round_index) from exc
            g = nn.flat_grads(params)
            if not np.isfinite(loss) or not np.isfinite(g).all():
                raise TrainingDivergence(client_id, e, round_index)
            if clip_norm is not None:
                norm = float(np.sqrt(g @ g))
                if norm > clip_norm:
                    g *= clip_norm / norm
                    for p in params:
                        p.grad *= clip_norm / norm
            opt.step(params, g)
            total += loss * len(idx)
        trace.append(total / data.n)
    return trace


def local_train(client: ClientState, body_params: ParamSet, head_params: ParamSet | None, epochs: int,
                lr: float, model_config: ModelConfig, seed: int = 0, round_index: int = 1,
                batch_size: int = 1, clip_norm: float | None = None, packed: _Packed | None = None):
    """Train copies of (body, head) on the client's data.

    Returns ``(body, head, trace)``; ``head`` is None when ``head_params``
    is None, in which case ``body_params`` must hold the full model. The
    inputs are never modified. A client carrying its own optimizer state
    (``client.optimizer``) uses it instead of plain SGD at ``lr``.
    """
    params = body_params.copy() if head_params is None else body_params.merged(head_params)
    params.zero_grad()
    packed = packed or _Packed(client.train_data)
    opt = client.optimizer if client.optimizer is not None else lr
    trace = train_epochs(params, model_config, packed, epochs, opt, shuffle_rng(seed, client.client_id, round_index),
                         batch_size, clip_norm, client.farm_id, round_index)
    if head_params is None:
        return params, None, trace
    return params.select(Part.BODY), params.select(Part.HEAD), trace


class Server:
    """Holds the global state and audits every structure passing through it."""

    def __init__(self, state: ParamSet, policy: Policy, allow_head: bool = True,
                 audit: Callable[[int, str, list[str]], None] | None = None):
        self.policy = Policy(policy)
        self.allow_head = allow_head
        self.audit_hook = audit
        self.audit_log: list[tuple[int, str, tuple[str, ...]]] = []
        self.round = 0
        self._inspect("init", state)
        self.state = state.copy()

    def _inspect(self, event: str, ps: ParamSet) -> None:
        names = ps.names()
        self.audit_log.append((self.round, event, tuple(names)))
        if self.audit_hook is not None:
            self.audit_hook(self.round, event, names)
        if not self.allow_head:
            leaked = [n for n in names if ps.part(n) is Part.HEAD]
            if leaked:
                raise ProtocolError(f"server received head parameters {leaked}")

    def broadcast(self) -> ParamSet:
        return self.state.copy()

    def aggregate(self, uploads: Mapping[int, ParamSet], sizes: Mapping[int, int]) -> list[float]:
        ids = sorted(uploads)
        for cid in ids:
            self._inspect(f"upload:{cid}", uploads[cid])
        new = aggregate(self.policy, [uploads[c] for c in ids], [sizes[c] for c in ids], ids)
        self._inspect("aggregate", new)
        self.state = new
        return compute_weights(self.policy, [sizes[c] for c in ids])

    def head_tensors_seen(self) -> int:
        heads = 0
        for _, _, names in self.audit_log:
            heads += sum(1 for n in names if n.startswith("head."))
        return heads


@dataclass
class TrainResult:
    regime: Regime
    policy: Policy
    rounds: list[dict]
    global_params: ParamSet | None = None
    body: ParamSet | None = None
    heads: dict[str, ParamSet] = field(default_factory=dict)
    per_client: dict[str, ParamSet] = field(default_factory=dict)
    server: Server | None = None

    def model_for(self, farm_id: str) -> ParamSet:
        if self.per_client:
            return self.per_client[farm_id]
        if self.body is not None:
            return self.body.merged(self.heads[farm_id])
        return self.global_params


def initial_params(model_config: ModelConfig, seed: int, client_id: int | None = None) -> ParamSet:
    key = (int(seed), _STREAM_INIT) if client_id is None else (int(seed), _STREAM_INIT, int(client_id) + 1)
    return gm.init_params(model_config, np.random.default_rng(key))


def _check_clients(clients: Sequence[ClientState]) -> list[ClientState]:
    if not clients:
        raise ArgumentError("at least one client is required")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ArgumentError("client ids must be unique")
    return sorted(clients, key=lambda c: c.client_id)


def _validation_metrics(params_for: Callable[[ClientState], ParamSet], clients, model_config) -> dict | None:
    pairs = [(c, c.validation) for c in clients if c.validation]
    if not pairs:
        return None
    losses, sq, n = [], 0.0, 0
    for c, val in pairs:
        ps = params_for(c)
        mu, lv = gm.predict_many(val, ps, model_config)
        Y = np.stack([i.y for i in val])
        losses.append(gm.nll_terms(mu, lv, Y)[0])
        sq += float(np.sum((mu - Y) ** 2))
        n += Y.size
    return {"val_nll": float(np.concatenate(losses).mean()), "val_rmse_norm": float(np.sqrt(sq / n))}


def _map_clients(fn, clients, threads: int):
    if threads <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, clients))


def _federate(config: FederationConfig, clients: Sequence[ClientState], model_config: ModelConfig,
              personalized: bool, init: ParamSet | None, audit=None) -> TrainResult:
    clients = _check_clients(clients)
    full = init.copy() if init is not None else initial_params(model_config, config.seed)
    server_state = full.select(Part.BODY) if personalized else full
    server = Server(server_state, config.policy, allow_head=not personalized, audit=audit)
    heads = {c.client_id: full.select(Part.HEAD).copy() for c in clients} if personalized else {}
    packed = {c.client_id: _Packed(c.train_data) for c in clients}
    for c in clients:
        c.optimizer = config.make_optimizer()
    reports = []
    for r in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        server.round = r
        broadcast = server.broadcast()

        def work(c: ClientState):
            c.optimizer.lr = config.round_lr(r)
            try:
                return c.client_id, local_train(
                    c, broadcast, heads.get(c.client_id), config.local_epochs, config.learning_rate, model_config,
                    config.seed, r, config.batch_size, config.clip_norm, packed[c.client_id])
            except TrainingDivergence as exc:
                return c.client_id, exc

        results = dict(_map_clients(work, clients, config.threads))
        uploads, losses, excluded = {}, {}, []
        for c in clients:
            res = results[c.client_id]
            if isinstance(res, TrainingDivergence):
                log.warning("round %d: %s excluded (%s)", r, c.farm_id, res)
                excluded.append(c.farm_id)
                continue
            body, head, trace = res
            if personalized:
                heads[c.client_id] = head
            uploads[c.client_id] = body
            losses[c.farm_id] = trace[-1]
        if not uploads:
            first = next(iter(results.values()))
            raise first
        sizes = {c.client_id: c.n for c in clients}
        weights = server.aggregate(uploads, {cid: sizes[cid] for cid in uploads})
        by_id = {c.client_id: c for c in clients}
        report = {
            "round": r,
            "weights": {by_id[cid].farm_id: w for cid, w in zip(sorted(uploads), weights)},
            "client_loss": losses,
            "mean_client_loss": float(np.mean(list(losses.values()))),
            "excluded": excluded,
        }
        val = _validation_metrics(
            (lambda c: server.state.merged(heads[c.client_id])) if personalized else (lambda c: server.state),
            clients, model_config)
        if val:
            report.update(val)
        report["wall_time_s"] = time.perf_counter() - t0
        reports.append(report)
        log.info("round %d/%d mean client loss %.5f", r, config.rounds, report["mean_client_loss"])
    for c in clients:
        if personalized:
            c.private_head = heads[c.client_id]
    regime = Regime.PFL if personalized else Regime.FL
    if personalized:
        return TrainResult(regime, config.policy, reports, body=server.state.copy(),
                           heads={c.farm_id: heads[c.client_id] for c in clients}, server=server)
    return TrainResult(regime, config.policy, reports, global_params=server.state.copy(), server=server)


def run_fl(config: FederationConfig, clients: Sequence[ClientState], model_config: ModelConfig,
           init: ParamSet | None = None, audit=None) -> TrainResult:
    return _federate(config, clients, model_config, personalized=False, init=init, audit=audit)


def run_pfl(config: FederationConfig, clients: Sequence[ClientState], model_config: ModelConfig,
            init: ParamSet | None = None, audit=None) -> TrainResult:
    return _federate(config, clients, model_config, personalized=True, init=init, audit=audit)


def run_pfl_finetune(config: FederationConfig, clients: Sequence[ClientState], model_config: ModelConfig,
                     init: ParamSet | None = None) -> TrainResult:
    """FedAvg to completion, then ``finetune_epochs`` local epochs of the full model per client."""
    return finetune(config, clients, model_config, run_fl(config, clients, model_config, init=init))


def finetune(config: FederationConfig, clients: Sequence[ClientState], model_config: ModelConfig,
             fl: TrainResult) -> TrainResult:
    """Personalize a finished FedAvg run by training a copy of its global model on each client."""
    per_client, rounds = {}, list(fl.rounds)
    for c in _check_clients(clients):
        c.optimizer = config.make_optimizer()
        c.optimizer.lr = config.round_lr(config.rounds + 1)
        if config.finetune_epochs == 0:
            per_client[c.farm_id] = fl.global_params.copy()
            continue
        params, _, trace = local_train(c, fl.global_params, None, config.finetune_epochs, config.learning_rate,
                                       model_config, config.seed, config.rounds + 1, config.batch_size,
                                       config.clip_norm)
        per_client[c.farm_id] = params
        rounds.append({"round": config.rounds + 1, "finetune": c.farm_id, "client_loss": trace[-1]})
    return TrainResult(Regime.PFL_FINETUNE, config.policy, rounds, global_params=fl.global_params,
                       per_client=per_client, server=fl.server)


def run_centralized(config: FederationConfig, all_instances: Sequence[Instance], model_config: ModelConfig,
                    init: ParamSet | None = None) -> TrainResult:
    """Pooled SGD for rounds * local_epochs epochs; epoch block r reuses client 0's shuffle stream."""
    if not all_instances:
        raise ArgumentError("no training instances")
    params = init.copy() if init is not None else initial_params(model_config, config.seed)
    params.zero_grad()
    packed = _Packed(all_instances)
    opt = config.make_optimizer()
    reports = []
    for r in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        opt.lr = config.round_lr(r)
        trace = train_epochs(params, model_config, packed, config.local_epochs, opt,
                             shuffle_rng(config.seed, CENTRAL_ID, r), config.batch_size, config.clip_norm,
                             "centralized", r)
        reports.append({"round": r, "epoch_loss": trace, "wall_time_s": time.perf_counter() - t0})
    return TrainResult(Regime.CENTRALIZED, config.policy, reports, global_params=params)


def run_local_only(config: FederationConfig, clients: Sequence[ClientState], model_config: ModelConfig) -> TrainResult:
    """Each client trains its own model; a diverging client keeps its last finite parameters."""
    clients = _check_clients(clients)

    def work(c: ClientState):
        params = initial_params(model_config, config.seed, c.client_id)
        packed = _Packed(c.train_data)
        opt = config.make_optimizer()
        rows = []
        for r in range(1, config.rounds + 1):
            trial = params.copy()
            opt.lr = config.round_lr(r)
            try:
                trace = train_epochs(trial, model_config, packed, config.local_epochs, opt,
                                     shuffle_rng(config.seed, c.client_id, r), config.batch_size, config.clip_norm,
                                     c.farm_id, r)
            except TrainingDivergence as exc:
                log.warning("local client %s diverged: %s", c.farm_id, exc)
                rows.append({"round": r, "diverged": str(exc)})
                break
            params = trial
            rows.append({"round": r, "epoch_loss": trace})
        return c.farm_id, params, rows

    results = _map_clients(work, clients, config.threads)
    per_client = {fid: ps for fid, ps, _ in results}
    reports = [{"client": fid, **row} for fid, _, rows in results for row in rows]
    return TrainResult(Regime.LOCAL_ONLY, config.policy, reports, per_client=per_client)


def train(config: FederationConfig, clients: Sequence[ClientState], model_config: ModelConfig) -> TrainResult:
    """Dispatch on ``config.regime``."""
    if config.regime is Regime.CENTRALIZED:
        pooled = [i for c in _check_clients(clients) for i in c.train_data]
        return run_centralized(config, pooled, model_config)
    if config.regime is Regime.LOCAL_ONLY:
        return run_local_only(config, clients, model_config)
    if config.regime is Regime.FL:
        return run_fl(config, clients, model_config)
    if config.regime is Regime.PFL:
        return run_pfl(config, clients, model_config)
    return run_pfl_finetune(config, clients, model_config)
