"""Round orchestration for PRFL and the FedAvg / Local baselines.

Clients and server only exchange encoded :class:`CompressedUpdate` bytes.
The server keeps two models: ``global_student`` (the aggregate) and
``broadcast`` (what clients reconstruct from the downlink message). Each
round the aggregate is ``broadcast + weighted mean of client deltas``.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import datakit
from .config import ExperimentConfig
from .dpd import (
    CompressedUpdate,
    DpdConfig,
    LikelihoodEvaluator,
    compress_update,
    decode,
    decompress_update,
    encode,
)
from .errors import ConfigurationError, DecodeError, DivergenceError, EmptyClientError, PRFLError, ProtocolError
from .nncore import ModelParams, ModelSpec, accuracy, build_model
from .synkd import WIRE_MAX, ClientState, LossBundle, SynKDConfig, init_aux, local_update, plain_update

log = logging.getLogger(__name__)

RAW = DpdConfig(mode="full")


@dataclass
class ServerState:
    global_student: ModelParams
    broadcast: ModelParams
    round_index: int = 0
    rng: Optional[np.random.Generator] = None


@dataclass
class RoundReport:
    round: int
    participants: list[int]
    accuracy: dict[int, float]
    losses: dict[int, LossBundle]
    uploaded_floats: int
    full_floats: int
    downlink_floats: int = 0
    dropped: dict[int, str] = field(default_factory=dict)
    wall_ms: float = 0.0
    uploads: dict[int, tuple[int, int]] = field(default_factory=dict)
    val_accuracy: dict[int, float] = field(default_factory=dict)

    @property
    def compression_ratio(self) -> float:
        return self.uploaded_floats / self.full_floats if self.full_floats else float("nan")

    @property
    def mean_accuracy(self) -> float:
        return _nanmean(self.accuracy.values())

    @property
    def mean_val_accuracy(self) -> float:
        return _nanmean(self.val_accuracy.values())


def _nanmean(values) -> float:
    vals = [a for a in values if not np.isnan(a)]
    return float(np.mean(vals)) if vals else float("nan")


def sample_clients(n: int, ratio: float, rng: np.random.Generator) -> list[int]:
    if not 0 < ratio <= 1:
        raise ConfigurationError(f"participation ratio must lie in (0, 1], got {ratio}", key="participation_ratio")
    if n < 1:
        raise ConfigurationError("need at least one client", key="clients")
    k = max(1, int(round(ratio * n)))
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def apply_dp_noise(delta: dict[str, np.ndarray], tau: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if tau == 0:
        return {k: v.copy() for k, v in delta.items()}
    return {k: v + rng.normal(0.0, tau, size=v.shape) for k, v in delta.items()}


def aggregate(updates) -> dict[str, np.ndarray]:
    """Sample-weighted mean of ``(client_id, delta, n_k)`` triples.

    Summation runs in ascending client id, so input order does not matter.
    """
    updates = sorted(updates, key=lambda u: u[0])
    if not updates:
        raise ProtocolError("cannot aggregate an empty set of updates")
    total = float(sum(n for _, _, n in updates))
    if total <= 0:
        raise ProtocolError("aggregate needs a positive total sample count")
    keys = list(updates[0][1])
    out = {}
    for key in keys:
        acc = np.zeros_like(updates[0][1][key])
        for _, delta, n in updates:
            if delta[key].shape != acc.shape:
                raise ProtocolError(f"shape mismatch for {key}")
            acc = acc + (n / total) * delta[key]
        out[key] = acc
    return out


# --- server side: only bytes / CompressedUpdate cross into these functions ---


def server_receive(messages: dict[int, bytes]):
    """Decode and reconstruct client messages, dropping undecodable ones."""
    received, dropped = {}, {}
    for cid in sorted(messages):
        try:
            msg: CompressedUpdate = decode(messages[cid])
            received[cid] = (decompress_update(msg), msg.sample_count)
        except (DecodeError, PRFLError) as exc:
            dropped[cid] = f"{type(exc).__name__}: {exc}"
    return received, dropped


def server_apply(server: ServerState, received: dict) -> None:
    if not received:
        return
    agg = aggregate([(cid, d, n) for cid, (d, n) in received.items()])
    server.global_student = server.broadcast.add(agg)


def server_downlink(server: ServerState, dpd_cfg: DpdConfig, compress: bool) -> tuple[bytes, int]:
    """Encode the change clients need to reach the current aggregate."""
    change = server.global_student.sub(server.broadcast)
    if compress and dpd_cfg.mode != "full":
        # No data lives on the server, so the likelihood window is unavailable.
        cfg = DpdConfig(alpha=dpd_cfg.alpha, min_compress_elems=dpd_cfg.min_compress_elems, mode="variance_only")
    else:
        cfg = RAW
    msg = compress_update(change, cfg, client_id=0xFFFFFFFF, sample_count=0)
    return encode(msg), msg.uploaded_float_count


def client_apply_downlink(base: ModelParams, payload: bytes) -> ModelParams:
    return base.add(decompress_update(decode(payload)))


# --- experiment -----------------------------------------------------------


@dataclass
class Simulation:
    cfg: ExperimentConfig
    dataset: datakit.Dataset
    spec: ModelSpec
    server: ServerState
    clients: list[ClientState]
    partition: datakit.PartitionSpec


def _seq(seed, *words) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(w) for w in words]])


def build_dataset(cfg: ExperimentConfig) -> datakit.Dataset:
    d = cfg.dataset
    if d.kind == "file":
        return datakit.load_dataset(d.path)
    return datakit.gen_synthetic(d.num_classes, d.dims, d.n_per_class, d.spread,
                                 _seq(cfg.seed, 1), separation=d.separation)


def build_partition(cfg: ExperimentConfig, ds: datakit.Dataset) -> datakit.PartitionSpec:
    rng = _seq(cfg.seed, 2)
    p = cfg.partition
    if p.kind == "pathological":
        return datakit.partition_pathological(ds, cfg.clients, rng, p.classes_per_client)
    return datakit.partition_dirichlet(ds, cfg.clients, p.lam, rng)


def setup(cfg: ExperimentConfig) -> Simulation:
    ds = build_dataset(cfg)
    m = cfg.model
    spec = ModelSpec(m.kind, ds.sample_dims, ds.num_classes, m.hidden_width, m.channels)
    part = build_partition(cfg, ds)
    init = build_model(spec, _seq(cfg.seed, 3))
    server = ServerState(init.copy(), init.copy(), 0, _seq(cfg.seed, 4))
    clients = []
    for k in range(cfg.clients):
        tr, va, te = part.splits[k]
        student = init.copy()
        clients.append(ClientState(
            client_id=k, teacher=student.copy(), student=student,
            w_aux=init_aux(spec.hidden_dim, _seq(cfg.seed, 6, k)),
            features=ds.features, labels=ds.labels,
            train_idx=tr, val_idx=va, test_idx=te, rng=_seq(cfg.seed, 7, k),
        ))
    return Simulation(cfg, ds, spec, server, clients, part)


def _threads() -> int:
    n = int(os.environ.get("PRFL_THREADS", "1") or 1)
    return (os.cpu_count() or 1) if n == 0 else max(1, n)


def _client_round(sim: Simulation, state: ClientState, base: ModelParams, rnd: int):
    """Run one client's local phase; returns (message bytes or None, losses, dropped reason)."""
    cfg = sim.cfg
    try:
        if cfg.strategy == "prfl":
            res = local_update(state, base, cfg.local_steps, cfg.lr, cfg.batch_size,
                               SynKDConfig(cfg.aux_matrix, cfg.latent_loss))
        else:
            start = state.student if cfg.strategy == "local" else base
            res = plain_update(state, start, cfg.local_steps, cfg.lr, cfg.batch_size)
    except (EmptyClientError, DivergenceError) as exc:
        return None, None, str(exc)
    if cfg.strategy == "local":
        return None, res.final_losses, None
    delta = apply_dp_noise(res.delta, cfg.dp_tau, state.rng)
    if not all(np.all(np.abs(v) <= WIRE_MAX) for v in delta.values()):
        return None, None, f"client {state.client_id}: update does not fit in float32"
    if cfg.strategy == "fedavg":
        msg = compress_update(delta, RAW, client_id=state.client_id, sample_count=res.sample_count)
        return encode(msg), res.final_losses, None
    evaluator = None
    if cfg.dpd.mode == "aic_variance":
        x, y = state.split("train")
        rng = _seq(cfg.seed, 8, rnd, state.client_id)
        take = np.sort(rng.choice(len(y), size=min(cfg.dpd.calib_size, len(y)), replace=False))
        evaluator = LikelihoodEvaluator(base, x[take], y[take])
    try:
        msg = compress_update(delta, cfg.dpd, evaluator, state.client_id, res.sample_count)
    except PRFLError as exc:
        log.warning("client %d: compression failed (%s), sending raw", state.client_id, exc)
        msg = compress_update(delta, RAW, client_id=state.client_id, sample_count=res.sample_count)
    return encode(msg), res.final_losses, None


def evaluate(sim: Simulation, split: str = "test") -> dict[int, float]:
    out = {}
    for c in sim.clients:
        x, y = c.split(split)
        out[c.client_id] = accuracy(c.student, x, y)
    return out


def run_round(sim: Simulation) -> RoundReport:
    t0 = time.perf_counter()
    cfg, server = sim.cfg, sim.server
    server.round_index += 1
    rnd = server.round_index
    ids = sample_clients(cfg.clients, cfg.participation_ratio, server.rng)
    base = server.broadcast

    def work(cid):
        return cid, _client_round(sim, sim.clients[cid], base, rnd)

    n_threads = min(_threads(), len(ids))
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(work, ids))
    else:
        results = [work(cid) for cid in ids]

    messages, losses, dropped = {}, {}, {}
    for cid, (msg, bundle, reason) in sorted(results, key=lambda r: r[0]):
        if reason is not None:
            dropped[cid] = reason
            continue
        losses[cid] = bundle
        if msg is not None:
            messages[cid] = msg

    uploads = {}
    down = 0
    if cfg.strategy != "local":
        received, bad = server_receive(messages)
        dropped.update(bad)
        for cid in received:
            u = decode(messages[cid])
            uploads[cid] = (u.uploaded_float_count, u.full_float_count)
        server_apply(server, received)
        payload, down = server_downlink(server, cfg.dpd, cfg.downlink_compress and cfg.strategy == "prfl")
        server.broadcast = client_apply_downlink(server.broadcast, payload)

    uploaded = sum(u for u, _ in uploads.values())
    full = sum(f for _, f in uploads.values())
    return RoundReport(rnd, ids, evaluate(sim), losses, uploaded, full, down, dropped,
                       (time.perf_counter() - t0) * 1000.0, uploads, evaluate(sim, "val"))


def run_experiment(cfg: ExperimentConfig, on_round: Optional[Callable[[RoundReport], None]] = None):
    """Build everything from ``cfg.seed`` and run ``cfg.rounds`` rounds.

    Round 0 is the evaluation of the initial models. Returns the list of
    reports and a summary dict.
    """
    t0 = time.perf_counter()
    sim = setup(cfg)
    reports = [RoundReport(0, [], evaluate(sim), {}, 0, 0, 0, {}, (time.perf_counter() - t0) * 1000.0,
                           {}, evaluate(sim, "val"))]
    if on_round:
        on_round(reports[0])
    for _ in range(cfg.rounds):
        rep = run_round(sim)
        reports.append(rep)
        if on_round:
            on_round(rep)
    up = sum(r.uploaded_floats for r in reports)
    full = sum(r.full_floats for r in reports)
    summary = {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final_mean_accuracy": reports[-1].mean_accuracy,
        "uploaded_floats": up,
        "full_floats": full,
        "compression_ratio": up / full if full else None,
    }
    return reports, summary
