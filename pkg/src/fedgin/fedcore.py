"""Federated training: local epochs with on-the-fly augmentation and FedAvg."""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .augment import METHODS, FourierMixConfig, GinConfig, augment_batch
from .model import LossConfig, UNetConfig, copy_params, focal_dice_loss, init_params, trainable_names, unet_forward
from .optim import AdamWState, PlateauState, adamw_step, plateau_scheduler_step
from .transport import InProcessTransport, RoundUpdate

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, round_index: int = -1, batch: int = -1, client_id: int = -1):
        self.round, self.batch, self.client_id = round_index, batch, client_id
        super().__init__(f"{message} (round {round_index}, batch {batch}, client {client_id})")


class SchemaError(ValueError):
    pass


@dataclass
class FederationConfig:
    rounds: int = 100
    local_epochs: int = 1
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    augmentation: str = "none"
    seed: int = 0
    eval_every: int = 1
    failure_policy: str = "abort"  # abort | drop
    threads: int = 1
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    scheduler_min_delta: float = 1e-4
    unet: UNetConfig = field(default_factory=UNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    gin: GinConfig = field(default_factory=GinConfig)
    fourier: FourierMixConfig = field(default_factory=FourierMixConfig)

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError(f"need rounds >= 1 and local_epochs >= 1, got T={self.rounds} E={self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.augmentation not in METHODS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}; expected one of {METHODS}")
        if self.failure_policy not in ("abort", "drop"):
            raise ValueError(f"failure_policy must be 'abort' or 'drop', got {self.failure_policy!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class ClientState:
    client_id: int
    samples: list  # SliceSample
    modality: str
    domain: int = 0
    augmentation: str | None = None  # overrides the federation-wide method
    seed: int | None = None
    params: dict | None = None
    optimizer: AdamWState | None = None
    scheduler: PlateauState | None = None
    rng: np.random.Generator | None = None
    last_loss: float | None = None

    def __post_init__(self):
        if not self.samples:
            raise ValueError(f"client {self.client_id} has no samples")

    @property
    def n_samples(self) -> int:
        return len(self.samples)


def _stack(samples):
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]))


def _batches(client: ClientState, batch_size: int, by_domain: bool, domain_of) -> list:
    """Shuffled mini-batches of sample indices; domain-pure when ``by_domain``."""
    rng = client.rng
    n = client.n_samples
    if not by_domain:
        perm = rng.permutation(n)
        return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    groups: dict = {}
    for i, s in enumerate(client.samples):
        groups.setdefault(domain_of(s), []).append(i)
    chunks = []
    for d in sorted(groups):
        idx = np.asarray(groups[d])[rng.permutation(len(groups[d]))]
        chunks += [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    return [chunks[j] for j in rng.permutation(len(chunks))]


def prepare_client(client: ClientState, config: FederationConfig) -> ClientState:
    if client.rng is None:
        seed = client.client_id if client.seed is None else client.seed
        client.rng = np.random.default_rng([config.seed, seed, 7])
    if client.optimizer is None:
        client.optimizer = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    if client.scheduler is None:
        client.scheduler = PlateauState(lr=config.lr, factor=config.scheduler_factor,
                                        patience=config.scheduler_patience, min_delta=config.scheduler_min_delta,
                                        min_lr=config.lr * 1e-3)
    return client


def train_step(params, images, masks, config: FederationConfig, optimizer: AdamWState, domain: int | None) -> float:
    leaves: dict = {}
    logits = unet_forward(params, images, config.unet, domain=domain, train_mode=True, leaves=leaves)
    loss = focal_dice_loss(logits, masks, config.loss)
    value = loss.item()
    if not math.isfinite(value):
        return value
    T.backward(loss)
    adamw_step(optimizer, params, {name: leaves[name].grad for name in trainable_names(params) if name in leaves})
    return value


def local_train(client: ClientState, global_params, config: FederationConfig, round_index: int = 0,
                domain_of=None) -> RoundUpdate:
    """Start from ``global_params`` and run ``config.local_epochs`` epochs on the client's data.

    Each mini-batch is augmented afresh; the loss uses the augmented images
    with the untouched masks.
    """
    prepare_client(client, config)
    params = copy_params(global_params)
    if client.params is not None and list(client.params) != list(params):
        raise SchemaError(f"client {client.client_id}: parameter schema differs from the global model")
    method = client.augmentation or config.augmentation
    dsbn = config.unet.norm_mode == "dsbn"
    domain_of = domain_of or (lambda s: client.domain)
    pool = None
    if method == "fourier":
        pool = np.stack([s.image for s in client.samples])
    for _epoch in range(config.local_epochs):
        losses = []
        for b, idx in enumerate(_batches(client, config.batch_size, dsbn, domain_of)):
            batch = [client.samples[i] for i in idx]
            images, masks = _stack(batch)
            images = augment_batch(images, method, client.rng, config.gin, config.fourier, pool)
            domain = domain_of(batch[0]) if dsbn else None
            value = train_step(params, images, masks, config, client.optimizer, domain)
            if not math.isfinite(value):
                raise TrainingError("non-finite loss", round_index, b, client.client_id)
            losses.append(value)
        client.optimizer.lr = plateau_scheduler_step(client.scheduler, float(np.mean(losses)))
        client.last_loss = float(np.mean(losses))
    client.params = params
    return RoundUpdate(client.client_id, round_index, params, client.n_samples)


def fedavg_aggregate(updates) -> "OrderedDict[str, np.ndarray]":
    """Sample-weighted mean of client parameters, summed in ascending client-id order."""
    if not updates:
        raise ValueError("fedavg_aggregate needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ref = ordered[0].params
    for u in ordered[1:]:
        names = list(u.params)
        if names != list(ref):
            for a, b in zip(list(ref) + [None] * len(names), names + [None] * len(ref)):
                if a != b:
                    raise SchemaError(f"client {u.client_id}: parameter name mismatch at {a!r} vs {b!r}")
        for name in ref:
            if u.params[name].shape != ref[name].shape:
                raise SchemaError(f"client {u.client_id}: shape mismatch for {name!r}: "
                                  f"{u.params[name].shape} vs {ref[name].shape}")
    total = sum(u.n_samples for u in ordered)
    if total <= 0:
        raise ValueError("total sample count must be positive")
    weights = [Fraction(u.n_samples, total) for u in ordered]
    assert sum(weights) == 1
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name in ref:
        acc = np.zeros(ref[name].shape, dtype=np.float64)
        for u, w in zip(ordered, weights):
            acc += float(w) * u.params[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return out


# ---------------------------------------------------------------------------


@dataclass
class FederationResult:
    final_params: "OrderedDict[str, np.ndarray]"
    best_params: "OrderedDict[str, np.ndarray]"
    best_round: int
    history: list

    def __iter__(self):
        yield self.final_params
        yield self.history


def validation_loss(params, groups, config: FederationConfig) -> float:
    """Mean loss over ``groups`` = [(samples, domain)] without augmentation, eval mode."""
    total, count = 0.0, 0
    for samples, domain in groups:
        for i in range(0, len(samples), config.batch_size):
            images, masks = _stack(samples[i:i + config.batch_size])
            logits = unet_forward(params, images, config.unet, domain=domain, train_mode=False)
            total += focal_dice_loss(logits, masks, config.loss).item() * len(images)
            count += len(images)
    return total / max(count, 1)


def run_federation(config: FederationConfig, clients: list, transport=None, val_groups=None,
                   initial_params=None, domain_of=None) -> FederationResult:
    """Broadcast -> local training on every client -> FedAvg, for ``config.rounds`` rounds."""
    clients = sorted(clients, key=lambda c: c.client_id)
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in {ids}")
    transport = transport or InProcessTransport()
    transport.connect(ids)
    global_params = initial_params if initial_params is not None else init_params(
        config.unet, np.random.default_rng([config.seed, 0]))
    global_params = copy_params(global_params)
    for c in clients:
        prepare_client(c, config)

    history: list = []
    best_loss, best_round = math.inf, -1
    best_params = copy_params(global_params)

    def work(client, t):
        incoming = transport.recv_broadcast(client.client_id)
        try:
            update = local_train(client, incoming, config, t, domain_of)
        except Exception as exc:  # noqa: BLE001 - policy decides
            return client.client_id, exc
        transport.send_update(update)
        return client.client_id, None

    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 and len(clients) > 1 else None
    try:
        for t in range(config.rounds):
            transport.broadcast(global_params)
            if pool is None:
                outcomes = [work(c, t) for c in clients]
            else:
                outcomes = list(pool.map(lambda c: work(c, t), clients))
            failed = [(cid, exc) for cid, exc in outcomes if exc is not None]
            if failed and config.failure_policy == "abort":
                cid, exc = failed[0]
                if isinstance(exc, TrainingError):
                    raise exc
                raise TrainingError(f"client failure: {exc!r}", t, -1, cid) from exc
            updates = transport.recv_updates(t)
            if not updates:
                raise TrainingError("every client failed this round", t)
            global_params = fedavg_aggregate(updates)
            event = {
                "round": t,
                "event": "aggregate",
                "clients": [u.client_id for u in sorted(updates, key=lambda u: u.client_id)],
                "dropped": [cid for cid, _ in failed],
                "train_loss": {c.client_id: c.last_loss for c in clients},
            }
            if val_groups and ((t + 1) % config.eval_every == 0 or t == config.rounds - 1):
                vloss = validation_loss(global_params, val_groups, config)
                event["val_loss"] = vloss
                if vloss < best_loss:
                    best_loss, best_round = vloss, t
                    best_params = copy_params(global_params)
                event["best_val_loss"] = best_loss
            history.append(event)
            log.debug("round %d: %s", t, event)
    finally:
        if pool is not None:
            pool.shutdown()
    if best_round < 0:
        best_params, best_round = copy_params(global_params), config.rounds - 1
    return FederationResult(global_params, best_params, best_round, history)
