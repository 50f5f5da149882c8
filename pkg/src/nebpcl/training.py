"""Training the NEBP networks on simulated realizations."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EmptyDataset, NonFiniteLoss, ShapeMismatch
from .gnn import NebpModel, load_checkpoint, nebp_time_step, save_checkpoint
from .neural import AdamState, adam_step, mlp_gradients
from .particle_bp import StepInputs, init_network
from .rng import substream

log = logging.getLogger(__name__)

NET_NAMES = ("edge", "node", "scale", "shift")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    K: int = 1000
    T: int = 1
    dataset: str | None = None
    checkpoint: str | None = None
    loss_trace: str | None = None
    seed: int = 0
    grad_clip: float | None = None
    per_step_updates: bool = False
    msg_dim: int = 32
    hidden: int = 64
    shift_gain: float = 0.0
    shift_bias: float = 0.0
    scale_gain: float = 1.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.K < 1 or self.T < 1:
            raise ConfigError("K and T must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0 when set")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"train config: unknown keys {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> TrainConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: {exc}") from None


def position_loss(summaries, truth) -> float:
    """Sum of squared position errors; ``summaries`` and ``truth`` are aligned per mobile agent."""
    total = 0.0
    for s, x in zip(summaries, truth, strict=True):
        p = x.position if hasattr(x, "position") else np.asarray(x, dtype=float)[:2]
        d = s.mean[:2] - p
        total += float(d @ d)
    return total


def _taped_position_loss(weights, particles, truth_pos, mobile):
    """Differentiable sum over ``mobile`` of ``|sum_k w_ik p_ik - p_i|^2``."""
    w = ad.take(weights, mobile)
    loss = 0.0
    for d in range(2):
        est = ad.sum(w * particles[mobile, :, d], axis=1)
        err = est - truth_pos[mobile, d]
        loss = loss + ad.sum(err * err)
    return loss


def step_loss_and_grads(model: NebpModel, beliefs, inputs: StepInputs, truth_pos, cfg_motion, cfg_meas, key):
    """Run one taped NEBP step; returns ``(result, loss, {net: grads})``."""
    tape = ad.Tape()
    res = nebp_time_step(beliefs, inputs, model, cfg_motion, cfg_meas, key, tape=tape)
    particles = np.stack([b.particles for b in res.predicted])
    mobile = np.flatnonzero(~inputs.is_anchor)
    loss = _taped_position_loss(res.weights_var, particles, truth_pos, mobile)
    if isinstance(loss, ad.Var):
        grads = ad.backward(tape, loss)
        net_grads = {k: mlp_gradients(net, tape, grads) for k, net in model.nets.items()}
    else:
        net_grads = {k: [np.zeros_like(p) for p in net.params] for k, net in model.nets.items()}
    return res, float(ad.value(loss)), net_grads


@dataclass
class TrainResult:
    model: NebpModel
    optimizer: AdamState
    trace: list
    epoch_losses: list
    epochs_done: int


def _apply(model, opt, grads, scale, clip):
    flat = [g * scale for k in NET_NAMES for g in grads[k]]
    if clip is not None:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in flat)))
        if norm > clip:
            flat = [g * (clip / norm) for g in flat]
    params = [p for k in NET_NAMES for p in model.nets[k].params]
    new_params, opt = adam_step(opt, params, flat)
    nets, pos = {}, 0
    for k in NET_NAMES:
        n = len(model.nets[k].params)
        nets[k] = model.nets[k].with_params(new_params[pos:pos + n])
        pos += n
    return model.with_nets(**nets), opt


def _zero_grads(model):
    return {k: [np.zeros_like(p) for p in net.params] for k, net in model.nets.items()}


def train(config: TrainConfig, dataset, model: NebpModel | None = None, optimizer: AdamState | None = None,
          start_epoch: int = 0) -> TrainResult:
    """Train for ``config.epochs`` epochs, continuing from ``start_epoch``.

    Each batch rolls its realizations forward step by step; per-step position
    losses are summed over time (gradients are truncated at step boundaries)
    and averaged over the batch before one Adam update. With
    ``per_step_updates`` an update is applied after every time step instead.
    Random draws inside rollouts are keyed by ``(seed, realization index)`` so
    repeated epochs see identical particle noise.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("training needs at least one realization")
    if model is None:
        model = NebpModel.init(config.K, config.T, msg_dim=config.msg_dim, hidden=config.hidden,
                               seed=config.seed, shift_gain=config.shift_gain, shift_bias=config.shift_bias,
                               scale_gain=config.scale_gain)
    if model.K != config.K or model.T != config.T:
        raise ShapeMismatch(f"model (K={model.K}, T={model.T}) vs config (K={config.K}, T={config.T})")
    opt = optimizer if optimizer is not None else AdamState(lr=config.lr)
    trace, epoch_losses = [], []
    for epoch in range(start_epoch, start_epoch + config.epochs):
        order = substream(config.seed, "shuffle", epoch).permutation(len(dataset))
        per_real = []
        batches = [order[b:b + config.batch_size] for b in range(0, len(order), config.batch_size)]
        for b_idx, batch in enumerate(batches):
            model, opt, losses = _train_batch(model, opt, config, dataset, batch)
            per_real += losses
            trace.append((epoch, b_idx, float(np.mean(losses))))
            log.info("epoch %d batch %d loss %.4f", epoch, b_idx, trace[-1][2])
        epoch_losses.append(float(np.mean(per_real)))
        if config.checkpoint:
            save_checkpoint(config.checkpoint, model, opt, {"epochs_done": epoch + 1, "seed": config.seed})
    if config.loss_trace:
        write_loss_trace(config.loss_trace, trace)
    return TrainResult(model, opt, trace, epoch_losses, start_epoch + config.epochs)


def _train_batch(model, opt, config, dataset, batch):
    items = []
    for r_idx in batch:
        real = dataset[int(r_idx)]
        key = (config.seed, "rollout", int(r_idx))
        items.append([int(r_idx), real, key, init_network(real, model.K, key), 0.0])
    num_steps = max(it[1].num_steps for it in items)
    grads = _zero_grads(model)
    for s in range(num_steps):
        for it in items:
            r_idx, real, key, beliefs, _ = it
            if s >= real.num_steps:
                continue
            inputs = StepInputs.from_realization(real, s)
            res, loss, g = step_loss_and_grads(model, beliefs, inputs, real.truth[s, :, :2],
                                               real.config.motion, real.config.measurement, key)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss {loss} on realization {r_idx} at step {s}")
            for k in NET_NAMES:
                grads[k] = [a + b for a, b in zip(grads[k], g[k])]
            it[3] = res.beliefs
            it[4] += loss
        if config.per_step_updates:
            model, opt = _apply(model, opt, grads, 1.0 / len(items), config.grad_clip)
            grads = _zero_grads(model)
    if not config.per_step_updates:
        model, opt = _apply(model, opt, grads, 1.0 / len(items), config.grad_clip)
    return model, opt, [it[4] for it in items]


def resume(config: TrainConfig, dataset, checkpoint_path) -> TrainResult:
    """Continue training from a checkpoint written by :func:`train`."""
    model, opt, state = load_checkpoint(checkpoint_path)
    start = int(state["epochs_done"]) if state else 0
    return train(config, dataset, model, opt, start_epoch=start)


def write_loss_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "batch", "loss"])
        for epoch, batch, loss in trace:
            w.writerow([epoch, batch, repr(loss)])


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
