"""Neural enhanced BP: an MPNN over the agent graph refining particle BP messages.

Each message-passing iteration runs one round of particle BP, feeds the
normalized BP messages as edge attributes into the edge network ``g_e``, and
combines the resulting GNN message ``m`` with the BP message ``phi`` as::

    nebp_message = g_s(m) * phi + g_v(m)

with a sigmoid-headed scalar ``g_s`` and a ReLU-headed ``K``-vector ``g_v``.
All edges share ``g_e, g_s, g_v`` and all nodes share ``g_n``, so a model
trained on one network size runs unchanged on another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointIo, NotNormalized, ShapeMismatch
from .neural import AdamState, Mlp, mlp_forward
from .particle_bp import (
    DEFAULT_K,
    EdgeMessage,
    StepInputs,
    StepResult,
    _log_weight_update,
    _moments,
    _posterior_weights,
    edge_likelihoods,
    finish_step,
    init_network,
    predict_all,
    sender_weights,
)
from .scenario import STATE_DIM, MeasurementModel, MotionModel, Realization

CHECKPOINT_VERSION = 1
EMBED_DIM = STATE_DIM + STATE_DIM * STATE_DIM


@dataclass(frozen=True)
class GnnMessage:
    source: int
    target: int
    values: np.ndarray


@dataclass(frozen=True)
class NebpModel:
    """Parameters of ``g_e, g_n, g_s, g_v`` plus dimensions.

    ``forced_scale`` / ``forced_shift`` replace the outputs of ``g_s`` / ``g_v``
    by constants (``1`` and ``0`` reduce NEBP to plain BP).
    """

    edge_net: Mlp
    node_net: Mlp
    scale_net: Mlp
    shift_net: Mlp
    K: int
    T: int = 1
    forced_scale: float | None = None
    forced_shift: float | None = None

    def __post_init__(self):
        e, n, s, v = self.edge_net.widths, self.node_net.widths, self.scale_net.widths, self.shift_net.widths
        msg = e[-1]
        if e[0] != 2 * EMBED_DIM + self.K:
            raise ShapeMismatch(f"edge net input {e[0]} != 2*{EMBED_DIM}+K={2 * EMBED_DIM + self.K}")
        if n[0] != EMBED_DIM + msg or n[-1] != EMBED_DIM:
            raise ShapeMismatch(f"node net widths {n} incompatible with embed={EMBED_DIM}, msg={msg}")
        if s[0] != msg or s[-1] != 1 or self.scale_net.output_activation != "sigmoid":
            raise ShapeMismatch(f"scale net must map {msg} -> 1 through a sigmoid")
        if v[0] != msg or v[-1] != self.K or self.shift_net.output_activation != "relu":
            raise ShapeMismatch(f"shift net must map {msg} -> K={self.K} through a ReLU")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def embed_dim(self) -> int:
        return EMBED_DIM

    @property
    def msg_dim(self) -> int:
        return self.edge_net.widths[-1]

    @classmethod
    def init(cls, K: int = DEFAULT_K, T: int = 1, *, msg_dim: int = 32, hidden: int = 64, seed: int = 0,
             shift_gain: float = 0.0, shift_bias: float = 0.0, scale_gain: float = 1.0) -> NebpModel:
        """Glorot-initialized model.

        ``g_v`` reports its output in units of ``1/K`` (the weight of one
        particle under a uniform belief), so its raw output is on the scale of
        a likelihood value. ``shift_gain`` scales its last weight matrix and
        ``shift_bias`` fills its last bias; ``scale_gain`` scales the last
        weight matrix of ``g_s``.
        """
        rng = np.random.default_rng(seed)
        return cls(
            edge_net=Mlp.init([2 * EMBED_DIM + K, hidden, msg_dim], "identity", rng),
            node_net=Mlp.init([EMBED_DIM + msg_dim, hidden, EMBED_DIM], "identity", rng),
            scale_net=Mlp.init([msg_dim, hidden, 1], "sigmoid", rng, output_gain=scale_gain),
            shift_net=Mlp.init([msg_dim, hidden, K], "relu", rng, output_scale=1.0 / K,
                               output_gain=shift_gain, output_bias=shift_bias),
            K=K,
            T=T,
        )

    def forced(self, scale: float | None = 1.0, shift: float | None = 0.0) -> NebpModel:
        return replace(self, forced_scale=scale, forced_shift=shift)

    @property
    def nets(self) -> dict:
        return {"edge": self.edge_net, "node": self.node_net, "scale": self.scale_net, "shift": self.shift_net}

    def with_nets(self, **nets) -> NebpModel:
        names = {"edge": "edge_net", "node": "node_net", "scale": "scale_net", "shift": "shift_net"}
        return replace(self, **{names[k]: v for k, v in nets.items()})

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "T": self.T,
            "embed_dim": self.embed_dim,
            "msg_dim": self.msg_dim,
            "nets": {k: net.to_dict() for k, net in self.nets.items()},
        }

    @classmethod
    def from_dict(cls, d) -> NebpModel:
        nets = {k: Mlp.from_dict(v) for k, v in d["nets"].items()}
        model = cls(nets["edge"], nets["node"], nets["scale"], nets["shift"], K=int(d["K"]), T=int(d["T"]))
        if model.embed_dim != d["embed_dim"] or model.msg_dim != d["msg_dim"]:
            raise ShapeMismatch("checkpoint dimensions disagree with its parameters")
        return model


def save_checkpoint(path, model: NebpModel, optimizer: AdamState | None = None, train_state: dict | None = None):
    doc = {
        "schema_version": CHECKPOINT_VERSION,
        "kind": "nebp-checkpoint",
        "model": model.to_dict(),
        "optimizer": optimizer.to_dict() if optimizer is not None else None,
        "train_state": train_state,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(json.dumps(doc))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointIo(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Returns ``(model, optimizer_or_None, train_state_or_None)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointIo(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("schema_version") != CHECKPOINT_VERSION or doc.get("kind") != "nebp-checkpoint":
        raise CheckpointIo(f"{path} is not a version-{CHECKPOINT_VERSION} NEBP checkpoint")
    opt = AdamState.from_dict(doc["optimizer"]) if doc.get("optimizer") else None
    return NebpModel.from_dict(doc["model"]), opt, doc.get("train_state")


def init_embeddings(beliefs) -> np.ndarray:
    """``(N, 20)`` embeddings ``[mean, vec(cov)]`` with the covariance vectorized column-wise."""
    for i, b in enumerate(beliefs):
        if not b.normalized:
            raise NotNormalized(f"belief of node {i} is not normalized")
    mean, cov = _moments(np.stack([b.weights for b in beliefs]), np.stack([b.particles for b in beliefs]))
    return np.concatenate([mean, cov.transpose(0, 2, 1).reshape(len(beliefs), -1)], axis=1)


def gnn_edge_message(model: NebpModel, h_source, h_target, edge_attr, source=-1, target=-1) -> GnnMessage:
    x = np.concatenate([np.asarray(h_source, float), np.asarray(h_target, float), np.asarray(edge_attr, float)])
    return GnnMessage(source, target, mlp_forward(model.edge_net, x))


def gnn_node_update(model: NebpModel, h_i, incoming) -> np.ndarray:
    total = np.zeros(model.msg_dim)
    for m in incoming:
        if m.values.shape != (model.msg_dim,):
            raise ShapeMismatch(f"message of shape {m.values.shape}, expected ({model.msg_dim},)")
        total = total + m.values
    return mlp_forward(model.node_net, np.concatenate([np.asarray(h_i, float), total]))


def combine_messages(model: NebpModel, gnn_msg: GnnMessage, bp_msg: EdgeMessage) -> EdgeMessage:
    if bp_msg.values.shape != (model.K,):
        raise ShapeMismatch(f"BP message of size {bp_msg.values.shape}, model K={model.K}")
    s, v = _scale_shift(model, gnn_msg.values[None, :], None)
    return EdgeMessage(bp_msg.source, bp_msg.target, (s * bp_msg.values[None, :] + v)[0])


def _scale_shift(model, m, tape):
    rows = ad.value(m).shape[0]
    if model.forced_scale is not None:
        s = np.full((rows, 1), float(model.forced_scale))
    else:
        s = mlp_forward(model.scale_net, m, tape)
    if model.forced_shift is not None:
        v = np.full((rows, model.K), float(model.forced_shift))
    else:
        v = mlp_forward(model.shift_net, m, tape)
    return s, v


def _edge_attributes(phi, K):
    total = ad.sum(phi, axis=1, keepdims=True)
    tv = ad.value(total)
    if np.any(tv <= 0):
        # an all-zero message carries no shape information
        empty = (tv <= 0)[:, 0]
        phi = ad.where_rows(empty, phi, np.ones((len(empty), K)))
        total = ad.where_rows(empty, total, np.full((len(empty), 1), float(K)))
    return phi / total


def nebp_time_step(beliefs, inputs: StepInputs, model: NebpModel, motion: MotionModel,
                   measurement: MeasurementModel, key=(0,), tape: ad.Tape | None = None) -> StepResult:
    """One time step of particle NEBP.

    Random draws use the same substreams as :func:`bp_time_step`. With a
    ``tape``, everything from edge-attribute construction to the final
    weights is recorded; the returned result then carries the weights as an
    autodiff variable in ``result.weights_var``.
    """
    for i, b in enumerate(beliefs):
        if not b.normalized:
            raise NotNormalized(f"belief of node {i} is not normalized")
        if b.K != model.K:
            raise ShapeMismatch(f"belief of node {i} has K={b.K}, model expects K={model.K}")
    predicted = predict_all(beliefs, inputs, motion, key)
    particles = np.stack([b.particles for b in predicted])
    pred_w = np.stack([b.weights for b in predicted])
    log_pred = np.log(pred_w)
    n = len(predicted)
    src, dst, z = inputs.inbound()
    lik = edge_likelihoods(particles, src, dst, z, measurement.range_noise_std)
    need_gnn = model.forced_scale is None or model.forced_shift is None
    h = init_embeddings(predicted) if need_gnn else None

    nebp_msg = None
    for t in range(1, model.T + 1):
        # classical BP round driven by the previous NEBP messages (all ones at t = 1)
        if nebp_msg is None:
            send_w = pred_w
        else:
            send_w = sender_weights(_log_weight_update(log_pred, nebp_msg, dst, n), pred_w, inputs.is_anchor)
        phi = ad.take(send_w, src) * lik if isinstance(send_w, ad.Var) else lik * send_w[src]
        m = None
        if need_gnn:
            attr = _edge_attributes(phi, model.K)
            m = mlp_forward(model.edge_net, ad.concat([ad.take(h, src), ad.take(h, dst), attr], axis=1), tape)
            if t < model.T:
                agg = ad.segment_sum(m, dst, n)
                h = mlp_forward(model.node_net, ad.concat([h, agg], axis=1), tape)
        s, v = _scale_shift(model, m if m is not None else np.zeros((len(src), 0)), tape)
        nebp_msg = s * phi + v

    log_w = _log_weight_update(log_pred, nebp_msg, dst, n)
    weights, bad = _posterior_weights(log_w, pred_w, inputs.step)
    result = finish_step(predicted, ad.value(weights), inputs, key, src, dst, ad.value(nebp_msg), bad)
    if tape is not None:
        result.weights_var = weights
    return result


def run_nebp(realization: Realization, model: NebpModel, key=(0,)):
    """Filter a whole realization with NEBP; yields one :class:`StepResult` per step."""
    cfg = realization.config
    beliefs = init_network(realization, model.K, key)
    for s in range(realization.num_steps):
        res = nebp_time_step(beliefs, StepInputs.from_realization(realization, s), model, cfg.motion,
                             cfg.measurement, key)
        beliefs = res.beliefs
        yield res
