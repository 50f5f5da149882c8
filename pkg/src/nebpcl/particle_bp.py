"""Particle-based belief propagation for cooperative localization.

Per-agent operations (:func:`predict`, :func:`compute_edge_message`, ...)
work on a single :class:`ParticleBelief`. :func:`bp_time_step` runs the whole
network at once on stacked arrays: all nodes' particles as ``(N, K, 4)`` and
all directed measurement edges ``j -> i`` (mobile receivers only) as rows of
``(E, K)`` message arrays.

Particle ``k`` of a receiver is always paired with particle ``k`` of the
sender.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BadCovariance, DegenerateMessage, NotNormalized, ParticleCountMismatch
from .rng import substream
from .scenario import STATE_DIM, MeasurementModel, MotionModel, Realization

log = logging.getLogger(__name__)

NORMALIZED_TOL = 1e-9
DEFAULT_K = 1000


@dataclass(frozen=True)
class ParticleBelief:
    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "weights", w)
        if p.ndim != 2 or w.shape != (p.shape[0],):
            raise ParticleCountMismatch(f"particles {p.shape} vs weights {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def normalized(self) -> bool:
        return abs(float(np.sum(self.weights)) - 1.0) <= NORMALIZED_TOL

    def to_dict(self) -> dict:
        return {"particles": self.particles.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d) -> ParticleBelief:
        return cls(np.array(d["particles"], dtype=float), np.array(d["weights"], dtype=float))


@dataclass(frozen=True)
class EdgeMessage:
    source: int
    target: int
    values: np.ndarray


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def position_cov(self) -> np.ndarray:
        return self.covariance[:2, :2]


def init_belief(prior_mean, prior_cov, K: int, rng: np.random.Generator) -> ParticleBelief:
    """Draw ``K`` equally weighted particles from ``N(prior_mean, prior_cov)``.

    A zero covariance gives ``K`` copies of the mean (anchor point mass).
    """
    mean = np.asarray(prior_mean, dtype=float)
    cov = np.asarray(prior_cov, dtype=float)
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
        raise BadCovariance("covariance is not symmetric")
    eig, vec = np.linalg.eigh(cov)
    if eig.min() < -1e-9 * max(1.0, abs(eig.max())):
        raise BadCovariance(f"covariance has negative eigenvalue {eig.min():g}")
    weights = np.full(K, 1.0 / K)
    if not np.any(cov):
        return ParticleBelief(np.tile(mean, (K, 1)), weights)
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        factor = vec * np.sqrt(np.clip(eig, 0.0, None))
    noise = rng.standard_normal((K, mean.size))
    return ParticleBelief(mean + noise @ factor.T, weights)


def predict(prev_belief: ParticleBelief, model: MotionModel, rng: np.random.Generator) -> ParticleBelief:
    """Propagate each particle through the motion model; weights carry over."""
    if not prev_belief.normalized:
        raise NotNormalized("prediction needs a normalized belief")
    accel = rng.normal(0.0, model.accel_noise_std, size=(prev_belief.K, 2)) if model.accel_noise_std > 0 \
        else np.zeros((prev_belief.K, 2))
    return ParticleBelief(model.propagate(prev_belief.particles, accel), prev_belief.weights.copy())


def range_likelihood(z, p_j, p_i, sigma_r):
    """Gaussian density of range ``z`` given positions; broadcasts over leading axes."""
    d = np.linalg.norm(np.asarray(p_j, dtype=float) - np.asarray(p_i, dtype=float), axis=-1)
    r = (np.asarray(z, dtype=float) - d) / sigma_r
    return np.exp(-0.5 * r * r) / (math.sqrt(2.0 * math.pi) * sigma_r)


def compute_edge_message(sender_belief: ParticleBelief, receiver_belief: ParticleBelief, z: float,
                         model: MeasurementModel, source: int = -1, target: int = -1) -> EdgeMessage:
    if sender_belief.K != receiver_belief.K:
        raise ParticleCountMismatch(f"sender K={sender_belief.K}, receiver K={receiver_belief.K}")
    lik = range_likelihood(z, sender_belief.particles[:, :2], receiver_belief.particles[:, :2],
                           model.range_noise_std)
    return EdgeMessage(source, target, lik * sender_belief.weights)


def update_weights(pred_belief: ParticleBelief, incoming) -> ParticleBelief:
    """Multiply prediction weights by all incoming messages (unnormalized result)."""
    incoming = list(incoming)
    for m in incoming:
        if m.values.shape != pred_belief.weights.shape:
            raise ParticleCountMismatch(f"message of size {m.values.shape} for K={pred_belief.K}")
    if not incoming:
        return ParticleBelief(pred_belief.particles, pred_belief.weights.copy())
    log_w = _log_weight_update(np.log(pred_belief.weights)[None, :],
                               np.stack([m.values for m in incoming]),
                               np.zeros(len(incoming), dtype=np.int64), 1)[0]
    if not np.any(np.isfinite(log_w)):
        raise DegenerateMessage("all updated weights are zero")
    w = np.exp(log_w)
    if not np.any(w):
        # the exact product underflows; return it rescaled so the largest weight is 1
        w = np.exp(log_w - np.max(log_w))
    return ParticleBelief(pred_belief.particles, w)


def normalize(belief: ParticleBelief) -> ParticleBelief:
    total = float(np.sum(belief.weights))
    if not (total > 0 and np.isfinite(total)):
        raise DegenerateMessage(f"weight sum is {total}")
    return ParticleBelief(belief.particles, belief.weights / total)


def summarize(belief: ParticleBelief) -> GaussianSummary:
    """Weighted mean (MMSE estimate) and weighted covariance of a normalized belief."""
    if not belief.normalized:
        raise NotNormalized("summarize needs a normalized belief")
    mean, cov = _moments(belief.weights[None], belief.particles[None])
    return GaussianSummary(mean[0], cov[0])


def resample(belief: ParticleBelief, rng: np.random.Generator) -> ParticleBelief:
    """Systematic resampling to ``K`` equally weighted particles."""
    if not belief.normalized:
        raise NotNormalized("resample needs a normalized belief")
    idx = _systematic_indices(belief.weights, rng)
    return ParticleBelief(belief.particles[idx], np.full(belief.K, 1.0 / belief.K))


def _systematic_indices(weights, rng):
    K = weights.shape[0]
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    positions = (rng.random() + np.arange(K)) / K
    return np.minimum(np.searchsorted(cdf, positions, side="right"), K - 1)


def _moments(weights, particles):
    mean = np.einsum("nk,nkd->nd", weights, particles)
    dx = particles - mean[:, None, :]
    cov = np.einsum("nk,nkd,nke->nde", weights, dx, dx)
    return mean, cov


def _log_weight_update(log_pred, messages, targets, num_nodes):
    """``log w~_i = log w_i + sum_{e -> i} log messages[e]``.

    Works on arrays or autodiff ``Var`` messages.
    """
    return log_pred + ad.segment_sum(ad.log(messages), targets, num_nodes)


def _posterior_weights(log_w, pred_weights, step=None):
    """Normalize log-domain weights row-wise; degenerate rows fall back to ``pred_weights``.

    Returns ``(weights, degenerate_mask)``.
    """
    lw = ad.value(log_w)
    top = np.max(lw, axis=1)
    bad = ~np.isfinite(top)
    for i in np.flatnonzero(bad):
        log.warning("degenerate weights for agent %d at step %s; keeping prediction weights", i, step)
    if np.any(bad):
        safe_top = np.where(bad, 0.0, top)
        log_w = ad.where_rows(bad, log_w, np.log(pred_weights))
        top = np.where(bad, np.max(np.log(pred_weights), axis=1), safe_top)
    e = ad.exp(log_w - top[:, None])
    return e / ad.sum(e, axis=1, keepdims=True), bad


@dataclass(frozen=True)
class StepInputs:
    """The slice of a realization needed for one time step (``n = step + 1``)."""

    step: int
    is_anchor: np.ndarray
    edges: np.ndarray
    ranges: np.ndarray

    @classmethod
    def from_realization(cls, realization: Realization, step: int) -> StepInputs:
        return cls(step, realization.is_anchor, realization.edges[step], realization.ranges[step])

    def inbound(self):
        """Directed edges whose receiver is mobile: ``(src, dst, z)``."""
        keep = ~self.is_anchor[self.edges[:, 1]] if len(self.edges) else np.zeros(0, dtype=bool)
        e = self.edges[keep]
        return e[:, 0], e[:, 1], self.ranges[keep]


@dataclass
class StepResult:
    """Outcome of one time step for all nodes.

    ``predicted`` are the prediction-step beliefs, ``posterior`` the
    normalized beliefs after the final update (before resampling), and
    ``beliefs`` the resampled beliefs handed to the next step. ``messages``
    holds the final per-edge messages for edges ``(src[e], dst[e])``.
    ``weights_var`` is only set by taped NEBP steps.
    """

    predicted: list
    posterior: list
    summaries: list
    beliefs: list
    src: np.ndarray
    dst: np.ndarray
    messages: np.ndarray
    degenerate: np.ndarray
    weights_var: object = None


def predict_all(beliefs, inputs: StepInputs, motion: MotionModel, key=(0,)):
    out = []
    for i, b in enumerate(beliefs):
        if inputs.is_anchor[i]:
            out.append(b)
        else:
            out.append(predict(b, motion, substream(*key, "predict", inputs.step, i)))
    return out


def edge_likelihoods(particles, src, dst, z, sigma_r):
    return range_likelihood(z[:, None], particles[src, :, :2], particles[dst, :, :2], sigma_r)


def sender_weights(log_w_tilde, pred_weights, is_anchor):
    """Weights used by senders in rounds ``t >= 2``: normalized ``w~^(t-1)``; anchors keep theirs."""
    w, _ = _posterior_weights(log_w_tilde, pred_weights)
    if isinstance(w, ad.Var):
        return ad.where_rows(is_anchor, w, pred_weights)
    return np.where(is_anchor[:, None], pred_weights, w)


def finish_step(predicted, weights, inputs: StepInputs, key, src, dst, messages, degenerate) -> StepResult:
    """Summaries and resampling from final normalized weights ``(N, K)``."""
    posterior, summaries, resampled = [], [], []
    particles = np.stack([b.particles for b in predicted])
    means, covs = _moments(weights, particles)
    for i, b in enumerate(predicted):
        post = ParticleBelief(b.particles, weights[i])
        posterior.append(post)
        summaries.append(GaussianSummary(means[i], covs[i]))
        if inputs.is_anchor[i]:
            resampled.append(b)
        else:
            resampled.append(resample(post, substream(*key, "resample", inputs.step, i)))
    return StepResult(predicted, posterior, summaries, resampled, src, dst, messages, degenerate)


def bp_time_step(beliefs, inputs: StepInputs, T: int, motion: MotionModel, measurement: MeasurementModel,
                 key=(0,)) -> StepResult:
    """Prediction, ``T`` synchronous message-passing rounds, normalization, summary and resampling.

    ``key`` prefixes every random substream (prediction and resampling draws
    are keyed by ``(*key, purpose, step, agent)``).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    for i, b in enumerate(beliefs):
        if not b.normalized:
            raise NotNormalized(f"belief of node {i} is not normalized")
    predicted = predict_all(beliefs, inputs, motion, key)
    particles = np.stack([b.particles for b in predicted])
    pred_w = np.stack([b.weights for b in predicted])
    log_pred = np.log(pred_w)
    n = len(predicted)
    src, dst, z = inputs.inbound()
    lik = edge_likelihoods(particles, src, dst, z, measurement.range_noise_std)

    send_w = pred_w
    for t in range(1, T + 1):
        if t > 1:
            send_w = sender_weights(log_w, pred_w, inputs.is_anchor)
        phi = lik * send_w[src]
        log_w = _log_weight_update(log_pred, phi, dst, n)
    weights, bad = _posterior_weights(log_w, pred_w, inputs.step)
    return finish_step(predicted, weights, inputs, key, src, dst, phi, bad)


def init_network(realization: Realization, K: int, key=(0,)) -> list:
    """Initial particle beliefs from the realization's priors (point masses for anchors)."""
    out = []
    for i in range(realization.num_nodes):
        cov = np.zeros((STATE_DIM, STATE_DIM)) if realization.is_anchor[i] else realization.prior_covs[i]
        out.append(init_belief(realization.prior_means[i], cov, K, substream(*key, "init", i)))
    return out


def run_bp(realization: Realization, K: int = DEFAULT_K, T: int = 1, key=(0,)):
    """Filter a whole realization; yields one :class:`StepResult` per time step."""
    cfg = realization.config
    beliefs = init_network(realization, K, key)
    for s in range(realization.num_steps):
        res = bp_time_step(beliefs, StepInputs.from_realization(realization, s), T, cfg.motion,
                           cfg.measurement, key)
        beliefs = res.beliefs
        yield res
