"""Synthetic cooperative-localization scenarios.

Mobile agents move with a drag-damped constant-velocity model and measure
noisy ranges to every node within the connectivity radius. Static anchors
are ordinary nodes whose state never changes. Node indices ``0 .. I-1`` are
mobile agents, ``I .. I+A-1`` anchors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyArea
from .rng import substream

SCHEMA_VERSION = 1
STATE_DIM = 4


@dataclass(frozen=True)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("agent state must be finite")

    @classmethod
    def from_vector(cls, x) -> AgentState:
        x = np.asarray(x, dtype=float)
        return cls(x[:2], x[2:4])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class MotionModel:
    """``v' = drag_factor * v + a * dt``, ``p' = p + dt * v'`` with ``a ~ N(0, accel_noise_std^2 I)``."""

    time_step: float = 1.0
    drag_factor: float = 0.95
    accel_noise_std: float = 0.05

    def __post_init__(self):
        if not self.time_step > 0:
            raise ConfigError("time_step must be > 0")
        if not 0 < self.drag_factor <= 1:
            raise ConfigError("drag_factor must lie in (0, 1]")
        if not self.accel_noise_std >= 0:
            raise ConfigError("accel_noise_std must be >= 0")

    def propagate(self, states: np.ndarray, accel: np.ndarray) -> np.ndarray:
        """Apply the transition to a stack of ``(..., 4)`` states given accelerations ``(..., 2)``."""
        v = self.drag_factor * states[..., 2:4] + accel * self.time_step
        p = states[..., 0:2] + self.time_step * v
        return np.concatenate([p, v], axis=-1)


@dataclass(frozen=True)
class MeasurementModel:
    range_noise_std: float = 1.0
    connectivity_radius: float = 20.0

    def __post_init__(self):
        if not self.range_noise_std > 0:
            raise ConfigError("range_noise_std must be > 0")
        if not self.connectivity_radius > 0:
            raise ConfigError("connectivity_radius must be > 0")


def _rect(value, name):
    try:
        (x0, x1), (y0, y1) = value
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be [[xmin, xmax], [ymin, ymax]]") from None
    return ((float(x0), float(x1)), (float(y0), float(y1)))


@dataclass(frozen=True)
class ScenarioConfig:
    num_agents: int = 25
    num_steps: int = 50
    area: tuple = ((0.0, 60.0), (0.0, 60.0))
    placement_area: tuple = ((15.0, 45.0), (15.0, 45.0))
    anchors: tuple = ((0.0, 0.0), (60.0, 0.0), (0.0, 60.0), (60.0, 60.0), (30.0, 30.0))
    init_velocity_std: float = 0.1
    prior_cov_diag: tuple = (10.0, 10.0, 0.01, 0.01)
    motion: MotionModel = field(default_factory=MotionModel)
    measurement: MeasurementModel = field(default_factory=MeasurementModel)
    rng_seed: int = 0
    shared_measurements: bool = False

    def __post_init__(self):
        object.__setattr__(self, "area", _rect(self.area, "area"))
        object.__setattr__(self, "placement_area", _rect(self.placement_area, "placement_area"))
        object.__setattr__(self, "anchors", tuple((float(a), float(b)) for a, b in self.anchors))
        object.__setattr__(self, "prior_cov_diag", tuple(float(c) for c in self.prior_cov_diag))
        if self.num_agents < 1:
            raise ConfigError("num_agents must be >= 1")
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if len(self.prior_cov_diag) != STATE_DIM or min(self.prior_cov_diag) <= 0:
            raise ConfigError("prior_cov_diag needs 4 positive entries")
        if self.init_velocity_std < 0:
            raise ConfigError("init_velocity_std must be >= 0")
        (px0, px1), (py0, py1) = self.placement_area
        if not (px1 > px0 and py1 > py0):
            raise EmptyArea(f"placement_area {self.placement_area} is degenerate")
        (ax0, ax1), (ay0, ay1) = self.area
        if not (ax0 <= px0 and px1 <= ax1 and ay0 <= py0 and py1 <= ay1):
            raise ConfigError("placement_area must lie inside area")

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def num_nodes(self) -> int:
        return self.num_agents + len(self.anchors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["area"] = [list(r) for r in self.area]
        d["placement_area"] = [list(r) for r in self.placement_area]
        d["anchors"] = [list(a) for a in self.anchors]
        d["prior_cov_diag"] = list(self.prior_cov_diag)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        """Build from a plain mapping, rejecting unknown keys at every level."""
        d = dict(d)
        _reject_unknown(d, cls, "scenario")
        if "motion" in d:
            _reject_unknown(d["motion"], MotionModel, "motion")
            d["motion"] = MotionModel(**d["motion"])
        if "measurement" in d:
            _reject_unknown(d["measurement"], MeasurementModel, "measurement")
            d["measurement"] = MeasurementModel(**d["measurement"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _reject_unknown(d, cls, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def list_presets() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("nebpcl.presets").iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> ScenarioConfig:
    path = resources.files("nebpcl.presets") / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {list_presets()}")
    return ScenarioConfig.from_dict(json.loads(path.read_text()))


def step_motion(state: AgentState, model: MotionModel, rng: np.random.Generator) -> AgentState:
    accel = rng.normal(0.0, model.accel_noise_std, size=2) if model.accel_noise_std > 0 else np.zeros(2)
    return AgentState.from_vector(model.propagate(state.as_vector(), accel))


def measure_range(state_j: AgentState, state_i: AgentState, model: MeasurementModel,
                  rng: np.random.Generator) -> float:
    return float(np.linalg.norm(state_j.position - state_i.position) + rng.normal(0.0, model.range_noise_std))


def build_topology(positions, radius: float) -> list[set[int]]:
    """Neighbor sets for ``positions``; ``j`` neighbors ``i`` iff ``0 < |p_j - p_i| <= radius`` by index."""
    if not radius > 0:
        raise ConfigError("radius must be > 0")
    adj = _adjacency(np.asarray(positions, dtype=float).reshape(-1, 2), radius)
    return [set(np.flatnonzero(row).tolist()) for row in adj]


def _adjacency(pos: np.ndarray, radius: float) -> np.ndarray:
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    adj = dist <= radius
    np.fill_diagonal(adj, False)
    return adj


@dataclass
class Realization:
    """Ground truth and measurements of one simulated run.

    ``truth[s]`` holds all node states at time ``n = s + 1``; ``initial`` is the
    state at ``n = 0``. ``edges[s]`` is an ``(E, 2)`` array of directed edges
    ``(j, i)`` (sender, receiver) and ``ranges[s][e]`` the range measured by
    ``i`` towards ``j``.
    """

    config: ScenarioConfig
    initial: np.ndarray
    truth: np.ndarray
    is_anchor: np.ndarray
    edges: list
    ranges: list
    prior_means: np.ndarray
    prior_covs: np.ndarray

    @property
    def num_steps(self) -> int:
        return self.truth.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.truth.shape[1]

    @property
    def mobile(self) -> np.ndarray:
        return np.flatnonzero(~self.is_anchor)

    def neighbors(self, step: int) -> list[set[int]]:
        nbrs = [set() for _ in range(self.num_nodes)]
        for j, i in self.edges[step]:
            nbrs[int(i)].add(int(j))
        return nbrs

    def measurements(self, step: int) -> dict:
        return {(int(j), int(i)): float(z) for (j, i), z in zip(self.edges[step], self.ranges[step])}

    def states(self, step: int) -> list[AgentState]:
        return [AgentState.from_vector(x) for x in self.truth[step]]

    def __eq__(self, other):
        if not isinstance(other, Realization):
            return NotImplemented
        return (
            self.config == other.config
            and np.array_equal(self.initial, other.initial)
            and np.array_equal(self.truth, other.truth)
            and np.array_equal(self.is_anchor, other.is_anchor)
            and len(self.edges) == len(other.edges)
            and all(np.array_equal(a, b) for a, b in zip(self.edges, other.edges))
            and all(np.array_equal(a, b) for a, b in zip(self.ranges, other.ranges))
            and np.array_equal(self.prior_means, other.prior_means)
            and np.array_equal(self.prior_covs, other.prior_covs)
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "realization",
            "config": self.config.to_dict(),
            "initial": self.initial.tolist(),
            "truth": self.truth.tolist(),
            "is_anchor": self.is_anchor.tolist(),
            "steps": [
                {"edges": e.tolist(), "ranges": r.tolist()} for e, r in zip(self.edges, self.ranges)
            ],
            "prior_means": self.prior_means.tolist(),
            "prior_covs": self.prior_covs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Realization:
        if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "realization":
            raise ConfigError(f"not a version-{SCHEMA_VERSION} realization file")
        n = len(d["is_anchor"])
        return cls(
            config=ScenarioConfig.from_dict(d["config"]),
            initial=np.array(d["initial"], dtype=float).reshape(n, STATE_DIM),
            truth=np.array(d["truth"], dtype=float).reshape(-1, n, STATE_DIM),
            is_anchor=np.array(d["is_anchor"], dtype=bool),
            edges=[np.array(s["edges"], dtype=np.int64).reshape(-1, 2) for s in d["steps"]],
            ranges=[np.array(s["ranges"], dtype=float) for s in d["steps"]],
            prior_means=np.array(d["prior_means"], dtype=float).reshape(n, STATE_DIM),
            prior_covs=np.array(d["prior_covs"], dtype=float).reshape(n, STATE_DIM, STATE_DIM),
        )


def save_realization(realization: Realization, path) -> None:
    Path(path).write_text(json.dumps(realization.to_dict()))


def load_realization(path) -> Realization:
    return Realization.from_dict(json.loads(Path(path).read_text()))


def generate_realization(config: ScenarioConfig, seed: int | None = None) -> Realization:
    """Simulate one run. ``seed`` overrides ``config.rng_seed``."""
    seed = config.rng_seed if seed is None else seed
    num_agents, num_anchors = config.num_agents, config.num_anchors
    n_nodes = num_agents + num_anchors
    (px0, px1), (py0, py1) = config.placement_area
    motion, meas = config.motion, config.measurement

    initial = np.zeros((n_nodes, STATE_DIM))
    if num_anchors:
        initial[num_agents:, :2] = np.array(config.anchors)
    agent_rngs = []
    for i in range(num_agents):
        rng = substream(seed, "agent", i)
        initial[i, 0] = rng.uniform(px0, px1)
        initial[i, 1] = rng.uniform(py0, py1)
        initial[i, 2:] = rng.normal(0.0, 1.0, size=2) * config.init_velocity_std
        agent_rngs.append(rng)

    truth = np.empty((config.num_steps, n_nodes, STATE_DIM))
    state = initial.copy()
    for s in range(config.num_steps):
        for i in range(num_agents):
            state[i] = step_motion(AgentState.from_vector(state[i]), motion, agent_rngs[i]).as_vector()
        truth[s] = state

    is_anchor = np.zeros(n_nodes, dtype=bool)
    is_anchor[num_agents:] = True
    edges, ranges = [], []
    for s in range(config.num_steps):
        pos = truth[s, :, :2]
        adj = _adjacency(pos, meas.connectivity_radius)
        noise = substream(seed, "range", s).normal(0.0, meas.range_noise_std, size=(n_nodes, n_nodes))
        if config.shared_measurements:
            noise = np.triu(noise) + np.triu(noise, 1).T
        # receivers in ascending order, senders ascending within a receiver
        recv, send = np.nonzero(adj.T)
        e = np.stack([send, recv], axis=1).astype(np.int64)
        dist = np.linalg.norm(pos[send] - pos[recv], axis=1)
        edges.append(e)
        ranges.append(dist + noise[send, recv])

    prior_covs = np.zeros((n_nodes, STATE_DIM, STATE_DIM))
    prior_means = initial.copy()
    cov0 = np.diag(config.prior_cov_diag)
    chol = np.linalg.cholesky(cov0)
    for i in range(num_agents):
        prior_covs[i] = cov0
        prior_means[i] = initial[i] + chol @ substream(seed, "prior", i).normal(size=STATE_DIM)

    return Realization(config, initial, truth, is_anchor, edges, ranges, prior_means, prior_covs)
