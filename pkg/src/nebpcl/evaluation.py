"""Accuracy and consistency metrics: outage probability, NEES and chi-square tests.

Records pool every (realization, agent, step) triple. The NEES of a
consistent Gaussian estimator in 2-D follows a chi-square law with two
degrees of freedom, whose CDF is ``1 - exp(-x/2)``; the two-sided acceptance
interval therefore has a closed form.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import BadAlpha, EmptyRecords, SingularCovariance

COND_LIMIT = 1e12
REGULARIZATION = 1e-9
DEFAULT_THRESHOLDS = np.round(np.arange(0.0, 5.0 + 1e-9, 0.1), 10)
DEFAULT_LEVELS = np.round(np.arange(0.05, 0.95 + 1e-9, 0.05).tolist() + [0.99], 10)

FIELDS = ["realization", "agent", "step", "true_x", "true_y", "est_x", "est_y", "cov_xx", "cov_xy", "cov_yy"]


@dataclass(frozen=True)
class EvalRecord:
    realization: int
    agent: int
    step: int
    true_position: np.ndarray
    estimate: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        for name in ("true_position", "estimate", "covariance"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        c = self.covariance
        if c.shape != (2, 2) or abs(c[0, 1] - c[1, 0]) > 1e-9 * max(1.0, np.abs(c).max()):
            raise ValueError("position covariance must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(c).min() < -1e-9 * max(1.0, np.abs(c).max()):
            raise ValueError("position covariance must be positive semi-definite")

    @property
    def error(self) -> np.ndarray:
        return self.estimate - self.true_position


def _arrays(records):
    records = list(records)
    if not records:
        raise EmptyRecords("no records")
    err = np.array([r.estimate - r.true_position for r in records])
    cov = np.array([r.covariance for r in records])
    return err, cov


def outage_probability(records, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Fraction of records with position error strictly above each threshold."""
    err, _ = _arrays(records)
    dist = np.linalg.norm(err, axis=1)
    return np.array([np.mean(dist > t) for t in np.asarray(thresholds, dtype=float)])


def nees(record: EvalRecord) -> float:
    """``e^T C^-1 e``; ill-conditioned covariances get ``1e-9 I`` added first."""
    return float(_nees(record.error[None], record.covariance[None], strict=True)[0])


def nees_values(records) -> np.ndarray:
    """Vectorized NEES; records whose covariance stays singular after regularization give ``inf``."""
    err, cov = _arrays(records)
    return _nees(err, cov, strict=False)


def _nees(err, cov, strict):
    cov = cov.copy()
    ill = np.linalg.cond(cov) >= COND_LIMIT
    cov[ill] += REGULARIZATION * np.eye(2)
    still = np.linalg.cond(cov) >= COND_LIMIT
    if strict and np.any(still):
        raise SingularCovariance("position covariance is singular")
    out = np.full(len(err), np.inf)
    ok = ~still
    if np.any(ok):
        sol = np.linalg.solve(cov[ok], err[ok][..., None])[..., 0]
        out[ok] = np.einsum("nd,nd->n", err[ok], sol)
    return out


def chi_square_bounds(alpha: float) -> tuple[float, float]:
    """Two-sided acceptance interval of a chi-square(2) variable at significance ``alpha``."""
    if not 0 < alpha < 1:
        raise BadAlpha(f"alpha must lie in (0, 1), got {alpha}")
    return -2.0 * math.log(1.0 - alpha / 2.0), -2.0 * math.log(alpha / 2.0)


def consistency_curve(records, confidence_levels=DEFAULT_LEVELS) -> np.ndarray:
    """Fraction of records whose NEES lies in the acceptance interval, per confidence level."""
    return consistency_from_nees(nees_values(records), confidence_levels)


def consistency_from_nees(values, confidence_levels=DEFAULT_LEVELS) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyRecords("no NEES values")
    out = []
    for level in np.asarray(confidence_levels, dtype=float):
        r1, r2 = chi_square_bounds(1.0 - level)
        out.append(np.mean((values >= r1) & (values <= r2)))
    return np.array(out)


def records_from_step(realization_id, step, result, truth, mobile):
    """EvalRecords for the mobile agents of one :class:`StepResult`."""
    out = []
    for i in mobile:
        s = result.summaries[i]
        cov = s.position_cov
        out.append(EvalRecord(realization_id, int(i), step, truth[i, :2], s.position, 0.5 * (cov + cov.T)))
    return out


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        for r in records:
            c = r.covariance
            w.writerow([r.realization, r.agent, r.step]
                       + [repr(float(v)) for v in (*r.true_position, *r.estimate, c[0, 0], c[0, 1], c[1, 1])])


def read_records(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            v = {k: float(row[k]) for k in FIELDS[3:]}
            out.append(EvalRecord(
                int(row["realization"]), int(row["agent"]), int(row["step"]),
                np.array([v["true_x"], v["true_y"]]), np.array([v["est_x"], v["est_y"]]),
                np.array([[v["cov_xx"], v["cov_xy"]], [v["cov_xy"], v["cov_yy"]]]),
            ))
    return out


def outside_fraction(records, level=0.95) -> float:
    """Fraction of NEES values outside the two-sided interval at ``level``."""
    return float(1.0 - consistency_curve(records, [level])[0])
