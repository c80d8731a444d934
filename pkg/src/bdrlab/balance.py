"""Class-balancing logit offsets for replay training.

Each class carries two signals: a quantity prior (its share of the merged
training set) and a training-status weight (normalized inverse intra-class
feature variance). Blending them gives per-class mixing weights whose log,
added to the logits, throttles the gradient pull of classes that are ahead
-- which is what keeps a flood of new-class samples from trampling the old
decision boundaries, without the over-correction a pure frequency prior
causes.

Conventions fixed here:
  * intra-class variance reduces to one scalar per class by averaging the
    per-dimension variances;
  * variances are floored at ``VARIANCE_FLOOR`` before inversion so a
    collapsed class cannot produce an infinite weight;
  * the initial mix is frozen at phase start and momentum-blended with the
    running mix on every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .tensor import Tensor, ce_with_offset

VARIANCE_FLOOR = 1e-8


def class_priors(counts):
    """Normalized class frequencies; every class must have at least one sample."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError(f"counts must be a non-empty vector, got shape {c.shape}")
    if np.any(c < 1):
        raise ValueError(f"every class needs at least one sample, got counts {c.tolist()}")
    return c / c.sum()


def scalar_variance(features, mean):
    """Mean squared deviation from ``mean``, averaged over samples and dimensions."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    m = np.asarray(mean, dtype=np.float64).ravel()
    if f.shape[0] == 0 or f.shape[1] != m.size:
        raise ValueError(f"features shape {f.shape} does not match mean of size {m.size}")
    return float(((f - m) ** 2).mean())


def compensation(variances):
    """Normalized inverse-variance weights: lower variance, higher weight."""
    v = np.asarray(variances, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"variances must be a non-empty vector, got shape {v.shape}")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError(f"variances must be finite and non-negative, got {v.tolist()}")
    if not np.any(v > 0):
        raise ValueError("all-zero variances: training status is degenerate")
    inv = 1.0 / np.maximum(v, VARIANCE_FLOOR)
    return inv / inv.sum()


@dataclass
class ClassStats:
    """Running per-class feature statistics over the merged training set."""

    mean: np.ndarray  # K x f feature means
    variance: np.ndarray  # K scalar intra-class variances
    count: np.ndarray  # K per-class totals in the merged set (fixed per phase)

    def weights(self):
        return compensation(self.variance)


def stats_from_pass(features, labels, class_count):
    """Phase-start snapshot: exact means and variances from one full pass."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    means = np.zeros((class_count, f.shape[1]))
    variances = np.zeros(class_count)
    counts = np.zeros(class_count)
    for k in range(class_count):
        rows = f[y == k]
        if rows.shape[0] == 0:
            raise ValueError(f"class {k} has no samples in the merged training set")
        means[k] = rows.mean(axis=0)
        variances[k] = scalar_variance(rows, means[k])
        counts[k] = rows.shape[0]
    return ClassStats(means, variances, counts)


@dataclass
class OffsetSchedule:
    """Per-class mixing weights and the hyper-parameters that move them."""

    priors: np.ndarray  # quantity priors, fixed per phase
    pi_init: np.ndarray  # initial blend, frozen at phase start
    pi_prime: np.ndarray  # running blend, refreshed every step
    pi_hat: np.ndarray  # momentum combination used in the loss
    m: float
    m_prime: float
    beta: float
    tau: float


def _check_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


def init_schedule(priors, weights_at_init, m, m_prime, beta, tau=1.0):
    """Freeze the phase-start blend of priors and status weights.

    ``m`` only acts here; ``m_prime`` takes over during training and ``beta``
    controls how much the frozen blend keeps dominating.
    """
    psi = np.asarray(priors, dtype=np.float64)
    omega = np.asarray(weights_at_init, dtype=np.float64)
    if psi.shape != omega.shape or psi.ndim != 1:
        raise ValueError(f"priors shape {psi.shape} does not match weights shape {omega.shape}")
    m = _check_unit("m", m)
    m_prime = _check_unit("m_prime", m_prime)
    beta = _check_unit("beta", beta)
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    pi = m * psi + (1.0 - m) * omega
    return OffsetSchedule(
        priors=psi.copy(),
        pi_init=pi,
        pi_prime=pi.copy(),
        pi_hat=pi.copy(),
        m=m,
        m_prime=m_prime,
        beta=beta,
        tau=float(tau),
    )


def momentum_update(stats: ClassStats, schedule: OffsetSchedule, batch_features, batch_labels):
    """Fold one batch into the running statistics and refresh the mixing weights.

    Classes absent from the batch keep their statistics. The blend weight is
    n/(n + n_k) with n the class's fixed total in the merged set and n_k its
    batch count, so sparse classes track their drift quickly. Returns the
    fresh status weights.
    """
    f = np.asarray(batch_features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    y = np.asarray(batch_labels)
    if y.size and (y.min() < 0 or y.max() >= stats.count.size):
        bad = int(y[(y < 0) | (y >= stats.count.size)][0])
        raise IndexError(f"unknown class id {bad} for {stats.count.size} tracked classes")
    for k in np.unique(y):
        rows = f[y == k]
        n_k = rows.shape[0]
        n = stats.count[k]
        keep = n / (n + n_k)
        new_mean = keep * stats.mean[k] + rows.sum(axis=0) / (n + n_k)
        batch_sq = ((rows - new_mean) ** 2).mean(axis=1).sum()
        stats.variance[k] = keep * stats.variance[k] + batch_sq / (n + n_k)
        stats.mean[k] = new_mean
    omega = compensation(stats.variance)
    schedule.pi_prime = schedule.m_prime * schedule.priors + (1.0 - schedule.m_prime) * omega
    schedule.pi_hat = schedule.beta * schedule.pi_init + (1.0 - schedule.beta) * schedule.pi_prime
    return omega


def offsets(schedule: OffsetSchedule):
    """Per-class logit offsets: tau * log of the current mixing weights."""
    p = schedule.pi_hat
    if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
        raise FloatingPointError(f"mixing weights must be positive and finite, got {p.tolist()}")
    return schedule.tau * np.log(p)


def bdr_loss(logits: Tensor, labels, schedule: OffsetSchedule):
    """Cross-entropy on logits shifted by the schedule's current offsets."""
    k = logits.data.shape[1]
    if schedule.pi_hat.size != k:
        raise ValueError(f"schedule covers {schedule.pi_hat.size} classes but logits have {k}")
    return ce_with_offset(logits, offsets(schedule), labels)


def bal_ce_loss(logits: Tensor, labels, priors, tau=1.0):
    """Constant-rebalancing baseline: cross-entropy shifted by tau * log priors."""
    p = np.asarray(priors, dtype=np.float64)
    if np.any(p <= 0.0):
        raise ValueError("priors must be strictly positive")
    return ce_with_offset(logits, tau * np.log(p), labels)


# -- balanced-risk equivalence oracle ----------------------------------------


def _log_softmax_vec(v):
    s = v - v.max()
    return s - np.log(np.exp(s).sum())


def _point_risk_minimizer(weights, log_adjust, trials, rng):
    # convex in the score vector; restarts guard against optimizer hiccups
    k = weights.size

    def objective(v):
        logp = _log_softmax_vec(v + log_adjust)
        value = -(weights * logp).sum()
        grad = weights.sum() * np.exp(logp) - weights
        return value, grad

    best = None
    for _ in range(max(1, trials)):
        start = rng.standard_normal(k)
        res = minimize(objective, start, jac=True, method="L-BFGS-B")
        if best is None or res.fun < best.fun:
            best = res
    return best.x


def risk_decision_rule(conditional_table, priors, adjusted=True, trials=5, seed=0):
    """Per-point argmax decisions of the numeric expected-risk minimizer.

    ``adjusted`` adds log priors to the scores inside the loss (the balanced
    risk); without it the plain risk is minimized. The search is a brute
    numeric minimization per point, independent of any closed form.
    """
    p_x_given_y = np.asarray(conditional_table, dtype=np.float64)
    psi = np.asarray(priors, dtype=np.float64)
    k, n_points = p_x_given_y.shape
    rng = np.random.default_rng(seed)
    log_adjust = np.log(psi) if adjusted else np.zeros(k)
    decisions = np.full(n_points, -1, dtype=np.int64)
    for x in range(n_points):
        weights = p_x_given_y[:, x] * psi
        if weights.sum() <= 0.0:
            continue  # unreachable point
        scores = _point_risk_minimizer(weights, log_adjust, trials, rng)
        decisions[x] = int(np.argmax(scores))
    return decisions


def _validate_table(conditional_table, priors):
    p = np.asarray(conditional_table, dtype=np.float64)
    psi = np.asarray(priors, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"conditional table must be 2-D (classes x points), got shape {p.shape}")
    k, n_points = p.shape
    if k > 5 or n_points > 12:
        raise ValueError(f"oracle domain is limited to 5 classes x 12 points, got {k} x {n_points}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("malformed table: rows must be distributions over the points")
    if psi.shape != (k,) or np.any(psi <= 0) or not np.isclose(psi.sum(), 1.0, atol=1e-6):
        raise ValueError("priors must be a positive distribution over the classes")
    return p, psi


def balanced_risk_equivalence(conditional_table, priors, trials=5, seed=0):
    """True when the balanced-risk minimizer decides like the balanced-error
    optimum at every reachable point.

    The balanced-error optimum picks argmax_y P(x|y) per point; the other
    side is found by numeric minimization of the prior-adjusted expected
    cross-entropy over score tables, so the two routes share no algebra.
    """
    p, psi = _validate_table(conditional_table, priors)
    adjusted = risk_decision_rule(p, psi, adjusted=True, trials=trials, seed=seed)
    for x in range(p.shape[1]):
        if adjusted[x] < 0:
            continue
        column = p[:, x]
        best = column.max()
        optimal = set(np.flatnonzero(column >= best - 1e-9))
        if adjusted[x] not in optimal:
            return False
    return True
