"""Self-contained verification battery behind ``bdrlab verify``.

Each check is an independent oracle: finite differences against the
backward pass, closed forms against autodiff, exhaustive identities on
random inputs, and an analytic quadratic toy where the peak-forgetting
bound must hold with no slack term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import balance
from .diagnostics import cauchy_check, f_max, hessian_top_eigen
from .tensor import (
    Tensor,
    ce_with_offset,
    finite_diff_check,
    kl_to_softmax,
    log_softmax,
    matmul,
    relu,
    weighted_ce,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _nudge_from_zero(x, margin=0.05):
    x = x.copy()
    x[np.abs(x) < margin] += 2 * margin
    return x


def check_gradient_oracle(instances=100, seed=0, tol=1e-5):
    """Finite differences vs backward pass for every differentiable op."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    while cases < instances:
        b, k, d = rng.integers(2, 6), rng.integers(2, 6), rng.integers(2, 6)
        labels = rng.integers(0, k, b)
        offs = rng.normal(0.0, 1.5, k)
        w_right = rng.standard_normal((d, k))
        w_left = Tensor(rng.standard_normal((b, d)))
        w_out = rng.standard_normal((k, k))
        mixer = rng.standard_normal((b, k))
        weights = rng.uniform(0.1, 3.0, b)
        target_logp = log_softmax(rng.standard_normal((b, k)))
        checks = [
            (rng.standard_normal((b, d)), lambda x: (matmul(x, w_right) * mixer).sum()),
            (rng.standard_normal((d, k)), lambda x: (matmul(w_left, x) * mixer).sum()),
            (_nudge_from_zero(rng.standard_normal((b, k))), lambda x: (relu(x) * mixer).sum()),
            (rng.standard_normal((b, k)), lambda x: ((x * mixer + 0.5) * 2.0 - x).mean()),
            (rng.standard_normal((b, k)), lambda x: ce_with_offset(x, offs, labels)),
            (rng.standard_normal((b, k)), lambda x: weighted_ce(x, labels, weights)),
            (rng.standard_normal((b, k)), lambda x: kl_to_softmax(x, target_logp)),
            (rng.standard_normal((b, k + 2)), lambda x: ce_with_offset(x[:, 1 : k + 1], offs, labels)),
            (
                rng.standard_normal((b, d)),
                lambda x: ce_with_offset(matmul(relu(matmul(x, w_right)), w_out), offs, labels),
            ),
        ]
        for value, fn in checks:
            worst = max(worst, finite_diff_check(fn, Tensor(value)))
            cases += 1
    return CheckResult(
        "gradient oracle",
        worst < tol,
        f"{cases} instances, max relative error {worst:.3e} (tolerance {tol:.0e})",
    )


def check_shift_invariance(trials=200, seed=1, tol=1e-12):
    """Adding a constant to every offset must not change the loss, even a
    constant large enough that an unstabilised softmax would overflow."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        b, k = rng.integers(1, 8), rng.integers(2, 7)
        z = rng.normal(0.0, 3.0, (b, k))
        offs = rng.normal(0.0, 2.0, k)
        shift = rng.normal(0.0, 5.0) if trial % 4 else rng.choice([-900.0, 900.0])
        labels = rng.integers(0, k, b)
        base = ce_with_offset(Tensor(z), offs, labels).item()
        moved = ce_with_offset(Tensor(z), offs + shift, labels).item()
        worst = max(worst, abs(base - moved))
    return CheckResult("offset shift invariance", worst < tol, f"max deviation {worst:.3e}")


def check_binary_saturation(tol=1e-10):
    """Two-class gradient on the true logit matches -1/(1 + e^gap) and decays.

    The same gaps are replayed at logit magnitude ~800, where only a
    stabilised softmax keeps the gradient finite.
    """
    gaps = np.linspace(-20.0, 20.0, 401)
    worst = 0.0
    magnitudes = []
    for gap in gaps:
        for base in (0.0, 800.0):
            logits = Tensor(np.array([[base + gap / 2.0, base - gap / 2.0]]), requires_grad=True)
            ce_with_offset(logits, np.zeros(2), np.array([0])).backward()
            grad_true = logits.grad[0, 0]
            closed = -1.0 / (1.0 + np.exp(gap))
            worst = max(worst, abs(grad_true - closed))
            if base == 0.0:
                magnitudes.append(abs(grad_true))
    decreasing = all(m1 > m2 for m1, m2 in zip(magnitudes, magnitudes[1:]))
    vanishes = magnitudes[-1] < 1e-8
    return CheckResult(
        "binary saturation closed form",
        worst < tol and decreasing and vanishes,
        f"max deviation {worst:.3e}, strictly decreasing={decreasing}, tail={magnitudes[-1]:.1e}",
    )


def check_cauchy_identity(trials=1000, seed=2, tol=1e-10):
    """gap == ||a-b||^2 / N^2 for random pairs, and exactly 0 when a == b."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        dim = rng.integers(1, 80)
        n = int(rng.integers(1, 500))
        a = rng.standard_normal(dim)
        b = rng.standard_normal(dim)
        _, _, gap = cauchy_check(a, b, n)
        expect = float(np.dot(a - b, a - b)) / (n * n)
        worst = max(worst, abs(gap - expect))
    a = rng.standard_normal(32)
    _, _, equal_gap = cauchy_check(a, a.copy(), 7)
    exact_zero = equal_gap == 0.0
    return CheckResult(
        "gradient-balance gap identity",
        worst < tol and exact_zero,
        f"max deviation {worst:.3e}, equal-contribution gap is exactly {equal_gap}",
    )


def _random_problem(rng):
    k = int(rng.integers(2, 6))
    n_points = int(rng.integers(3, 13))
    table = rng.uniform(0.05, 1.0, (k, n_points))
    table /= table.sum(axis=1, keepdims=True)
    priors = rng.uniform(1.0, 20.0, k)  # up to 20:1 skew
    priors /= priors.sum()
    return table, priors


def disagreement_problem():
    """A table where the plain risk minimizer picks the frequent class at a
    point the balanced-optimal rule assigns to the rare class."""
    table = np.array([[0.6, 0.4], [0.4, 0.6]])
    priors = np.array([0.9, 0.1])
    return table, priors


def check_balanced_risk(problems=50, seed=3):
    """Balanced-risk minimizers must match the balanced-error optimum; the
    unadjusted minimizer must disagree on the constructed skewed problem."""
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(problems):
        table, priors = _random_problem(rng)
        if not balance.balanced_risk_equivalence(table, priors, trials=3, seed=int(rng.integers(1 << 31))):
            failures += 1
    table, priors = disagreement_problem()
    adjusted_ok = balance.balanced_risk_equivalence(table, priors, trials=5, seed=0)
    plain = balance.risk_decision_rule(table, priors, adjusted=False, trials=5, seed=0)
    balanced = np.argmax(table, axis=0)
    plain_disagrees = bool(np.any(plain != balanced))
    passed = failures == 0 and adjusted_ok and plain_disagrees
    return CheckResult(
        "balanced-risk equivalence oracle",
        passed,
        f"{problems} random problems, {failures} disagreements; "
        f"constructed case: adjusted agrees={adjusted_ok}, unadjusted disagrees={plain_disagrees}",
    )


def _quadratic_grad_fn(matrix):
    def grad_fn(vec):
        leaf = Tensor(vec[None, :].copy(), requires_grad=True)
        (0.5 * (matmul(leaf, matrix) * leaf).sum()).backward()
        return leaf.grad.ravel().copy()

    return grad_fn


def _random_psd(rng, dim):
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigenvalues = rng.uniform(0.1, 10.0, dim)
    return (basis * eigenvalues) @ basis.T, eigenvalues.max()


def check_hessian_estimator(problems=20, seed=4, tol=1e-3):
    """Power iteration within relative tolerance of the exact top eigenvalue."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(problems):
        dim = int(rng.integers(2, 21))
        matrix, top = _random_psd(rng, dim)
        estimate = hessian_top_eigen(
            _quadratic_grad_fn(matrix), np.zeros(dim), iters=5000, tol=1e-10, seed=int(rng.integers(1 << 31))
        )
        worst = max(worst, abs(estimate - top) / top)
    return CheckResult(
        "curvature estimator", worst < tol, f"{problems} quadratics, max relative error {worst:.3e}"
    )


def check_toy_bound(problems=10, seed=5):
    """Quadratic toy with a fully-learnt previous phase: the peak-forgetting
    bound must hold with zero slack."""
    rng = np.random.default_rng(seed)
    ok = True
    details = []
    for _ in range(problems):
        dim = int(rng.integers(2, 9))
        old_hessian, _ = _random_psd(rng, dim)
        new_hessian, new_top = _random_psd(rng, dim)
        target = rng.standard_normal(dim) * 2.0
        lr = min(0.1, 1.0 / new_top)
        theta = np.zeros(dim)  # previous-phase optimum; old loss is 0 here
        old_losses = [0.0]
        grad_sq = []
        for _step in range(40):
            grad = new_hessian @ (theta - target)
            grad_sq.append(float(np.dot(grad, grad)))
            theta = theta - lr * grad
            old_losses.append(0.5 * float(theta @ old_hessian @ theta))
        rise, peak = f_max(old_losses)
        sigma = hessian_top_eigen(
            _quadratic_grad_fn(old_hessian), np.zeros(dim), iters=5000, tol=1e-10, seed=seed
        )
        bound = 0.5 * peak * lr * lr * sigma * float(np.sum(grad_sq[:peak]))
        margin = bound - rise
        ok = ok and margin >= -1e-9 * max(1.0, bound)
        details.append(margin)
    smallest = min(details) if details else 0.0
    return CheckResult(
        "peak-forgetting bound on analytic toy",
        ok,
        f"{problems} toys, smallest bound margin {smallest:.3e}",
    )


def check_compensation_monotonic(trials=200, seed=6):
    """Lowering one class's variance must strictly raise its weight."""
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(trials):
        k = int(rng.integers(2, 8))
        variances = rng.uniform(0.2, 5.0, k)
        target = int(rng.integers(0, k))
        before = balance.compensation(variances)[target]
        lowered = variances.copy()
        lowered[target] *= rng.uniform(0.1, 0.9)
        after = balance.compensation(lowered)[target]
        ok = ok and after > before
    return CheckResult("compensation monotonicity", ok, f"{trials} perturbations, all strict increases" if ok else "violation found")


def check_exact_reduction(trials=1000, seed=7, tol=1e-12):
    """Uniform mixing weights (or tau = 0) must reproduce plain cross-entropy."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        b, k = int(rng.integers(1, 9)), int(rng.integers(2, 7))
        z = Tensor(rng.normal(0.0, 3.0, (b, k)))
        labels = rng.integers(0, k, b)
        plain = ce_with_offset(z, np.zeros(k), labels).item()
        uniform = np.full(k, 1.0 / k)
        schedule = balance.init_schedule(uniform, uniform, m=1.0, m_prime=0.8, beta=0.99, tau=1.0)
        worst = max(worst, abs(balance.bdr_loss(z, labels, schedule).item() - plain))
        skewed = balance.init_schedule(
            rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k)), m=0.8, m_prime=0.8, beta=0.99, tau=0.0
        )
        worst = max(worst, abs(balance.bdr_loss(z, labels, skewed).item() - plain))
    return CheckResult("exact reduction to plain cross-entropy", worst < tol, f"max deviation {worst:.3e}")


def run_all():
    return [
        check_gradient_oracle(),
        check_shift_invariance(),
        check_binary_saturation(),
        check_cauchy_identity(),
        check_exact_reduction(),
        check_compensation_monotonic(),
        check_hessian_estimator(),
        check_toy_bound(),
        check_balanced_risk(),
    ]
