"""Exponential-family geometry and exact likelihood decomposition.

Finite-support exponential families supply the log-partition, its
gradient (the mean coordinates) and a numerically evaluated Legendre
dual.  On top of these the module provides dual Bregman divergences with
which layer outputs can be compared, the data-processing contraction of
KL divergence through stochastic kernels, and the exact decomposition of
the log likelihood of enumerable layered discrete models into the
expected-data term plus one KL divergence per scale.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import reduce
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, DomainError, NumericError, ShapeError
from .net import NetworkParams, forward
from .poset import ActivationRule, KernelSpec, conditional_group_law, estimate_indicator

__all__ = [
    "ConvexFunction",
    "DecompositionReport",
    "ExpFamilyModel",
    "FpBpReport",
    "LayeredDiscreteModel",
    "NeuronCoords",
    "bernoulli_entropy",
    "bregman_divergence",
    "contraction_check",
    "decompose_likelihood",
    "deformation_scenario",
    "dual_of",
    "fp_bp_semantics_check",
    "kl_divergence",
    "neuron_coordinates",
    "quadratic_potential",
]


# ---------------------------------------------------------------------------
# finite-support exponential families
# ---------------------------------------------------------------------------


class ExpFamilyModel:
    """Exponential family over a finite support.

    The density against the base weights is proportional to
    ``exp(<f(theta; h), g(x)>)`` where ``g`` is the sufficient statistic
    and ``f`` the composition function mapping parameters and a
    conditioning context to the natural parameter vector.  The
    log-partition, its gradient and the Legendre dual are evaluated
    numerically by exact summation over the support.
    """

    def __init__(self, support, suff_stat: Callable, composition: Callable = None,
                 base_weights=None):
        support = np.asarray(support, dtype=float)
        if support.ndim == 1:
            support = support[:, None]
        self.support = support
        self.suff_stat = suff_stat
        stats = np.asarray([np.atleast_1d(np.asarray(suff_stat(x), dtype=float))
                            for x in support])
        self._stats = stats
        if base_weights is None:
            base_weights = np.ones(support.shape[0])
        self.base_weights = np.asarray(base_weights, dtype=float)
        if np.any(self.base_weights <= 0):
            raise DomainError("base weights must be positive")
        if self.base_weights.shape[0] != support.shape[0]:
            raise ShapeError("base weights must match the support size")
        self.composition = composition if composition is not None else (lambda theta, h: theta)

    @property
    def dim(self) -> int:
        return self._stats.shape[1]

    def _natural(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if t.shape != (self.dim,):
            raise ShapeError(f"natural parameter has shape {t.shape}, expected ({self.dim},)")
        return t

    def log_partition(self, t) -> float:
        t = self._natural(t)
        value = float(logsumexp(self._stats @ t + np.log(self.base_weights)))
        if not np.isfinite(value):
            raise NumericError("divergent normalizer")
        return value

    def probabilities(self, t) -> np.ndarray:
        t = self._natural(t)
        logits = self._stats @ t + np.log(self.base_weights)
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def mean(self, t) -> np.ndarray:
        """Gradient of the log-partition: the expected sufficient statistic."""
        return self.probabilities(t) @ self._stats

    def covariance(self, t) -> np.ndarray:
        p = self.probabilities(t)
        centered = self._stats - p @ self._stats
        return (centered * p[:, None]).T @ centered

    def mean_to_natural(self, eta, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
        """Solve grad log_partition(t) = eta by safeguarded Newton ascent.

        Raises :class:`DomainError` when ``eta`` is not strictly inside
        the convex hull of the sufficient statistics (the maximizer then
        runs away to infinity).
        """
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        if eta.shape != (self.dim,):
            raise ShapeError(f"mean coordinate has shape {eta.shape}, expected ({self.dim},)")
        lo = self._stats.min(axis=0)
        hi = self._stats.max(axis=0)
        if np.any(eta <= lo - 1e-12) or np.any(eta >= hi + 1e-12):
            raise DomainError(f"mean coordinate {eta} outside the statistic hull")
        t = np.zeros(self.dim)
        scale = max(1.0, float(np.abs(eta).max()))
        for _ in range(max_iter):
            grad = eta - self.mean(t)
            if np.abs(grad).max() <= tol * scale:
                # one polishing Newton step: near saturation the inverse
                # curvature amplifies the gradient residual into the natural
                # parameter, and quadratic convergence squares it away
                hess = self.covariance(t)
                try:
                    return t + np.linalg.solve(hess + 1e-14 * np.eye(self.dim), grad)
                except np.linalg.LinAlgError:
                    return t
            hess = self.covariance(t)
            try:
                step = np.linalg.solve(hess + 1e-14 * np.eye(self.dim), grad)
            except np.linalg.LinAlgError:
                step = grad
            # backtracking on the concave objective <t, eta> - psi(t); ties at
            # float resolution accept the full step so the search cannot stall
            base = t @ eta - self.log_partition(t)
            slack = 1e-15 * (1.0 + abs(base))
            alpha = 1.0
            for _ in range(60):
                cand = t + alpha * step
                if cand @ eta - self.log_partition(cand) >= base - slack:
                    break
                alpha /= 2.0
            t = t + alpha * step
            if np.abs(t).max() > 500.0:
                raise DomainError(f"mean coordinate {eta} on or outside the hull boundary")
        raise NumericError("dual coordinate solve did not converge")

    def psi_star(self, eta) -> float:
        """Legendre dual of the log-partition at a mean coordinate."""
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        t = self.mean_to_natural(eta)
        return float(t @ eta - self.log_partition(t))


@dataclass(frozen=True)
class NeuronCoords:
    """Mean coordinates of one conditioning context."""

    eta: np.ndarray
    h_context: object


def neuron_coordinates(model: ExpFamilyModel, theta, h, fd_step: float = 1e-5) -> NeuronCoords:
    """Mean coordinates at the composed natural parameter, computed two ways.

    The direct expectation over the normalized kernel must agree with a
    central finite difference of the log-partition within 1e-8; the
    mismatch raises :class:`NumericError`.
    """
    t = np.atleast_1d(np.asarray(model.composition(theta, h), dtype=float))
    eta = model.mean(t)
    fd = np.empty_like(eta)
    for i in range(t.size):
        e = np.zeros_like(t)
        e[i] = fd_step
        fd[i] = (model.log_partition(t + e) - model.log_partition(t - e)) / (2 * fd_step)
    if np.abs(eta - fd).max() > 1e-8:
        raise NumericError(
            f"gradient and expectation disagree by {np.abs(eta - fd).max():.3e}"
        )
    return NeuronCoords(eta=eta, h_context=h)


# ---------------------------------------------------------------------------
# Bregman divergences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvexFunction:
    """Convex potential with gradient, enough to define a Bregman divergence."""

    value: Callable
    grad: Callable


def quadratic_potential() -> ConvexFunction:
    """Self-dual potential |eta|^2 / 2; its divergence is half squared distance."""
    return ConvexFunction(
        value=lambda eta: 0.5 * float(np.dot(eta, eta)),
        grad=lambda eta: np.asarray(eta, dtype=float),
    )


def bernoulli_entropy() -> ConvexFunction:
    """Dual potential of the product-Bernoulli family on (0, 1)^n."""

    def _check(eta):
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        if np.any(eta <= 0) or np.any(eta >= 1):
            raise DomainError("Bernoulli mean coordinates must lie in (0, 1)")
        return eta

    return ConvexFunction(
        value=lambda eta: float(np.sum(_check(eta) * np.log(_check(eta))
                                       + (1 - _check(eta)) * np.log1p(-_check(eta)))),
        grad=lambda eta: np.log(_check(eta) / (1 - _check(eta))),
    )


def dual_of(model: ExpFamilyModel) -> ConvexFunction:
    """Numerically evaluated Legendre dual of a family's log-partition."""
    return ConvexFunction(value=model.psi_star, grad=model.mean_to_natural)


def log_partition_of(model: ExpFamilyModel) -> ConvexFunction:
    return ConvexFunction(value=model.log_partition, grad=model.mean)


def bregman_divergence(psi_star: ConvexFunction, eta, eta_prime) -> float:
    """Divergence D[eta_prime : eta] of the potential.

    Evaluates the potential at ``eta_prime`` minus its linearization at
    ``eta``; nonnegative for convex potentials, zero only at equal
    arguments when the potential is strictly convex.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    eta_prime = np.atleast_1d(np.asarray(eta_prime, dtype=float))
    if eta.shape != eta_prime.shape:
        raise ShapeError("coordinates must have matching shapes")
    value = psi_star.value(eta_prime) - psi_star.value(eta)
    value = float(value - np.asarray(psi_star.grad(eta)) @ (eta_prime - eta))
    # nonnegative for convex potentials; tiny negatives are cancellation noise
    if -1e-12 < value < 0.0:
        return 0.0
    return value


# ---------------------------------------------------------------------------
# divergence contraction
# ---------------------------------------------------------------------------


def kl_divergence(p, q) -> float:
    """KL divergence in nats with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ShapeError("pmfs must have matching shapes")
    active = p > 0
    if np.any(q[active] == 0):
        return np.inf
    value = float(np.sum(p[active] * (np.log(p[active]) - np.log(q[active]))))
    # KL is nonnegative; values in (-1e-12, 0) are pure rounding error.
    if -1e-12 < value < 0.0:
        return 0.0
    return value


def _check_pmf(p, tol, what):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise DomainError(f"{what} is not a valid pmf")
    return p


def contraction_check(p, q, kernels, tol: float = 1e-12) -> np.ndarray:
    """KL divergence along a chain of row-stochastic kernels.

    Returns the stagewise divergences ``[D_0, D_1, ...]`` between the two
    pushforwards; by the data-processing inequality the sequence never
    increases when the kernels are exactly stochastic.
    """
    p = _check_pmf(p, tol, "p")
    q = _check_pmf(q, tol, "q")
    if p.shape != q.shape:
        raise ShapeError("p and q must have matching shapes")
    stages = [kl_divergence(p, q)]
    for i, k in enumerate(kernels):
        k = np.asarray(k, dtype=float)
        if k.ndim != 2 or k.shape[0] != p.shape[0]:
            raise ShapeError(f"kernel {i} has shape {k.shape}, expected ({p.shape[0]}, ...)")
        if np.any(k < 0) or np.abs(k.sum(axis=1) - 1.0).max() > tol:
            raise DomainError(f"kernel {i} is not row-stochastic")
        p = k.T @ p
        q = k.T @ q
        stages.append(kl_divergence(p, q))
    return np.asarray(stages)


def deformation_scenario(base, shift: int, net: NetworkParams) -> np.ndarray:
    """Per-layer divergence between a signal and its cyclic translation.

    Both inputs are pushed through the network's layers; each layer's
    logistic outputs are read as per-coordinate Bernoulli means and
    compared with the dual Bregman divergence.  The sequence is emitted
    for inspection; monotonicity is a property of exact kernels and is
    not asserted here.
    """
    base = np.asarray(base, dtype=float)
    if net.rule is not ActivationRule.PARTIAL_EXPECTATION_01:
        raise DomainError("deformation comparison needs logistic-mean layers")
    if not -base.size < shift < base.size:
        raise DomainError(f"shift {shift} outside the signal length {base.size}")
    shifted = np.roll(base, shift)
    potential = bernoulli_entropy()
    _, states = forward(net, base)
    _, states_shifted = forward(net, shifted)
    return np.asarray([
        bregman_divergence(potential, s.h_tilde, s2.h_tilde)
        for s, s2 in zip(states, states_shifted)
    ])


# ---------------------------------------------------------------------------
# layered discrete models and the likelihood decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayeredDiscreteModel:
    """Chain of discrete-indicator scales over a finite input support.

    Scale ``s`` receives the deterministic transport of the input (the
    estimated indicator of the previous scale) and assigns its indicator
    the per-coordinate law of the kernel, making the scales conditionally
    independent given the input.  All state spaces are enumerable.
    """

    x_support: np.ndarray
    scales: tuple[KernelSpec, ...]
    transport_rule: ActivationRule = ActivationRule.PARTIAL_EXPECTATION_01
    max_states: int = 10 ** 6

    def __post_init__(self):
        support = np.asarray(self.x_support, dtype=float)
        if support.ndim == 1:
            support = support[:, None]
        object.__setattr__(self, "x_support", support)
        object.__setattr__(self, "scales", tuple(self.scales))
        dim = support.shape[1]
        for i, spec in enumerate(self.scales):
            if spec.in_dim != dim:
                raise ShapeError(
                    f"scale {i} kernel expects {spec.in_dim} inputs, previous width is {dim}"
                )
            dim = spec.out_dim

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    def scale_states(self, s: int) -> np.ndarray:
        """All indicator realizations of scale ``s`` as rows."""
        spec = self.scales[s]
        values = spec.values
        return np.asarray(list(itertools.product(values, repeat=spec.out_dim)))

    def n_joint_states(self) -> int:
        total = self.x_support.shape[0]
        for spec in self.scales:
            total *= len(spec.values) ** spec.out_dim
        return total

    def transports(self, x) -> list[np.ndarray]:
        """Deterministic inputs seen by each scale for one observed x."""
        t = np.asarray(x, dtype=float)
        inputs = []
        for spec in self.scales:
            inputs.append(t)
            t, _ = estimate_indicator(self.transport_rule, spec.weight.T @ t)
        return inputs

    def conditionals(self, x) -> list[np.ndarray]:
        """Per-scale pmfs over the enumerated states given one observed x."""
        pmfs = []
        for s, (spec, t) in enumerate(zip(self.scales, self.transports(x))):
            law = conditional_group_law(spec, t)
            states = self.scale_states(s)
            hi = spec.values[1]
            probs = np.where(states == hi, law[:, 1], law[:, 0])
            pmfs.append(np.prod(probs, axis=1))
        return pmfs


@dataclass(frozen=True)
class DecompositionReport:
    """Exact split of the log likelihood into bound plus per-scale KL terms."""

    complete_ll: float
    expected_ll: float
    kl_terms: tuple[float, ...]
    identity_defect: float


def _validate_nu(model: LayeredDiscreteModel, nu) -> list[np.ndarray]:
    if len(nu) != model.n_scales:
        raise DomainError(f"need one assigned pmf per scale, got {len(nu)}")
    out = []
    for s, pmf in enumerate(nu):
        pmf = _check_pmf(pmf, 1e-9, f"nu[{s}]")
        expected = model.scale_states(s).shape[0]
        if pmf.shape[0] != expected:
            raise ShapeError(f"nu[{s}] has {pmf.shape[0]} entries, scale has {expected} states")
        out.append(pmf)
    return out


def decompose_likelihood(model: LayeredDiscreteModel, data, nu) -> DecompositionReport:
    """Exact decomposition of the log likelihood by joint enumeration.

    ``data`` is the observed-input pmf over the model's support and ``nu``
    assigns one pmf per scale.  The complete term is the expected log of
    the marginal likelihood obtained by summing the joint over all hidden
    states; the expected term averages ``ln p(x, h) - ln q(h)`` under the
    factored assignment ``q``; the per-scale terms are the KL divergences
    from the assignments to the model conditionals.  The three quantities
    are computed independently; their identity defect is reported.
    """
    data = _check_pmf(data, 1e-9, "data")
    if data.shape[0] != model.x_support.shape[0]:
        raise ShapeError("data pmf must match the support size")
    if model.n_joint_states() > model.max_states:
        raise CapacityError(
            f"joint support has {model.n_joint_states()} states, budget {model.max_states}"
        )
    nus = _validate_nu(model, nu)
    log_nus = [np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf) for v in nus]
    complete = 0.0
    expected = 0.0
    kl_terms = np.zeros(model.n_scales)
    for w, x in zip(data, model.x_support):
        if w == 0.0:
            continue
        conds = model.conditionals(x)
        for s, (cond, v) in enumerate(zip(conds, nus)):
            bad = np.flatnonzero((v > 0) & (cond == 0))
            if bad.size:
                state = model.scale_states(s)[bad[0]]
                raise DomainError(
                    f"assigned pmf at scale {s} weights state {state} with zero conditional probability"
                )
            kl_terms[s] += w * kl_divergence(v, cond)
        with np.errstate(divide="ignore"):
            log_conds = [np.log(c) for c in conds]
        # joint arrays over the product of scale states
        log_joint = reduce(np.add.outer, log_conds)
        q_joint = reduce(np.multiply.outer, nus)
        log_q = reduce(np.add.outer, log_nus)
        marginal = float(np.exp(logsumexp(log_joint)))
        complete += w * float(np.log(w * marginal))
        active = q_joint > 0
        expected += w * float(
            np.sum(q_joint[active] * (np.log(w) + log_joint[active] - log_q[active]))
        )
    defect = abs(complete - (expected + kl_terms.sum()))
    return DecompositionReport(complete, expected, tuple(kl_terms), float(defect))


def posterior_assignments(model: LayeredDiscreteModel, data) -> list[np.ndarray]:
    """Per-scale assignments maximizing the expected term.

    For a one-hot data pmf these are the exact posteriors given the
    observed input; in general they are the normalized geometric means of
    the conditionals under the data weights.
    """
    data = _check_pmf(data, 1e-9, "data")
    out = []
    for s in range(model.n_scales):
        log_mix = None
        for w, x in zip(data, model.x_support):
            if w == 0.0:
                continue
            with np.errstate(divide="ignore"):
                term = w * np.log(model.conditionals(x)[s])
            log_mix = term if log_mix is None else log_mix + term
        log_mix -= logsumexp(log_mix)
        out.append(np.exp(log_mix))
    return out


def top_scale_kl(model: LayeredDiscreteModel, data, top_nu) -> float:
    """Supervised discrepancy at the top scale under the data pmf."""
    data = _check_pmf(data, 1e-9, "data")
    top_nu = _check_pmf(top_nu, 1e-9, "top_nu")
    total = 0.0
    for w, x in zip(data, model.x_support):
        if w == 0.0:
            continue
        total += w * kl_divergence(top_nu, model.conditionals(x)[-1])
    return total


def _with_top_weights(model: LayeredDiscreteModel, flat) -> LayeredDiscreteModel:
    spec = model.scales[-1]
    weight = np.asarray(flat, dtype=float).reshape(spec.weight.shape)
    scales = model.scales[:-1] + (KernelSpec(weight, spec.field),)
    return LayeredDiscreteModel(model.x_support, scales, model.transport_rule, model.max_states)


def top_kl_gradient(model: LayeredDiscreteModel, data, top_nu, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of the top-scale KL in the top weights."""
    theta = model.scales[-1].weight.ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        up = top_scale_kl(_with_top_weights(model, theta + e), data, top_nu)
        down = top_scale_kl(_with_top_weights(model, theta - e), data, top_nu)
        grad[i] = (up - down) / (2 * step)
    return grad


@dataclass(frozen=True)
class FpBpReport:
    """Outcome of the forward/backward semantics checks."""

    posterior_ll: float
    best_competitor_ll: float
    fp_ok: bool
    kl_before: float
    kl_after: float
    bp_ok: bool


def fp_bp_semantics_check(
    model: LayeredDiscreteModel,
    data,
    rng,
    top_nu=None,
    n_competitors: int = 200,
    step: float = 1e-4,
) -> FpBpReport:
    """Verify the two halves of the training semantics.

    Forward: the posterior assignments attain the maximal expected term
    against random competitor assignments.  Backward: one step against
    the finite-difference gradient of the supervised top-scale KL strictly
    decreases that term.
    """
    posterior = posterior_assignments(model, data)
    best = decompose_likelihood(model, data, posterior).expected_ll
    top = None
    for _ in range(n_competitors):
        candidate = [rng.dirichlet(np.ones(p.shape[0])) for p in posterior]
        value = decompose_likelihood(model, data, candidate).expected_ll
        top = value if top is None else max(top, value)
    fp_ok = top <= best + 1e-12
    if top_nu is None:
        top_nu = np.zeros(model.scale_states(model.n_scales - 1).shape[0])
        top_nu[0] = 1.0
    kl_before = top_scale_kl(model, data, top_nu)
    grad = top_kl_gradient(model, data, top_nu)
    theta = model.scales[-1].weight.ravel() - step * grad
    kl_after = top_scale_kl(_with_top_weights(model, theta), data, top_nu)
    bp_ok = kl_after < kl_before or np.abs(grad).max() < 1e-10
    return FpBpReport(best, float(top), bool(fp_ok), kl_before, kl_after, bool(bp_ok))
