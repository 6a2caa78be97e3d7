"""Matrix Dyson Equation solver and spectral diagnostics.

The central object is the equation ``I + (z - A + S[M]) M = 0`` with
``Im M`` positive definite and ``Im z > 0``, where ``A`` is the symmetric
expectation matrix and ``S`` the self-energy sandwich operator over the
centered fluctuations.  Its unique solution approximates the resolvent of
the random matrix; the normalized trace is the Stieltjes transform of the
limiting spectral density, recovered on a real grid by inversion at a
small imaginary offset.

The solver is a damped fixed-point iteration ``M <- (1-g) M - g (z - A +
S[M])^{-1}`` with geometric continuation in the imaginary part: each grid
point is solved either warm-started from its neighbor or, failing that,
by a ladder of decreasing offsets starting at ``Im z = 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityError,
    ConvergenceError,
    DomainError,
    NumericError,
    ShapeError,
    StabilityError,
)
from .hessian import HessianBlocks, sample_hessian
from .net import LossL0, NetworkParams
from .poset import ActivationRule

__all__ = [
    "CumulantReport",
    "EmpiricalSelfEnergy",
    "IsotropicSelfEnergy",
    "MDEProblem",
    "MDESolution",
    "SpectralDensity",
    "SupportBoundReport",
    "WignerSelfEnergy",
    "ZeroSelfEnergy",
    "cumulant_diagnostics",
    "density_cdf",
    "empirical_esd",
    "ks_distance",
    "load_problem_json",
    "sample_centered_hessians",
    "sample_wigner",
    "self_energy_apply",
    "self_energy_norm",
    "semicircle_cdf",
    "semicircle_density",
    "solve_mde",
    "stieltjes_invert",
    "support_bound_check",
    "symmetry_check",
    "wigner_stieltjes",
]


# ---------------------------------------------------------------------------
# self-energy operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IsotropicSelfEnergy:
    """Closed-form sandwich ``S[R] = c (tr R / N) I``."""

    c: float = 1.0

    def apply(self, r: np.ndarray) -> np.ndarray:
        n = r.shape[0]
        return self.c * (np.trace(r) / n) * np.eye(n, dtype=r.dtype)


@dataclass(frozen=True)
class WignerSelfEnergy:
    """Symbolic expectation for a symmetric matrix with iid entries.

    For fluctuations with entrywise variance ``sigma2`` the sandwich
    expectation evaluates to ``S[R] = (sigma2 / N)(tr R I + R^T)``.
    """

    sigma2: float = 1.0

    def apply(self, r: np.ndarray) -> np.ndarray:
        n = r.shape[0]
        return (self.sigma2 / n) * (np.trace(r) * np.eye(n, dtype=r.dtype) + r.T)


@dataclass(frozen=True)
class ZeroSelfEnergy:
    """No fluctuations; the Dyson equation degenerates to the resolvent."""

    def apply(self, r: np.ndarray) -> np.ndarray:
        return np.zeros_like(r)


class EmpiricalSelfEnergy:
    """Averaged sandwich over stored fluctuation samples.

    Given samples ``H_i`` of the random matrix, the fluctuations are
    ``W_i = sqrt(N) (H_i - mean)`` and the operator is
    ``S[R] = (1 / (m N)) sum_i W_i R W_i``.
    """

    def __init__(self, fluctuations: np.ndarray):
        w = np.asarray(fluctuations, dtype=float)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ShapeError("fluctuations must be a stack of square matrices")
        self.fluctuations = w

    @classmethod
    def from_samples(cls, samples) -> "EmpiricalSelfEnergy":
        stack = np.stack([
            h.assemble() if isinstance(h, HessianBlocks) else np.asarray(h, dtype=float)
            for h in samples
        ])
        if stack.shape[0] < 2:
            raise DomainError("need at least 2 samples to center fluctuations")
        n = stack.shape[1]
        w = np.sqrt(n) * (stack - stack.mean(axis=0))
        return cls(w)

    def apply(self, r: np.ndarray) -> np.ndarray:
        m, n, _ = self.fluctuations.shape
        out = np.zeros_like(r)
        for w in self.fluctuations:
            out = out + w @ r @ w
        return out / (m * n)


def self_energy_apply(problem: "MDEProblem", r: np.ndarray) -> np.ndarray:
    """Apply the problem's self-energy operator with shape validation."""
    r = np.asarray(r)
    n = problem.a_matrix.shape[0]
    if r.shape != (n, n):
        raise ShapeError(f"matrix has shape {r.shape}, expected ({n}, {n})")
    return problem.self_energy.apply(r)


def self_energy_norm(self_energy, n: int, tol: float = 1e-10, max_iter: int = 1000) -> float:
    """Operator norm of the self-energy via power iteration on matrices.

    The sandwich map is self-adjoint for the Frobenius inner product and
    positivity preserving, so iteration from the identity converges to the
    norm-attaining positive-semidefinite eigenmatrix.
    """
    r = np.eye(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        t = self_energy.apply(r)
        nrm = float(np.linalg.norm(t))
        if nrm == 0.0:
            return 0.0
        lam_new = abs(float(np.tensordot(r, t)))
        r = t / nrm
        if abs(lam_new - lam) <= tol * max(1.0, lam_new):
            return lam_new
        lam = lam_new
    raise NumericError(f"self-energy power iteration did not settle within {max_iter} steps")


def check_self_energy(self_energy, n: int, rng, n_probes: int = 100):
    """Probe positivity preservation and linearity of a self-energy.

    Returns ``(min_probe_eig, linearity_defect)``: the smallest eigenvalue
    of ``S[R]`` over random positive-semidefinite probes ``R`` and the
    largest deviation from additivity/homogeneity over random pairs.
    """
    min_eig = np.inf
    defect = 0.0
    for _ in range(n_probes):
        g = rng.standard_normal((n, n))
        psd = g @ g.T
        out = self_energy.apply(psd)
        min_eig = min(min_eig, float(np.linalg.eigvalsh((out + out.T) / 2).min()))
        a, b = rng.standard_normal(2)
        r = rng.standard_normal((n, n))
        q = rng.standard_normal((n, n))
        lhs = self_energy.apply(a * r + b * q)
        rhs = a * self_energy.apply(r) + b * self_energy.apply(q)
        defect = max(defect, float(np.abs(lhs - rhs).max()))
    return min_eig, defect


# ---------------------------------------------------------------------------
# problem and solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MDEProblem:
    """Expectation matrix, self-energy and spectral-parameter grid."""

    a_matrix: np.ndarray
    self_energy: object
    z_grid: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError("expectation matrix must be square")
        if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
            raise DomainError("expectation matrix must be symmetric")
        z = np.atleast_1d(np.asarray(self.z_grid, dtype=complex))
        if np.any(z.imag <= 0):
            raise DomainError("every spectral parameter must have positive imaginary part")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "z_grid", z)

    @property
    def n(self) -> int:
        return self.a_matrix.shape[0]


@dataclass(frozen=True)
class MDESolution:
    """Solution matrices, certified residuals and normalized traces."""

    z_grid: np.ndarray
    m: np.ndarray
    residuals: np.ndarray
    stieltjes: np.ndarray

    def index_of(self, z: complex) -> int:
        hits = np.flatnonzero(np.abs(self.z_grid - z) <= 1e-12 * max(1.0, abs(z)))
        if hits.size == 0:
            raise DomainError(f"spectral parameter {z} not in the solved grid")
        return int(hits[0])

    def m_at(self, z: complex) -> np.ndarray:
        return self.m[self.index_of(z)]

    def stieltjes_at(self, z: complex) -> complex:
        return complex(self.stieltjes[self.index_of(z)])


def _residual(a, self_energy, z, m):
    n = a.shape[0]
    k = z * np.eye(n) - a + self_energy.apply(m)
    return np.eye(n) + k @ m, k


def _im_part(m):
    return (m - m.conj().T) / 2j


def _iterate(a, self_energy, z, m0, tol, max_iter, damping):
    """Damped fixed point at one spectral parameter.

    The step size is halved whenever the residual grows and recovers
    geometrically (capped at the base value) while it shrinks, so slow
    spiral oscillations near spectral edges do not strand the iteration at
    a tiny step.
    """
    m = m0
    gamma = damping
    res_prev = np.inf
    for _ in range(max_iter):
        r, k = _residual(a, self_energy, z, m)
        res = float(np.linalg.norm(r))
        if res <= tol:
            return m, res, True
        # Sub-5% wobble is normal spiral convergence, not instability.
        if res > 1.05 * res_prev:
            gamma = max(gamma / 2.0, 1.0 / 64.0)
        else:
            gamma = min(gamma * 2.0 ** 0.25, damping)
        try:
            target = -np.linalg.inv(k)
        except np.linalg.LinAlgError:
            return m, res, False
        m = (1.0 - gamma) * m + gamma * target
        res_prev = res
    r, _ = _residual(a, self_energy, z, m)
    return m, float(np.linalg.norm(r)), False


def _ladder_levels(eta_target, eta_start, eta_ratio):
    if eta_target >= eta_start:
        return [eta_target]
    levels = []
    eta = eta_start
    while eta > eta_target * (1 + 1e-12):
        levels.append(eta)
        eta *= eta_ratio
    levels.append(eta_target)
    return levels


def solve_mde(
    problem: MDEProblem,
    tol: float = 1e-10,
    max_iter: int = 10000,
    damping: float = 0.5,
    eta_start: float = 1.0,
    eta_ratio: float = 0.1,
) -> MDESolution:
    """Solve the Dyson equation at every grid point.

    Each point is first attempted warm-started from the previous point's
    solution; on failure it is re-solved by geometric continuation in the
    imaginary offset starting from ``eta_start``.  Raises
    :class:`ConvergenceError` (carrying the last residual) when a point
    cannot reach the tolerance, and :class:`StabilityError` when a
    converged matrix loses its positive imaginary part.
    """
    a = problem.a_matrix
    se = problem.self_energy
    n = problem.n
    ms = np.empty((len(problem.z_grid), n, n), dtype=complex)
    residuals = np.empty(len(problem.z_grid))
    prev = None
    for idx, z in enumerate(problem.z_grid):
        m, res, ok = (None, np.inf, False)
        if prev is not None:
            m, res, ok = _iterate(a, se, z, prev, tol, max_iter, damping)
        if not ok:
            for level, eta in enumerate(_ladder_levels(z.imag, eta_start, eta_ratio)):
                z_level = z.real + 1j * eta
                if level == 0 or m is None:
                    m = -np.linalg.inv(z_level * np.eye(n) - a)
                m, res, ok = _iterate(a, se, z_level, m, tol, max_iter, damping)
                if not ok:
                    raise ConvergenceError(
                        f"no convergence at z={z_level:.6g} (residual {res:.3e})",
                        residual=res,
                    )
        min_im = float(np.linalg.eigvalsh(_im_part(m)).min())
        if min_im <= 0.0:
            raise StabilityError(
                f"solution at z={z:.6g} lost imaginary-part positivity (min eig {min_im:.3e})"
            )
        ms[idx] = m
        residuals[idx] = res
        prev = m
    stieltjes = np.trace(ms, axis1=1, axis2=2) / n
    return MDESolution(problem.z_grid.copy(), ms, residuals, stieltjes)


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralDensity:
    """Sampled density on a real grid, from inversion or from eigenvalues."""

    grid: np.ndarray
    density: np.ndarray
    eta: float
    bin_widths: np.ndarray | None = field(default=None)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        density = np.asarray(self.density, dtype=float)
        if grid.shape != density.shape:
            raise ShapeError("grid and density must have matching shapes")
        if np.any(density < 0):
            raise DomainError("density values must be nonnegative")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", density)

    def mass(self) -> float:
        if self.bin_widths is not None:
            return float(np.sum(self.density * self.bin_widths))
        return float(np.trapezoid(self.density, self.grid))


def stieltjes_invert(
    solution: MDESolution, grid: np.ndarray, eta: float, neg_tol: float = 1e-8
) -> SpectralDensity:
    """Recover the density ``rho(E) = Im m(E + i eta) / pi`` on a real grid.

    Every requested energy must have been solved at offset ``eta``.  The
    imaginary part may dip below zero only by numerical error smaller than
    ``neg_tol``; such values are clipped to zero.
    """
    grid = np.asarray(grid, dtype=float)
    rho = np.empty_like(grid)
    for i, e in enumerate(grid):
        m = solution.stieltjes_at(complex(e, eta))
        rho[i] = m.imag / np.pi
    worst = float(rho.min())
    if worst < -neg_tol:
        raise NumericError(f"density dipped to {worst:.3e}, below the -{neg_tol:g} allowance")
    return SpectralDensity(grid, np.clip(rho, 0.0, None), eta)


def empirical_esd(matrix: np.ndarray, bins: int) -> SpectralDensity:
    """Normalized eigenvalue histogram of a symmetric matrix."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("matrix must be square")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12):
        raise DomainError("matrix must be symmetric")
    try:
        eigs = np.linalg.eigvalsh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    density, edges = np.histogram(eigs, bins=bins, density=True)
    centers = (edges[:-1] + edges[1:]) / 2.0
    return SpectralDensity(centers, density, eta=0.0, bin_widths=np.diff(edges))


def symmetry_check(density: SpectralDensity) -> float:
    """Largest pointwise defect between the density and its reflection.

    The grid must be symmetric about zero; the defect is
    ``max_E |rho(E) - rho(-E)|``.
    """
    order = np.argsort(density.grid)
    grid = density.grid[order]
    rho = density.density[order]
    if np.max(np.abs(grid + grid[::-1])) > 1e-12 * max(1.0, float(np.abs(grid).max())):
        raise DomainError("grid is not symmetric about zero")
    return float(np.max(np.abs(rho - rho[::-1])))


@dataclass(frozen=True)
class SupportBoundReport:
    """Outcome of the Minkowski-sum support check."""

    ok: bool
    halfwidth: float
    spec_a: np.ndarray
    margins: np.ndarray

    @property
    def worst_margin(self) -> float:
        return float(self.margins.min()) if self.margins.size else np.inf


def support_bound_check(
    density_or_eigs,
    a_matrix: np.ndarray,
    self_energy,
    eps: float = 1e-6,
    density_threshold: float = 1e-3,
) -> SupportBoundReport:
    """Check that spectrum points lie in Spec A widened by twice sqrt(norm S).

    Accepts either raw eigenvalues or a :class:`SpectralDensity`; for the
    latter the support points are the grid energies with density above
    ``density_threshold`` and the interval is additionally inflated by
    ``3 eta^(2/3)`` to absorb the inversion smearing.  ``margins`` holds,
    per point, the slack before the bound is violated; the check passes
    when every margin is nonnegative.
    """
    a = np.asarray(a_matrix, dtype=float)
    spec_a = np.linalg.eigvalsh(a)
    norm_s = self_energy_norm(self_energy, a.shape[0])
    halfwidth = 2.0 * np.sqrt(norm_s) + eps
    if isinstance(density_or_eigs, SpectralDensity):
        points = density_or_eigs.grid[density_or_eigs.density > density_threshold]
        halfwidth += 3.0 * density_or_eigs.eta ** (2.0 / 3.0)
    else:
        points = np.asarray(density_or_eigs, dtype=float).ravel()
    if points.size == 0:
        return SupportBoundReport(True, halfwidth, spec_a, np.empty(0))
    dist = np.min(np.abs(points[:, None] - spec_a[None, :]), axis=1)
    margins = halfwidth - dist
    return SupportBoundReport(bool(np.all(margins >= 0.0)), halfwidth, spec_a, margins)


# ---------------------------------------------------------------------------
# cumulant diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CumulantReport:
    """Entrywise second-cumulant summaries of a matrix ensemble."""

    av2_norm: float
    iso2_upper: float
    offdiag_decay: float


def cumulant_diagnostics(samples, mu: float = 0.1, max_entries: int = 4096) -> CumulantReport:
    """Pairwise-cumulant diagnostics over an ensemble of symmetric matrices.

    ``samples`` is a sequence of square arrays or :class:`HessianBlocks`;
    two suffice to form the estimate but 30 or more are needed for it to
    mean much.  The pairwise cumulant kappa(alpha, beta) is the sample
    covariance of entries alpha, beta across the ensemble.  ``av2_norm`` is the operator
    norm of the absolute-cumulant matrix; ``iso2_upper`` bounds the
    isotropic norm via the trivial decomposition (diagonal part equal to
    the full cumulant) combined with a Cauchy-Schwarz majorant of the
    supremum over unit vectors; ``offdiag_decay`` is the largest absolute
    cumulant left after excluding, for each entry, its
    ``floor(N**(1/2 - mu))`` strongest partners.
    """
    mats = [s.assemble() if isinstance(s, HessianBlocks) else np.asarray(s, float) for s in samples]
    if len(mats) < 2:
        raise DomainError("need at least 2 samples for covariance estimation")
    n = mats[0].shape[0]
    for m in mats:
        if m.shape != (n, n):
            raise ShapeError("all samples must share one square shape")
    if n * n > max_entries:
        raise CapacityError(f"cumulant matrix would be {n * n} x {n * n}")
    flat = np.stack([m.ravel() for m in mats])
    cov = np.cov(flat, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    abs_cov = np.abs(cov)
    av2 = float(np.max(np.abs(np.linalg.eigvalsh((abs_cov + abs_cov.T) / 2))))
    four = cov.reshape(n, n, n, n)
    majorant = np.sqrt(np.einsum("abcd,abcd->bd", four, four))
    iso2 = float(np.max(np.abs(np.linalg.eigvalsh((majorant + majorant.T) / 2))))
    k = max(1, int(np.floor(n ** (0.5 - mu))))
    if abs_cov.shape[1] <= k:
        offdiag = 0.0
    else:
        trimmed = np.partition(abs_cov, abs_cov.shape[1] - k - 1, axis=1)
        offdiag = float(trimmed[:, : abs_cov.shape[1] - k].max())
    return CumulantReport(av2, iso2, offdiag)


# ---------------------------------------------------------------------------
# closed forms and sampling
# ---------------------------------------------------------------------------


def semicircle_density(e, radius: float = 2.0):
    """Semicircle density on [-radius, radius]."""
    e = np.asarray(e, dtype=float)
    inside = np.clip(radius * radius - e * e, 0.0, None)
    return 2.0 * np.sqrt(inside) / (np.pi * radius * radius)


def semicircle_cdf(e, radius: float = 2.0):
    """Closed-form distribution function of the semicircle law."""
    x = np.clip(np.asarray(e, dtype=float) / radius, -1.0, 1.0)
    return 0.5 + (x * np.sqrt(1.0 - x * x) + np.arcsin(x)) / np.pi


def wigner_stieltjes(z):
    """Stieltjes transform of the semicircle law on the upper half-plane."""
    z = np.asarray(z, dtype=complex)
    s = np.sqrt(z * z - 4.0)
    m_plus = (-z + s) / 2.0
    m_minus = (-z - s) / 2.0
    return np.where(m_plus.imag > 0, m_plus, m_minus)


def sample_wigner(n: int, rng, sigma: float = 1.0) -> np.ndarray:
    """Symmetric Gaussian matrix whose spectrum fills [-2 sigma, 2 sigma]."""
    a = rng.standard_normal((n, n))
    return sigma * (a + a.T) / np.sqrt(2.0 * n)


def sample_centered_hessians(
    widths,
    n_samples: int,
    rng,
    rule: ActivationRule = ActivationRule.ARGMAX_MASK_01,
) -> list[np.ndarray]:
    """Centered per-sample risk Hessians of a random network.

    Draws a network with the given layer widths (input width first), then
    ``n_samples`` hinge-loss sample Hessians at standard-normal inputs and
    symmetric random labels, and subtracts the ensemble mean so the
    returned matrices average to zero exactly.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise DomainError("need at least an input width and one layer width")
    weights = tuple(
        rng.standard_normal((widths[i], widths[i + 1])) / np.sqrt(widths[i])
        for i in range(len(widths) - 1)
    )
    alpha = rng.standard_normal(widths[-1]) / np.sqrt(widths[-1])
    params = NetworkParams(weights, alpha, rule)
    mats = []
    for _ in range(n_samples):
        x = rng.standard_normal(widths[0])
        y = float(rng.choice([-1.0, 1.0]))
        mats.append(sample_hessian(params, LossL0.HINGE, x, y).assemble())
    stack = np.stack(mats)
    centered = stack - stack.mean(axis=0)
    return [centered[i] for i in range(n_samples)]


def ks_distance(values: np.ndarray, cdf_grid: np.ndarray, cdf_values: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between samples and a tabulated CDF."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    f = np.interp(v, cdf_grid, cdf_values, left=0.0, right=1.0)
    n = v.size
    upper = np.abs(np.arange(1, n + 1) / n - f)
    lower = np.abs(np.arange(0, n) / n - f)
    return float(max(upper.max(), lower.max()))


def density_cdf(density: SpectralDensity) -> tuple[np.ndarray, np.ndarray]:
    """Normalized cumulative distribution of a sampled density."""
    order = np.argsort(density.grid)
    grid = density.grid[order]
    rho = density.density[order]
    cdf = np.concatenate([[0.0], np.cumsum((rho[1:] + rho[:-1]) / 2.0 * np.diff(grid))])
    total = cdf[-1]
    if total <= 0:
        raise NumericError("density has zero mass")
    return grid, cdf / total


def load_problem_json(source, eta: float, grid: np.ndarray) -> MDEProblem:
    """Build an :class:`MDEProblem` from its JSON description.

    Schema: ``{"A": [[...], ...], "S": {"kind": "isotropic", "c": 1.0}}``
    with self-energy kinds ``isotropic``, ``zero``, ``wigner`` (optional
    ``sigma2``) and ``empirical`` (``samples`` pointing at an ``.npy``
    stack of sample matrices).
    """
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    try:
        a = np.asarray(doc["A"], dtype=float)
        s_doc = doc["S"]
        kind = s_doc["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed problem document: {exc}") from exc
    if kind == "isotropic":
        se = IsotropicSelfEnergy(float(s_doc.get("c", 1.0)))
    elif kind == "zero":
        se = ZeroSelfEnergy()
    elif kind == "wigner":
        se = WignerSelfEnergy(float(s_doc.get("sigma2", 1.0)))
    elif kind == "empirical":
        try:
            samples = np.load(s_doc["samples"])
        except (KeyError, OSError, ValueError) as exc:
            raise DomainError(f"cannot load empirical samples: {exc}") from exc
        se = EmpiricalSelfEnergy.from_samples(samples)
    else:
        raise DomainError(f"unknown self-energy kind {kind!r}")
    z_grid = np.asarray(grid, dtype=float) + 1j * float(eta)
    return MDEProblem(a, se, z_grid)
