"""Field observables for particle systems and their exact counterparts.

Pairs configurations with test functions, evolves mean profiles through
the walk semigroup, audits simulated moments against semigroup values
via one- and two-particle duality, and evaluates the stationary
fluctuation covariance, either in closed form (conservative boundary) or
as a time quadrature of semigroup energies (dissipative boundary).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import DomainSpec, LatticeApprox
from .operators import (
    OperatorError,
    PairOperator,
    WalkOperator,
    assemble_pair,
    assemble_walk,
)
from .particles import Configuration, SimParams, simulate, spawn_seeds

__all__ = [
    "TestFunction",
    "TestFamily",
    "AuditReport",
    "CovarianceReport",
    "MomentReport",
    "density_pairing",
    "fluctuation_pairing",
    "mild_solution",
    "duality_audit",
    "pair_moment_exact",
    "pair_duality_audit",
    "neumann_covariance",
    "covariance_quadrature",
    "gaussianity_stats",
    "stationary_field_variance",
    "hydrostatic_variance_bound",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_SPECTRAL_QUAD_LIMIT = 2000


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """A named test function with a boundary-vanishing flag."""

    name: str
    fn: object
    vanishes_on_boundary: bool

    def on(self, lattice: LatticeApprox) -> np.ndarray:
        return lattice.evaluate(self.fn)

    def on_closure(self, lattice: LatticeApprox) -> np.ndarray:
        return np.concatenate([self.on(lattice), lattice.evaluate_outer(self.fn)])


class TestFamily:
    """A small family of smooth test functions on a domain."""

    def __init__(self, functions: list[TestFunction]):
        self.functions = list(functions)

    def __iter__(self):
        return iter(self.functions)

    def __len__(self):
        return len(self.functions)

    def names(self) -> list[str]:
        return [f.name for f in self.functions]

    def get(self, name: str) -> TestFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def subset(self, names) -> "TestFamily":
        return TestFamily([self.get(n) for n in names])

    @staticmethod
    def default(domain: DomainSpec) -> "TestFamily":
        """Constants, coordinates, a coordinate product, a sine product
        and a compact bump; vanishing flags are checked on the boundary."""
        d = domain.d

        def one(p):
            return 1.0

        def sine(p):
            out = 1.0
            for a in range(d):
                out *= math.sin(math.pi * (p[a] + 0.5))
            return out

        def bump(p):
            r2 = float(np.dot(p, p)) / 0.16
            return math.exp(1.0 - 1.0 / (1.0 - r2)) if r2 < 1.0 else 0.0

        raw = [("one", one)]
        for a in range(d):
            raw.append((f"x{a + 1}", lambda p, a=a: float(p[a])))
        raw.append(("x1x2", lambda p: float(p[0] * p[1])))
        raw.append(("sine", sine))
        raw.append(("bump", bump))

        probe = [c.midpoint for c in domain.boundary_cells(0.05)]
        functions = []
        for name, fn in raw:
            sup = max(abs(float(fn(p))) for p in probe)
            functions.append(TestFunction(name, fn, sup < 1e-9))
        return TestFamily(functions)


# ---------------------------------------------------------------------------
# pairings and mean evolution


def density_pairing(lattice: LatticeApprox, occupation, f_values) -> float:
    """Pairing of the empirical measure eps^d sum eta delta_x with f."""
    return lattice.mu_weight * float(
        np.dot(np.asarray(occupation, dtype=float), f_values)
    )


def fluctuation_pairing(lattice: LatticeApprox, occupation, h, f_values) -> float:
    """Pairing of the centred field eps^(d/2) sum (eta - h) delta_x with f."""
    centred = np.asarray(occupation, dtype=float) - np.asarray(h, dtype=float)
    return lattice.eps ** (lattice.d / 2.0) * float(np.dot(centred, f_values))


def mild_solution(op: WalkOperator, m0, t: float, h=None) -> np.ndarray:
    """Mean occupation profile at time t from initial means m0.

    The mean solves d/dt m = A m with reservoir data folded into the
    stationary profile h: m_t = h + P_t (m0 - h) with the killed
    semigroup.  h = None treats the dynamics as closed.
    """
    m0 = np.asarray(m0, dtype=float)
    if h is None:
        return op.semigroup_apply(m0, t)
    h = np.asarray(h, dtype=float)
    return h + op.semigroup_apply(m0 - h, t)


# ---------------------------------------------------------------------------
# duality audits


@dataclass
class AuditReport:
    """Monte Carlo moment against its exact semigroup value."""

    label: str
    exact: float
    mc_mean: float
    mc_se: float
    n_replicas: int

    @property
    def z(self) -> float:
        if self.mc_se == 0.0:
            return 0.0 if abs(self.mc_mean - self.exact) < 1e-12 else math.inf
        return (self.mc_mean - self.exact) / self.mc_se

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 3.0


def _mc_report(label, exact, values) -> AuditReport:
    values = np.asarray(values, dtype=float)
    n = len(values)
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return AuditReport(label, float(exact), float(values.mean()), se, n)


def duality_audit(
    lattice: LatticeApprox,
    params: SimParams,
    eta0: Configuration,
    site: int,
    t: float,
    n_replicas: int,
    walk: WalkOperator | None = None,
) -> AuditReport:
    """Check E eta_t(site) against the walk semigroup from site.

    The expected occupation equals the semigroup applied to the initial
    occupation extended by the reservoir data, evaluated at the site.
    """
    op = walk or assemble_walk(lattice, params.beta)
    evolved = op.semigroup_apply(
        eta0.occupation.astype(float), t, params.theta
    )
    exact = float(evolved[site])

    seeds = spawn_seeds(params.seed, n_replicas)
    vals = np.empty(n_replicas)
    for r, s in enumerate(seeds):
        traj = simulate(eta0, params, snapshot_times=[t], seed_override=int(s))
        vals[r] = traj.snapshots[0, site]
    return _mc_report(f"eta({site}) at t={t:g}", exact, vals)


def _pair_dual_value(occ, sigma, a: int, b: int) -> float:
    if a == b:
        if sigma == -1:
            raise OperatorError("diagonal pair observable undefined for exclusion")
        return 0.5 * occ[a] * (occ[a] - 1.0)
    return float(occ[a]) * float(occ[b])


def pair_moment_exact(
    op: PairOperator, eta0: Configuration, theta, t: float
) -> np.ndarray:
    """Exact two-point moments at time t, one entry per pair state.

    The state (x, y) carries E eta_t(x) eta_t(y) for distinct sites and
    the falling factorial E eta_t(x)(eta_t(x)-1)/2 on the diagonal; both
    are propagated by the two-particle semigroup from the initial
    configuration extended by the reservoir data.
    """
    theta_out = op.walk.outer_values(theta)
    occ0 = eta0.occupation.astype(float)
    n = op.walk.n_sites
    f0 = np.empty(op.n_states)
    for sid in range(op.n_states):
        a, b = int(op.state_a[sid]), int(op.state_b[sid])
        va = occ0[a] if a < n else theta_out[a - n]
        vb = occ0[b] if b < n else theta_out[b - n]
        if a == b and a < n:
            f0[sid] = 0.5 * occ0[a] * (occ0[a] - 1.0)
        else:
            f0[sid] = va * vb
    return op.semigroup_apply(f0, t)


def pair_duality_audit(
    lattice: LatticeApprox,
    params: SimParams,
    eta0: Configuration,
    sites: tuple[int, int],
    t: float,
    n_replicas: int,
    pair: PairOperator | None = None,
) -> AuditReport:
    """Check a two-point moment against the two-particle semigroup.

    The observable is eta(x) eta(y) for distinct sites and the falling
    factorial eta(x)(eta(x)-1)/2 on the inclusion diagonal.
    """
    x, y = sites
    if x == y and params.sigma == -1:
        raise OperatorError("diagonal pair observable undefined for exclusion")
    op = pair or assemble_pair(lattice, params.beta, params.sigma)
    evolved = pair_moment_exact(op, eta0, params.theta, t)
    exact = float(evolved[op.state_index(x, y)])

    seeds = spawn_seeds(params.seed, n_replicas)
    vals = np.empty(n_replicas)
    for r, s in enumerate(seeds):
        traj = simulate(eta0, params, snapshot_times=[t], seed_override=int(s))
        vals[r] = _pair_dual_value(traj.snapshots[0], params.sigma, x, y)
    return _mc_report(f"eta({x})eta({y}) at t={t:g}", exact, vals)


# ---------------------------------------------------------------------------
# stationary fluctuation covariance


def neumann_covariance(lattice: LatticeApprox, chi: float, f_values, g_values) -> float:
    """Stationary fluctuation covariance for the conservative boundary:
    chi times the volume inner product of f and g."""
    return chi * lattice.mu_weight * float(np.dot(f_values, g_values))


@dataclass
class CovarianceReport:
    """Result of the semigroup-energy quadrature."""

    value: float
    tail_bound: float
    time_cut: float
    n_windows: int

    @property
    def total(self) -> float:
        return self.value


def covariance_quadrature(
    op: WalkOperator,
    f_values,
    g_values,
    chi,
    theta=None,
    h=None,
    sigma: int | None = None,
    rel_tol: float = 1e-6,
    max_windows: int = 80,
) -> CovarianceReport:
    """Quadrature of the stationary covariance integral.

    Evaluates int_0^inf 2 <Gamma(P_s f, P_s g), chi> ds plus, when
    boundary data theta and profile h are given, the boundary correction
    int_0^inf <sigma_eps, kill (P_s f)(P_s g)(thetabar - h)(1 + 2 sigma h)> ds
    with thetabar the jump-kernel average of theta at each boundary site.
    Gauss-Legendre panels on dyadic windows; integration stops when the
    exponential tail bound drops below rel_tol times the accumulated
    value.  chi may be a scalar or per-site array.
    """
    if math.isinf(op.beta):
        raise OperatorError(
            "quadrature needs an absorbing boundary; use neumann_covariance"
        )
    lat = op.lattice
    n = op.n_sites
    f_values = np.asarray(f_values, dtype=float)
    g_values = np.asarray(g_values, dtype=float)
    chi_vec = np.broadcast_to(np.asarray(chi, dtype=float), (n,))

    boundary_term = theta is not None
    if boundary_term:
        if h is None or sigma is None:
            raise OperatorError(
                "boundary correction needs the stationary profile h and sigma"
            )
        theta_out = op.outer_values(theta)
        alpha = lat.alpha
        theta_bar = np.zeros(n)
        np.add.at(theta_bar, lat.cross_x, lat.cross_alpha * theta_out[lat.cross_z])
        nz = alpha > 0
        theta_bar[nz] /= alpha[nz]
        h = np.asarray(h, dtype=float)
        bdry_weight = (
            op.killing_scale
            * lat.sigma_weights
            * (theta_bar - h)
            * (1.0 + 2.0 * sigma * h)
        )

    spec = op.spectrum(n) if n <= _SPECTRAL_QUAD_LIMIT else None
    if spec is not None:
        lam = spec.eigenvalues
        phi = spec.eigenfunctions
        fa = lat.mu_weight * phi.T @ f_values
        ga = lat.mu_weight * phi.T @ g_values
        lam0 = float(lam[0])
        lam_max = float(lam[-1])

        def evolve(s):
            decay = np.exp(-lam * s)
            return phi @ (fa * decay), phi @ (ga * decay)

    else:
        lam0 = op.ground_state()[0]
        lam_max = float(op.exit_rate.max())

        _state = {"s": 0.0, "u": f_values.copy(), "v": g_values.copy()}

        def evolve(s):
            ds = s - _state["s"]
            if ds < 0:
                raise OperatorError("quadrature nodes must be visited in order")
            if ds > 0:
                _state["u"] = op.semigroup_apply(_state["u"], ds)
                _state["v"] = op.semigroup_apply(_state["v"], ds)
                _state["s"] = s
            return _state["u"], _state["v"]

    if lam0 <= 0:
        raise OperatorError("quadrature needs a strictly positive spectral bottom")

    def integrand(s):
        u, v = evolve(s)
        val = 2.0 * lat.mu_weight * float(np.dot(op.carre_du_champ(u, v), chi_vec))
        if boundary_term:
            val += float(np.dot(bdry_weight, u * v))
        return val

    delta = 0.01 / lam_max
    value = 0.0
    t_lo, t_hi = 0.0, delta
    n_windows = 0
    tail = math.inf
    while n_windows < max_windows:
        mid, half = (t_lo + t_hi) / 2.0, (t_hi - t_lo) / 2.0
        for xq, wq in sorted(zip(_GL_NODES, _GL_WEIGHTS)):
            value += wq * half * integrand(mid + half * xq)
        n_windows += 1
        t_lo, t_hi = t_hi, 2.0 * t_hi
        tail = abs(integrand(t_lo)) / (2.0 * lam0)
        if n_windows >= 4 and tail <= rel_tol * max(abs(value), 1e-300):
            break
    return CovarianceReport(value, tail, t_lo, n_windows)


# ---------------------------------------------------------------------------
# moment statistics


@dataclass
class MomentReport:
    """Sample moments with jackknife standard errors."""

    n: int
    mean: float
    se_mean: float
    variance: float
    se_variance: float
    skewness: float
    se_skewness: float
    excess_kurtosis: float
    se_kurtosis: float
    degenerate: bool = False


def gaussianity_stats(samples) -> MomentReport:
    """Mean, variance, skewness and excess kurtosis with jackknife errors.

    Jackknife replicates come from leave-one-out raw power sums, so the
    whole computation is a single pass plus O(n) vector work.
    """
    x = np.asarray(samples, dtype=float)
    n = len(x)
    if n < 4:
        raise ValueError("need at least 4 samples for four moments")
    s1, s2 = x.sum(), (x ** 2).sum()
    s3, s4 = (x ** 3).sum(), (x ** 4).sum()

    def moments(c1, c2, c3, c4, m):
        mean = c1 / m
        mu2 = c2 / m - mean ** 2
        mu3 = c3 / m - 3 * mean * c2 / m + 2 * mean ** 3
        mu4 = c4 / m - 4 * mean * c3 / m + 6 * mean ** 2 * c2 / m - 3 * mean ** 4
        with np.errstate(invalid="ignore", divide="ignore"):
            skew = mu3 / mu2 ** 1.5
            kurt = mu4 / mu2 ** 2 - 3.0
        return mean, mu2, skew, kurt

    mean, mu2, skew, kurt = moments(s1, s2, s3, s4, n)
    variance = mu2 * n / (n - 1)
    if mu2 <= 0:
        return MomentReport(
            n, float(mean), 0.0, 0.0, 0.0, math.nan, math.nan, math.nan, math.nan,
            degenerate=True,
        )

    jm, jv, js, jk = moments(s1 - x, s2 - x ** 2, s3 - x ** 3, s4 - x ** 4, n - 1)
    jv = jv * (n - 1) / (n - 2)

    def jack_se(reps):
        bar = reps.mean()
        return math.sqrt((n - 1) / n * float(np.sum((reps - bar) ** 2)))

    return MomentReport(
        n=n,
        mean=float(mean),
        se_mean=jack_se(jm),
        variance=float(variance),
        se_variance=jack_se(jv),
        skewness=float(skew),
        se_skewness=jack_se(js),
        excess_kurtosis=float(kurt),
        se_kurtosis=jack_se(jk),
    )


# ---------------------------------------------------------------------------
# hydrostatic helpers


def stationary_field_variance(lattice: LatticeApprox, cov, var, f_values) -> float:
    """Exact variance of the centred field pairing from two-point data.

    cov and var come from PairOperator.stationary_covariance; the result
    is the variance of eps^(d/2) sum (eta - h) f.
    """
    f = np.asarray(f_values, dtype=float)
    c = np.array(cov, dtype=float)
    np.fill_diagonal(c, var)
    return lattice.mu_weight * float(f @ c @ f)


def hydrostatic_variance_bound(lattice: LatticeApprox, theta_max: float, f_values) -> float:
    """Uniform bound (theta_max^2 + theta_max) eps^d |f|_inf |f|_1 on the
    variance of the empirical-measure pairing."""
    f = np.asarray(f_values, dtype=float)
    c = theta_max ** 2 + theta_max
    norm1 = lattice.mu_weight * float(np.abs(f).sum())
    return c * lattice.mu_weight * float(np.abs(f).max()) * norm1
