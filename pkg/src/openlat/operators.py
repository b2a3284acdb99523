"""Random-walk and two-particle generators on a lattice approximation.

The walk generator combines nearest-neighbour jumps at rate eps^-2 with
jumps to exterior sites at rate eps^(beta-2) alpha^{xz}; exterior sites
are absorbing.  beta = inf switches the boundary coupling off.  All
operators are self-adjoint in L2 of the interior counting measure (with
weight 1 + sigma on diagonal pair states), semigroups are evaluated by
uniformization, and linear solves switch between direct and conjugate
gradient methods by problem size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import poisson

from .geometry import LatticeApprox

__all__ = [
    "OperatorError",
    "WalkOperator",
    "PairOperator",
    "SpectralData",
    "assemble_walk",
    "assemble_pair",
]

_DENSE_EIG_LIMIT = 2000
_DIRECT_SOLVE_LIMIT = 20000
_POISSON_TAIL = 1e-12
_CHUNK_RATE = 500.0


class OperatorError(RuntimeError):
    """Raised when an operator computation is impossible or diverged."""


# ---------------------------------------------------------------------------
# uniformization


def _uniformized_apply(mat: sp.csr_matrix, rate_bound: float, vec, t: float):
    """Evaluate exp(t mat) vec for a generator matrix with bounded rates.

    Uses the uniformized chain I + mat / rate with a Poisson series cut
    at tail mass 1e-12; times with rate * t above 500 are split into
    equal chunks so the series weights stay in double range.
    """
    v = np.array(vec, dtype=float)
    if t < 0:
        raise OperatorError("semigroup time must be nonnegative")
    if t == 0.0 or rate_bound == 0.0:
        return v
    rate = rate_bound * 1.0000001
    chunks = max(1, math.ceil(rate * t / _CHUNK_RATE))
    dt = t / chunks
    mu = rate * dt
    kmax = int(poisson.isf(_POISSON_TAIL, mu)) + 1
    for _ in range(chunks):
        acc = np.zeros_like(v)
        term = v
        weight = math.exp(-mu)
        acc += weight * term
        for k in range(1, kmax + 1):
            term = term + mat.dot(term) / rate
            weight *= mu / k
            acc += weight * term
        v = acc
    return v


# ---------------------------------------------------------------------------
# spectral data


@dataclass
class SpectralData:
    """Eigenvalues (ascending) of minus the killed generator and the
    matching eigenfunctions, normalized in L2 of the volume measure."""

    eigenvalues: np.ndarray      # (k,)
    eigenfunctions: np.ndarray   # (n, k)
    beta: float
    eps: float

    @property
    def ground_energy(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def ground_state(self) -> np.ndarray:
        return self.eigenfunctions[:, 0]

    @property
    def spectral_gap(self) -> float:
        return float(self.eigenvalues[1] - self.eigenvalues[0])


# ---------------------------------------------------------------------------
# one-particle operator


class WalkOperator:
    """Generator of the boundary-tunable walk on a finished lattice.

    The interior block acts on functions over the lattice sites; exterior
    sites are absorbing and enter through the cross-boundary jump rates.
    Access the blocks through .omega_matrix (n x n), .cross_matrix
    (n x m, already scaled) and .closure_matrix ((n+m) x (n+m)).
    """

    def __init__(self, lattice: LatticeApprox, beta: float):
        if lattice.alpha is None or lattice.cross_x is None:
            raise OperatorError("lattice is missing boundary weights or outer sites")
        self.lattice = lattice
        self.beta = float(beta)
        eps = lattice.eps
        n, m = lattice.n_sites, lattice.n_outer
        self.n_sites, self.n_outer = n, m

        if math.isinf(beta):
            self.boundary_scale = 0.0
            self.killing_scale = 0.0
        else:
            self.boundary_scale = eps ** (beta - 2.0)
            self.killing_scale = eps ** (beta - 1.0)

        bulk_rate = eps ** -2.0
        rows = np.repeat(np.arange(n), np.diff(lattice.neighbor_ptr))
        cols = lattice.neighbor_idx
        data = np.full(len(cols), bulk_rate)
        lap = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
        lap = lap - sp.diags(bulk_rate * lattice.degree.astype(float))

        self.absorption = self.boundary_scale * lattice.alpha
        self.omega_matrix = (lap - sp.diags(self.absorption)).tocsr()
        self.cross_matrix = self.boundary_scale * sp.coo_matrix(
            (lattice.cross_alpha, (lattice.cross_x, lattice.cross_z)),
            shape=(n, m),
        ).tocsr()

        self.closure_matrix = sp.bmat(
            [
                [self.omega_matrix, self.cross_matrix],
                [sp.csr_matrix((m, n)), sp.csr_matrix((m, m))],
            ],
            format="csr",
        )
        self.exit_rate = bulk_rate * lattice.degree + self.absorption
        self._spectral_cache: dict[int, SpectralData] = {}

    # -- basic algebra ---------------------------------------------------

    @property
    def eps(self) -> float:
        return self.lattice.eps

    def apply(self, f, f_outer=None):
        """Apply the generator to interior values f (and outer values)."""
        out = self.omega_matrix.dot(np.asarray(f, dtype=float))
        if f_outer is not None:
            out = out + self.cross_matrix.dot(np.asarray(f_outer, dtype=float))
        return out

    def l2_inner(self, f, g) -> float:
        """Inner product in L2 of the volume measure."""
        return self.lattice.mu_weight * float(np.dot(f, g))

    def l2_norm(self, f) -> float:
        return math.sqrt(max(0.0, self.l2_inner(f, f)))

    def outer_values(self, theta) -> np.ndarray:
        """Evaluate boundary data on the exterior sites."""
        if callable(theta):
            return self.lattice.evaluate_outer(theta)
        theta = np.asarray(theta, dtype=float)
        if theta.shape == ():
            return np.full(self.n_outer, float(theta))
        if theta.shape != (self.n_outer,):
            raise OperatorError(
                f"boundary data has shape {theta.shape}, expected ({self.n_outer},)"
            )
        return theta

    # -- semigroup ---------------------------------------------------------

    def semigroup_apply(self, f, t: float, f_outer=None) -> np.ndarray:
        """Evaluate the semigroup at time t.

        With f_outer given, runs the chain on the closure (exterior
        values are preserved) and returns a vector over interior plus
        exterior sites.  Without it, returns the killed semigroup on the
        interior block only.
        """
        f = np.asarray(f, dtype=float)
        if f_outer is None:
            rate = float(self.exit_rate.max(initial=0.0))
            return _uniformized_apply(self.omega_matrix, rate, f, t)
        full = np.concatenate([f, self.outer_values(f_outer)])
        rate = float(self.exit_rate.max(initial=0.0))
        return _uniformized_apply(self.closure_matrix, rate, full, t)

    def heat_kernel_column(self, site: int, t: float) -> np.ndarray:
        """Transition probabilities p_t(. , site) over the closure.

        Site indices 0..n-1 are interior, n..n+m-1 exterior.
        """
        total = self.n_sites + self.n_outer
        if not 0 <= site < total:
            raise OperatorError(f"site {site} outside closure of size {total}")
        e = np.zeros(total)
        e[site] = 1.0
        rate = float(self.exit_rate.max(initial=0.0))
        return _uniformized_apply(self.closure_matrix, rate, e, t)

    # -- spectrum -----------------------------------------------------------

    def spectrum(self, count: int = 6) -> SpectralData:
        """Lowest eigenvalues of minus the interior generator.

        Dense solve up to 2000 sites, shifted sparse solve above.
        Eigenfunctions are normalized in L2 of the volume measure and the
        ground state is taken positive.
        """
        n = self.n_sites
        count = min(count, n)
        cached = self._spectral_cache.get(count)
        if cached is not None:
            return cached
        if n <= _DENSE_EIG_LIMIT:
            dense = (-self.omega_matrix).toarray()
            vals, vecs = scipy.linalg.eigh(dense)
            vals, vecs = vals[:count], vecs[:, :count]
        else:
            shift = -1e-9 * self.eps ** -2.0
            vals, vecs = spla.eigsh(
                (-self.omega_matrix).tocsc(), k=count, sigma=shift, which="LM"
            )
            order = np.argsort(vals)
            vals, vecs = vals[order], vecs[:, order]
        vals = np.where(np.abs(vals) < 1e-13 * self.eps ** -2.0, 0.0, vals)
        vecs = vecs / self.eps ** (self.lattice.d / 2.0)
        if vecs[np.argmax(np.abs(vecs[:, 0])), 0] < 0:
            vecs = vecs.copy()
            vecs[:, 0] = -vecs[:, 0]
        data = SpectralData(vals, vecs, self.beta, self.eps)
        self._spectral_cache[count] = data
        return data

    def ground_state(self) -> tuple[float, np.ndarray]:
        """Principal eigenvalue and positive eigenfunction.

        For beta = inf the walk conserves mass and the ground state is the
        constant with eigenvalue exactly zero.
        """
        if math.isinf(self.beta):
            n = self.n_sites
            psi = np.full(n, 1.0 / math.sqrt(self.lattice.mu_mass))
            return 0.0, psi
        spec = self.spectrum(1 if self.n_sites > _DENSE_EIG_LIMIT else 2)
        psi = spec.ground_state
        if np.min(psi) <= 0:
            raise OperatorError("ground state is not strictly positive")
        return spec.ground_energy, psi

    # -- boundary value problem ----------------------------------------------

    def harmonic_profile(self, theta) -> np.ndarray:
        """Solve A h = 0 with boundary data theta on the exterior sites.

        Equivalently minus the interior block applied to h equals the
        scaled cross jump rates against theta.  Direct factorization up
        to 20000 sites, Jacobi-preconditioned conjugate gradients above.
        """
        if math.isinf(self.beta):
            raise OperatorError("no boundary coupling at beta = inf; profile undefined")
        theta_out = self.outer_values(theta)
        rhs = self.cross_matrix.dot(theta_out)
        h = self._solve_psd(-self.omega_matrix, rhs)
        resid = float(np.max(np.abs(self.omega_matrix.dot(h) + rhs)))
        scale = max(1.0, float(np.max(np.abs(theta_out), initial=0.0)))
        if resid > 1e-10 * scale * self.eps ** -2.0:
            warnings.warn(
                f"harmonic profile residual {resid:.3e} above tolerance",
                RuntimeWarning,
            )
        return h

    def _solve_psd(self, mat: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
        if mat.shape[0] <= _DIRECT_SOLVE_LIMIT:
            return spla.spsolve(mat.tocsc(), rhs)
        precond = sp.diags(1.0 / mat.diagonal())
        x, info = spla.cg(mat, rhs, rtol=1e-12, atol=0.0, maxiter=20 * mat.shape[0], M=precond)
        if info != 0:
            raise OperatorError(f"conjugate gradient did not converge (info={info})")
        return x

    # -- quadratic forms -------------------------------------------------------

    def dirichlet_form(self, f, g=None) -> float:
        """Energy (gradient part plus boundary part) of the pair f, g."""
        f = np.asarray(f, dtype=float)
        g = f if g is None else np.asarray(g, dtype=float)
        lat = self.lattice
        rows = np.repeat(np.arange(self.n_sites), np.diff(lat.neighbor_ptr))
        cols = lat.neighbor_idx
        grad = float(np.sum((f[cols] - f[rows]) * (g[cols] - g[rows])))
        eps = self.eps
        energy = 0.5 * eps ** (lat.d - 2) * grad
        energy += self.killing_scale * lat.sigma_sum(f * g)
        return energy

    def carre_du_champ(self, f, g=None) -> np.ndarray:
        """Pointwise energy density; its volume integral is the form."""
        f = np.asarray(f, dtype=float)
        g = f if g is None else np.asarray(g, dtype=float)
        lat = self.lattice
        rows = np.repeat(np.arange(self.n_sites), np.diff(lat.neighbor_ptr))
        cols = lat.neighbor_idx
        prod = (f[cols] - f[rows]) * (g[cols] - g[rows])
        out = np.zeros(self.n_sites)
        np.add.at(out, rows, prod)
        out *= 0.5 * self.eps ** -2.0
        out += self.boundary_scale * lat.alpha * f * g
        return out

    # -- dumps -------------------------------------------------------------------

    def save_coo(self, path) -> None:
        """Write the closure generator as whitespace triplets row col value."""
        coo = self.closure_matrix.tocoo()
        with open(path, "w") as fh:
            fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {float(v)!r}\n")


def assemble_walk(lattice: LatticeApprox, beta: float) -> WalkOperator:
    """Walk generator on the lattice with boundary exponent beta."""
    return WalkOperator(lattice, beta)


# ---------------------------------------------------------------------------
# two-particle operator


class PairOperator:
    """Generator for two dual particles with interaction sign sigma.

    sigma = -1 is exclusion (diagonal states dropped), sigma = +1 is
    inclusion (diagonal states carry weight 1 + sigma in the invariant
    inner product).  States are ordered pairs of closure indices; a pair
    with both coordinates on exterior sites is frozen.
    """

    def __init__(self, lattice: LatticeApprox, beta: float, sigma: int):
        if sigma not in (-1, 1):
            raise OperatorError("sigma must be -1 (exclusion) or +1 (inclusion)")
        self.lattice = lattice
        self.beta = float(beta)
        self.sigma = int(sigma)
        self.walk = WalkOperator(lattice, beta)
        n, m = lattice.n_sites, lattice.n_outer
        self.n_sites, self.n_outer = n, m
        total = n + m

        keep = np.ones((total, total), dtype=bool)
        if sigma == -1:
            np.fill_diagonal(keep[:n, :n], False)
        pairs = np.argwhere(keep)
        self.state_a = pairs[:, 0].astype(np.int64)
        self.state_b = pairs[:, 1].astype(np.int64)
        self.n_states = len(pairs)
        self._state_id = np.full(total * total, -1, dtype=np.int64)
        self._state_id[self.state_a * total + self.state_b] = np.arange(self.n_states)
        self._total = total

        self.matrix, self.exit_rate = self._assemble()
        self.weights = np.ones(self.n_states)
        if sigma == 1:
            diag = (self.state_a == self.state_b) & (self.state_a < n)
            self.weights[diag] = 1.0 + sigma

    def state_index(self, a: int, b: int) -> int:
        sid = int(self._state_id[a * self._total + b])
        if sid < 0:
            raise OperatorError(f"({a}, {b}) is not a pair state")
        return sid

    def _assemble(self):
        lat = self.lattice
        eps = lat.eps
        n = self.n_sites
        sigma = self.sigma
        scale = self.walk.boundary_scale
        bulk = eps ** -2.0
        cross_of: list[list[tuple[int, float]]] = [[] for _ in range(n)]
        for x, z, a in zip(lat.cross_x, lat.cross_z, lat.cross_alpha):
            cross_of[int(x)].append((int(z), float(a)))

        rows, cols, vals = [], [], []
        exit_rate = np.zeros(self.n_states)
        for sid in range(self.n_states):
            a, b = int(self.state_a[sid]), int(self.state_b[sid])
            for me, other, swap in ((a, b, False), (b, a, True)):
                if me >= n:
                    continue
                for y in lat.neighbors(me):
                    y = int(y)
                    occupied = 1.0 if (other < n and y == other) else 0.0
                    rate = bulk * (1.0 + sigma * occupied)
                    if rate == 0.0:
                        continue
                    target = (other, y) if swap else (y, other)
                    tid = self._state_id[target[0] * self._total + target[1]]
                    rows.append(sid)
                    cols.append(int(tid))
                    vals.append(rate)
                    exit_rate[sid] += rate
                for z, axz in cross_of[me]:
                    rate = scale * axz
                    if rate == 0.0:
                        continue
                    zz = n + z
                    target = (other, zz) if swap else (zz, other)
                    tid = self._state_id[target[0] * self._total + target[1]]
                    rows.append(sid)
                    cols.append(int(tid))
                    vals.append(rate)
                    exit_rate[sid] += rate
        diag = sp.diags(exit_rate)
        mat = sp.coo_matrix(
            (vals, (rows, cols)), shape=(self.n_states, self.n_states)
        ).tocsr() - diag
        return mat.tocsr(), exit_rate

    # -- algebra -----------------------------------------------------------

    def lift_sum(self, f_closure) -> np.ndarray:
        """Lift a closure function to pair states by summing coordinates."""
        f = np.asarray(f_closure, dtype=float)
        return f[self.state_a] + f[self.state_b]

    def lift_product(self, f_closure) -> np.ndarray:
        """Lift a closure function to pair states by multiplying coordinates."""
        f = np.asarray(f_closure, dtype=float)
        return f[self.state_a] * f[self.state_b]

    def semigroup_apply(self, F, t: float) -> np.ndarray:
        rate = float(self.exit_rate.max(initial=0.0))
        return _uniformized_apply(self.matrix, rate, F, t)

    def alive_mask(self) -> np.ndarray:
        n = self.n_sites
        return (self.state_a < n) & (self.state_b < n)

    # -- stationary two-point structure ---------------------------------------

    def two_point_profile(self, h, theta) -> np.ndarray:
        """Stationary pair expectations with factorized boundary data.

        h is the one-particle harmonic profile on interior sites, theta
        the boundary data.  Returns an n x n array over site pairs; the
        exclusion diagonal, which is not a pair state, is set to nan.
        """
        if math.isinf(self.beta):
            raise OperatorError("no boundary coupling at beta = inf; profile undefined")
        n = self.n_sites
        h = np.asarray(h, dtype=float)
        theta_out = self.walk.outer_values(theta)
        closure_vals = np.concatenate([h, theta_out])

        alive = self.alive_mask()
        alive_ids = np.flatnonzero(alive)
        known_ids = np.flatnonzero(~alive)
        pos = np.full(self.n_states, -1, dtype=np.int64)
        pos[alive_ids] = np.arange(len(alive_ids))

        sub = self.matrix[alive_ids]
        g_uu = sub[:, alive_ids]
        g_uk = sub[:, known_ids]
        known_vals = (
            closure_vals[self.state_a[known_ids]] * closure_vals[self.state_b[known_ids]]
        )
        rhs = g_uk.dot(known_vals)

        w = self.weights[alive_ids]
        sqrt_w = np.sqrt(w)
        sym = sp.diags(sqrt_w).dot(-g_uu).dot(sp.diags(1.0 / sqrt_w)).tocsr()
        y = self.walk._solve_psd(sym, sqrt_w * rhs)
        g = y / sqrt_w

        out = np.full((n, n), np.nan)
        out[self.state_a[alive_ids], self.state_b[alive_ids]] = g
        return out

    def stationary_covariance(self, h, theta) -> tuple[np.ndarray, np.ndarray]:
        """Exact stationary covariances of the particle field.

        Returns (cov, var): cov is the n x n matrix of occupation
        covariances for distinct sites (diagonal nan), var the per-site
        variances chi + (1 + sigma)(pair diagonal - h^2) with
        chi = h (1 + sigma h).
        """
        h = np.asarray(h, dtype=float)
        pair = self.two_point_profile(h, theta)
        cov = pair - np.outer(h, h)
        np.fill_diagonal(cov, np.nan)
        chi = h * (1.0 + self.sigma * h)
        if self.sigma == -1:
            var = chi
        else:
            var = chi + (1.0 + self.sigma) * (np.diag(pair) - h * h)
        return cov, var


def assemble_pair(lattice: LatticeApprox, beta: float, sigma: int) -> PairOperator:
    """Two-particle generator with interaction sign sigma."""
    return PairOperator(lattice, beta, sigma)
