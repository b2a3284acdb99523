"""Open exclusion and inclusion dynamics against boundary reservoirs.

Particles jump between neighbouring sites at rate eps^-2 (1 + sigma n),
leave through a boundary site x to an exterior site z at rate
eps^(beta-2) alpha^{xz} (1 + sigma theta(z)) per particle, and enter at
x from z at rate eps^(beta-2) alpha^{xz} theta(z) (1 + sigma n(x)).
sigma = -1 is exclusion, sigma = +1 inclusion.  Simulation is an exact
event-driven chain; site selection walks a binary indexed tree over the
per-site aggregate rates, so one event costs O(log n) plus a degree-sized
rate refresh.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import LatticeApprox

__all__ = [
    "ParticleError",
    "Configuration",
    "SimParams",
    "Trajectory",
    "init_product",
    "init_pile",
    "simulate",
    "sample_stationary",
    "spawn_seeds",
]


class ParticleError(RuntimeError):
    """Raised on invalid configurations or runaway dynamics."""


EVENT_BULK, EVENT_EXIT, EVENT_ENTRY = 0, 1, 2


@dataclass
class Configuration:
    """Occupation numbers on the interior sites of a lattice."""

    lattice: LatticeApprox
    occupation: np.ndarray  # (n,) int64
    sigma: int

    def __post_init__(self):
        self.occupation = np.asarray(self.occupation, dtype=np.int64)
        if self.occupation.shape != (self.lattice.n_sites,):
            raise ParticleError(
                f"occupation shape {self.occupation.shape} does not match "
                f"{self.lattice.n_sites} sites"
            )
        if np.any(self.occupation < 0):
            raise ParticleError("occupation numbers must be nonnegative")
        if self.sigma == -1 and np.any(self.occupation > 1):
            raise ParticleError("exclusion allows at most one particle per site")

    @property
    def n_particles(self) -> int:
        return int(self.occupation.sum())

    def copy(self) -> "Configuration":
        return Configuration(self.lattice, self.occupation.copy(), self.sigma)


@dataclass
class SimParams:
    """Dynamics parameters: interaction sign, boundary exponent and data,
    time horizon and seed."""

    sigma: int
    beta: float
    theta: object          # callable, array over exterior sites, or scalar
    horizon: float
    seed: int = 0
    max_occupancy: int = 10 ** 6

    def __post_init__(self):
        if self.sigma not in (-1, 1):
            raise ParticleError("sigma must be -1 (exclusion) or +1 (inclusion)")
        if self.horizon < 0:
            raise ParticleError("horizon must be nonnegative")


@dataclass
class Trajectory:
    """Result of one simulation run.

    snapshots[k] is the occupation vector at snapshot_times[k]; final is
    the configuration at the horizon.  With event logging on, the event
    arrays (times, kinds, sites, partners) describe every jump: kind 0 is
    a bulk move site -> partner, kind 1 an exit through site to exterior
    index partner, kind 2 an entry at site from exterior index partner.
    """

    params: SimParams
    initial: Configuration
    snapshot_times: np.ndarray
    snapshots: np.ndarray          # (k, n) int64
    final: Configuration
    n_events: int
    event_times: np.ndarray | None = None
    event_kinds: np.ndarray | None = None
    event_sites: np.ndarray | None = None
    event_partners: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def occupation_at(self, t: float) -> np.ndarray:
        """Replay the event log up to time t (requires logging)."""
        if self.event_times is None:
            raise ParticleError("trajectory was run without event logging")
        occ = self.initial.occupation.copy()
        for et, kind, site, partner in zip(
            self.event_times, self.event_kinds, self.event_sites, self.event_partners
        ):
            if et > t:
                break
            if kind == EVENT_BULK:
                occ[site] -= 1
                occ[partner] += 1
            elif kind == EVENT_EXIT:
                occ[site] -= 1
            else:
                occ[site] += 1
        return occ


# ---------------------------------------------------------------------------
# kernel


@njit(inline="always")
def _fen_update(tree, n, i, delta):
    i += 1
    while i <= n:
        tree[i] += delta
        i += i & (-i)


@njit(inline="always")
def _fen_find(tree, n, top_bit, target):
    # smallest index with prefix sum strictly above target
    pos = 0
    rem = target
    bit = top_bit
    while bit > 0:
        nxt = pos + bit
        if nxt <= n and tree[nxt] <= rem:
            pos = nxt
            rem -= tree[nxt]
        bit >>= 1
    return pos  # zero-based site


@njit(inline="always")
def _site_rate(x, eta, nbr_ptr, nbr_idx, c_alpha, c_atheta, bulk, scale, sigma):
    occ = float(eta[x])
    nsum = 0.0
    deg = 0.0
    for j in range(nbr_ptr[x], nbr_ptr[x + 1]):
        nsum += eta[nbr_idx[j]]
        deg += 1.0
    r = bulk * occ * (deg + sigma * nsum)
    r += scale * occ * (c_alpha[x] + sigma * c_atheta[x])
    r += scale * c_atheta[x] * (1.0 + sigma * occ)
    return r if r > 0.0 else 0.0


@njit(cache=True, nogil=True)
def _kmc_kernel(
    eta,
    nbr_ptr, nbr_idx,
    cross_ptr, cross_alpha, cross_theta, cross_zidx,
    c_alpha, c_atheta,
    bulk, scale, sigma,
    t_end,
    snap_times, snap_out,
    seed,
    max_occ,
    log_t, log_kind, log_site, log_partner,
    check_every,
):
    np.random.seed(seed)
    n = eta.shape[0]
    log_cap = log_t.shape[0]

    rate = np.zeros(n)
    tree = np.zeros(n + 1)
    top_bit = 1
    while top_bit * 2 <= n:
        top_bit *= 2
    for x in range(n):
        rate[x] = _site_rate(
            x, eta, nbr_ptr, nbr_idx, c_alpha, c_atheta, bulk, scale, sigma
        )
        _fen_update(tree, n, x, rate[x])
    total = 0.0
    for x in range(n):
        total += rate[x]

    t = 0.0
    n_events = 0
    snap_pos = 0
    n_snaps = snap_times.shape[0]
    touched = np.empty(2 * (nbr_ptr[n] + n), dtype=np.int64)

    while True:
        if total <= 1e-300:
            break
        u = np.random.random()
        while u <= 0.0:
            u = np.random.random()
        t_next = t + (-math.log(u)) / total
        if t_next > t_end:
            break
        while snap_pos < n_snaps and snap_times[snap_pos] < t_next:
            for x in range(n):
                snap_out[snap_pos, x] = eta[x]
            snap_pos += 1
        t = t_next

        # pick the site, then the channel inside the site
        target = np.random.random() * total
        x = _fen_find(tree, n, top_bit, target)
        if x >= n or rate[x] <= 0.0:
            # stale tree from roundoff drift: rebuild and redraw
            for i in range(n + 1):
                tree[i] = 0.0
            total = 0.0
            for i in range(n):
                rate[i] = _site_rate(
                    i, eta, nbr_ptr, nbr_idx, c_alpha, c_atheta, bulk, scale, sigma
                )
                _fen_update(tree, n, i, rate[i])
                total += rate[i]
            continue

        occ = float(eta[x])
        thr = np.random.random() * rate[x]
        kind = -1
        partner = -1
        # bulk channels
        for j in range(nbr_ptr[x], nbr_ptr[x + 1]):
            y = nbr_idx[j]
            sub = bulk * occ * (1.0 + sigma * eta[y])
            if sub <= 0.0:
                continue
            thr -= sub
            if thr < 0.0:
                kind = EVENT_BULK
                partner = y
                break
        if kind < 0:
            # exit channels
            for j in range(cross_ptr[x], cross_ptr[x + 1]):
                sub = scale * occ * cross_alpha[j] * (1.0 + sigma * cross_theta[j])
                if sub <= 0.0:
                    continue
                thr -= sub
                if thr < 0.0:
                    kind = EVENT_EXIT
                    partner = cross_zidx[j]
                    break
        if kind < 0:
            # entry channels
            for j in range(cross_ptr[x], cross_ptr[x + 1]):
                sub = scale * cross_alpha[j] * cross_theta[j] * (1.0 + sigma * occ)
                if sub <= 0.0:
                    continue
                thr -= sub
                if thr < 0.0 or j == cross_ptr[x + 1] - 1:
                    kind = EVENT_ENTRY
                    partner = cross_zidx[j]
                    break
        if kind < 0:
            # roundoff left the draw above every channel: refresh this site
            new_rate = _site_rate(
                x, eta, nbr_ptr, nbr_idx, c_alpha, c_atheta, bulk, scale, sigma
            )
            total += new_rate - rate[x]
            _fen_update(tree, n, x, new_rate - rate[x])
            rate[x] = new_rate
            continue

        if kind == EVENT_BULK:
            eta[x] -= 1
            eta[partner] += 1
            if eta[partner] > max_occ:
                raise RuntimeError(
                    "occupation exceeded the configured maximum; dynamics "
                    "is piling up faster than the guard allows"
                )
        elif kind == EVENT_EXIT:
            eta[x] -= 1
        else:
            eta[x] += 1
            if eta[x] > max_occ:
                raise RuntimeError(
                    "occupation exceeded the configured maximum; dynamics "
                    "is piling up faster than the guard allows"
                )

        if log_cap > 0:
            if n_events >= log_cap:
                raise RuntimeError(
                    "event log overflow; raise the log capacity or disable logging"
                )
            log_t[n_events] = t
            log_kind[n_events] = kind
            log_site[n_events] = x
            log_partner[n_events] = partner
        n_events += 1

        # refresh rates of every site whose channels changed
        n_touched = 0
        touched[n_touched] = x
        n_touched += 1
        for j in range(nbr_ptr[x], nbr_ptr[x + 1]):
            touched[n_touched] = nbr_idx[j]
            n_touched += 1
        if kind == EVENT_BULK:
            touched[n_touched] = partner
            n_touched += 1
            for j in range(nbr_ptr[partner], nbr_ptr[partner + 1]):
                touched[n_touched] = nbr_idx[j]
                n_touched += 1
        for k in range(n_touched):
            site = touched[k]
            fresh = _site_rate(
                site, eta, nbr_ptr, nbr_idx, c_alpha, c_atheta, bulk, scale, sigma
            )
            if fresh != rate[site]:
                delta = fresh - rate[site]
                _fen_update(tree, n, site, delta)
                total += delta
                rate[site] = fresh

        if check_every > 0 and n_events % check_every == 0:
            audit = 0.0
            for i in range(n):
                fresh = _site_rate(
                    i, eta, nbr_ptr, nbr_idx, c_alpha, c_atheta, bulk, scale, sigma
                )
                if abs(fresh - rate[i]) > 1e-7 * (1.0 + abs(fresh)):
                    raise RuntimeError("cached site rate diverged from recomputation")
                audit += fresh
            if abs(audit - total) > 1e-6 * (1.0 + abs(audit)):
                raise RuntimeError("cached total rate diverged from recomputation")

        if n_events & 0x3FFFFFF == 0:
            # periodic rebuild bounds float drift on very long runs
            for i in range(n + 1):
                tree[i] = 0.0
            total = 0.0
            for i in range(n):
                rate[i] = _site_rate(
                    i, eta, nbr_ptr, nbr_idx, c_alpha, c_atheta, bulk, scale, sigma
                )
                _fen_update(tree, n, i, rate[i])
                total += rate[i]

    while snap_pos < n_snaps and snap_times[snap_pos] <= t_end:
        for x in range(n):
            snap_out[snap_pos, x] = eta[x]
        snap_pos += 1
    return n_events


# ---------------------------------------------------------------------------
# wrappers


def _theta_values(lattice: LatticeApprox, theta, sigma: int) -> np.ndarray:
    if callable(theta):
        vals = lattice.evaluate_outer(theta)
    else:
        arr = np.asarray(theta, dtype=float)
        if arr.shape == ():
            vals = np.full(lattice.n_outer, float(arr))
        elif arr.shape == (lattice.n_outer,):
            vals = arr.copy()
        else:
            raise ParticleError(
                f"boundary data has shape {arr.shape}, expected ({lattice.n_outer},)"
            )
    if np.any(vals < 0):
        raise ParticleError("reservoir densities must be nonnegative")
    if sigma == -1 and np.any(vals > 1):
        raise ParticleError("exclusion reservoir densities must lie in [0, 1]")
    return vals


def _static_arrays(lattice: LatticeApprox, params: SimParams):
    n = lattice.n_sites
    eps = lattice.eps
    theta_vals = _theta_values(lattice, params.theta, params.sigma)

    order = np.argsort(lattice.cross_x, kind="stable")
    cx = lattice.cross_x[order]
    cz = lattice.cross_z[order]
    ca = lattice.cross_alpha[order]
    cross_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(cross_ptr, cx + 1, 1)
    cross_ptr = np.cumsum(cross_ptr)
    cross_theta = theta_vals[cz]

    c_alpha = np.zeros(n)
    c_atheta = np.zeros(n)
    np.add.at(c_alpha, cx, ca)
    np.add.at(c_atheta, cx, ca * cross_theta)

    if math.isinf(params.beta):
        scale = 0.0
    else:
        scale = eps ** (params.beta - 2.0)
    return {
        "nbr_ptr": lattice.neighbor_ptr.astype(np.int64),
        "nbr_idx": lattice.neighbor_idx.astype(np.int64),
        "cross_ptr": cross_ptr,
        "cross_alpha": np.ascontiguousarray(ca),
        "cross_theta": np.ascontiguousarray(cross_theta),
        "cross_zidx": np.ascontiguousarray(cz.astype(np.int64)),
        "c_alpha": c_alpha,
        "c_atheta": c_atheta,
        "bulk": eps ** -2.0,
        "scale": scale,
        "sigma": float(params.sigma),
        "theta_values": theta_vals,
    }


def simulate(
    config: Configuration,
    params: SimParams,
    snapshot_times=(),
    log_events: bool = False,
    log_capacity: int = 2_000_000,
    check_every: int = 0,
    seed_override: int | None = None,
) -> Trajectory:
    """Run the dynamics from config until the horizon.

    snapshot_times must be sorted and lie inside [0, horizon].  Event
    logging stores every jump up to log_capacity (an overflow raises);
    check_every > 0 audits the cached rates every that many events.
    """
    if config.sigma != params.sigma:
        raise ParticleError("configuration and parameters disagree on sigma")
    lattice = config.lattice
    static = _static_arrays(lattice, params)

    snap_times = np.asarray(snapshot_times, dtype=float)
    if snap_times.ndim == 0:
        snap_times = snap_times.reshape(1)
    if np.any(np.diff(snap_times) < 0):
        raise ParticleError("snapshot times must be sorted")
    if len(snap_times) and (snap_times[0] < 0 or snap_times[-1] > params.horizon):
        raise ParticleError("snapshot times must lie within [0, horizon]")
    snap_out = np.zeros((len(snap_times), lattice.n_sites), dtype=np.int64)

    cap = int(log_capacity) if log_events else 0
    log_t = np.zeros(cap)
    log_kind = np.zeros(cap, dtype=np.int64)
    log_site = np.zeros(cap, dtype=np.int64)
    log_partner = np.zeros(cap, dtype=np.int64)

    if seed_override is not None:
        seed = int(seed_override)
    else:
        seed = int(np.random.SeedSequence(params.seed).generate_state(1)[0])

    eta = config.occupation.copy()
    try:
        n_events = _kmc_kernel(
            eta,
            static["nbr_ptr"], static["nbr_idx"],
            static["cross_ptr"], static["cross_alpha"],
            static["cross_theta"], static["cross_zidx"],
            static["c_alpha"], static["c_atheta"],
            static["bulk"], static["scale"], static["sigma"],
            float(params.horizon),
            snap_times, snap_out,
            seed,
            int(params.max_occupancy),
            log_t, log_kind, log_site, log_partner,
            int(check_every),
        )
    except RuntimeError as exc:
        raise ParticleError(str(exc)) from exc

    final = Configuration(lattice, eta, params.sigma)
    traj = Trajectory(
        params=params,
        initial=config.copy(),
        snapshot_times=snap_times,
        snapshots=snap_out,
        final=final,
        n_events=int(n_events),
        meta={"seed_used": seed},
    )
    if log_events:
        traj.event_times = log_t[:n_events].copy()
        traj.event_kinds = log_kind[:n_events].copy()
        traj.event_sites = log_site[:n_events].copy()
        traj.event_partners = log_partner[:n_events].copy()
    return traj


def spawn_seeds(master_seed: int, count: int) -> np.ndarray:
    """Independent 32-bit seeds for replica runs."""
    return np.random.SeedSequence(master_seed).generate_state(count)


def init_product(lattice: LatticeApprox, density, sigma: int, seed: int = 0) -> Configuration:
    """Product initial state: Bernoulli(density) per site for exclusion,
    Poisson(density) for inclusion."""
    rng = np.random.default_rng(seed)
    if callable(density):
        dens = lattice.evaluate(density)
    else:
        arr = np.asarray(density, dtype=float)
        dens = np.full(lattice.n_sites, float(arr)) if arr.shape == () else arr.copy()
    if np.any(dens < 0):
        raise ParticleError("densities must be nonnegative")
    if sigma == -1:
        if np.any(dens > 1):
            raise ParticleError("exclusion densities must lie in [0, 1]")
        occ = (rng.random(lattice.n_sites) < dens).astype(np.int64)
    else:
        occ = rng.poisson(dens).astype(np.int64)
    return Configuration(lattice, occ, sigma)


def init_pile(lattice: LatticeApprox, center, sigma: int) -> Configuration:
    """Pile of order eps^(-d/2) particles within distance sqrt(eps) of center.

    For exclusion the per-site count is capped at one.  A center with no
    lattice site in range yields the empty state with a warning.
    """
    center = np.asarray(center, dtype=float)
    eps = lattice.eps
    dist = np.linalg.norm(lattice.coords - center, axis=1)
    mask = dist <= math.sqrt(eps)
    occ = np.zeros(lattice.n_sites, dtype=np.int64)
    height = max(1, math.floor(eps ** (-lattice.d / 2.0)))
    if sigma == -1:
        height = 1
    occ[mask] = height
    if not mask.any():
        warnings.warn("pile center has no lattice site in range; state is empty")
    return Configuration(lattice, occ, sigma)


def sample_stationary(
    lattice: LatticeApprox,
    params: SimParams,
    n_samples: int,
    lam0: float | None = None,
    init: Configuration | None = None,
    burnin_multiplier: float = 10.0,
) -> list[Configuration]:
    """Draw approximately independent stationary configurations.

    Runs one long trajectory, discards a burn-in of burnin_multiplier
    relaxation times 1/lam0 and then records a state every 2/lam0.  lam0
    is the principal eigenvalue of minus the walk generator; pass it in
    from the spectrum (an error reminds you when missing).
    """
    if math.isinf(params.beta):
        raise ParticleError("stationary sampling needs a boundary coupling, beta < inf")
    if lam0 is None:
        raise ParticleError(
            "relaxation rate missing: compute the walk spectrum first and "
            "pass lam0 = ground_state()[0]"
        )
    if lam0 <= 0:
        raise ParticleError("lam0 must be positive")
    burnin = burnin_multiplier / lam0
    spacing = 2.0 / lam0
    times = burnin + spacing * np.arange(n_samples)
    horizon = float(times[-1]) if n_samples else burnin
    run_params = SimParams(
        sigma=params.sigma,
        beta=params.beta,
        theta=params.theta,
        horizon=horizon,
        seed=params.seed,
        max_occupancy=params.max_occupancy,
    )
    if init is None:
        init = Configuration(
            lattice, np.zeros(lattice.n_sites, dtype=np.int64), params.sigma
        )
    traj = simulate(init, run_params, snapshot_times=times)
    return [
        Configuration(lattice, row.copy(), params.sigma) for row in traj.snapshots
    ]
