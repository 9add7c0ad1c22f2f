"""Fixed-step simulation of the switched delayed closed loop.

The integrator is classical RK4 with delays and topology frozen over each
step. Delayed ``p`` values come from a ring buffer of past step values and
their one-sided derivatives, interpolated by cubic Hermite polynomials; a
delayed time inside the current step is interpolated linearly between the
step start and the stage state. The initial history is constant.

Trials are independent and can run concurrently; ``DAI_THREADS`` caps the
number of worker threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .graph import TopologySet, channel_matrices
from .netmodel import DaiParams, GridState, PowerNetwork, equilibrium_solve, p_star
from .reduction import ErrorState, ReducedSystem, build_reduction, matched_equilibrium

GRID, ERROR, LINEAR = 0, 1, 2
_BLOWUP = 1e8


# --------------------------------------------------------------------------- signals

@dataclass(frozen=True, eq=False)
class DelayRealization:
    """Piecewise-constant delays, row ``j`` holding on ``[j Ts, (j+1) Ts)``."""

    h: np.ndarray  # (N,)
    Ts: float
    seed: int | None
    samples: np.ndarray  # (n_samples, N)

    def value(self, t: float) -> np.ndarray:
        j = min(int(math.floor(t / self.Ts + 1e-9)), self.samples.shape[0] - 1)
        return self.samples[max(j, 0)]


def make_delay(h, Ts: float, seed: int | None, t_end: float) -> DelayRealization:
    """I.i.d. uniform samples on ``[0, h_m]``, each held for ``Ts``."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if np.any(h < 0):
        raise ValueError("delay bounds must be >= 0")
    if Ts <= 0:
        raise ValueError("Ts must be > 0")
    count = int(math.ceil(t_end / Ts)) + 1
    rng = np.random.default_rng(seed)
    return DelayRealization(h, float(Ts), seed, rng.uniform(0.0, 1.0, size=(count, h.shape[0])) * h)


def constant_delay(tau, Ts: float = 1.0) -> DelayRealization:
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    return DelayRealization(tau.copy(), float(Ts), None, tau[None, :].copy())


@dataclass(frozen=True, eq=False)
class SwitchSchedule:
    dwell: float
    seed: int | None
    sequence: np.ndarray  # (n_intervals,) int

    def value(self, t: float) -> int:
        j = min(int(math.floor(t / self.dwell + 1e-9)), self.sequence.shape[0] - 1)
        return int(self.sequence[max(j, 0)])

    @classmethod
    def constant(cls, ell: int = 0) -> "SwitchSchedule":
        return cls(math.inf, None, np.array([ell], dtype=np.int64))


def make_schedule(nu: int, dwell: float, seed: int | None, t_end: float) -> SwitchSchedule:
    """Topology index drawn uniformly from ``0..nu-1`` for every dwell interval."""
    if dwell <= 0:
        raise ValueError("dwell must be > 0")
    count = int(math.ceil(t_end / dwell)) + 1
    rng = np.random.default_rng(seed)
    return SwitchSchedule(float(dwell), seed, rng.integers(0, nu, size=count).astype(np.int64))


# --------------------------------------------------------------------------- kernels

@numba.njit(cache=True, nogil=True)
def _rhs_grid(x, dl, ell, vecs, C, G, T, out):
    n = C.shape[0]
    N = T.shape[1]
    wd = vecs[5, 0]
    for i in range(n):
        out[i] = x[n + i]
        flow = 0.0
        for k in range(n):
            if C[i, k] != 0.0:
                flow += C[i, k] * math.sin(x[i] - x[k])
        out[n + i] = (-vecs[1, i] * (x[n + i] - wd) + vecs[2, i] - flow - x[2 * n + i]) / vecs[0, i]
    for i in range(n):
        cons = 0.0
        for m in range(N):
            for j in range(n):
                tij = T[ell, m, i, j]
                if tij != 0.0:
                    cons += tij * vecs[4, j] * dl[m, j]
        out[2 * n + i] = vecs[3, i] * (x[n + i] - wd) - vecs[3, i] * vecs[4, i] * cons


@numba.njit(cache=True, nogil=True)
def _rhs_error(x, dl, ell, vecs, C, G, T, out):
    n = C.shape[0]
    r = n - 1
    N = T.shape[1]
    mu = vecs[4, 0]
    s = 0.0
    for i in range(n):
        s += vecs[3, i] * x[i]
    for i in range(n):
        out[i] = x[n + i]
        g = 0.0
        for k in range(n):
            if C[i, k] != 0.0:
                half = 0.5 * (x[i] - x[k])
                g += C[i, k] * 2.0 * math.cos(vecs[2, i] - vecs[2, k] + half) * math.sin(half)
        gp = 0.0
        for b in range(r):
            gp += G[i, b] * x[2 * n + b]
        out[n + i] = (-vecs[1, i] * x[n + i] - g - gp - vecs[3, i] * s / mu) / vecs[0, i]
    for b in range(r):
        v = 0.0
        for i in range(n):
            v += G[i, b] * x[n + i]
        for m in range(N):
            for c in range(r):
                tbc = T[ell, m, b, c]
                if tbc != 0.0:
                    v -= tbc * dl[m, c]
        out[2 * n + b] = v


@numba.njit(cache=True, nogil=True)
def _rhs_linear(x, dl, ell, G, T, out):
    d = x.shape[0]
    N = T.shape[1]
    for i in range(d):
        v = 0.0
        for j in range(d):
            v += G[i, j] * x[j]
        for m in range(N):
            for j in range(d):
                v += T[ell, m, i, j] * dl[m, j]
        out[i] = v


@numba.njit(cache=True, nogil=True)
def _rhs(kind, x, dl, ell, vecs, C, G, T, out):
    if kind == 0:
        _rhs_grid(x, dl, ell, vecs, C, G, T, out)
    elif kind == 1:
        _rhs_error(x, dl, ell, vecs, C, G, T, out)
    else:
        _rhs_linear(x, dl, ell, G, T, out)


@numba.njit(cache=True, nogil=True)
def _fill_delayed(dl, step, c, tau, dt, p_off, xn, xs, hist, hdr, hdl, p0):
    N, q = dl.shape
    L = hist.shape[0]
    for m in range(N):
        u = step + c - tau[m] / dt
        if u >= step:
            w = (u - step) / c if c > 0.0 else 0.0
            for b in range(q):
                dl[m, b] = (1.0 - w) * xn[p_off + b] + w * xs[p_off + b]
        elif u < 0.0:
            for b in range(q):
                dl[m, b] = p0[b]
        else:
            j = int(math.floor(u))
            s = u - j
            ja = j % L
            jb = (j + 1) % L
            s2 = s * s
            s3 = s2 * s
            h00 = 2.0 * s3 - 3.0 * s2 + 1.0
            h10 = s3 - 2.0 * s2 + s
            h01 = -2.0 * s3 + 3.0 * s2
            h11 = s3 - s2
            for b in range(q):
                dl[m, b] = (h00 * hist[ja, b] + h10 * dt * hdr[ja, b]
                            + h01 * hist[jb, b] + h11 * dt * hdl[jb, b])


@numba.njit(cache=True, nogil=True)
def _advance(kind, x, step, n_steps, dt, Ts, dwell, taus, ells, p_off, hist, hdr, hdl, p0,
             vecs, C, G, T, stride, rec, rec_ell, rec_tau, rec_pos):
    """Advance ``n_steps`` RK4 steps in place. Returns (status, step, rec_pos);
    status 1 means the state left the finite bounded region."""
    dim = x.shape[0]
    N = taus.shape[1]
    q = hist.shape[1]
    L = hist.shape[0]
    dl = np.empty((N, q))
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    xs = np.empty(dim)
    for _ in range(n_steps):
        t = step * dt
        jt = int(math.floor(t / Ts + 1e-9))
        if jt >= taus.shape[0]:
            jt = taus.shape[0] - 1
        je = int(math.floor(t / dwell + 1e-9))
        if je >= ells.shape[0]:
            je = ells.shape[0] - 1
        tau = taus[jt]
        ell = ells[je]

        _fill_delayed(dl, step, 0.0, tau, dt, p_off, x, x, hist, hdr, hdl, p0)
        _rhs(kind, x, dl, ell, vecs, C, G, T, k1)
        for b in range(q):
            hdr[step % L, b] = k1[p_off + b]
        for i in range(dim):
            xs[i] = x[i] + 0.5 * dt * k1[i]
        _fill_delayed(dl, step, 0.5, tau, dt, p_off, x, xs, hist, hdr, hdl, p0)
        _rhs(kind, xs, dl, ell, vecs, C, G, T, k2)
        for i in range(dim):
            xs[i] = x[i] + 0.5 * dt * k2[i]
        _fill_delayed(dl, step, 0.5, tau, dt, p_off, x, xs, hist, hdr, hdl, p0)
        _rhs(kind, xs, dl, ell, vecs, C, G, T, k3)
        for i in range(dim):
            xs[i] = x[i] + dt * k3[i]
        _fill_delayed(dl, step, 1.0, tau, dt, p_off, x, xs, hist, hdr, hdl, p0)
        _rhs(kind, xs, dl, ell, vecs, C, G, T, k4)
        for i in range(dim):
            xs[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        # derivative at the step end with this step's delays and topology
        _fill_delayed(dl, step, 1.0, tau, dt, p_off, x, xs, hist, hdr, hdl, p0)
        _rhs(kind, xs, dl, ell, vecs, C, G, T, k4)
        step += 1
        bad = False
        for i in range(dim):
            x[i] = xs[i]
            if not (abs(x[i]) < _BLOWUP):
                bad = True
        for b in range(q):
            hist[step % L, b] = x[p_off + b]
            hdl[step % L, b] = k4[p_off + b]
        if step % stride == 0 and rec_pos < rec.shape[0]:
            for i in range(dim):
                rec[rec_pos, i] = x[i]
            je = int(math.floor(step * dt / dwell + 1e-9))
            rec_ell[rec_pos] = ells[min(je, ells.shape[0] - 1)]
            jt = int(math.floor(step * dt / Ts + 1e-9))
            for m in range(N):
                rec_tau[rec_pos, m] = taus[min(jt, taus.shape[0] - 1), m]
            rec_pos += 1
        if bad:
            return 1, step, rec_pos
    return 0, step, rec_pos


# --------------------------------------------------------------------------- trajectories

@dataclass(eq=False)
class Trajectory:
    """Recorded samples of a run.

    ``states`` rows are ``(theta, omega, p)`` in grid coordinates or
    ``(theta~, omega~, p~)`` in error coordinates (``kind``).
    """

    t: np.ndarray
    states: np.ndarray
    ell: np.ndarray
    tau: np.ndarray
    n: int
    kind: str = "grid"
    status: str = "complete"  # complete | blowup | stopped
    verdict: str | None = None

    @property
    def theta(self) -> np.ndarray:
        return self.states[:, :self.n]

    @property
    def omega(self) -> np.ndarray:
        return self.states[:, self.n:2 * self.n]

    @property
    def p(self) -> np.ndarray:
        return self.states[:, 2 * self.n:]


@dataclass(frozen=True)
class StopRule:
    """Stop a run early once the last ``window`` seconds satisfy the convergence test."""

    tol_freq: float = 1e-3
    tol_cost: float = 1e-3
    window: float = 10.0
    check_every: float = 5.0


def _run(kind, x0, p_off, q, vecs, C, G, T, delays, schedule, dt, t_end, stride, stop, A, wd):
    if dt <= 0 or t_end < 0:
        raise ValueError("need dt > 0 and t_end >= 0")
    if delays.Ts < dt - 1e-15 and delays.samples.shape[0] > 1:
        raise ValueError(f"dt={dt} exceeds the delay sample period Ts={delays.Ts}")
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of dt")
    if delays.samples.shape[1] != T.shape[1]:
        raise ValueError(f"{delays.samples.shape[1]} delay channels for {T.shape[1]} model channels")
    if np.any(schedule.sequence < 0) or np.any(schedule.sequence >= T.shape[0]):
        raise ValueError("switching schedule refers to an unknown topology")
    hmax = float(delays.samples.max()) if delays.samples.size else 0.0
    L = int(math.ceil(hmax / dt)) + 2
    x = np.array(x0, dtype=float)
    p0 = x[p_off:p_off + q].copy()
    hist = np.tile(p0, (L, 1))
    hdr = np.zeros((L, q))
    hdl = np.zeros((L, q))
    n_rec = n_steps // stride + 1
    rec = np.full((n_rec, x.shape[0]), np.nan)
    rec_ell = np.zeros(n_rec, dtype=np.int64)
    rec_tau = np.zeros((n_rec, T.shape[1]))
    rec[0] = x
    rec_ell[0] = schedule.value(0.0)
    rec_tau[0] = delays.value(0.0)
    dwell = schedule.dwell if math.isfinite(schedule.dwell) else 1e300
    taus = np.ascontiguousarray(delays.samples, dtype=float)
    ells = np.ascontiguousarray(schedule.sequence, dtype=np.int64)
    step, pos, status = 0, 1, "complete"
    chunk = n_steps if stop is None else max(stride, int(round(stop.check_every / dt)) // stride * stride)
    while step < n_steps:
        todo = min(chunk, n_steps - step)
        code, step, pos = _advance(kind, x, step, todo, dt, delays.Ts, dwell, taus, ells, p_off, hist, hdr,
                                   hdl, p0, vecs, C, G, T, stride, rec, rec_ell, rec_tau, pos)
        if code == 1:
            status = "blowup"
            break
        if stop is not None and step < n_steps and step * dt >= stop.window:
            part = rec[:pos]
            tail = part[np.arange(pos) * stride * dt >= step * dt - stop.window]
            if _is_converged(tail, p_off, A, wd, stop.tol_freq, stop.tol_cost, kind):
                status = "stopped"
                break
    t = np.arange(pos) * stride * dt
    return Trajectory(t, rec[:pos], rec_ell[:pos], rec_tau[:pos], C.shape[0],
                      ("grid", "error", "linear")[kind], status)


def _is_converged(rows, p_off, A, wd, tol_freq, tol_cost, kind) -> bool:
    if rows.shape[0] == 0 or not np.all(np.isfinite(rows)):
        return False
    if kind == LINEAR:
        return bool(np.max(np.abs(rows)) < tol_freq)
    n = p_off // 2
    if kind == ERROR:
        return bool(np.max(np.abs(rows[:, n:2 * n])) < tol_freq)
    costs = rows[:, p_off:] * A
    return bool(np.max(np.abs(rows[:, n:2 * n] - wd)) < tol_freq
                and np.max(costs.max(axis=1) - costs.min(axis=1)) < tol_cost)


def integrate(net: PowerNetwork, dai: DaiParams, ts: TopologySet, delays: DelayRealization,
              schedule: SwitchSchedule, x0: GridState, dt: float = 1e-3, t_end: float = 10.0,
              stride: int = 10, stop: StopRule | None = None, T=None) -> Trajectory:
    """Integrate the closed loop in grid coordinates, recording every ``stride`` steps."""
    n = net.n
    T = channel_matrices(ts) if T is None else T
    vecs = np.zeros((6, n))
    vecs[0], vecs[1], vecs[2], vecs[3], vecs[4] = net.M, net.D, net.Pnet, dai.K, dai.A
    vecs[5, 0] = net.wd
    G = np.zeros((n, max(n - 1, 1)))
    return _run(GRID, x0.as_vector(), 2 * n, n, vecs, net.coupling, G, np.ascontiguousarray(T, dtype=float),
                delays, schedule, dt, t_end, stride, stop, dai.A, net.wd)


def integrate_error(net: PowerNetwork, dai: DaiParams, rs: ReducedSystem, theta_star, delays: DelayRealization,
                    schedule: SwitchSchedule, err0: ErrorState, dt: float = 1e-3, t_end: float = 10.0,
                    stride: int = 10, stop: StopRule | None = None) -> Trajectory:
    """Integrate the reduced error dynamics; same scheme as ``integrate``."""
    n = net.n
    vecs = np.zeros((6, n))
    vecs[0], vecs[1], vecs[2], vecs[3] = net.M, net.D, theta_star, 1.0 / dai.A
    vecs[4, 0] = rs.mu
    return _run(ERROR, err0.as_vector(), 2 * n, n - 1, vecs, net.coupling, np.ascontiguousarray(rs.KhW),
                np.ascontiguousarray(rs.Tbar), delays, schedule, dt, t_end, stride, stop, dai.A, 0.0)


def integrate_linear_dde(A0, Ad, delays: DelayRealization, x0, dt: float = 1e-3, t_end: float = 10.0,
                         stride: int = 1, schedule: SwitchSchedule | None = None) -> Trajectory:
    """``x' = A0 x + sum_m Ad[m] x(t - tau_m)`` with the same scheme, for calibration.

    ``Ad`` is ``(N, d, d)``, or ``(nu, N, d, d)`` together with a switching schedule.
    """
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    Ad = np.asarray(Ad, dtype=float)
    if Ad.ndim == 3:
        Ad = Ad[None]
    d = A0.shape[0]
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    schedule = schedule or SwitchSchedule.constant()
    vecs = np.zeros((6, d))
    C = np.zeros((d, d))
    traj = _run(LINEAR, x0, 0, d, vecs, C, np.ascontiguousarray(A0), np.ascontiguousarray(Ad), delays, schedule,
                dt, t_end, stride, None, np.ones(d), 0.0)
    traj.n = 0
    return traj


# --------------------------------------------------------------------------- verdicts

def window_amplitudes(t, omega_dev, window: float) -> np.ndarray:
    """Peak ``max_i |omega_i - wd|`` over consecutive windows ending at ``t[-1]``."""
    edges = t[-1] - window * np.arange(int(t[-1] // window) + 1)
    amps = []
    for hi in edges[:-1] if len(edges) > 1 else edges:
        mask = (t > hi - window - 1e-12) & (t <= hi + 1e-12)
        if mask.any():
            amps.append(float(np.max(np.abs(omega_dev[mask]))))
    return np.array(amps[::-1])


def detect_outcome(traj: Trajectory, net: PowerNetwork, dai: DaiParams, tol_freq: float = 1e-3,
                   tol_cost: float = 1e-3, window: float = 10.0) -> str:
    """Classify a grid-coordinate run as converged, limit-cycle, diverged or timeout.

    Converged: over the final ``window``, frequencies within ``tol_freq`` of
    nominal and marginal costs ``A_i p_i`` within ``tol_cost`` of each other.
    Otherwise the peak frequency deviation of the last two windows decides:
    growth beyond 10 % is divergence, a change within 10 % a limit cycle.
    """
    if traj.status == "blowup" or not np.all(np.isfinite(traj.states)):
        return "diverged"
    t = traj.t
    dev = traj.omega - net.wd
    tail = t >= t[-1] - window - 1e-12
    costs = traj.p[tail] * dai.A
    if (np.max(np.abs(dev[tail])) < tol_freq
            and np.max(costs.max(axis=1) - costs.min(axis=1)) < tol_cost):
        return "converged"
    amps = window_amplitudes(t, dev, window)
    if len(amps) < 2:
        return "timeout"
    prev, last = amps[-2], amps[-1]
    if last > 1.1 * prev:
        return "diverged"
    if abs(last - prev) <= 0.1 * prev:
        return "limit-cycle"
    return "timeout"


# --------------------------------------------------------------------------- trials

@dataclass(frozen=True, eq=False)
class SimSetup:
    """A closed loop plus the random-experiment protocol used for a trial."""

    net: PowerNetwork
    dai: DaiParams
    ts: TopologySet
    h: np.ndarray  # per-channel delay bounds
    Ts: float = 2e-3
    dwell: float = 0.5
    dt: float = 1e-3
    t_end: float = 200.0
    tol_freq: float = 1e-3
    tol_cost: float = 1e-3
    window: float = 10.0
    init_radius: float = 0.1
    theta_guess: np.ndarray | None = None
    early_stop: bool = True

    def with_kappa(self, kappa: float) -> "SimSetup":
        return replace(self, dai=self.dai.with_kappa(kappa))

    def equilibrium(self) -> tuple[np.ndarray, np.ndarray]:
        eq = equilibrium_solve(self.net, self.dai, self.theta_guess)
        return eq.theta, p_star(self.net, self.dai)


@dataclass(eq=False)
class TrialResult:
    seed: int
    verdict: str
    trajectory: Trajectory


def trial_streams(seed: int) -> tuple[int, int, np.random.Generator]:
    """Independent delay seed, switching seed and initial-state generator for one trial."""
    d, s, x = np.random.SeedSequence(seed).spawn(3)
    return (int(d.generate_state(1)[0]), int(s.generate_state(1)[0]), np.random.default_rng(x))


def run_trial(setup: SimSetup, seed: int, equilibrium=None) -> TrialResult:
    """One run from a random state within ``init_radius`` (per component) of the
    synchronized motion, with random delays and switching."""
    theta_star, pst = equilibrium if equilibrium is not None else setup.equilibrium()
    dseed, sseed, rng = trial_streams(seed)
    n = setup.net.n
    delays = make_delay(setup.h, setup.Ts, dseed, setup.t_end)
    schedule = make_schedule(setup.ts.nu, setup.dwell, sseed, setup.t_end)
    r = setup.init_radius
    x0 = GridState(theta_star + rng.uniform(-r, r, n), setup.net.wd + rng.uniform(-r, r, n),
                   pst + rng.uniform(-r, r, n))
    stop = StopRule(setup.tol_freq, setup.tol_cost, setup.window) if setup.early_stop else None
    traj = integrate(setup.net, setup.dai, setup.ts, delays, schedule, x0, setup.dt, setup.t_end, stop=stop)
    verdict = detect_outcome(traj, setup.net, setup.dai, setup.tol_freq, setup.tol_cost, setup.window)
    traj.verdict = verdict
    return TrialResult(seed, verdict, traj)


def worker_count() -> int:
    env = os.environ.get("DAI_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"DAI_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def all_converge(setup: SimSetup, seeds, threads: int | None = None) -> tuple[bool, list[tuple[int, str]]]:
    """Run trials in batches of ``threads``; stop after the first batch with a failure."""
    threads = threads or worker_count()
    equilibrium = setup.equilibrium()
    seeds = list(seeds)
    outcomes = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for start in range(0, len(seeds), threads):
            batch = seeds[start:start + threads]
            results = list(pool.map(lambda s: run_trial(setup, s, equilibrium), batch))
            outcomes += [(r.seed, r.verdict) for r in results]
            if any(r.verdict != "converged" for r in results):
                return False, outcomes
    return True, outcomes


@dataclass
class EmpiricalGainResult:
    kappa: float
    bracket: tuple[float, float]
    log: list[tuple[float, bool, list]] = field(default_factory=list)
    monotone: bool = True


def empirical_max_gain(builder, kappa_lo: float, kappa_hi: float, trials: int = 20, tol: float = 1e-2,
                       seed: int = 0, max_expand: int = 10, threads: int | None = None) -> EmpiricalGainResult:
    """Bisection on the gain where stability means every trial converges.

    ``builder(kappa)`` returns a ``SimSetup``. Brackets are halved or
    doubled (up to ``max_expand`` times) until ``kappa_lo`` is stable and
    ``kappa_hi`` is not. The result is the bracket midpoint once its width
    is at most ``tol``; ``monotone`` is False if the probe log contains a
    stable gain above an unstable one.

    Raises:
        RuntimeError: if no valid bracket is found.
    """
    seeds = [seed + j for j in range(trials)]
    log = []

    def stable(k):
        ok, outcomes = all_converge(builder(k), seeds, threads)
        log.append((k, ok, outcomes))
        return ok

    for _ in range(max_expand + 1):
        if stable(kappa_lo):
            break
        kappa_hi, kappa_lo = kappa_lo, 0.5 * kappa_lo
    else:
        raise RuntimeError(f"no stable gain found down to {kappa_lo:g}")
    for _ in range(max_expand + 1):
        if not stable(kappa_hi):
            break
        kappa_lo, kappa_hi = kappa_hi, 2.0 * kappa_hi
    else:
        raise RuntimeError(f"every probed gain up to {kappa_hi:g} was stable")
    lo, hi = kappa_lo, kappa_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if stable(mid):
            lo = mid
        else:
            hi = mid
    ordered = sorted((k, ok) for k, ok, _ in log)
    first_bad = next((k for k, ok in ordered if not ok), math.inf)
    monotone = all(not ok for k, ok in ordered if k > first_bad)
    return EmpiricalGainResult(0.5 * (lo + hi), (lo, hi), log, monotone)


# --------------------------------------------------------------------------- export

def write_trajectory_csv(traj: Trajectory, path, channel_count: int | None = None) -> None:
    """CSV with ``t, theta_i, omega_i, p_i, ell, tau_m`` columns (1-based indices)."""
    n = traj.n
    q = traj.states.shape[1] - 2 * n
    N = traj.tau.shape[1] if channel_count is None else channel_count
    header = (["t"] + [f"theta_{i + 1}" for i in range(n)] + [f"omega_{i + 1}" for i in range(n)]
              + [f"p_{i + 1}" for i in range(q)] + ["ell"] + [f"tau_{m + 1}" for m in range(N)])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(traj.t.shape[0]):
            vals = [repr(float(traj.t[k]))] + [repr(float(v)) for v in traj.states[k]]
            vals.append(str(int(traj.ell[k]) + 1))
            vals += [repr(float(v)) for v in traj.tau[k]]
            fh.write(",".join(vals) + "\n")


def reduced_setup(net: PowerNetwork, dai: DaiParams, ts: TopologySet, theta_star, state0: GridState):
    """Reduction plus the matched equilibrium angle for a grid-coordinate start."""
    rs = build_reduction(dai, ts)
    return rs, matched_equilibrium(dai, theta_star, p_star(net, dai), state0)
