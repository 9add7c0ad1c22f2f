"""Command line entry point ``dai``.

Exit codes: 0 success or feasible, 1 infeasible or not converged, 2 runtime
error (including missing electrical data), 3 unreadable or malformed JSON,
4 schema violation, 5 physically invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from .certify import CvxpyOracle, NoFeasibleGainError, max_gain_search, write_witness
from .config import Config, ConfigError, MissingDataError, load_config, preset_path
from .lyapunov import (EpsilonSearchError, LyapunovConfig, eval_V, find_epsilon, hessian_at_eq, lyapunov_decreasing,
                       vdot_matrix_nominal)
from .netmodel import EquilibriumError, GridState, InsecureEquilibriumWarning, equilibrium_solve, p_star, \
    setpoints_for_equilibrium
from .reduction import ErrorState, build_reduction, matched_equilibrium, to_error_state
from .simulate import (SwitchSchedule, constant_delay, empirical_max_gain, integrate_error, make_schedule,
                       run_trial, write_trajectory_csv)

EXIT_OK, EXIT_FAIL, EXIT_ERROR, EXIT_PARSE, EXIT_SCHEMA, EXIT_PHYSICS = 0, 1, 2, 3, 4, 5
_CONFIG_EXIT = {"parse": EXIT_PARSE, "schema": EXIT_SCHEMA, "physics": EXIT_PHYSICS}


def _load(source: str) -> Config:
    if source.startswith("@"):
        return load_config(preset_path(source[1:]))
    return load_config(source)


def _network_at(cfg: Config, label: str | None):
    """Electrical network, optionally with setpoints moved so that the named
    operating point is the synchronized motion."""
    net = cfg.power_network()
    if label is None:
        return net, None
    points = dict(cfg.operating_points)
    if label not in points:
        raise MissingDataError(f"unknown operating point {label!r}; known: {', '.join(points) or 'none'}")
    theta = np.asarray(points[label])
    return setpoints_for_equilibrium(net, cfg.dai(), theta), theta


def cmd_certify(cfg: Config, args) -> int:
    kappa = args.kappa if args.kappa is not None else cfg.comm.kappa
    setup = cfg.certify_setup(CvxpyOracle(cfg.certify.solver))
    result = setup.check(kappa)
    print(f"kappa={kappa:g} status={result.status} margin={result.margin} delta={result.delta:.3e} "
          f"psi_dim={result.diagnostics.get('psi_dimension')} solver={result.diagnostics.get('solver_status')}")
    if args.out:
        write_witness(result, args.out, setup.ts.channel_labels())
        print(f"witness written to {args.out}")
    if result.status == "solver_error":
        return EXIT_ERROR
    return EXIT_OK if result.feasible else EXIT_FAIL


def cmd_search_gain(cfg: Config, args) -> int:
    if args.empirical:
        return _search_gain_empirical(cfg, args)
    setup = cfg.certify_setup(CvxpyOracle(cfg.certify.solver))
    kappa_init = args.kappa if args.kappa is not None else cfg.certify.kappa_init
    try:
        res = max_gain_search(setup.check, kappa_init, cfg.certify.tol_kappa)
    except NoFeasibleGainError as exc:
        print(f"no feasible gain: {exc}")
        for k, status in exc.log:
            print(f"  probe kappa={k:.6g} {status}")
        return EXIT_FAIL
    for k, status in res.log:
        print(f"  probe kappa={k:.6g} {status}")
    hi = "none" if res.bracket[1] is None else f"{res.bracket[1]:.6g}"
    print(f"kappa_feas={res.kappa:.6g} bracket=[{res.bracket[0]:.6g}, {hi}]" + (" (search cap)" if res.at_cap else ""))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"kappa_feas": res.kappa, "bracket": list(res.bracket), "at_cap": res.at_cap,
                       "probes": [{"kappa": k, "status": s} for k, s in res.log]}, fh, indent=2)
    return EXIT_OK


def _search_gain_empirical(cfg: Config, args) -> int:
    net, _ = _network_at(cfg, args.operating_point)
    kappa_lo = args.kappa if args.kappa is not None else cfg.comm.kappa
    kappa_hi = cfg.sim.kappa_hi or 4.0 * kappa_lo
    base = cfg.sim_setup(kappa_lo, net)
    res = empirical_max_gain(base.with_kappa, kappa_lo, kappa_hi, cfg.sim.trials, cfg.sim.tol_kappa,
                             seed=args.seed if args.seed is not None else cfg.sim.seed)
    for k, ok, outcomes in res.log:
        verdicts = sorted({v for _, v in outcomes})
        print(f"  probe kappa={k:.6g} {'stable' if ok else 'unstable'} ({len(outcomes)} trials: {', '.join(verdicts)})")
    print(f"kappa_sim={res.kappa:.6g} bracket=[{res.bracket[0]:.6g}, {res.bracket[1]:.6g}] monotone={res.monotone}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"kappa_sim": res.kappa, "bracket": list(res.bracket), "monotone": res.monotone,
                       "probes": [{"kappa": k, "stable": ok, "outcomes": o} for k, ok, o in res.log]}, fh, indent=2)
    return EXIT_OK if res.monotone else EXIT_FAIL


def cmd_simulate(cfg: Config, args) -> int:
    net, _ = _network_at(cfg, args.operating_point)
    kappa = args.kappa if args.kappa is not None else cfg.comm.kappa
    seed = args.seed if args.seed is not None else cfg.sim.seed
    setup = cfg.sim_setup(kappa, net)
    trial = run_trial(setup, seed)
    traj = trial.trajectory
    print(f"kappa={kappa:g} seed={seed} verdict={trial.verdict} t_final={traj.t[-1]:.3f}")
    out = args.out or "trajectory.csv"
    write_trajectory_csv(traj, out)
    print(f"trajectory written to {out}")
    return EXIT_OK if trial.verdict == "converged" else EXIT_FAIL


def cmd_validate_nominal(cfg: Config, args) -> int:
    net, _ = _network_at(cfg, args.operating_point)
    kappa = args.kappa if args.kappa is not None else cfg.comm.kappa
    seed = args.seed if args.seed is not None else cfg.sim.seed
    dai = cfg.dai(kappa)
    ts = cfg.topology_set()
    guess = None if cfg.sim.theta_guess is None else np.asarray(cfg.sim.theta_guess)
    eq = equilibrium_solve(net, dai, guess)
    rs = build_reduction(dai, ts)
    lyap = find_epsilon(net, dai, rs, eq.theta, seed=seed)
    hess_min = float(np.linalg.eigvalsh(hessian_at_eq(net, dai, rs, lyap, eq.theta)).min())
    vdot_min = min(float(np.linalg.eigvalsh(vdot_matrix_nominal(net, dai, rs, lyap, eq.theta, ell)).min())
                   for ell in range(ts.nu))
    decreasing = _check_decrease(net, dai, ts, rs, lyap, eq.theta, cfg, seed)
    report = {"kappa": kappa, "epsilon": lyap.epsilon, "gamma": lyap.gamma, "secure": eq.secure,
              "hessian_min_eig": hess_min, "vdot_min_eig": vdot_min, "trajectories": decreasing}
    ok = hess_min > 0 and vdot_min > 0 and all(d["decreasing"] for d in decreasing)
    print(f"epsilon={lyap.epsilon:.6g} gamma={lyap.gamma:.6g} hessian_min={hess_min:.3e} vdot_min={vdot_min:.3e} "
          f"decreasing={sum(d['decreasing'] for d in decreasing)}/{len(decreasing)}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK if ok else EXIT_FAIL


def _check_decrease(net, dai, ts, rs, lyap: LyapunovConfig, theta_star, cfg: Config, seed: int,
                    n_traj: int = 5, t_end: float = 20.0) -> list[dict]:
    rng = np.random.default_rng(seed)
    pst = p_star(net, dai)
    out = []
    for j in range(n_traj):
        r = cfg.sim.init_radius
        x0 = GridState(theta_star + rng.uniform(-r, r, net.n), net.wd + rng.uniform(-r, r, net.n),
                       pst + rng.uniform(-r, r, net.n))
        th = matched_equilibrium(dai, theta_star, pst, x0)
        err0 = to_error_state(rs, dai, x0, th, net.wd)
        sched = make_schedule(ts.nu, cfg.sim.dwell, seed + j, t_end) if ts.nu > 1 else SwitchSchedule.constant()
        traj = integrate_error(net, dai, rs, th, constant_delay(np.zeros(rs.n_channels)), sched, err0,
                               dt=cfg.sim.dt, t_end=t_end, stride=max(1, int(round(0.01 / cfg.sim.dt))))
        values = np.array([eval_V(net, dai, rs, lyap, ErrorState.from_vector(row, net.n), th) for row in traj.states])
        out.append({"decreasing": bool(lyapunov_decreasing(values)), "V0": float(values[0]),
                    "V_end": float(values[-1])})
    return out


COMMANDS = {"certify": cmd_certify, "search-gain": cmd_search_gain, "simulate": cmd_simulate,
            "validate-nominal": cmd_validate_nominal}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dai", description="Delay-robust DAI frequency control: LMI "
                                     "certificates and closed-loop simulation.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True,
                        help="JSON configuration file, or @name for a bundled preset (e.g. @kundur)")
    parser.add_argument("--kappa", type=float, help="gain (certify, simulate) or starting gain (search-gain)")
    parser.add_argument("--seed", type=int, help="random seed for delays, switching and initial state")
    parser.add_argument("--out", help="output file: witness, search log, trajectory CSV or report")
    parser.add_argument("--empirical", action="store_true", help="search-gain by simulation instead of LMIs")
    parser.add_argument("--operating-point", help="named operating point from the configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _CONFIG_EXIT.get(exc.kind, EXIT_ERROR)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", InsecureEquilibriumWarning)
            return COMMANDS[args.command](cfg, args)
    except MissingDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except InsecureEquilibriumWarning as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (EquilibriumError, EpsilonSearchError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
