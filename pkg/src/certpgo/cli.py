"""Command-line front end.

    certpgo solve     --input graph.g2o | --simulate grid9 | --sim-config sim.json
    certpgo certify   --graph graph.g2o --poses poses.g2o
    certpgo metrics   estimate.g2o reference.g2o
    certpgo simulate  --output graph.g2o [--truth truth.g2o]
    certpgo replay    manifest.json

Exit codes: 0 solved and certified, 2 solved but not certified, 1 error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .certify import DC2Config, PowerConfig, dc2_pgo, metrics, min_eig
from .objective import certificate
from .posegraph import (
    G2OParseError, GraphValidationError, SimulationParams, build_connection_laplacian,
    read_g2o, read_poses, simulate_grid, vertex_lines, write_g2o,
)
from .rbcd import SolverConfig

EXIT_OK, EXIT_ERROR, EXIT_UNCERTIFIED = 0, 1, 2

SIM_PRESETS = {
    "grid9": dict(num_robots=9, poses_per_robot=125, dimension=3),
    "grid4": dict(num_robots=4, poses_per_robot=64, dimension=3),
    "grid4-2d": dict(num_robots=4, poses_per_robot=64, dimension=2),
}


class CLIError(Exception):
    pass


def _restart(value: str) -> tuple[str, int]:
    if value in ("adaptive", "none"):
        return value, 50
    if value.startswith("fixed:"):
        try:
            period = int(value.split(":", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad restart period in {value!r}") from None
        if period < 1:
            raise argparse.ArgumentTypeError("restart period must be >= 1")
        return "fixed", period
    raise argparse.ArgumentTypeError("restart must be adaptive, none, or fixed:N")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rank-init", type=int, default=None, help="initial lift rank (default d+1)")
    p.add_argument("--rank-max", type=int, default=None, help="largest rank tried (default rank-init+5)")
    p.add_argument("--selection", choices=("uniform", "importance", "greedy"), default="greedy")
    p.add_argument("--restart", type=_restart, default=("adaptive", 50),
                   help="adaptive | fixed:N | none")
    p.add_argument("--grad-tol", type=float, default=1e-1)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--eig-tol", type=float, default=1e-2, help="Ritz residual tolerance")
    p.add_argument("--gamma", type=float, default=0.999, help="momentum factor for the eigensolver")
    p.add_argument("--init", choices=("chordal", "spanning-tree", "random"), default="chordal")
    p.add_argument("--sequential", action="store_true", help="one robot per iteration instead of one color")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certpgo", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"certpgo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve a pose graph and certify the result")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="g2o file")
    src.add_argument("--simulate", choices=sorted(SIM_PRESETS), help="built-in simulation preset")
    src.add_argument("--sim-config", help="JSON file with simulation parameters")
    s.add_argument("--robots", type=int, default=5, help="robots for g2o input (contiguous split)")
    s.add_argument("--mode", choices=("central", "distributed"), default="central")
    _add_solver_flags(s)
    s.add_argument("--output", help="write the full JSON report here")
    s.add_argument("--manifest", help="write the run manifest here (default: <output>.manifest.json)")
    s.add_argument("--log-csv", help="write the per-iteration log as CSV")
    s.add_argument("--poses-out", help="write the final poses as g2o VERTEX lines")
    s.add_argument("--transcript", help="distributed mode: write the message transcript (JSON lines)")

    c = sub.add_parser("certify", help="check global optimality of a pose estimate")
    c.add_argument("--graph", required=True)
    c.add_argument("--poses", required=True)
    c.add_argument("--eig-tol", type=float, default=1e-2)
    c.add_argument("--gamma", type=float, default=0.999)
    c.add_argument("--eps-rel", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)

    m = sub.add_parser("metrics", help="rotation/translation RMSE between two pose files")
    m.add_argument("estimate")
    m.add_argument("reference")

    g = sub.add_parser("simulate", help="write a simulated multi-robot dataset")
    gsrc = g.add_mutually_exclusive_group()
    gsrc.add_argument("--preset", choices=sorted(SIM_PRESETS), default="grid9")
    gsrc.add_argument("--config", help="JSON file with simulation parameters")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", required=True)
    g.add_argument("--truth", help="also write ground-truth poses")

    r = sub.add_parser("replay", help="re-run a solve manifest")
    r.add_argument("manifest")
    r.add_argument("--output", help="override the report path")
    return parser


# ---------------------------------------------------------------------------


def _sim_params(preset: str | None, config: str | None, seed: int) -> SimulationParams:
    if config is not None:
        path = Path(config)
        if not path.exists():
            raise CLIError(f"{path}: no such file")
        params = SimulationParams.from_file(path)
        return params
    return SimulationParams(**SIM_PRESETS[preset], seed=seed)


def _solve_config(args) -> DC2Config:
    restart, period = args.restart
    solver = SolverConfig(grad_tol=args.grad_tol, max_iters=args.max_iters, selection=args.selection,
                          restart=restart, restart_period=period, parallel=not args.sequential,
                          seed=args.seed)
    power = PowerConfig(gamma=args.gamma, tol=args.eig_tol)
    return DC2Config(init=args.init, r0=args.rank_init, rank_max=args.rank_max, solver=solver,
                     power=power, seed=args.seed)


def _load_graph(path: str, robots: int):
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{p}: no such file")
    return read_g2o(p, num_robots=robots)


def cmd_solve(args) -> int:
    cfg = _solve_config(args)
    reference = None
    if args.input:
        graph = _load_graph(args.input, args.robots)
        source = {"input": str(args.input), "robots": args.robots}
    else:
        params = _sim_params(args.simulate, args.sim_config, args.seed)
        graph, reference = simulate_grid(params)
        source = {"simulation": params.to_dict()}

    team = None
    if args.mode == "distributed":
        from .netsim import run_distributed
        report, team = run_distributed(graph, config=cfg, reference=reference)
    else:
        report = dc2_pgo(graph, cfg, reference=reference)

    print(f"poses={graph.n} edges={len(graph.edges)} robots={graph.num_robots} d={graph.d}")
    print(f"ranks={report.rank_trace} certified={report.certified}")
    for rec in report.ranks:
        print(f"  r={rec.rank} iters={rec.iterations} cost={rec.cost:.10g} "
              f"lambda_min={rec.lambda_min:.4g} eps={rec.eps_tol:.3g}")
    print(f"f(T)={report.cost:.10g} f_sdp={report.f_sdp:.10g} "
          f"relative_suboptimality={report.relative_suboptimality:.3e}")
    if report.metrics is not None:
        print(f"rotation_rmse={report.metrics[0]:.6g} translation_rmse={report.metrics[1]:.6g}")

    doc = report.to_dict()
    if team is not None:
        doc["communication"] = team.audit()
        if args.transcript:
            Path(args.transcript).write_text(team.net.dump_transcript())
    if args.output:
        Path(args.output).write_text(json.dumps(doc, indent=1, sort_keys=True))
        manifest_path = args.manifest or f"{args.output}.manifest.json"
    else:
        manifest_path = args.manifest
    if manifest_path:
        manifest = {
            "command": "solve",
            "argv": args.argv,
            "source": source,
            "mode": args.mode,
            "config": cfg.to_dict(),
            "seed": args.seed,
            "version": __version__,
        }
        Path(manifest_path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if args.log_csv:
        Path(args.log_csv).write_text("".join(
            (log.to_csv() if k == 0 else log.to_csv().split("\n", 1)[1]) for k, log in enumerate(report.logs)))
    if args.poses_out:
        Path(args.poses_out).write_text("\n".join(vertex_lines(report.poses)) + "\n")
    return EXIT_OK if report.certified else EXIT_UNCERTIFIED


def certify_poses(graph, poses, power: PowerConfig, eps_rel: float, seed: int) -> dict:
    """Certificate record for poses lifted at rank d."""
    if poses.d != graph.d or poses.n != graph.n:
        raise CLIError(f"poses ({poses.n} x SE({poses.d})) do not match graph ({graph.n} x SE({graph.d}))")
    Q = build_connection_laplacian(graph)
    S = certificate(Q, poses.matrix(), graph.d)
    eig = min_eig(S, power, seed)
    eps = eps_rel * (1.0 + abs(eig.dominant))
    record = {
        "lambda_min": eig.value,
        "residual": eig.residual,
        "eps_tol": eps,
        "lambda_dom": eig.dominant,
        "converged": eig.converged,
        "certified": bool(eig.value >= -eps and eig.converged),
    }
    if eig.value < -eps:
        # the escape direction is [0; v^T] at the lifted point, so its norm is ||v||
        record["escape_direction_norm"] = float(np.linalg.norm(eig.vector))
    return record


def cmd_certify(args) -> int:
    graph = _load_graph(args.graph, 1)
    p = Path(args.poses)
    if not p.exists():
        raise CLIError(f"{p}: no such file")
    poses = read_poses(p)
    record = certify_poses(graph, poses, PowerConfig(gamma=args.gamma, tol=args.eig_tol), args.eps_rel, args.seed)
    print(json.dumps(record, indent=1, sort_keys=True))
    return EXIT_OK if record["certified"] else EXIT_UNCERTIFIED


def cmd_metrics(args) -> int:
    paths = [Path(args.estimate), Path(args.reference)]
    for p in paths:
        if not p.exists():
            raise CLIError(f"{p}: no such file")
    a, b = (read_poses(p) for p in paths)
    if a.n != b.n or a.d != b.d:
        raise CLIError(f"pose files differ: {a.n} x SE({a.d}) vs {b.n} x SE({b.d})")
    rot, trans = metrics(a, b)
    print(json.dumps({"rotation_rmse": rot, "translation_rmse": trans}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    params = _sim_params(args.preset, args.config, args.seed)
    graph, truth = simulate_grid(params)
    Path(args.output).write_text(write_g2o(graph, truth))
    if args.truth:
        Path(args.truth).write_text("\n".join(vertex_lines(truth)) + "\n")
    print(f"wrote {graph.n} poses, {len(graph.edges)} edges, {params.num_robots} robots to {args.output}")
    return EXIT_OK


def cmd_replay(args) -> int:
    p = Path(args.manifest)
    if not p.exists():
        raise CLIError(f"{p}: no such file")
    manifest = json.loads(p.read_text())
    argv = list(manifest["argv"])
    if args.output:
        if "--output" in argv:
            i = argv.index("--output")
            argv[i + 1] = args.output
        else:
            argv += ["--output", args.output]
        for flag in ("--manifest",):
            if flag in argv:
                i = argv.index(flag)
                del argv[i:i + 2]
    return main(argv)


COMMANDS = {"solve": cmd_solve, "certify": cmd_certify, "metrics": cmd_metrics,
            "simulate": cmd_simulate, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return COMMANDS[args.command](args)
    except (CLIError, G2OParseError, GraphValidationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
