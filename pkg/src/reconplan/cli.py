"""Command-line entry point: ``reconplan {recon,plan,run,heatmap,transfer}``.

Exit codes: 0 success, 2 invalid input, 3 RP not certified while
``--require-certified`` was given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cmdp import InvalidCmdpError, Policy, require_valid
from .envs.layout import LayoutError
from .experiments import (
    ConfigError,
    HEATMAP_BASELINES,
    ExperimentConfig,
    certificate_document,
    heatmap,
    load_artifacts,
    make_env,
    relative_threat,
    run,
    train,
    transfer_eval,
    write_matrix,
)
from .composed import jam_recon
from .planner import rp_solve
from .threat import ThreatTable, min_threat_policy, threat_for_mode

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_UNCERTIFIED = 3

log = logging.getLogger("reconplan")


def _load_config(args) -> tuple[ExperimentConfig, Path | None]:
    if args.config is None:
        raise ConfigError("--config is required")
    path = Path(args.config)
    config = ExperimentConfig.load(path)
    changes = {}
    if getattr(args, "seed", None) is not None:
        n = args.n_seeds if args.n_seeds is not None else len(config.seeds)
        changes["seeds"] = tuple(range(args.seed, args.seed + n))
    elif getattr(args, "n_seeds", None) is not None:
        changes["seeds"] = tuple(range(args.n_seeds))
    for key in ("budget", "episodes", "train_episodes"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "methods", None):
        changes["methods"] = tuple(args.methods.split(","))
    if changes:
        config = replace(config, **changes)
    return config, path.parent


def _tabular(config: ExperimentConfig, base: Path | None):
    bundle = make_env(config.env, base)
    if bundle.cmdp is None:
        raise ConfigError(f"'{bundle.kind}' is a factored environment; use 'run' for it")
    require_valid(bundle.cmdp)
    return bundle


def cmd_recon(args) -> int:
    config, base = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = config.resolved_mode
    bundle = make_env(config.env, base)
    if bundle.kind == "jam":
        recon = jam_recon(bundle.world)
        np.savez_compressed(out / "recon.npz", eta=recon.eta.actions(), moving=recon.moving, static=recon.static)
        print(f"wrote per-obstacle threat tables to {out / 'recon.npz'}")
        return EXIT_OK
    require_valid(bundle.cmdp)
    eta, table = min_threat_policy(bundle.cmdp, mode)
    (out / "eta.json").write_text(json.dumps(eta.to_dict()))
    table.to_csv(out / "threat.csv")
    print(f"wrote baseline to {out / 'eta.json'} and threat table to {out / 'threat.csv'}")
    return EXIT_OK


def _read_threat_csv(path: Path, shape: tuple[int, int, int], mode) -> ThreatTable:
    values = np.zeros(shape)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, s, a = data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2].astype(int)
    values[t, s, a] = data[:, 3]
    return ThreatTable(values, mode)


def cmd_plan(args) -> int:
    config, base = _load_config(args)
    bundle = _tabular(config, base)
    cmdp = bundle.cmdp
    spec = config.safety
    recon = Path(args.recon)
    eta_doc = json.loads((recon / "eta.json").read_text())
    if eta_doc["deterministic"]:
        eta = Policy.from_actions(np.asarray(eta_doc["policy"]), cmdp.n_actions)
    else:
        eta = Policy(np.asarray(eta_doc["policy"]))
    eta.check_compatible(cmdp)
    threat = _read_threat_csv(recon / "threat.csv", eta.probs.shape, spec.mode)
    # recompute and compare so that a stale threat file is caught
    fresh = threat_for_mode(cmdp, eta, spec.mode)
    if np.max(np.abs(fresh.values - threat.values)) > 1e-9:
        raise ConfigError("threat.csv does not match the baseline on this environment")
    res = rp_solve(cmdp, spec, eta=eta, strict_gate=args.strict_gate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.save(out / "policy.json")
    res.secure.to_csv(out / "secure_set.csv")
    (out / "certificate.json").write_text(json.dumps(certificate_document(cmdp, res), indent=2, sort_keys=True))
    print(f"certified={res.certified} x*={res.x_star:.6g}" + (f" ({res.diagnostic})" if res.diagnostic else ""))
    if args.require_certified and not res.certified:
        return EXIT_UNCERTIFIED
    return EXIT_OK


def cmd_run(args) -> int:
    config, base = _load_config(args)
    out = run(config, args.out, base)
    metrics = json.loads((out / "metrics.json").read_text())
    for m in metrics["methods"]:
        n = "" if m["n_obstacles"] is None else f" N={m['n_obstacles']}"
        print(
            f"{m['method']}{n}: reward {m['avg_reward']:.3f}  crash rate {m['crash_rate']:.3f} "
            f"[{m['crash_ci_low']:.3f}, {m['crash_ci_high']:.3f}]"
        )
    if args.require_certified and metrics.get("rp_certified") is False:
        return EXIT_UNCERTIFIED
    return EXIT_OK


def _parse_velocity(text: str) -> tuple[int, int]:
    try:
        vr, vc = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"motion state must look like 'vr,vc', got {text!r}") from exc
    return vr, vc


def cmd_heatmap(args) -> int:
    if args.config is not None:
        config, _ = _load_config(args)
        if config.env.get("kind") != "jam":
            raise ConfigError("heatmaps need a jam environment")
        horizon = config.env.get("horizon", 8)
        stay = config.env.get("stay_prob", 0.5)
    else:
        horizon, stay = args.horizon, args.stay_prob
    model, table = relative_threat(horizon, stay, baseline=args.baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for text in args.velocity:
        v = _parse_velocity(text)
        matrix = heatmap(model, table, v, args.extent, args.t)
        path = out / f"heatmap_v{v[0]}_{v[1]}.csv"
        write_matrix(matrix, path)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    config, base = _load_config(args)
    new_env = json.loads(Path(args.env).read_text())
    bundle = make_env(config.env, base)
    if args.run_dir is not None:
        art = load_artifacts(args.run_dir, config, bundle)
    else:
        art = train(config, bundle)
    metrics = transfer_eval(config, art, new_env, args.out, Path(args.env).parent)
    for m in metrics:
        print(f"{m.method}: reward {m.avg_reward:.3f}  crash rate {m.crash_rate:.3f} [{m.crash_ci_low:.3f}, {m.crash_ci_high:.3f}]")
    if args.require_certified and "rp" in config.methods:
        doc = json.loads((Path(args.out) / "metrics.json").read_text())
        rp = next(m for m in doc["methods"] if m["method"] == "rp")
        if doc.get("rp_certified") is False or (rp["certified_fraction"] is not None and rp["certified_fraction"] < 1):
            return EXIT_UNCERTIFIED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reconplan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="first evaluation/training seed")
        p.add_argument("--n-seeds", type=int, dest="n_seeds")
        p.add_argument("--budget", type=float)
        p.add_argument("--require-certified", action="store_true", dest="require_certified")

    p = sub.add_parser("recon", help="baseline policy and threat tables")
    common(p)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("plan", help="secure set and planning-MDP solve from recon output")
    common(p)
    p.add_argument("--recon", required=True, help="directory written by 'recon'")
    p.add_argument("--strict-gate", action="store_true", dest="strict_gate")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="full experiment")
    common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--train-episodes", type=int, dest="train_episodes")
    p.add_argument("--methods", help="comma separated, e.g. rp,penalized-q:0,mpc:2")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("heatmap", help="threat heatmaps around the agent")
    common(p)
    p.add_argument("--velocity", action="append", default=None, help="agent velocity 'vr,vc' (repeatable)")
    p.add_argument("--extent", type=int, default=4)
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--stay-prob", type=float, default=0.5, dest="stay_prob")
    p.add_argument("--baseline", choices=HEATMAP_BASELINES, default="coast", help="assumed agent motion")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("transfer", help="evaluate trained methods on another environment")
    common(p)
    p.add_argument("--env", required=True, help="JSON env spec of the new environment")
    p.add_argument("--run-dir", dest="run_dir", help="reuse artifacts written by 'run'")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_transfer)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "velocity", None) is None and args.command == "heatmap":
        args.velocity = ["0,0", "0,1"]
    try:
        return args.func(args)
    except (ConfigError, InvalidCmdpError, LayoutError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
