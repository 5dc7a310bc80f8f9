"""Experiment runner: train or solve each method, evaluate over seeds, write CSV/JSON.

Outputs of :func:`run` (all deterministic given the config, except
``timing.json``)::

    config.json       the resolved configuration
    metrics.json      per method (and obstacle count) aggregates
    table.csv         the same aggregates as one flat table
    timing.json       wall-clock training and per-decision times
    <method>/episodes.csv
    <method>/policy.json, q_tables.npz, recon.npz   (when applicable)
    rp/certificate.json, rp/secure_set.csv, rp/threat.csv  (tabular envs)
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.stats import binomtest

from .baselines import MpcController, PolicyController, QController, QTable, train_q
from .cmdp import MODES, Cmdp, Mode, Policy, SafetySpec, episode_rng, exact_return
from .composed import JamMpcController, JamRecon, JamRpController, jam_recon
from .envs import circuit as circuit_mod
from .envs.base import CmdpEnv
from .envs.circuit import CircuitConfig, grid_circuit
from .envs.gather import GatherConfig, grid_gather
from .envs.jam import JamConfig, JamWorld, RelativeModel, relative_model, velocity_index
from .envs.layout import config_from_dict
from .envs.random import random_cmdp
from .envs.traps import deep_trap
from .planner import RpResult, rp_solve
from .secure import certify_bound
from .threat import ThreatTable, min_threat_policy, threat_for_mode

ENV_KINDS = ("circuit", "gather", "jam", "random", "trap")
DEFAULT_MODE = {
    "circuit": "accident-probability",
    "jam": "accident-probability",
    "gather": "discounted-danger",
    "random": "discounted-danger",
    "trap": "discounted-danger",
}
NAMED_LAYOUTS = {
    "ring12": circuit_mod.RING_12,
    "ring_wide": circuit_mod.RING_WIDE,
    "ring_wide_narrowed": circuit_mod.RING_WIDE_NARROWED,
    "ring_long": circuit_mod.RING_LONG,
    "ring_long_narrowed": circuit_mod.RING_LONG_NARROWED,
}


class ConfigError(ValueError):
    pass


# -- environments ------------------------------------------------------------


@dataclass(eq=False)
class EnvBundle:
    kind: str
    spec: dict
    env: Any  # EpisodicEnv
    cmdp: Cmdp | None = None
    world: Any = None
    features: np.ndarray | None = None
    n_features: int | None = None


def _resolve_layout(spec: dict, base_dir: Path | None) -> dict:
    spec = dict(spec)
    if "layout_file" in spec:
        path = Path(spec.pop("layout_file"))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        spec["layout"] = path.read_text()
    if spec.get("layout") in NAMED_LAYOUTS:
        spec["layout"] = NAMED_LAYOUTS[spec["layout"]]
    return spec


def make_env(spec: dict, base_dir: Path | None = None, n_obstacles: int | None = None) -> EnvBundle:
    """Build an environment from a JSON-style spec ``{"kind": ..., **config}``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in ENV_KINDS:
        raise ConfigError(f"env kind must be one of {ENV_KINDS}, got {kind!r}")
    spec = _resolve_layout(spec, base_dir)
    full = {"kind": kind, **spec}
    if kind == "circuit":
        world = grid_circuit(config_from_dict(CircuitConfig, spec))
        return EnvBundle(kind, full, CmdpEnv(world.cmdp, world.features, world.n_features), world.cmdp, world, world.features, world.n_features)
    if kind == "gather":
        world = grid_gather(config_from_dict(GatherConfig, spec))
        return EnvBundle(kind, full, CmdpEnv(world.cmdp), world.cmdp, world)
    if kind == "jam":
        cfg = config_from_dict(JamConfig, spec)
        if n_obstacles is not None:
            cfg = replace(cfg, n_obstacles=n_obstacles)
        world = JamWorld(cfg)
        return EnvBundle(kind, full, world.env(), None, world)
    if kind == "random":
        cmdp = random_cmdp(**spec)
        return EnvBundle(kind, full, CmdpEnv(cmdp), cmdp)
    cmdp = deep_trap(**spec)
    return EnvBundle(kind, full, CmdpEnv(cmdp), cmdp)


# -- configuration -------------------------------------------------------------


def parse_method(name: str) -> tuple[str, float | int | None]:
    kind, _, arg = name.partition(":")
    if kind == "rp" and not arg:
        return "rp", None
    try:
        if kind == "penalized-q":
            lam = float(arg)
            if lam < 0:
                raise ValueError
            return kind, lam
        if kind == "mpc":
            k = int(arg)
            if k < 1:
                raise ValueError
            return kind, k
    except ValueError:
        pass
    raise ConfigError(f"unknown method {name!r}; use rp, penalized-q:<lambda>=0..., mpc:<k>=1...")


@dataclass(frozen=True)
class ExperimentConfig:
    env: dict
    budget: float
    methods: tuple[str, ...] = ("rp", "penalized-q:0")
    episodes: int = 100
    seeds: tuple[int, ...] = tuple(range(10))
    train_episodes: int = 3000
    epsilon: float = 0.1
    mode: str | None = None
    eval_obstacles: tuple[int, ...] = ()
    strict_gate: bool = False
    lambda_ramp: int = 0  # episodes over which the penalty ramps up linearly

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "eval_obstacles", tuple(int(n) for n in self.eval_obstacles))
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            parse_method(m)
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.train_episodes < 0:
            raise ConfigError("train_episodes must be >= 0")
        if self.mode is not None and self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.budget < 0:
            raise ConfigError("budget must be non-negative")
        if self.env.get("kind") not in ENV_KINDS:
            raise ConfigError(f"env kind must be one of {ENV_KINDS}")

    @property
    def resolved_mode(self) -> Mode:
        return self.mode or DEFAULT_MODE[self.env["kind"]]

    @property
    def safety(self) -> SafetySpec:
        return SafetySpec(self.budget, self.resolved_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "env" not in doc or "budget" not in doc:
            raise ConfigError("config needs 'env' and 'budget'")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


# -- training --------------------------------------------------------------------


@dataclass(eq=False)
class Artifacts:
    """Everything learned or solved before evaluation."""

    rp: RpResult | None = None
    jam: JamRecon | None = None
    q_tables: dict[tuple[float, int], QTable] = field(default_factory=dict)
    train_seconds: dict[str, float] = field(default_factory=dict)


def _penalty(lam: float, ramp: int):
    if ramp <= 0:
        return lam
    return lambda ep: lam * min(1.0, (ep + 1) / ramp)


def train(config: ExperimentConfig, bundle: EnvBundle) -> Artifacts:
    art = Artifacts()
    for name in config.methods:
        kind, arg = parse_method(name)
        start = time.perf_counter()
        if kind == "rp":
            if bundle.kind == "jam":
                art.jam = jam_recon(bundle.world)
            else:
                art.rp = rp_solve(bundle.cmdp, config.safety, strict_gate=config.strict_gate)
        elif kind == "penalized-q":
            for seed in config.seeds:
                art.q_tables[(arg, seed)] = train_q(
                    bundle.env, _penalty(arg, config.lambda_ramp), config.train_episodes, seed, config.epsilon
                )
        art.train_seconds[name] = time.perf_counter() - start
    return art


# -- evaluation --------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeRecord:
    seed: int
    episode: int
    ret: float
    crashed: bool
    accidents: int
    certified: bool | None


@dataclass(eq=False)
class MethodResult:
    method: str
    n_obstacles: int | None
    episodes: list[EpisodeRecord]
    decision_seconds: list[float]


def controller_for(name: str, config: ExperimentConfig, bundle: EnvBundle, art: Artifacts, seed: int):
    kind, arg = parse_method(name)
    if kind == "rp":
        if bundle.kind == "jam":
            return JamRpController(art.jam, config.budget, bundle.world)
        return PolicyController(art.rp.policy)
    if kind == "penalized-q":
        return QController(art.q_tables[(arg, seed)], bundle.env.observe)
    if bundle.kind == "jam":
        return JamMpcController(bundle.world, arg)
    return MpcController(bundle.cmdp, arg, config.budget, config.resolved_mode)


def rollout(env, controller, seed: int, episode: int, clock: list[float] | None = None) -> EpisodeRecord:
    """One episode with the shared per-episode generator (common random numbers)."""
    rng = episode_rng(seed, episode)
    state = env.reset(rng)
    certified = None
    if hasattr(controller, "start_episode"):
        controller.start_episode(state)
        certified = controller.certified_log[-1]
    total, accidents = 0.0, 0
    for t in range(env.horizon):
        tic = time.perf_counter()
        a = controller.act(t, state, rng)
        if clock is not None:
            clock.append(time.perf_counter() - tic)
        state, r, _, accident = env.step(state, a, t, rng)
        total += env.gamma ** (t + 1) * r
        accidents += int(accident)
    return EpisodeRecord(seed, episode, total, accidents > 0, accidents, certified)


def evaluate(config: ExperimentConfig, bundle: EnvBundle, art: Artifacts, n_obstacles: int | None = None) -> list[MethodResult]:
    results = []
    for name in config.methods:
        records, clock = [], []
        for seed in config.seeds:
            ctrl = controller_for(name, config, bundle, art, seed)
            for ep in range(config.episodes):
                records.append(rollout(bundle.env, ctrl, seed, ep, clock))
        if name == "rp" and art.rp is not None:
            records = [replace(r, certified=art.rp.certified) for r in records]
        results.append(MethodResult(name, n_obstacles, records, clock))
    return results


# -- metrics -------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    method: str
    n_obstacles: int | None
    episodes: int
    avg_reward: float
    reward_std_over_seeds: float
    crash_rate: float
    crash_ci_low: float
    crash_ci_high: float
    crashes: int
    certified_fraction: float | None
    per_seed: tuple[dict, ...]


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(successes, trials).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def summarize(method: str, n_obstacles: int | None, records: Sequence[EpisodeRecord]) -> Metrics:
    returns = np.array([r.ret for r in records])
    crashed = np.array([r.crashed for r in records])
    seeds = sorted({r.seed for r in records})
    per_seed = []
    for s in seeds:
        mask = np.array([r.seed == s for r in records])
        per_seed.append({"seed": s, "avg_reward": float(returns[mask].mean()), "crash_rate": float(crashed[mask].mean())})
    k, n = int(crashed.sum()), len(records)
    low, high = wilson_interval(k, n)
    flags = [r.certified for r in records if r.certified is not None]
    return Metrics(
        method=method,
        n_obstacles=n_obstacles,
        episodes=n,
        avg_reward=float(returns.mean()),
        reward_std_over_seeds=float(np.std([p["avg_reward"] for p in per_seed])),
        crash_rate=k / n,
        crash_ci_low=low,
        crash_ci_high=high,
        crashes=k,
        certified_fraction=float(np.mean(flags)) if flags else None,
        per_seed=tuple(per_seed),
    )


TABLE_FIELDS = ("method", "n_obstacles", "episodes", "avg_reward", "crash_rate", "crash_ci_low", "crash_ci_high")


def write_table(metrics: Sequence[Metrics], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_FIELDS)
        for m in metrics:
            writer.writerow(["" if getattr(m, f) is None else getattr(m, f) for f in TABLE_FIELDS])


def write_episodes(records: Sequence[EpisodeRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "episode", "return", "crashed", "accidents", "certified"])
        for r in records:
            cert = "" if r.certified is None else int(r.certified)
            writer.writerow([r.seed, r.episode, repr(r.ret), int(r.crashed), r.accidents, cert])


def read_episodes(path: Path) -> list[EpisodeRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cert = None if row["certified"] == "" else bool(int(row["certified"]))
            out.append(
                EpisodeRecord(int(row["seed"]), int(row["episode"]), float(row["return"]), bool(int(row["crashed"])), int(row["accidents"]), cert)
            )
    return out


# -- artifacts -------------------------------------------------------------------------


def _method_dir(out: Path, name: str, n_obstacles: int | None = None) -> Path:
    d = out / name.replace(":", "_")
    if n_obstacles is not None:
        d = d / f"n{n_obstacles}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def certificate_document(cmdp: Cmdp, res: RpResult) -> dict:
    doc: dict[str, Any] = {
        "certified": res.certified,
        "budget": res.budget,
        "x_star": res.x_star,
        "mode": res.threat.mode,
        "diagnostic": res.diagnostic,
        "initial_states": [],
    }
    if not res.certified:
        return doc
    exact = threat_for_mode(cmdp, res.policy, res.threat.mode)
    for s0 in np.flatnonzero(cmdp.initial > 0):
        cert = certify_bound(cmdp, res.eta, res.policy, res.secure, res.threat, int(s0))
        doc["initial_states"].append(
            {
                "s0": int(s0),
                "bound_lhs": cert.lhs,
                "bound_rhs": cert.rhs,
                "bound_holds": cert.holds,
                "exact_threat": float(res.policy.probs[0, s0] @ exact.values[0, s0]),
            }
        )
    doc["expected_return"] = exact_return(cmdp, res.policy)
    return doc


def write_artifacts(out: Path, config: ExperimentConfig, bundle: EnvBundle, art: Artifacts) -> None:
    for name in config.methods:
        kind, arg = parse_method(name)
        d = _method_dir(out, name)
        if kind == "rp" and art.rp is not None:
            art.rp.save(d / "policy.json")
            (d / "certificate.json").write_text(json.dumps(certificate_document(bundle.cmdp, art.rp), indent=2, sort_keys=True))
            if art.rp.secure is not None:
                art.rp.secure.to_csv(d / "secure_set.csv")
            art.rp.threat.to_csv(d / "threat.csv")
        elif kind == "rp" and art.jam is not None:
            np.savez_compressed(d / "recon.npz", eta=art.jam.eta.actions(), moving=art.jam.moving, static=art.jam.static)
        elif kind == "penalized-q":
            tables = {f"seed{seed}": art.q_tables[(arg, seed)].values for seed in config.seeds}
            np.savez_compressed(d / "q_tables.npz", **tables)
            if bundle.cmdp is not None:
                obs = np.array([bundle.env.observe(s) for s in range(bundle.cmdp.n_states)])
                policies = {
                    f"seed{seed}": art.q_tables[(arg, seed)].greedy_actions()[:, obs].tolist() for seed in config.seeds
                }
                (d / "policy.json").write_text(json.dumps(policies))


def load_artifacts(run_dir: str | Path, config: ExperimentConfig, bundle: EnvBundle) -> Artifacts:
    """Rebuild :class:`Artifacts` from a results directory written by :func:`run`."""
    run_dir = Path(run_dir)
    art = Artifacts()
    for name in config.methods:
        kind, arg = parse_method(name)
        d = run_dir / name.replace(":", "_")
        if kind == "penalized-q":
            with np.load(d / "q_tables.npz") as data:
                for seed in config.seeds:
                    values = data[f"seed{seed}"]
                    art.q_tables[(arg, seed)] = QTable(values, np.zeros(values.shape, dtype=np.int64))
        elif kind == "rp" and bundle.kind == "jam":
            with np.load(d / "recon.npz") as data:
                eta = Policy.from_actions(data["eta"], data["moving"].shape[-1])
                art.jam = JamRecon(bundle.world, eta, data["moving"], data["static"])
    return art


# -- orchestration ------------------------------------------------------------------------


def _metrics_doc(metrics: Sequence[Metrics], extra: dict) -> str:
    doc = {"methods": [asdict(m) for m in metrics], **extra}
    return json.dumps(doc, indent=2, sort_keys=True)


def run(config: ExperimentConfig, out_dir: str | Path, base_dir: Path | None = None) -> Path:
    """Train/solve every method, evaluate over seeds and write all outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = make_env(config.env, base_dir)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    art = train(config, bundle)
    write_artifacts(out, config, bundle, art)

    sweep: list[int | None] = [None]
    if bundle.kind == "jam":
        sweep = list(config.eval_obstacles) or [bundle.world.config.n_obstacles]
    all_metrics, timing = [], {"train_seconds": art.train_seconds, "median_decision_seconds": {}}
    for n in sweep:
        eval_bundle = bundle if n is None else make_env(config.env, base_dir, n_obstacles=n)
        for res in evaluate(config, eval_bundle, art, n):
            write_episodes(res.episodes, _method_dir(out, res.method, n) / "episodes.csv")
            all_metrics.append(summarize(res.method, n, res.episodes))
            key = res.method if n is None else f"{res.method}@{n}"
            timing["median_decision_seconds"][key] = float(np.median(res.decision_seconds)) if res.decision_seconds else None
    extra = {"budget": config.budget, "mode": config.resolved_mode}
    if art.rp is not None:
        extra.update(rp_certified=art.rp.certified, rp_x_star=art.rp.x_star)
    (out / "metrics.json").write_text(_metrics_doc(all_metrics, extra))
    write_table(all_metrics, out / "table.csv")
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
    return out


def transfer_eval(
    config: ExperimentConfig,
    art: Artifacts,
    new_env: dict,
    out_dir: str | Path | None = None,
    base_dir: Path | None = None,
) -> list[Metrics]:
    """Evaluate trained methods on a different environment.

    RP re-plans on the new environment: tabular worlds are re-solved from
    scratch (their threat tables cover the whole world), Jam reuses the
    per-obstacle tables.  Penalized-Q tables are frozen and read through the
    new environment's observation map, which must have the same size.
    """
    bundle = make_env(new_env, base_dir)
    n_obs = getattr(bundle.env, "n_observations", None)
    new_art = Artifacts(q_tables=art.q_tables)
    for (lam, seed), table in art.q_tables.items():
        if table.values.shape[1:] != (n_obs, bundle.env.n_actions) or table.values.shape[0] != bundle.env.horizon:
            raise ConfigError(
                f"frozen Q table of shape {table.values.shape} does not fit the new environment "
                f"(T={bundle.env.horizon}, observations={n_obs}, actions={bundle.env.n_actions})"
            )
    if "rp" in config.methods:
        if bundle.kind == "jam":
            if art.jam is None or art.jam.moving.shape[1:3] != (bundle.world.n_agent, bundle.world.n_obs_states):
                raise ConfigError("Jam threat tables do not match the new environment's subsystem")
            new_art.jam = art.jam
        else:
            new_art.rp = rp_solve(bundle.cmdp, config.safety, strict_gate=config.strict_gate)
    n = bundle.world.config.n_obstacles if bundle.kind == "jam" else None
    metrics = []
    for res in evaluate(config, bundle, new_art, n):
        if out_dir is not None:
            write_episodes(res.episodes, _method_dir(Path(out_dir), res.method, n) / "episodes.csv")
        metrics.append(summarize(res.method, n, res.episodes))
    if out_dir is not None:
        extra = {"budget": config.budget, "mode": config.resolved_mode, "env": bundle.spec}
        if new_art.rp is not None:
            extra.update(rp_certified=new_art.rp.certified, rp_x_star=new_art.rp.x_star)
        (Path(out_dir) / "metrics.json").write_text(_metrics_doc(metrics, extra))
        write_table(metrics, Path(out_dir) / "table.csv")
    return metrics


# -- heatmaps ---------------------------------------------------------------------------------


def heatmap(model: RelativeModel, table: ThreatTable, velocity: tuple[int, int], extent: int, t: int = 0) -> np.ndarray:
    """Baseline threat over obstacle offsets ``(dr, dc)`` in ``[-extent, extent]^2``.

    Rows run over ``dr`` (obstacle below the agent is positive) and columns
    over ``dc``.  Values are the state threat of the baseline at time ``t``.
    """
    if tuple(velocity) not in {(vr, vc) for vr in (-1, 0, 1) for vc in (-1, 0, 1)}:
        raise ValueError(f"motion state {velocity} is outside the model")
    if not 0 <= extent <= model.radius:
        raise ValueError(f"extent must lie in [0, {model.radius}]")
    if table.state_values is None:
        raise ValueError("threat table carries no state values")
    out = np.empty((2 * extent + 1, 2 * extent + 1))
    for i, dr in enumerate(range(-extent, extent + 1)):
        for j, dc in enumerate(range(-extent, extent + 1)):
            out[i, j] = table.state_values[t, model.state_index(velocity, (dr, dc))]
    return out


HEATMAP_BASELINES = ("coast", "min-threat")


def relative_threat(horizon: int, stay_prob: float, radius: int | None = None, baseline: str = "coast"):
    """Relative-coordinate model and the threat table of an assumed agent motion.

    ``coast`` holds the agent's velocity (zero acceleration at every step), so
    each map shows the risk of continuing the current motion.  ``min-threat``
    uses the threat-minimizing baseline, which on an open plane evades a
    single obstacle almost everywhere.
    """
    model = relative_model(horizon, stay_prob, radius)
    if baseline == "coast":
        T, S, A = model.cmdp.horizon, model.cmdp.n_states, model.cmdp.n_actions
        hold = np.full((T, S), velocity_index(0, 0), dtype=int)
        table = threat_for_mode(model.cmdp, Policy.from_actions(hold, A), "accident-probability")
    elif baseline == "min-threat":
        _, table = min_threat_policy(model.cmdp, "accident-probability")
    else:
        raise ValueError(f"baseline must be one of {HEATMAP_BASELINES}")
    return model, table


def write_matrix(matrix: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in matrix])


__all__ = [
    "Artifacts",
    "ConfigError",
    "EnvBundle",
    "EpisodeRecord",
    "ExperimentConfig",
    "Metrics",
    "evaluate",
    "heatmap",
    "load_artifacts",
    "make_env",
    "parse_method",
    "relative_threat",
    "rollout",
    "run",
    "summarize",
    "train",
    "transfer_eval",
    "wilson_interval",
    "write_matrix",
]
