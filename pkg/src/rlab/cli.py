"""Command-line entry point: ``rlab {gen-data,train,reproduce-didactic,audit}``.

Options may also come from a JSON file given with ``--config``; its keys are
the long option names with dashes replaced by underscores.  Flags given on the
command line override the file.  ``RLAB_SEED`` supplies the seed when neither
sets one.  Exit status: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from .algorithms import Checkpoint
from .dataset import (DEFAULT_EPS_B, VARIANTS, OfflineDataset, estimate_model,
                      generate_dataset, make_behavior_policy)
from .harness import (AWR_TAUS, CQL_ALPHAS, ExperimentConfig, canonical_method, load_problem,
                      mass_past_hallway, reference_policy, reproduce_didactic, results_table,
                      run_experiment, audit_heteroskedasticity)
from .mdp import build_gridworld
from .metrics import export_report

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# Per-command defaults; ``None`` entries are resolved later (seed fallbacks).
DEFAULTS: Dict[str, Dict[str, Any]] = {
    "gen-data": dict(layout="didactic-24x16", variant="didactic", n_traj=1000, horizon=400,
                     seed=None, gamma=0.99, out=None),
    "train": dict(data=None, layout="didactic-24x16", variant="didactic", n_traj=1000,
                  horizon=400, data_seed=7, gamma=0.99, eps_b=DEFAULT_EPS_B, method="reds",
                  alpha=None, tau=None, beta_ent=None, n_iters=None, mix_weight=None,
                  seeds=None, eval_episodes=100, eval_horizon=400, out=None),
    "reproduce-didactic": dict(data=None, layout="didactic-24x16", n_traj=1000, horizon=400,
                               data_seed=7, gamma=0.99, seeds=None, eval_episodes=100,
                               eval_horizon=400, awr_taus=list(AWR_TAUS),
                               cql_alphas=list(CQL_ALPHAS), jobs=1, out=None),
    "audit": dict(data=None, policy=None, estimator="exact_tabular", n_pairs=100000,
                  seed=None, eps_b=DEFAULT_EPS_B, out=None),
}


class UsageError(Exception):
    pass


def _env_seed() -> Optional[int]:
    raw = os.environ.get("RLAB_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"RLAB_SEED must be an integer, got {raw!r}")


def _help(cmd: str, key: str, text: str) -> str:
    return f"{text} (default: {DEFAULTS[cmd][key]})"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", help="JSON file of option values")

    g = sub.add_parser("gen-data", help="generate an offline dataset (JSON lines)")
    common(g)
    g.add_argument("--layout", default=S, help=_help("gen-data", "layout", "built-in layout or map file"))
    g.add_argument("--variant", default=S, choices=VARIANTS, help=_help("gen-data", "variant", "behavior variant"))
    g.add_argument("--n-traj", type=int, default=S, help=_help("gen-data", "n_traj", "trajectories"))
    g.add_argument("--horizon", type=int, default=S, help=_help("gen-data", "horizon", "steps per trajectory"))
    g.add_argument("--seed", type=int, default=S, help="master seed (default: $RLAB_SEED, else 7)")
    g.add_argument("--gamma", type=float, default=S, help=_help("gen-data", "gamma", "discount"))
    g.add_argument("--out", default=S, help="output dataset file (required)")

    t = sub.add_parser("train", help="train one method and evaluate it")
    common(t)
    t.add_argument("--data", default=S, help="dataset file (default: generate from layout flags)")
    t.add_argument("--layout", default=S, help=_help("train", "layout", "layout when generating"))
    t.add_argument("--variant", default=S, choices=VARIANTS, help=_help("train", "variant", "variant when generating"))
    t.add_argument("--n-traj", type=int, default=S, help=_help("train", "n_traj", "trajectories when generating"))
    t.add_argument("--horizon", type=int, default=S, help=_help("train", "horizon", "data horizon when generating"))
    t.add_argument("--data-seed", type=int, default=S, help=_help("train", "data_seed", "data seed when generating"))
    t.add_argument("--gamma", type=float, default=S, help=_help("train", "gamma", "discount"))
    t.add_argument("--eps-b", type=float, default=S, help=_help("train", "eps_b", "behavior-policy floor"))
    t.add_argument("--method", default=S, choices=("bc", "awr", "cql", "reds", "cql_grad", "reds_grad"),
                   help=_help("train", "method", "trainer"))
    t.add_argument("--alpha", type=float, default=S, help="conservatism weight (default: cql 1.0, reds 0.01)")
    t.add_argument("--tau", type=float, default=S, help="AWR / rho temperature (default: 1.0)")
    t.add_argument("--beta-ent", type=float, default=S, help="policy temperature (default: 0.001)")
    t.add_argument("--n-iters", type=int, default=S, help="maximum iterations (default: 500)")
    t.add_argument("--mix-weight", type=float, default=S, help="weight on pi in the ReDS mixture (default: 0.5)")
    t.add_argument("--seeds", type=int, nargs="+", default=S, help="evaluation seeds (default: $RLAB_SEED, else 0 1 2)")
    t.add_argument("--eval-episodes", type=int, default=S, help=_help("train", "eval_episodes", "episodes per seed"))
    t.add_argument("--eval-horizon", type=int, default=S, help=_help("train", "eval_horizon", "evaluation horizon"))
    t.add_argument("--out", default=S, help="output directory (required)")

    r = sub.add_parser("reproduce-didactic", help="AWR sweep, CQL sweep and ReDS on the didactic maze")
    common(r)
    r.add_argument("--data", default=S, help="dataset file (default: generate the didactic dataset)")
    r.add_argument("--layout", default=S, help=_help("reproduce-didactic", "layout", "layout"))
    r.add_argument("--n-traj", type=int, default=S, help=_help("reproduce-didactic", "n_traj", "trajectories"))
    r.add_argument("--horizon", type=int, default=S, help=_help("reproduce-didactic", "horizon", "data horizon"))
    r.add_argument("--data-seed", type=int, default=S, help=_help("reproduce-didactic", "data_seed", "data seed"))
    r.add_argument("--gamma", type=float, default=S, help=_help("reproduce-didactic", "gamma", "discount"))
    r.add_argument("--seeds", type=int, nargs="+", default=S, help="evaluation seeds (default: $RLAB_SEED, else 0 1 2)")
    r.add_argument("--eval-episodes", type=int, default=S, help=_help("reproduce-didactic", "eval_episodes", "episodes per seed"))
    r.add_argument("--eval-horizon", type=int, default=S, help=_help("reproduce-didactic", "eval_horizon", "evaluation horizon"))
    r.add_argument("--awr-taus", type=float, nargs="+", default=S, help=_help("reproduce-didactic", "awr_taus", "AWR temperatures"))
    r.add_argument("--cql-alphas", type=float, nargs="+", default=S, help=_help("reproduce-didactic", "cql_alphas", "CQL alphas"))
    r.add_argument("--jobs", type=int, default=S, help=_help("reproduce-didactic", "jobs", "parallel sweep cells"))
    r.add_argument("--out", default=S, help="output directory (required)")

    a = sub.add_parser("audit", help="per-state divergence and differential concentrability")
    common(a)
    a.add_argument("--data", default=S, help="dataset file (required)")
    a.add_argument("--policy", default=S,
                   help="checkpoint JSON, 'behavior' or 'empirical' (default: CQL policy trained on homogeneous data)")
    a.add_argument("--estimator", default=S, choices=("exact_tabular", "sampled_pairs"),
                   help=_help("audit", "estimator", "C_diff estimator"))
    a.add_argument("--n-pairs", type=int, default=S, help=_help("audit", "n_pairs", "pairs for sampled_pairs"))
    a.add_argument("--seed", type=int, default=S, help="sampling seed (default: $RLAB_SEED, else 0)")
    a.add_argument("--eps-b", type=float, default=S, help=_help("audit", "eps_b", "behavior-policy floor"))
    a.add_argument("--out", default=S, help="output directory (required)")
    return p


def resolve_options(command: str, flags: Dict[str, Any]) -> Dict[str, Any]:
    """Merge defaults, the optional JSON config file, then explicit flags."""
    opts = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        opts.update(doc)
    opts.update(flags)
    if opts.get("out") is None:
        raise UsageError("--out is required")
    for key in ("n_traj", "horizon", "eval_episodes", "eval_horizon", "jobs", "n_pairs", "n_iters"):
        if opts.get(key) is not None and int(opts[key]) < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 1")
    return opts


def _seed_or(opts: Dict[str, Any], key: str, fallback: int) -> int:
    if opts.get(key) is not None:
        return int(opts[key])
    env = _env_seed()
    return fallback if env is None else env


def _seeds(opts: Dict[str, Any]) -> tuple:
    if opts.get("seeds"):
        return tuple(int(s) for s in opts["seeds"])
    env = _env_seed()
    return (0, 1, 2) if env is None else (env,)


def cmd_gen_data(opts: Dict[str, Any]) -> int:
    seed = _seed_or(opts, "seed", 7)
    _, _, data = generate_dataset(layout=opts["layout"], variant=opts["variant"],
                                  n_traj=int(opts["n_traj"]), horizon=int(opts["horizon"]),
                                  seed=seed, gamma=float(opts["gamma"]))
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save(out)
    print(f"wrote {len(data)} transitions to {out}")
    return EXIT_OK


def _experiment(opts: Dict[str, Any], method: str, params: Dict[str, float]) -> ExperimentConfig:
    return ExperimentConfig(method=method, params=params, layout=opts["layout"],
                            variant=opts.get("variant", "didactic"), n_traj=int(opts["n_traj"]),
                            data_horizon=int(opts["horizon"]), data_seed=int(opts["data_seed"]),
                            gamma=float(opts["gamma"]),
                            eps_b=float(opts.get("eps_b", DEFAULT_EPS_B)),
                            dataset_path=opts.get("data"), seeds=_seeds(opts),
                            eval_episodes=int(opts["eval_episodes"]),
                            eval_horizon=int(opts["eval_horizon"]))


def cmd_train(opts: Dict[str, Any]) -> int:
    method = canonical_method(opts["method"])
    params = {k: opts[k] for k in ("alpha", "tau", "beta_ent", "n_iters", "mix_weight")
              if opts.get(k) is not None}
    try:
        cfg = _experiment(opts, method, params)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e))
    result = run_experiment(cfg, keep_checkpoints=True)
    out = Path(opts["out"])
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    for ck in result.checkpoints:
        ck.save(out / "checkpoints" / f"iter_{ck.iteration:05d}.json")
    (out / "results.csv").write_text(results_table([result]))
    result.heatmap.write_pgm(out / "heatmap.pgm")
    mdp, _, _ = load_problem(cfg)
    summary = {"method": method, "params": dict(cfg.params), "seeds": list(cfg.seeds),
               "successes": list(result.successes), "mean_success": result.mean,
               "std_success": result.std, "selected_iters": list(result.selected_iters),
               "divergence": result.divergence.summary(),
               "C_diff": result.concentrability.value}
    if mdp.grid is not None and mdp.grid.name == "didactic-24x16":
        summary["mass_past_second_hallway"] = mass_past_hallway(result.heatmap, mdp.grid)
    (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{cfg.label}: mean success {result.mean:.3f} over seeds {list(cfg.seeds)}")
    return EXIT_OK


def cmd_reproduce(opts: Dict[str, Any]) -> int:
    base = _experiment(opts, "reds", {})
    results = reproduce_didactic(opts["out"], base, awr_taus=[float(x) for x in opts["awr_taus"]],
                                 cql_alphas=[float(x) for x in opts["cql_alphas"]],
                                 jobs=int(opts["jobs"]))
    for r in results:
        print(f"{r.config.label:>16}: mean success {r.mean:.3f}")
    return EXIT_OK


def cmd_audit(opts: Dict[str, Any]) -> int:
    path = Path(opts["data"]) if opts.get("data") else None
    if path is None:
        raise UsageError("--data is required")
    data = OfflineDataset.load(path)
    if data.meta is None:
        raise ValueError(f"{path}: dataset header lacks metadata")
    if opts.get("policy") in ("behavior", "empirical"):
        mdp = build_gridworld(data.meta.grid(), data.meta.gamma)
        if opts["policy"] == "behavior":
            policy = make_behavior_policy(mdp, data.meta.behavior)
        else:
            policy = estimate_model(data, mdp.n_states, mdp.n_actions,
                                    float(opts["eps_b"])).pi_beta_hat
    elif opts.get("policy"):
        policy = Checkpoint.load(opts["policy"]).policy
    else:
        m = data.meta
        policy = reference_policy(layout=m.layout, n_traj=m.n_traj, horizon=m.horizon,
                                  seed=m.seed, gamma=m.gamma, eps_b=float(opts["eps_b"]))
    report, conc = audit_heteroskedasticity(data, policy, eps_b=float(opts["eps_b"]),
                                            estimator=opts["estimator"],
                                            n_pairs=int(opts["n_pairs"]),
                                            seed=_seed_or(opts, "seed", 0))
    export_report(report, conc, opts["out"], stem="audit")
    print(f"std_D {report.std:.6g}  max_D {report.max:.6g}  C_diff {conc.value:.6g}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train,
            "reproduce-didactic": cmd_reproduce, "audit": cmd_audit}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    try:
        opts = resolve_options(ns.command, flags)
        return COMMANDS[ns.command](opts)
    except UsageError as e:
        print(f"rlab {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"rlab {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
