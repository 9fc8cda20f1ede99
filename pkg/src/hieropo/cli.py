"""Command-line entry point: ``hieropo <subcommand> [options]``.

Configuration is a flat ``key = value`` text file (``--config``); any key can
be overridden with ``--set key=value``, and ``--seed``/``--threads`` override
their keys directly. ``hieropo show-config`` prints every default.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import ConfigurationError
from .bounds import (
    BoundInputs,
    check_assumptions,
    estimate_gamma,
    flatopo_bound,
    multi_task_bound,
)
from .data import DatasetFormatError, HierModelConfig, read_dataset, write_dataset
from .envsim import (
    ENV_STREAM,
    EVAL_STREAM,
    LOG_STREAM,
    Environment,
    SyntheticEnvConfig,
    aggregate_sweep,
    evaluate_on_slates,
    generate_log,
    make_rng,
    run_sweep,
    sample_environment,
)
from .policy import LEARNERS, LearnedPolicy, make_learner
from .posterior import compute_task_statistics
from .recsys import PipelineError, build_recsys_environment, prepare, read_ratings


@dataclass(frozen=True)
class ExperimentConfig:
    d: int = 4
    K: int = 5
    m: int = 10
    n: int = 500
    sigma_q: float = 0.5
    sigma_0: float = 0.5
    sigma: float = 0.5
    seed: int = 0
    n_eval: int = 10_000
    learners: tuple[str, ...] = ("oracle", "hier", "flat")
    alpha: float = 0.1
    delta: float = 0.1
    n_runs: int = 30
    sweep_axis: str = "n"
    sweep_values: tuple[int, ...] = (100, 250, 500, 1000)
    threads: int = 0
    # recommender pipeline
    rank: int = 10
    gmm_k: int = 7
    als_reg: float = 0.1
    als_sweeps: int = 20
    recsys_K: int = 10
    recsys_m: int = 100

    def __post_init__(self):
        bad = [t for t in self.learners if t not in LEARNERS[:3]]
        if bad:
            raise ConfigurationError(f"unknown learners {bad}; choose from hier, flat, oracle")
        vals = list(self.sweep_values)
        if any(v <= 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigurationError("sweep_values must be strictly increasing positive integers")
        if self.sweep_axis not in ("n", "m"):
            raise ConfigurationError("sweep_axis must be n or m")

    def env_config(self) -> SyntheticEnvConfig:
        return SyntheticEnvConfig(self.d, self.K, self.m, self.n, self.sigma_q, self.sigma_0,
                                  self.sigma, self.seed, self.n_eval)

    @property
    def n_threads(self) -> int:
        return self.threads or os.cpu_count() or 1


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        if "tuple[int" in str(typ):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if "tuple[str" in str(typ):
            return tuple(v for v in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"config key {name}: cannot parse {raw!r}") from exc


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, types[key], val)
    return replace(base or ExperimentConfig(), **updates)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, schema: str, header: list[str], rows) -> None:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _load_model(args, cfg: ExperimentConfig, d: int) -> HierModelConfig:
    if getattr(args, "model", None):
        obj = json.loads(Path(args.model).read_text())
        return HierModelConfig.from_dict(obj.get("model", obj))
    return HierModelConfig.isotropic(d, cfg.sigma_q, cfg.sigma_0, cfg.sigma)


# ------------------------------------------------------------ subcommands


def cmd_generate(args, cfg: ExperimentConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env_cfg = cfg.env_config()
    env = sample_environment(env_cfg, make_rng(cfg.seed, 0, ENV_STREAM))
    log = generate_log(env, cfg.n, make_rng(cfg.seed, 0, LOG_STREAM))
    write_dataset(log, out / "dataset.jsonl")
    env.save(out / "environment.json")
    print(f"wrote {out / 'dataset.jsonl'} ({len(log)} records) and {out / 'environment.json'}")


def cmd_fit(args, cfg: ExperimentConfig) -> None:
    dataset = read_dataset(args.dataset)
    mu_star = None
    if args.learner == "oracle":
        if not args.env:
            raise ConfigurationError("the oracle learner needs the ground-truth mu_star: pass --env ENV.json")
        mu_star = Environment.load(args.env).mu_star
    model = _load_model(args, cfg, dataset.d)
    est = make_learner(args.learner, model, cfg.alpha, mu_star).fit(dataset)
    est.policy_.save(args.out)
    print(f"wrote {args.learner} policy for m={dataset.m}, d={dataset.d} to {args.out}")


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    policy = LearnedPolicy.load(args.policy)
    env = Environment.load(args.env)
    if policy.d != env.d:
        raise ConfigurationError(f"policy has d={policy.d} but environment has d={env.d}")
    if policy.m != env.m:
        raise ConfigurationError(f"policy has m={policy.m} but environment has m={env.m}")
    rows = []
    subs, ses = [], []
    for s in range(env.m):
        slates = env.sampler.sample(make_rng(cfg.seed, 0, EVAL_STREAM, s), cfg.n_eval)
        r = evaluate_on_slates(env, policy, s, slates)
        subs.append(r.suboptimality)
        ses.append(r.mc_std_error)
        rows.append([policy.learner, s + 1, r.value_opt, r.value_learned, r.suboptimality, r.mc_std_error, r.n_eval])
    agg_se = float(np.sqrt(np.sum(np.square(ses))) / len(ses))
    rows.append([policy.learner, "all", "", "", float(np.mean(subs)), agg_se, cfg.n_eval])
    _write_csv(Path(args.out), "hieropo.evaluate/1",
               ["learner", "task_id", "value_opt", "value_learned", "suboptimality", "se", "n_eval"], rows)
    print(f"mean suboptimality {np.mean(subs):.6g} +- {agg_se:.2g} over {env.m} tasks")


def cmd_sweep(args, cfg: ExperimentConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(cfg.env_config(), cfg.sweep_axis, cfg.sweep_values, cfg.learners,
                     cfg.n_runs, cfg.alpha, cfg.n_threads)
    _write_csv(out / "sweep.csv", "hieropo.sweep/1",
               ["axis", "value", "learner", "n", "m", "sigma_q", "run_id", "mean_suboptimality", "se"],
               [[r.axis, r.value, r.learner, r.n, r.m, r.sigma_q, r.run_id, r.mean_suboptimality, r.se]
                for r in rows])
    agg = aggregate_sweep(rows)
    _write_csv(out / "sweep_aggregate.csv", "hieropo.sweep_aggregate/1",
               ["axis", "value", "learner", "mean_suboptimality", "se", "n_runs"],
               [[cfg.sweep_axis, a["value"], a["learner"], a["mean"], a["se"], a["n_runs"]] for a in agg])
    print(f"wrote {len(rows)} run rows and {len(agg)} aggregate rows to {out}")


def cmd_bounds(args, cfg: ExperimentConfig) -> None:
    dataset = read_dataset(args.dataset)
    env = Environment.load(args.env)
    model = _load_model(args, cfg, dataset.d)
    stats = compute_task_statistics(dataset, model)
    est_gamma, per_task, gstars = estimate_gamma(stats, env, model.sigma, cfg.n_eval, cfg.seed)
    gamma = 0.0 if args.gamma_zero else est_gamma
    assumptions = check_assumptions(dataset, model)
    assumptions.gamma, assumptions.gamma_per_task = est_gamma, per_task
    inputs = BoundInputs.from_model(model, cfg.delta, gamma, [s.n_s for s in stats], gstars)
    variants = ["general"] + (["diagonal"] if assumptions.sparse_diagonal else [])
    reports = []
    for s in range(dataset.m):
        for v in variants:
            rep = multi_task_bound(inputs, s, v, sparse_diagonal=assumptions.sparse_diagonal)
            reports.append({"task_id": s + 1, "n_s": stats[s].n_s, "flat_bound": flatopo_bound(inputs, stats[s].n_s),
                            **{k: val for k, val in rep.to_dict().items() if k != "inputs"}})
    out = Path(args.out)
    doc = {
        "schema": "hieropo.bounds/1",
        "inputs": asdict(inputs),
        "gamma_estimated": est_gamma,
        "gamma_forced_zero": bool(args.gamma_zero),
        "assumptions": assumptions.to_dict(),
        "reports": reports,
    }
    out.write_text(json.dumps(doc, indent=1) + "\n")
    cols = ["task_id", "n_s", "variant", "alpha", "gamma_used", "epsilon_task", "epsilon_hyper",
            "epsilon_total", "flat_bound", "diagnostic"]
    _write_csv(out.with_suffix(".csv"), "hieropo.bounds/1", cols, [[r[c] for c in cols] for r in reports])
    print(f"gamma = {gamma:.4g}; wrote {len(reports)} bound rows to {out}")


def cmd_recsys_prep(args, cfg: ExperimentConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        ratings = read_ratings(args.ratings)
    except (OSError, ConfigurationError) as exc:
        raise PipelineError(f"ingest: {exc}") from exc
    fact, gmm, params = prepare(ratings, cfg.rank, cfg.gmm_k, cfg.als_reg, cfg.als_sweeps, cfg.seed)
    try:
        env = build_recsys_environment(params, fact, cfg.recsys_K, cfg.recsys_m, cfg.seed)
    except ConfigurationError as exc:
        raise PipelineError(f"environment: {exc}") from exc
    (out / "factorization.json").write_text(json.dumps(fact.to_dict()) + "\n")
    (out / "params.json").write_text(json.dumps({
        **params.to_dict(),
        "model": params.model_config().to_dict(),
        "gmm": {"weights": gmm.weights.tolist(), "means": gmm.means.tolist(),
                "log_likelihood_trace": gmm.log_likelihood_trace},
        "defaults": {"d": cfg.rank, "k": cfg.gmm_k, "K": cfg.recsys_K, "m": cfg.recsys_m},
    }, indent=1) + "\n")
    env.save(out / "environment.json")
    print(f"cluster {params.cluster} with {params.tasks.size} users; sigma = {params.sigma:.4g}; wrote {out}")


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads; 1 gives bit-exact runs")
    common.add_argument("--out", help="output file or directory")

    p = argparse.ArgumentParser(prog="hieropo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="sample an environment and a logged dataset")

    f = sub.add_parser("fit", parents=[common], help="fit a pessimistic policy to a dataset")
    f.add_argument("--dataset", required=True)
    f.add_argument("--learner", choices=LEARNERS[:3], default="hier")
    f.add_argument("--env", help="environment file; required only by the oracle learner")
    f.add_argument("--model", help="JSON with mu_q, sigma_q, sigma_0, sigma (e.g. recsys params.json)")

    e = sub.add_parser("evaluate", parents=[common], help="Monte Carlo suboptimality of a policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--env", required=True)

    sub.add_parser("sweep", parents=[common], help="suboptimality across n or m for several learners")

    b = sub.add_parser("bounds", parents=[common], help="suboptimality bounds and assumption checks")
    b.add_argument("--dataset", required=True)
    b.add_argument("--env", required=True)
    b.add_argument("--model")
    b.add_argument("--gamma-zero", action="store_true", help="use gamma = 0 (always valid, ignores n)")

    r = sub.add_parser("recsys-prep", parents=[common], help="ratings -> ALS -> GMM -> environment")
    r.add_argument("--ratings", required=True)

    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return p


DEFAULT_OUT = {
    "generate": "data", "fit": "policy.json", "evaluate": "results.csv", "sweep": "sweep",
    "bounds": "bounds.json", "recsys-prep": "recsys",
}

COMMANDS = {
    "generate": cmd_generate, "fit": cmd_fit, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
    "bounds": cmd_bounds, "recsys-prep": cmd_recsys_prep,
}


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        cfg = parse_config_text(Path(args.config).read_text(), cfg)
    if args.set:
        cfg = parse_config_text("\n".join(args.set), cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "show-config":
            sys.stdout.write(format_config(cfg))
            return 0
        args.out = args.out or DEFAULT_OUT[args.command]
        COMMANDS[args.command](args, cfg)
    except PipelineError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, DatasetFormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
