"""Command-line front end: ``zoforge train | replay | validate``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .estimators import EstimatorConfig
from .objectives import DatasetSpec, MetricObjective, Objective, Quadratic, make_dataset, make_logistic, make_mlp, \
    rank_r_spectrum
from .optimizers import ConfigError, DivergenceError, OptimizerConfig, RunConfig, Stage, train
from .paramspace import AdapterSpec, ParamStore, attach_low_rank_adapter
from .theorylab import SUITES, run_suite
from .trajectory import LayoutMismatchError, TrajectoryError, decode, replay

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2
SEED_ENV = "ZOFORGE_SEED"

# section -> key -> (default, description)
SCHEMA: dict[str, dict[str, tuple[object, str]]] = {
    "run": {
        "seed": (0, "master seed, u64 (overridden by --seed; default from $ZOFORGE_SEED)"),
        "steps": (1000, "total steps T"),
        "batch_size": (0, "examples per step; 0 = full batch"),
        "eval_every": (100, "steps between full-loss metric rows; 0 = final row only"),
        "stages": ([], "list of {steps = int, groups = [names]}; empty = one stage over trainable groups"),
        "divergence_factor": (1e6, "abort when a loss exceeds this multiple of the initial loss"),
        "timing": (False, "record wall-clock elapsed_ns in metrics (breaks byte-identical metrics)"),
    },
    "optimizer": {
        "algo": ("sgd", "sgd | momentum | adam"),
        "lr": (1e-3, "base learning rate"),
        "lr_schedule": ("constant", "constant | linear_decay"),
        "weight_decay": (0.0, "decoupled decay, applied as theta *= 1 - lr * wd"),
        "beta": (0.9, "momentum EMA coefficient"),
        "beta1": (0.9, "Adam first-moment coefficient"),
        "beta2": (0.999, "Adam second-moment coefficient"),
        "eps_adam": (1e-8, "Adam denominator offset"),
        "n_schedule": ("constant", "constant | linear_increase"),
        "n_final": (0, "final probe count for linear_increase"),
        "couple_lr_to_n": (False, "scale lr by n_t / n_0"),
        "history_mode": ("dense", "dense | reconstruct"),
        "window": (0, "reconstruct window K in steps; 0 = derived from the betas"),
    },
    "estimator": {
        "kind": ("spsa", "spsa | one_point | variance_modified | expectation_modified"),
        "n": (1, "probes per step (initial value under linear_increase)"),
        "epsilon": (1e-3, "perturbation scale"),
        "z_dist": ("gaussian", "gaussian | sphere"),
        "scale_source": ("ones", "ones | param_norm_per_group | grad_norm_per_group | external"),
        "scale_refresh": ("never", "never | per_epoch"),
        "scale_probes": (8, "probes per group for grad_norm_per_group"),
        "external_scale": ([], "per-group scale values in layout order"),
    },
    "objective": {
        "kind": ("quadratic", "quadratic | logistic | mlp"),
        "metric": ("", "'' for the smooth loss, or accuracy | macro_f1 (logistic/mlp only)"),
        "dim": (50, "quadratic dimension"),
        "rank": (2, "quadratic: number of unit eigenvalues (effective rank)"),
        "ell": (1.0, "quadratic: value of the nonzero eigenvalues"),
        "eigenvalues": ([], "quadratic: explicit spectrum, overrides dim/rank/ell"),
        "init_seed": (0, "seed of the initial parameters"),
        "init_scale": (1.0, "scale of the initial parameters (quadratic, logistic)"),
        "dataset": ("synthetic-linear", "synthetic-linear | synthetic-blobs | two-moons-like"),
        "n_examples": (200, "dataset size N"),
        "features": (2, "input dimension"),
        "classes": (2, "class count"),
        "data_seed": (0, "dataset generator seed"),
        "form": ("exp", "logistic loss: exp | logsigmoid"),
        "hidden": ([8], "mlp hidden widths"),
        "outputs": (1, "mlp output width"),
        "loss": ("cross-entropy", "mlp loss: square | cross-entropy"),
        "adapter_target": ("", "mlp weight group to receive a low-rank adapter, e.g. W1"),
        "adapter_rank": (1, "adapter rank r"),
        "adapter_alpha": (1.0, "adapter alpha (delta scale alpha / r)"),
        "adapter_seed": (0, "adapter A initialization seed"),
    },
    "trajectory": {
        "precision": ("bf16", "stored projected-gradient precision: bf16 | f32 | f64"),
    },
}


class UsageError(Exception):
    pass


def help_epilog() -> str:
    lines = ["config keys (TOML, section.key = default  -- meaning):"]
    for section, keys in SCHEMA.items():
        lines.append(f"  [{section}]")
        for key, (default, desc) in keys.items():
            lines.append(f"    {key} = {default!r}  -- {desc}")
    lines.append("exit codes: 0 ok, 1 usage/config error, 2 divergence")
    return "\n".join(lines)


def load_config(path: str | Path | None) -> dict[str, dict]:
    """Parse a TOML config, rejecting unknown sections and keys, and fill defaults."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"cannot parse {p}: {exc}") from None
    cfg = {}
    for section, value in raw.items():
        if section not in SCHEMA:
            raise UsageError(f"unknown config section [{section}]; valid: {', '.join(SCHEMA)}")
        if not isinstance(value, dict):
            raise UsageError(f"[{section}] must be a table")
        for key in value:
            if key not in SCHEMA[section]:
                raise UsageError(f"unknown key {section}.{key}; valid: {', '.join(SCHEMA[section])}")
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        cfg[section] = {k: given.get(k, default) for k, (default, _) in keys.items()}
    cfg["_explicit_seed"] = "seed" in raw.get("run", {})
    return cfg


def resolve_seed(cfg: dict, cli_seed: int | None) -> int:
    if cli_seed is not None:
        return cli_seed
    if cfg["_explicit_seed"]:
        return int(cfg["run"]["seed"])
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return int(cfg["run"]["seed"])


def build_objective(cfg: dict) -> tuple[Objective, ParamStore]:
    o = cfg["objective"]
    kind = o["kind"]
    if kind == "quadratic":
        lam = o["eigenvalues"] or rank_r_spectrum(int(o["dim"]), int(o["rank"]), float(o["ell"]))
        obj = Quadratic(lam)
        return obj, obj.init_store(seed=int(o["init_seed"]), scale=float(o["init_scale"]))
    spec = DatasetSpec(o["dataset"], int(o["n_examples"]), int(o["features"]), int(o["classes"]), int(o["data_seed"]))
    data = make_dataset(spec)
    if kind == "logistic":
        base = make_logistic(data, o["form"])
        store = base.init_store(seed=int(o["init_seed"]), scale=float(o["init_scale"]))
    elif kind == "mlp":
        layers = [int(o["features"]), *[int(h) for h in o["hidden"]], int(o["outputs"])]
        base = make_mlp(layers, data, o["loss"])
        store = base.init_store(seed=int(o["init_seed"]))
        if o["adapter_target"]:
            store = attach_low_rank_adapter(store, AdapterSpec(o["adapter_target"], int(o["adapter_rank"]),
                                                               float(o["adapter_alpha"]), int(o["adapter_seed"])))
    else:
        raise UsageError(f"unknown objective kind {kind!r}")
    if o["metric"]:
        return MetricObjective(base, o["metric"]), store
    return base, store


def build_configs(cfg: dict, seed: int) -> tuple[RunConfig, OptimizerConfig]:
    e, op, r = cfg["estimator"], cfg["optimizer"], cfg["run"]
    est = EstimatorConfig(kind=e["kind"], n=int(e["n"]), epsilon=float(e["epsilon"]), z_dist=e["z_dist"],
                          scale_source=e["scale_source"], scale_refresh=e["scale_refresh"],
                          scale_probes=int(e["scale_probes"]),
                          external_scale=tuple(float(v) for v in e["external_scale"]) or None)
    opt = OptimizerConfig(algo=op["algo"], lr=float(op["lr"]), lr_schedule=op["lr_schedule"],
                          weight_decay=float(op["weight_decay"]), beta=float(op["beta"]), beta1=float(op["beta1"]),
                          beta2=float(op["beta2"]), eps_adam=float(op["eps_adam"]), n_schedule=op["n_schedule"],
                          n_final=int(op["n_final"]) or None, couple_lr_to_n=bool(op["couple_lr_to_n"]),
                          history_mode=op["history_mode"], window=int(op["window"]) or None)
    stages = None
    if r["stages"]:
        stages = []
        for st in r["stages"]:
            unknown = set(st) - {"steps", "groups"}
            if unknown:
                raise UsageError(f"unknown stage keys {sorted(unknown)}")
            groups = st.get("groups")
            stages.append(Stage(int(st["steps"]), tuple(groups) if groups else None))
        stages = tuple(stages)
    run = RunConfig(seed=seed, steps=int(r["steps"]), batch_size=int(r["batch_size"]) or None, estimator=est,
                    eval_every=int(r["eval_every"]), stages=stages, grad_precision=cfg["trajectory"]["precision"],
                    divergence_factor=float(r["divergence_factor"]), timing=bool(r["timing"]))
    return run, opt


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(cfg, args.seed)
    obj, store = build_objective(cfg)
    run, opt = build_configs(cfg, seed)
    try:
        result = train(run, opt, obj, store)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    Path(args.out_trajectory).write_bytes(result.trajectory_bytes())
    if args.metrics:
        Path(args.metrics).write_text(result.metrics_csv(), newline="\n")
    if args.out_params:
        result.store.save(args.out_params)
    print(f"steps={run.steps} initial_loss={result.initial_loss!r} final_loss={result.final_loss!r}")
    return EXIT_OK


def cmd_replay(args) -> int:
    data = Path(args.trajectory).read_bytes() if Path(args.trajectory).is_file() else None
    if data is None:
        raise UsageError(f"trajectory file not found: {args.trajectory}")
    traj = decode(data)
    cfg = load_config(args.config) if args.config else None
    run = opt = None
    obj = None
    if cfg is not None:
        run, opt = build_configs(cfg, traj.header.master_seed)
    if args.init_params:
        theta0 = ParamStore.load(args.init_params)
    else:
        if cfg is None:
            raise UsageError("--init-seed needs --config to know the parameter layout")
        cfg["objective"]["init_seed"] = args.init_seed
        obj, theta0 = build_objective(cfg)
    size = obj.dataset_size if obj is not None else None
    out = replay(traj, theta0, opt, run, dataset_size=size)
    out.save(args.out_params)
    print(f"forward_passes={obj.evals if obj is not None else 0}")
    return EXIT_OK


def cmd_validate(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    for name in names:
        if name not in SUITES:
            raise UsageError(f"unknown suite {name!r}; valid: all, {', '.join(SUITES)}")
    seed = resolve_seed({"_explicit_seed": False, "run": {"seed": 0}}, args.seed)  # flag > env > 0
    ok = True
    for name in names:
        for rep in run_suite(name, seed=seed, workers=args.workers, csv_dir=args.csv):
            print(rep.line())
            ok &= rep.passed
    return EXIT_OK if ok else EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zoforge", description="Memory-efficient zeroth-order training toolkit.",
                                     epilog=help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, epilog=help_epilog(),
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("train", "run ZO training and write a trajectory")
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--out-trajectory", required=True, help="trajectory output path")
    p.add_argument("--metrics", help="metrics CSV output path")
    p.add_argument("--out-params", help="write final parameters (raw f64 + .json sidecar)")
    p.add_argument("--seed", type=lambda s: int(s, 0), help="master seed, overrides config and $ZOFORGE_SEED")
    p.add_argument("--workers", type=int, default=1, help="accepted for symmetry; training is single-threaded")
    p.set_defaults(func=cmd_train)

    p = add("replay", "rebuild final parameters from a trajectory without evaluating the loss")
    p.add_argument("--trajectory", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--init-params", help="initial parameters file (raw f64 + .json sidecar)")
    src.add_argument("--init-seed", type=lambda s: int(s, 0), help="regenerate initial parameters from the config")
    p.add_argument("--config", help="training config; supplies settings the header does not carry")
    p.add_argument("--out-params", required=True)
    p.set_defaults(func=cmd_replay)

    p = add("validate", "run theory check suites")
    p.add_argument("--suite", default="all", help=f"all | {' | '.join(SUITES)}")
    p.add_argument("--csv", help="directory for CSV evidence")
    p.add_argument("--seed", type=lambda s: int(s, 0))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except LayoutMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError, TrajectoryError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
