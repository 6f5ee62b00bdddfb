"""``kfade`` command-line interface.

Every command reads a JSON run config (``--config``), writes its artifacts
into ``--out`` and prints nothing on success except log lines on stderr.
Reports are JSON with sorted keys and contain no wall-clock values, so a
re-run with the same config and seed reproduces them byte for byte;
timings go to a ``<report>.meta.json`` sidecar next to the report.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric
failure, 4 I/O failure. Failures also print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from kfade import container, scenarios
from kfade.config import ConfigError, RunConfig, load_config
from kfade.curvature import (
    CurvatureError,
    EstimatorKind,
    FisherMode,
    dense_reconstruct,
    fit_curvature,
)
from kfade.data import (
    DataError,
    Dataset,
    concat,
    load_dataset,
    save_classification,
    save_token_records,
)
from kfade.linalg import make_rng
from kfade.metrics import (
    MetricError,
    forget_quality,
    kl_specificity,
    mean_kl,
    pareto_report,
    truth_ratios,
)
from kfade.model import ModelError, Network, accuracy, mean_loss, train_sgd
from kfade.oracle import exact_gauss_newton, linear_response_check, retrain_oracle
from kfade.unlearn import grad_ascent_baseline, grad_diff_baseline, kfade, transfer_update

logger = logging.getLogger("kfade")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("argv", message)


# ---------------------------------------------------------------------------
# helpers


def write_json(path: Path, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def write_report(out: Path, name: str, report: dict, meta: dict | None = None) -> Path:
    path = out / f"{name}.json"
    write_json(path, report)
    if meta is not None:
        write_json(out / f"{name}.meta.json", meta)
    return path


def _config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config", f"required by '{args.command}'")
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _dataset(cfg: RunConfig, which: str, required: bool = True) -> Dataset | None:
    path = getattr(cfg.paths, f"dataset_{which}")
    if path is None:
        if required:
            raise ConfigError(f"paths.dataset_{which}", "required by this command")
        return None
    m = cfg.model
    return load_dataset(path, m.task, m.layers[-1].d_out, m.context_window, m.vocab)


def _checkpoint(path: str, net: Network):
    ckpt = container.load_checkpoint(path)
    ckpt.check_against(net)
    return ckpt


def _floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(flag, f"expected comma-separated numbers, got {text!r}") from exc


def _threads() -> int | None:
    raw = os.environ.get("KFADE_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError("KFADE_THREADS", f"expected a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> dict:
    cfg = _config(args)
    net = cfg.network()
    retain = _dataset(cfg, "retain")
    forget = _dataset(cfg, "forget", required=args.dataset == "full")
    t0 = time.perf_counter()
    if args.dataset == "full":
        data = concat(retain, forget)
        ckpt = train_sgd(net, data, cfg.train_config())
    else:
        data = retain
        ckpt = retrain_oracle(net, cfg.train.seed, retain, cfg.train_config())
    elapsed = time.perf_counter() - t0
    name = args.name or ("base" if args.dataset == "full" else "retrained")
    container.save_checkpoint(args.out / f"{name}.kft", ckpt, net)
    report = {
        "checkpoint": f"{name}.kft",
        "digest": ckpt.digest(),
        "dataset": args.dataset,
        "dataset_fingerprint": data.fingerprint(),
        "n_examples": len(data),
        "steps": int(ckpt.meta["steps"]),
        "train_loss": float(ckpt.meta["train_loss"]),
        "train_accuracy": accuracy(net, ckpt, data),
    }
    write_report(args.out, name, report, {"wall_clock_s": elapsed})
    logger.info("trained %s in %.2fs (loss %.4f)", name, elapsed, report["train_loss"])
    return report


def _fit(cfg: RunConfig, net, ckpt, retain, estimator: str):
    return fit_curvature(
        net, ckpt, retain, estimator, make_rng(cfg.unlearn.seed, 3), cfg.fisher_mode(),
        cfg.unlearn.target_layers,
    )


def _log_timings(state) -> None:
    for stage, secs in state.timings.items():
        logger.info("fit stage %-18s %.4fs", stage, secs)


def cmd_fit_curvature(args) -> dict:
    cfg = _config(args)
    net = cfg.network()
    ckpt = _checkpoint(args.checkpoint, net)
    retain = _dataset(cfg, "retain")
    estimator = args.estimator or cfg.unlearn.estimator
    state = _fit(cfg, net, ckpt, retain, estimator)
    _log_timings(state)
    name = args.name
    container.save_curvature(args.out / f"{name}.kft", state)
    report = {
        "factors": f"{name}.kft",
        "estimator": state.kind.value,
        "target_layers": list(state.target_layers),
        "n_params": state.n_params,
        "n_examples": state.n_examples,
        "fit_dataset_fingerprint": state.fingerprint,
        "checkpoint_digest": ckpt.digest(),
        "fisher_mode": None
        if state.fisher_mode is None
        else {"kind": state.fisher_mode.kind, "n_samples": state.fisher_mode.n_samples},
    }
    write_report(args.out, name, report, {"timings": dict(state.timings)})
    return report


def cmd_unlearn(args) -> dict:
    cfg = _config(args)
    net = cfg.network()
    ckpt = _checkpoint(args.checkpoint, net)
    forget = _dataset(cfg, "forget")
    u = cfg.unlearn
    t0 = time.perf_counter()
    report = {"method": args.method, "input_digest": ckpt.digest()}
    if args.method == "kfade":
        retain = _dataset(cfg, "retain")
        plan = cfg.plan()
        state = None
        if args.factors is not None:
            if plan.refit_every_step:
                logger.warning("refit_every_step is true: ignoring --factors %s", args.factors)
            else:
                state = container.load_curvature(args.factors)
                if state.kind is not EstimatorKind(plan.estimator):
                    raise ConfigError(
                        "--factors", f"holds {state.kind.value} factors, plan wants {plan.estimator}"
                    )
        theta, trace = kfade(net, ckpt, forget, retain, plan, state)
        report.update(trace.to_json())
        report["plan"] = cfg.to_json()["unlearn"]
    else:
        before = mean_loss(net, ckpt, forget, u.loss)
        if args.method == "grad_ascent":
            theta = grad_ascent_baseline(
                net, ckpt, forget, u.steps, u.step_size, u.loss, u.target_layers
            )
        else:
            retain = _dataset(cfg, "retain")
            theta = grad_diff_baseline(
                net, ckpt, forget, retain, u.steps, u.step_size, args.retain_weight, u.loss,
                u.target_layers,
            )
            report["retain_weight"] = args.retain_weight
        report["forget_loss_before"] = before
        report["forget_loss_after"] = mean_loss(net, theta, forget, u.loss)
        report["lr"] = u.step_size
        report["n_steps"] = u.steps
    elapsed = time.perf_counter() - t0
    name = args.name
    container.save_checkpoint(args.out / f"{name}.kft", theta, net)
    report["checkpoint"] = f"{name}.kft"
    report["digest"] = theta.digest()
    write_report(args.out, name, report, {"wall_clock_s": elapsed})
    return report


def _forget_report(cfg, net, base, test, forget, retrained=None) -> dict:
    out = {
        "forget_loss": mean_loss(net, test, forget),
        "forget_loss_base": mean_loss(net, base, forget),
        "forget_accuracy": accuracy(net, test, forget),
    }
    if retrained is not None:
        tr_test = truth_ratios(net, test, forget)
        tr_ret = truth_ratios(net, retrained, forget)
        p, d = forget_quality(tr_test, tr_ret)
        out.update(
            truth_ratios=[float(r) for r in tr_test.ratios],
            truth_ratio_ids=list(tr_test.question_ids),
            forget_quality_p=p,
            ks_D=d,
            ks_mode=cfg.eval.ks_mode,
        )
    return out


def cmd_eval(args) -> dict:
    cfg = _config(args)
    net = cfg.network()
    base = _checkpoint(args.base, net)
    test = _checkpoint(args.test, net)
    retrained = _checkpoint(args.retrained, net) if args.retrained else None
    eval_set = _dataset(cfg, "eval", required=False) or _dataset(cfg, "retain")
    forget = _dataset(cfg, "forget")
    kl = kl_specificity(net, base, test, eval_set, cfg.eval.bootstrap_n, cfg.unlearn.seed)
    report = kl.to_json()
    report["n_eval"] = int(len(kl.values))
    report["base_digest"] = base.digest()
    report["test_digest"] = test.digest()
    report.update(_forget_report(cfg, net, base, test, forget, retrained))
    write_report(args.out, args.name, report)
    return report


def cmd_transfer(args) -> dict:
    finetuned = container.load_checkpoint(args.finetuned)
    unlearned = container.load_checkpoint(args.unlearned)
    base = container.load_checkpoint(args.base)
    out = transfer_update(finetuned, unlearned, base)
    out = out.replace({}, provenance="transfer")
    name = args.name
    container.save_checkpoint(args.out / f"{name}.kft", out)
    report = {
        "checkpoint": f"{name}.kft",
        "digest": out.digest(),
        "finetuned_digest": finetuned.digest(),
        "unlearned_digest": unlearned.digest(),
        "base_digest": base.digest(),
    }
    write_report(args.out, name, report)
    return report


def _label(est: str, alpha: float, damping: float) -> str:
    return f"{est}/alpha={alpha:g}/lambda={damping:g}"


def cmd_sweep(args) -> dict:
    cfg = _config(args)
    net = cfg.network()
    ckpt = _checkpoint(args.checkpoint, net)
    retain = _dataset(cfg, "retain")
    forget = _dataset(cfg, "forget")
    eval_set = _dataset(cfg, "eval", required=False) or retain
    retrained = _checkpoint(args.retrained, net) if args.retrained else None
    step_sizes = _floats(args.step_sizes, "--step-sizes") if args.step_sizes else [cfg.unlearn.step_size]
    dampings = _floats(args.dampings, "--dampings") if args.dampings else [cfg.unlearn.damping]
    estimators = args.estimators.split(",") if args.estimators else [cfg.unlearn.estimator]
    for est in estimators:
        try:
            EstimatorKind(est)
        except ValueError as exc:
            raise ConfigError("--estimators", f"unknown estimator {est!r}") from exc
    refit = cfg.unlearn.refit_every_step
    cache_dir = args.out / "factor_cache"
    base_loss = mean_loss(net, ckpt, forget)
    tr_retrained = truth_ratios(net, retrained, forget) if retrained is not None else None
    metric = "forget_quality_p" if retrained is not None else "forget_loss_increase"

    cells, failures, runs, per_est = [], [], [], {}
    fit_time: dict[str, float] = {}
    cache_hits = 0
    for est in estimators:
        per_est[est] = []
        for damping in dampings:
            for alpha in step_sizes:
                label = _label(est, alpha, damping)
                try:
                    state = None
                    if not refit:
                        path = cache_dir / f"{est}.kft"
                        if path.exists():
                            state = container.load_curvature(path)
                            cache_hits += 1
                            logger.info("cache hit: %s reuses %s", label, path.name)
                        else:
                            t0 = time.perf_counter()
                            state = _fit(cfg, net, ckpt, retain, est)
                            fit_time[est] = time.perf_counter() - t0
                            cache_dir.mkdir(parents=True, exist_ok=True)
                            container.save_curvature(path, state)
                            logger.info("cache miss: fitted %s factors for %s", est, label)
                    plan = cfg.plan(estimator=est, step_size=alpha, damping=damping)
                    theta, _ = kfade(net, ckpt, forget, retain, plan, state)
                    kl = mean_kl(net, ckpt, theta, eval_set)
                    if retrained is not None:
                        f_metric, _ = forget_quality(truth_ratios(net, theta, forget), tr_retrained)
                    else:
                        f_metric = mean_loss(net, theta, forget) - base_loss
                except (ArithmeticError, ValueError) as exc:
                    failures.append({"label": label, "error": type(exc).__name__, "message": str(exc)})
                    logger.warning("cell %s failed: %s", label, exc)
                    continue
                cell = {
                    "label": label, "estimator": est, "step_size": alpha, "damping": damping,
                    "forget": f_metric, "retain_kl": kl,
                }
                cells.append(cell)
                # specificity is maximised, so the frontier uses -KL
                runs.append((f_metric, -kl, label))
                per_est[est].append((f_metric, -kl, label))
    report = pareto_report(runs)
    report.update(
        cells=cells,
        failures=failures,
        forget_metric=metric,
        specificity_metric="neg_retain_kl",
        frontiers={est: pareto_report(r)["pareto_frontier"] for est, r in per_est.items()},
        cache_hits=cache_hits,
        refit_every_step=refit,
    )
    write_report(args.out, args.name, report, {"fit_seconds": fit_time})
    return report


def cmd_oracle(args) -> dict:
    cfg = _config(args)
    net = cfg.network()
    if args.check == "retrain":
        retain = _dataset(cfg, "retain")
        ckpt = retrain_oracle(net, cfg.train.seed, retain, cfg.train_config())
        container.save_checkpoint(args.out / f"{args.name}.kft", ckpt, net)
        report = {"check": "retrain", "checkpoint": f"{args.name}.kft", "digest": ckpt.digest()}
    elif args.check == "gauss-newton":
        if args.checkpoint is None:
            raise ConfigError("--checkpoint", "required by the gauss-newton check")
        ckpt = _checkpoint(args.checkpoint, net)
        retain = _dataset(cfg, "retain")
        layers = cfg.unlearn.target_layers
        G = exact_gauss_newton(net, ckpt, retain, layers)
        norm = float(np.linalg.norm(G))
        errors = {}
        for est in ("exact_dense", "kfac", "ekfac", "diagonal"):
            state = fit_curvature(
                net, ckpt, retain, est, make_rng(cfg.unlearn.seed, 3),
                FisherMode("exact_enumeration"), layers,
            )
            errors[est] = float(np.linalg.norm(dense_reconstruct(state) - G)) / norm
        report = {
            "check": "gauss-newton",
            "n_params": int(G.shape[0]),
            "frobenius_norm": norm,
            "relative_frobenius_error": errors,
        }
    else:
        retain = _dataset(cfg, "retain")
        forget = _dataset(cfg, "forget")
        if cfg.model.task != "classify":
            raise ConfigError("model.task", "the linear-response check needs classification data")
        x = np.vstack([retain.inputs, forget.inputs])
        y = np.concatenate([retain.labels, forget.labels])
        idx = range(len(retain), len(retain) + len(forget))
        rep = linear_response_check(x, y, idx, args.l2, args.loss, retain.n_classes)
        report = {"check": "linear-response", "loss": args.loss, "l2_reg": args.l2, **rep.to_json()}
    write_report(args.out, args.name, report)
    return report


# scenario configs: training knobs that suit each generator
_SCENARIO_TRAIN = {
    "facts": {"epochs": 300, "lr": 0.5, "batch": 16},
    "lifecycle": {"epochs": 300, "lr": 0.5, "batch": 16},
    "two-domain": {"epochs": 200, "lr": 0.1, "batch": 16},
    "blobs": {"epochs": 300, "lr": 0.1, "batch": 32},
}


def cmd_scenario(args) -> dict:
    seed = args.seed if args.seed is not None else 0
    out = args.out
    kind = args.kind
    files = {}
    model: dict
    if kind in ("facts", "lifecycle"):
        sc = scenarios.lifecycle(seed) if kind == "lifecycle" else scenarios.facts(seed)
        save_token_records(out / "retain.jsonl", sc.retain_records)
        save_token_records(out / "forget.jsonl", sc.forget_records)
        files = {"dataset_retain": "retain.jsonl", "dataset_forget": "forget.jsonl"}
        if kind == "lifecycle":
            save_token_records(out / "finetune.jsonl", sc.finetune_records)
        net = sc.network()
        model = {"task": "lm", "context_window": sc.window, "vocab": sc.vocab}
        unlearn = {"estimator": "kfac", "steps": 1, "step_size": 0.2, "damping": 1e-8}
    else:
        sc = scenarios.two_domain(seed) if kind == "two-domain" else scenarios.blobs(seed)
        save_classification(out / "retain.jsonl", sc.retain)
        save_classification(out / "forget.jsonl", sc.forget)
        files = {"dataset_retain": "retain.jsonl", "dataset_forget": "forget.jsonl"}
        if kind == "two-domain":
            save_classification(out / "eval.jsonl", sc.eval)
            files["dataset_eval"] = "eval.jsonl"
        net = sc.network()
        model = {"task": "classify"}
        unlearn = {"estimator": "kfac", "steps": 1, "step_size": 0.05, "damping": 1e-4}
    config = {
        "model": {"layers": net.to_dict(), **model},
        "train": {**_SCENARIO_TRAIN[kind], "seed": seed},
        "unlearn": {**unlearn, "seed": seed},
        "eval": {"bootstrap_n": 1000, "ks_mode": "asymptotic"},
        "paths": {**files, "checkpoints_dir": "."},
    }
    write_json(out / "config.json", config)
    report = {"scenario": kind, "seed": seed, "config": "config.json", "files": files}
    if kind == "lifecycle":
        report["finetune"] = "finetune.jsonl"
    return report


# ---------------------------------------------------------------------------
# entry point


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Global flags may appear before or after the subcommand; the subcommand
    # copies suppress their defaults so they never clobber earlier values.
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON", **kw)
    common.add_argument("--seed", type=int, help="override train and unlearn seeds", **kw)
    common.add_argument("--out", type=Path, help="output directory",
                        **(kw or {"default": Path(".")}))
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors",
                        **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kfade", description=__doc__.split("\n")[0],
                     parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dataset", choices=("full", "retain"), default="full")
    p.add_argument("--name")

    p = sub.add_parser("fit-curvature", parents=[common], help="fit curvature on the retain set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--estimator", choices=[k.value for k in EstimatorKind])
    p.add_argument("--name", default="factors")

    p = sub.add_parser("unlearn", parents=[common], help="run K-FADE or a baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--factors")
    p.add_argument("--method", choices=("kfade", "grad_ascent", "grad_diff"), default="kfade")
    p.add_argument("--retain-weight", type=float, default=1.0)
    p.add_argument("--name", default="unlearned")

    p = sub.add_parser("eval", parents=[common], help="specificity and forget metrics")
    p.add_argument("--base", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--retrained")
    p.add_argument("--name", default="eval")

    p = sub.add_parser("transfer", parents=[common], help="re-apply an unlearning delta")
    p.add_argument("--finetuned", required=True)
    p.add_argument("--unlearned", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--name", default="transferred")

    p = sub.add_parser("sweep", parents=[common], help="grid over step size, damping, estimator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--step-sizes")
    p.add_argument("--dampings")
    p.add_argument("--estimators")
    p.add_argument("--retrained")
    p.add_argument("--name", default="sweep")

    p = sub.add_parser("oracle", parents=[common], help="ground-truth checks")
    p.add_argument("--check", choices=("gauss-newton", "linear-response", "retrain"),
                   required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--l2", type=float, default=1e-2)
    p.add_argument("--loss", choices=("logistic", "squared"), default="logistic")
    p.add_argument("--name", default="oracle")

    p = sub.add_parser("scenario", parents=[common], help="generate a synthetic scenario")
    p.add_argument("kind", choices=("facts", "two-domain", "lifecycle", "blobs"))
    return parser


COMMANDS = {
    "train": cmd_train,
    "fit-curvature": cmd_fit_curvature,
    "unlearn": cmd_unlearn,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "scenario": cmd_scenario,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (OSError, container.ContainerError, DataError)):
        return EXIT_IO
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC
    return EXIT_CONFIG


def _setup_logging(quiet: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(logging.WARNING if quiet else logging.INFO)
    logger.propagate = False


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.quiet)
        args.out.mkdir(parents=True, exist_ok=True)
        threads = _threads()
        if threads is not None:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(limits=threads)
        else:
            limit = nullcontext()
        with limit:
            COMMANDS[args.command](args)
    except (ConfigError, ModelError, CurvatureError, MetricError, ValueError,
            ArithmeticError, OSError) as exc:
        code = _exit_code(exc)
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, ConfigError):
            err["key"] = exc.key
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
