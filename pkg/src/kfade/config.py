"""Run configuration: a strict JSON document.

Every section is optional except ``model.layers``; missing keys take the
defaults below and unknown keys are rejected so that typos in sweep grids
cannot silently fall back to defaults. Relative paths are resolved against
the directory of the config file and must exist when the config is loaded.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from kfade.curvature import EstimatorKind, FisherMode
from kfade.model import LayerSpec, Network, TrainConfig
from kfade.unlearn import UnlearnPlan


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ModelSection:
    layers: tuple[LayerSpec, ...]
    task: str = "classify"
    context_window: int | None = None
    vocab: int | None = None


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 50
    lr: float = 0.1
    batch: int = 32
    seed: int = 0


@dataclass(frozen=True)
class UnlearnSection:
    estimator: str = "kfac"
    fisher_mode: str | None = None
    mc_samples: int = 1
    steps: int = 1
    step_size: float = 1e-2
    damping: float = 1e-8
    loss: str = "cross_entropy"
    target_layers: tuple[str, ...] | None = None
    refit_every_step: bool = True
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    bootstrap_n: int = 1000
    ks_mode: str = "asymptotic"


@dataclass(frozen=True)
class PathsSection:
    dataset_retain: Path | None = None
    dataset_forget: Path | None = None
    dataset_eval: Path | None = None
    checkpoints_dir: Path | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection
    train: TrainSection = field(default_factory=TrainSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def network(self) -> Network:
        return Network(self.model.layers)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, lr=t.lr, batch=t.batch, seed=t.seed)

    def fisher_mode(self) -> FisherMode | None:
        u = self.unlearn
        if u.fisher_mode is None:
            return None
        return FisherMode(u.fisher_mode, u.mc_samples)

    def plan(self, **overrides) -> UnlearnPlan:
        u = self.unlearn
        plan = UnlearnPlan(
            steps=u.steps,
            step_size=u.step_size,
            damping=u.damping,
            forget_loss=u.loss,
            estimator=u.estimator,
            target_layers=u.target_layers,
            refit_every_step=u.refit_every_step,
            seed=u.seed,
            fisher_mode=self.fisher_mode(),
        )
        return dataclasses.replace(plan, **overrides)

    def with_seed(self, seed: int) -> "RunConfig":
        """Override both the training and the unlearning seed."""
        return dataclasses.replace(
            self,
            train=dataclasses.replace(self.train, seed=seed),
            unlearn=dataclasses.replace(self.unlearn, seed=seed),
        )

    def to_json(self) -> dict:
        def conv(obj):
            if isinstance(obj, Path):
                return str(obj)
            if isinstance(obj, tuple):
                return [conv(v) for v in obj]
            if isinstance(obj, dict):
                return {k: conv(v) for k, v in obj.items()}
            return obj

        return conv(dataclasses.asdict(self))


# ---------------------------------------------------------------------------
# parsing


def _check_keys(obj: Any, allowed, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(where or "<root>", "expected a JSON object")
    for key in obj:
        if key not in allowed:
            path = f"{where}.{key}" if where else key
            raise ConfigError(path, "unknown key")
    return obj


def _int(value, key, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be >= {minimum}")
    return value


def _float(value, key, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be >= {minimum}")
    return value


def _choice(value, key, options):
    if value not in options:
        raise ConfigError(key, f"expected one of {sorted(options)}, got {value!r}")
    return value


def _section(raw: dict, name: str, cls):
    body = raw.get(name, {})
    names = [f.name for f in dataclasses.fields(cls)]
    return _check_keys(body, names, name)


def _parse_model(raw: dict) -> ModelSection:
    body = _section(raw, "model", ModelSection)
    if "layers" not in body:
        raise ConfigError("model.layers", "missing required key")
    if not isinstance(body["layers"], list) or not body["layers"]:
        raise ConfigError("model.layers", "expected a non-empty list")
    layers = []
    for i, spec in enumerate(body["layers"]):
        where = f"model.layers[{i}]"
        _check_keys(spec, ("name", "d_in", "d_out", "nonlinearity"), where)
        for key in ("name", "d_in", "d_out"):
            if key not in spec:
                raise ConfigError(f"{where}.{key}", "missing required key")
        if not isinstance(spec["name"], str):
            raise ConfigError(f"{where}.name", "expected a string")
        layers.append(
            LayerSpec(
                spec["name"],
                _int(spec["d_in"], f"{where}.d_in", 1),
                _int(spec["d_out"], f"{where}.d_out", 1),
                _choice(spec.get("nonlinearity", "none"), f"{where}.nonlinearity",
                        ("relu", "tanh", "none")),
            )
        )
    task = _choice(body.get("task", "classify"), "model.task", ("classify", "lm"))
    window = body.get("context_window")
    vocab = body.get("vocab")
    if task == "lm":
        if window is None:
            raise ConfigError("model.context_window", "required for lm tasks")
        if vocab is None:
            raise ConfigError("model.vocab", "required for lm tasks")
        _int(window, "model.context_window", 1)
        _int(vocab, "model.vocab", 2)
        if layers[0].d_in != window * vocab:
            raise ConfigError(
                "model.layers[0].d_in", f"must equal context_window * vocab = {window * vocab}"
            )
    try:
        Network(tuple(layers))
    except ValueError as exc:
        raise ConfigError("model.layers", str(exc)) from exc
    return ModelSection(tuple(layers), task, window, vocab)


def _parse_train(raw: dict) -> TrainSection:
    body = _section(raw, "train", TrainSection)
    d = TrainSection()
    return TrainSection(
        epochs=_int(body.get("epochs", d.epochs), "train.epochs", 0),
        lr=_float(body.get("lr", d.lr), "train.lr", 0.0),
        batch=_int(body.get("batch", d.batch), "train.batch", 1),
        seed=_int(body.get("seed", d.seed), "train.seed", 0),
    )


def _parse_unlearn(raw: dict, layer_names) -> UnlearnSection:
    body = _section(raw, "unlearn", UnlearnSection)
    d = UnlearnSection()
    fisher = body.get("fisher_mode", d.fisher_mode)
    if fisher is not None:
        _choice(fisher, "unlearn.fisher_mode", ("exact_enumeration", "monte_carlo"))
    targets = body.get("target_layers", d.target_layers)
    if targets is not None:
        if not isinstance(targets, list) or not targets:
            raise ConfigError("unlearn.target_layers", "expected a non-empty list of names")
        for t in targets:
            if t not in layer_names:
                raise ConfigError("unlearn.target_layers", f"unknown layer {t!r}")
        targets = tuple(targets)
    refit = body.get("refit_every_step", d.refit_every_step)
    if not isinstance(refit, bool):
        raise ConfigError("unlearn.refit_every_step", "expected true or false")
    return UnlearnSection(
        estimator=_choice(
            body.get("estimator", d.estimator), "unlearn.estimator",
            [k.value for k in EstimatorKind],
        ),
        fisher_mode=fisher,
        mc_samples=_int(body.get("mc_samples", d.mc_samples), "unlearn.mc_samples", 1),
        steps=_int(body.get("steps", d.steps), "unlearn.steps", 1),
        step_size=_float(body.get("step_size", d.step_size), "unlearn.step_size", 0.0),
        damping=_float(body.get("damping", d.damping), "unlearn.damping", 0.0),
        loss=_choice(body.get("loss", d.loss), "unlearn.loss", ("cross_entropy", "margin")),
        target_layers=targets,
        refit_every_step=refit,
        seed=_int(body.get("seed", d.seed), "unlearn.seed", 0),
    )


def _parse_eval(raw: dict) -> EvalSection:
    body = _section(raw, "eval", EvalSection)
    d = EvalSection()
    return EvalSection(
        bootstrap_n=_int(body.get("bootstrap_n", d.bootstrap_n), "eval.bootstrap_n", 1),
        ks_mode=_choice(body.get("ks_mode", d.ks_mode), "eval.ks_mode", ("asymptotic",)),
    )


def _parse_paths(raw: dict, base: Path) -> PathsSection:
    body = _section(raw, "paths", PathsSection)
    out = {}
    for f in dataclasses.fields(PathsSection):
        value = body.get(f.name)
        if value is None:
            out[f.name] = None
            continue
        if not isinstance(value, str):
            raise ConfigError(f"paths.{f.name}", "expected a path string")
        path = Path(value)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"paths.{f.name}", f"path does not exist: {path}")
        out[f.name] = path
    return PathsSection(**out)


def parse_config(raw: Any, base_dir: str | Path = ".") -> RunConfig:
    _check_keys(raw, ("model", "train", "unlearn", "eval", "paths"), "")
    model = _parse_model(raw)
    return RunConfig(
        model=model,
        train=_parse_train(raw),
        unlearn=_parse_unlearn(raw, [l.name for l in model.layers]),
        eval=_parse_eval(raw),
        paths=_parse_paths(raw, Path(base_dir)),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return parse_config(raw, path.parent)
