"""Run configuration, training loops (non-private and DP), evaluation."""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .accountant import PrivacySpec, calibrate_sigma, rdp_subsampled_gaussian, rdp_to_dp
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticTask, generate_dataset
from .dp import ClipConfig, OptState, adamw_step, dp_step
from .errors import ConfigError, ParameterError
from .model import SwitchConfig, check_params, cross_entropy, init_params, loss_and_grads, model_forward
from .parallel import Cluster
from .tensor import RngState

SCHEMA_VERSION = 1
MODES = ("nonprivate", "dp")

# Defaults for the two modes; model, task and sizes are shared.
MODE_DEFAULTS = {
    "nonprivate": {"batch_size": 32, "epochs": 3, "lr": 1e-4, "weight_decay": 0.01, "lb_mode": "batch"},
    "dp": {"batch_size": 1024, "epochs": 20, "lr": 5e-4, "weight_decay": 0.01, "lb_mode": "off"},
}

# Keys a metrics record may carry; anything else is rejected so no per-sample
# quantity can slip into the stream.
METRIC_KEYS = {
    "v": int, "step": int, "mode": str, "batch_size": int, "loss": (float, type(None)),
    "accuracy": (float, type(None)), "balance_loss": float, "epsilon": float, "clip_fraction": (float, type(None)),
    "norm_quantiles": (dict, type(None)), "expert_load": list, "drops": int, "padding_overhead": int,
    "padding_materialized": int, "padding_touched": int, "val_accuracy": float, "val_loss": float,
    "messages": dict,
}
QUANTILE_KEYS = {"p10", "p50", "p90"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    mode: str = "nonprivate"
    model: SwitchConfig = field(default_factory=SwitchConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: float = 3
    max_steps: int | None = None
    batch_size: int = 32
    sample_rate: float | None = None
    sampling: str = "poisson"
    epsilon: float = 8.0
    delta: float | None = None
    sigma: float | None = None
    clip_norm: float = 1.0
    clip_mode: str = "global"
    clip_budgets: dict | None = None
    strategy: str = "reindex"
    devices: int = 1
    eval_every: int = 0
    eval_batch_size: int = 1024
    seeds: dict = field(default_factory=lambda: {"data": 0, "init": 1, "noise": 2, "sampling": 3})
    output_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.mode == "dp" and self.model.lb_mode != "off":
            raise ConfigError("dp mode requires lb_mode='off': the balance loss has no per-sample form")
        if self.model.vocab != self.task.vocab or self.model.max_tokens != self.task.length:
            raise ConfigError("task vocab/length must match the model's vocab/max_tokens")
        if self.task.task and self.model.classes < 2:
            raise ConfigError("binary tasks need at least 2 classes")
        for key in ("data", "init", "noise", "sampling"):
            if key not in self.seeds:
                raise ConfigError(f"seed {key!r} must be given explicitly")
        if self.strategy not in ("padded", "reindex"):
            raise ConfigError("strategy must be 'padded' or 'reindex'")
        if self.sampling not in ("poisson", "fixed"):
            raise ConfigError("sampling must be 'poisson' or 'fixed'")
        if self.devices < 1 or self.model.num_experts % self.devices:
            raise ConfigError("devices must divide the number of experts")
        if self.devices > 1 and self.mode != "dp":
            raise ConfigError("the expert-parallel simulator is only wired into dp mode")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        ClipConfig(self.clip_mode, self.clip_norm, self.clip_budgets)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        mode = d.get("mode", "nonprivate")
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        defaults = MODE_DEFAULTS[mode]
        model_d = dict(d.pop("model", {}))
        model_d.setdefault("lb_mode", defaults["lb_mode"])
        task_d = dict(d.pop("task", {}))
        task_d.setdefault("vocab", model_d.get("vocab", SwitchConfig.vocab))
        task_d.setdefault("length", model_d.get("max_tokens", SwitchConfig.max_tokens))
        for k in ("batch_size", "epochs", "lr", "weight_decay"):
            d.setdefault(k, defaults[k])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = SwitchConfig(**model_d)
            task = SyntheticTask(**task_d)
        except (TypeError, ParameterError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(model=model, task=task, **d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def opt_hyper(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.adam_eps}


def validate_metrics(rec: dict, num_layers: int, num_experts: int) -> dict:
    for k, v in rec.items():
        if k not in METRIC_KEYS:
            raise ValueError(f"metric {k!r} is not part of the schema")
        if not isinstance(v, METRIC_KEYS[k]) or isinstance(v, bool):
            raise ValueError(f"metric {k!r} has type {type(v).__name__}")
    nq = rec.get("norm_quantiles")
    if nq is not None and set(nq) != QUANTILE_KEYS:
        raise ValueError("norm_quantiles must hold exactly the declared quantiles")
    load = rec.get("expert_load")
    if load is not None and (len(load) != num_layers or any(len(row) != num_experts for row in load)):
        raise ValueError("expert_load must be [layers][experts]")
    return rec


def evaluate(params: dict, cfg: SwitchConfig, data: Dataset, batch_size: int = 1024):
    """Forward-only accuracy and mean cross-entropy over ``data``."""
    check_params(params, cfg)
    if data.tokens.shape[1] != cfg.max_tokens:
        raise ConfigError(f"data has length {data.tokens.shape[1]}, model expects {cfg.max_tokens}")
    correct = 0
    total_loss = 0.0
    n = len(data)
    for s in range(0, n, batch_size):
        tok = data.tokens[s:s + batch_size]
        lab = data.labels[s:s + batch_size]
        logits, _ = model_forward(tok, params, cfg)
        loss, _ = cross_entropy(logits, lab, "sum")
        total_loss += loss
        correct += int((logits.argmax(axis=1) == lab).sum())
    return correct / n, total_loss / n


def evaluate_checkpoint(checkpoint, data_path):
    params, meta = load_checkpoint(checkpoint)
    if "model" not in meta:
        raise ConfigError("checkpoint manifest has no model configuration")
    cfg = SwitchConfig.from_dict(meta["model"])
    try:
        check_params(params, cfg)
    except Exception as exc:
        raise ConfigError(f"checkpoint does not match its model config: {exc}") from exc
    data = Dataset.load(data_path)
    return evaluate(params, cfg, data)


@dataclass
class TrainResult:
    params: dict
    metrics: list[dict]
    summary: dict
    paths: dict = field(default_factory=dict)


class _Writer:
    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, rec):
        if self.fh:
            self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def _check_finite(loss, step):
    if loss is not None and not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at step {step}; lower the learning rate")


def train(config: RunConfig, log=None) -> TrainResult:
    """Run one training job; writes metrics, checkpoint and summary if ``output_dir`` is set."""
    cfg = config.model
    seeds = config.seeds
    train_set, val_set = generate_dataset(config.task, seeds["data"])
    params = init_params(cfg, RngState(seeds["init"], 0))
    out = Path(config.output_dir) if config.output_dir else None
    paths = {}
    if out:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": out / "metrics.jsonl", "checkpoint": out / "checkpoint.json",
                 "summary": out / "summary.json", "validation": out / "validation.json"}
    writer = _Writer(paths.get("metrics"))
    t0 = time.perf_counter()
    try:
        if config.mode == "nonprivate":
            params, metrics, extra = _train_nonprivate(config, params, train_set, val_set, writer, log)
        else:
            params, metrics, extra = _train_dp(config, params, train_set, val_set, writer, log)
    finally:
        writer.close()
    val_acc, val_loss = evaluate(params, cfg, val_set, config.eval_batch_size)
    summary = {
        "v": SCHEMA_VERSION,
        "mode": config.mode,
        "steps": len(metrics),
        "val_accuracy": val_acc,
        "val_loss": val_loss,
        "train_size": len(train_set),
        "val_size": len(val_set),
        **extra,
    }
    wall = time.perf_counter() - t0
    if out:
        run_cfg = config.to_dict()
        run_cfg.pop("output_dir")  # where a run is written is not part of its state
        save_checkpoint(paths["checkpoint"], params, {"model": cfg.to_dict(), "config": run_cfg})
        val_set.save(paths["validation"])
        paths["summary"].write_text(json.dumps({**summary, "wall_seconds": wall}, indent=2), encoding="utf-8")
    return TrainResult(params, metrics, summary, {k: str(v) for k, v in paths.items()})


def _maybe_eval(config, params, val_set, step, rec):
    if config.eval_every and step % config.eval_every == 0:
        acc, loss = evaluate(params, config.model, val_set, config.eval_batch_size)
        rec["val_accuracy"] = acc
        rec["val_loss"] = loss


def _train_nonprivate(config, params, train_set, val_set, writer, log):
    cfg = config.model
    n = len(train_set)
    bs = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = config.max_steps or math.ceil(config.epochs * steps_per_epoch)
    order_rng = np.random.default_rng(seeds_for(config, "sampling"))
    state = OptState(**config.opt_hyper())
    metrics = []
    step = 0
    while step < total:
        perm = order_rng.permutation(n)
        for s in range(0, n, bs):
            if step >= total:
                break
            idx = perm[s:s + bs]
            tok, lab = train_set.tokens[idx], train_set.labels[idx]
            bundle, grads, trace = loss_and_grads(tok, lab, params, cfg)
            _check_finite(bundle.total, step + 1)
            params, state = adamw_step(params, grads, state)
            step += 1
            rec = {
                "v": SCHEMA_VERSION, "step": step, "mode": "nonprivate", "batch_size": int(len(idx)),
                "loss": bundle.task, "balance_loss": bundle.balance,
                "accuracy": float((trace.logits.argmax(axis=1) == lab).mean()),
                "expert_load": trace.expert_load(), "drops": trace.num_dropped,
            }
            _maybe_eval(config, params, val_set, step, rec)
            validate_metrics(rec, cfg.num_layers, cfg.num_experts)
            writer.write(rec)
            metrics.append(rec)
            if log:
                log(rec)
    return params, metrics, {}


def seeds_for(config, key):
    return int(config.seeds[key])


def dp_schedule(config: RunConfig, n_train: int):
    """(sample_rate, steps) for a dp run: steps = ceil(epochs / q) unless max_steps is set."""
    q = config.sample_rate if config.sample_rate is not None else min(1.0, config.batch_size / n_train)
    if not 0 < q <= 1:
        raise ConfigError("sample_rate must lie in (0, 1]")
    steps = config.max_steps or math.ceil(config.epochs / q)
    return q, steps


def _train_dp(config, params, train_set, val_set, writer, log):
    cfg = config.model
    n = len(train_set)
    q, steps = dp_schedule(config, n)
    delta = config.delta if config.delta is not None else 1.0 / n
    sigma = config.sigma
    if sigma is None:
        sigma = calibrate_sigma(config.epsilon, delta, q, steps)
    privacy = PrivacySpec(epsilon=config.epsilon, delta=delta, sample_rate=q, steps=steps, sigma=sigma,
                          clip_norm=config.clip_norm, dataset_size=n)
    clip = ClipConfig(config.clip_mode, config.clip_norm, config.clip_budgets)
    curve = rdp_subsampled_gaussian(q, sigma) if sigma > 0 else None
    state = OptState(**config.opt_hyper())
    cluster = Cluster(params, cfg, config.devices, config.opt_hyper()) if config.devices > 1 else None
    sample_seed = seeds_for(config, "sampling")
    noise_seed = seeds_for(config, "noise")
    fixed_rng = np.random.default_rng(sample_seed)
    metrics = []
    for step in range(1, steps + 1):
        if config.sampling == "poisson":
            mask = RngState(sample_seed, step).generator.random(n) < q
            idx = np.nonzero(mask)[0]
        else:
            idx = np.sort(fixed_rng.choice(n, size=min(config.batch_size, n), replace=False))
        batch = (train_set.tokens[idx], train_set.labels[idx])
        rng = RngState(noise_seed, step)
        if cluster is None:
            params, state, m = dp_step(batch, params, cfg, privacy, state, rng, clip, config.strategy, step)
            rec = {
                "v": SCHEMA_VERSION, "step": step, "mode": "dp", "batch_size": m.batch_size, "loss": m.loss,
                "accuracy": m.accuracy, "clip_fraction": m.clip_fraction, "norm_quantiles": m.norm_quantiles,
                "expert_load": m.expert_load, "drops": m.drops, "padding_overhead": m.padding_overhead,
                "padding_materialized": m.padding_materialized, "padding_touched": m.padding_touched,
            }
        else:
            info = cluster.step(batch, privacy, rng, clip)
            ms = info["messages"]
            rec = {
                "v": SCHEMA_VERSION, "step": step, "mode": "dp", "batch_size": info["batch_size"],
                "loss": info["loss"], "clip_fraction": info.get("clip_fraction"),
                "norm_quantiles": info.get("norm_quantiles"), "expert_load": ms.expert_load, "drops": ms.drops,
                "messages": {"count": ms.total_messages, "bytes": int(sum(ms.bytes.values()))},
            }
            params = cluster.gather_params()
        _check_finite(rec["loss"], step)
        if curve is not None:
            rec["epsilon"] = rdp_to_dp(curve.scaled(step), delta)[0]
        _maybe_eval(config, params, val_set, step, rec)
        validate_metrics(rec, cfg.num_layers, cfg.num_experts)
        writer.write(rec)
        metrics.append(rec)
        if log:
            log(rec)
    # sigma = 0 gives no privacy; reported as null
    eps = rdp_to_dp(curve.scaled(steps), delta)[0] if curve is not None else None
    extra = {
        "epsilon": eps, "delta": delta, "sigma": sigma, "sample_rate": q, "clip_norm": config.clip_norm,
        "accounting": "rdp-poisson" if config.sampling == "poisson" else "approximate (fixed-size batches)",
    }
    return params, metrics, extra
