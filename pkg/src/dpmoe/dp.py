"""DP-SGD mechanics: per-sample clipping, Gaussian noise, AdamW."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .accountant import PrivacySpec
from .errors import ParameterError
from .model import SwitchConfig, cross_entropy, frozen_names, param_names
from .per_sample import PerSampleGradSet, compute_per_sample, private_config
from .tensor import RngState, gaussian, stream_id

NORM_QUANTILES = (0.1, 0.5, 0.9)
CLIP_MODES = ("global", "per_layer")


@dataclass
class ClipConfig:
    mode: str = "global"
    clip_norm: float = 1.0
    budgets: dict[str, float] | None = None

    def __post_init__(self):
        if self.mode not in CLIP_MODES:
            raise ParameterError(f"clip mode must be one of {CLIP_MODES}")
        if not self.clip_norm > 0:
            raise ParameterError("clip_norm must be positive")

    def layer_budgets(self, names) -> dict[str, float]:
        """Per-group budgets with sum of squares equal to clip_norm**2 (uniform by default)."""
        names = list(names)
        if self.budgets is None:
            c = self.clip_norm / math.sqrt(len(names))
            return {n: c for n in names}
        missing = [n for n in names if n not in self.budgets]
        if missing:
            raise ParameterError(f"no clipping budget for {missing}")
        budgets = {n: float(self.budgets[n]) for n in names}
        if min(budgets.values()) <= 0:
            raise ParameterError("clipping budgets must be positive")
        total = sum(c * c for c in budgets.values())
        if abs(total - self.clip_norm**2) > 1e-12 * max(1.0, self.clip_norm**2):
            raise ParameterError(f"budgets square-sum to {total}, expected {self.clip_norm**2}")
        return budgets


def clip_scales(norms, clip_norm):
    """min(1, C / norm), with zero-norm samples left unscaled."""
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(norms > clip_norm, clip_norm / np.where(norms > 0, norms, 1.0), 1.0)


def total_norms(sq_norms: dict[str, np.ndarray], names) -> np.ndarray:
    """Per-sample norms from per-parameter squared norms, summed in ``names`` order."""
    names = list(names)
    total = np.zeros_like(sq_norms[names[0]])
    for n in names:
        total = total + sq_norms[n]
    return np.sqrt(total)


def scaled_sum(g: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return np.tensordot(scales, g, axes=(0, 0))


def clip_global(gset: PerSampleGradSet, clip_norm: float):
    """Clip each sample's full gradient to L2 norm ``clip_norm`` and sum.

    Returns ``(clipped_sum, norms)`` with the pre-clip per-sample norms.
    """
    if not clip_norm > 0:
        raise ParameterError("clip_norm must be positive")
    norms = total_norms(gset.sq_norms(), gset.names())
    scales = clip_scales(norms, clip_norm)
    return {n: scaled_sum(g, scales) for n, g in gset.grads.items()}, norms


def clip_per_layer(gset: PerSampleGradSet, budgets: dict[str, float]):
    """Clip each parameter group of each sample to its own budget and sum."""
    missing = [n for n in gset.names() if n not in budgets]
    if missing:
        raise ParameterError(f"no clipping budget for {missing}")
    sq = gset.sq_norms()
    return {n: scaled_sum(g, clip_scales(np.sqrt(sq[n]), budgets[n])) for n, g in gset.grads.items()}


def noise_stream(rng: RngState, name: str) -> RngState:
    """The dedicated noise stream of one parameter for one step."""
    return rng.child(stream_id(name))


def noisy_mean(clipped_sum: dict, sigma: float, clip_norm: float, denom: float, rng: RngState,
               skip=()) -> dict:
    """(clipped_sum + N(0, sigma^2 C^2 I)) / denom, one noise stream per parameter."""
    if not denom > 0:
        raise ParameterError("denominator must be positive")
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    out = {}
    for name, s in clipped_sum.items():
        if name in skip:
            continue
        noise = gaussian(s.shape, noise_stream(rng, name), sigma * clip_norm)
        out[name] = (s + noise) / denom
    return out


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps")}


def adamw_step(params: dict, grads: dict, state: OptState, frozen=()):
    """One AdamW update; returns new ``(params, state)`` and leaves inputs intact.

    Only parameters present in ``grads`` and not in ``frozen`` move. Weight
    decay is decoupled: theta <- theta - lr*wd*theta before the Adam step.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1 - b1**t
    bc2 = 1 - b2**t
    new_params = dict(params)
    m_new = dict(state.m)
    v_new = dict(state.v)
    for name, g in grads.items():
        if name in frozen:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ParameterError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        p = p - state.lr * state.weight_decay * p
        p = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = p
        m_new[name] = m
        v_new[name] = v
    st = OptState(m_new, v_new, t, **state.hyper())
    return new_params, st


@dataclass
class StepMetrics:
    step: int
    batch_size: int
    loss: float | None
    accuracy: float | None
    norm_quantiles: dict[str, float] | None
    clip_fraction: float | None
    drops: int
    padding_materialized: int
    padding_touched: int
    expert_load: list

    @property
    def padding_overhead(self) -> int:
        return self.padding_materialized - self.padding_touched

    def to_dict(self) -> dict:
        d = asdict(self)
        d["padding_overhead"] = self.padding_overhead
        return d


def quantile_summary(values) -> dict[str, float] | None:
    values = np.asarray(values)
    if values.size == 0:
        return None
    qs = np.quantile(values, NORM_QUANTILES)
    return {f"p{int(round(100 * q))}": float(v) for q, v in zip(NORM_QUANTILES, qs)}


def dp_step(batch, params: dict, cfg: SwitchConfig, privacy: PrivacySpec, state: OptState, rng: RngState,
            clip: ClipConfig | None = None, strategy: str = "reindex", step: int | None = None):
    """One DP-AdamW step on a Poisson-sampled ``batch = (tokens, labels)``.

    The noisy gradient divides by the expected batch size ``q * dataset_size``.
    ``rng`` is the noise state for this step; each parameter draws from its
    own child stream. Returns ``(params, state, StepMetrics)``.
    """
    if privacy.sigma is None:
        raise ParameterError("privacy spec has no noise multiplier; calibrate first")
    clip = clip or ClipConfig("global", privacy.clip_norm)
    if clip.clip_norm != privacy.clip_norm:
        raise ParameterError("clip config and privacy spec disagree on the clipping norm")
    cfg = private_config(cfg)
    tokens, labels = batch
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, cfg.max_tokens)
    labels = np.asarray(labels, dtype=np.int64)
    gset, trace, pstats = compute_per_sample(tokens, labels, params, cfg, strategy)
    names = param_names(cfg)
    B = gset.num_samples
    if clip.mode == "global":
        clipped, norms = clip_global(gset, clip.clip_norm)
        clip_fraction = float((norms > clip.clip_norm).mean()) if B else None
    else:
        budgets = clip.layer_budgets(names)
        clipped = clip_per_layer(gset, budgets)
        norms = total_norms(gset.sq_norms(), names)
        sq = gset.sq_norms()
        hit = np.zeros(B, dtype=bool)
        for n in names:
            hit |= np.sqrt(sq[n]) > budgets[n]
        clip_fraction = float(hit.mean()) if B else None
    frozen = frozen_names(cfg)
    noisy = noisy_mean(clipped, privacy.sigma, clip.clip_norm, privacy.expected_batch_size(), rng, skip=frozen)
    new_params, new_state = adamw_step(params, noisy, state, frozen)
    if trace is not None:
        loss, _ = cross_entropy(trace.logits, labels, "mean")
        acc = float((trace.logits.argmax(axis=1) == labels).mean())
        drops, load = trace.num_dropped, trace.expert_load()
    else:
        loss, acc, drops, load = None, None, 0, [[0] * cfg.num_experts for _ in range(cfg.num_layers)]
    metrics = StepMetrics(
        step=new_state.step if step is None else step,
        batch_size=B,
        loss=loss,
        accuracy=acc,
        norm_quantiles=quantile_summary(norms),
        clip_fraction=clip_fraction,
        drops=drops,
        padding_materialized=pstats.materialized,
        padding_touched=pstats.touched,
        expert_load=load,
    )
    return new_params, new_state, metrics
