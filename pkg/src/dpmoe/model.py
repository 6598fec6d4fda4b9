"""Switch-style MoE classifier with explicit forward and backward passes.

Architecture: token embedding -> ``num_layers`` switch blocks with residual
connections -> mean pool over positions -> linear classifier. Every switch
block routes each token to its top-1 expert (a two-layer ReLU FFN) and scales
the expert output by that expert's routing probability.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import InvariantError, ParameterError, ShapeError
from .tensor import DTYPE, RngState, gaussian, log_softmax, matmul, softmax

LB_MODES = ("batch", "off")


@dataclass
class SwitchConfig:
    num_experts: int = 4
    capacity_factor: float = 1.25
    alpha: float = 0.01
    lb_mode: str = "batch"
    freeze_gating: bool = False
    hidden: int = 16
    ffn_dim: int = 32
    num_layers: int = 1
    vocab: int = 16
    classes: int = 2
    max_tokens: int = 8

    def __post_init__(self):
        for name in ("num_experts", "hidden", "ffn_dim", "vocab", "classes", "max_tokens"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ParameterError("num_layers must be non-negative")
        if self.capacity_factor < 1:
            raise ParameterError("capacity_factor must be >= 1")
        if self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if self.lb_mode not in LB_MODES:
            raise ParameterError(f"lb_mode must be one of {LB_MODES}")

    def capacity(self, batch_size: int) -> int:
        """Slots per expert for a batch: ceil(capacity_factor * B * T / N), at least 1."""
        return max(1, math.ceil(self.capacity_factor * batch_size * self.max_tokens / self.num_experts))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# parameter naming

def gate_name(layer: int) -> str:
    return f"layer{layer}.gate"


def expert_name(layer: int, expert: int, which: str) -> str:
    return f"layer{layer}.expert{expert}.{which}"


def param_names(cfg: SwitchConfig) -> list[str]:
    """Canonical parameter order; every reduction over parameters follows it."""
    names = ["embedding"]
    for l in range(cfg.num_layers):
        names.append(gate_name(l))
        for e in range(cfg.num_experts):
            names.append(expert_name(l, e, "w1"))
            names.append(expert_name(l, e, "w2"))
    names.append("classifier")
    return names


def param_shapes(cfg: SwitchConfig) -> dict[str, tuple[int, ...]]:
    H, F = cfg.hidden, cfg.ffn_dim
    shapes = {"embedding": (cfg.vocab, H)}
    for l in range(cfg.num_layers):
        shapes[gate_name(l)] = (cfg.num_experts, H)
        for e in range(cfg.num_experts):
            shapes[expert_name(l, e, "w1")] = (F, H)
            shapes[expert_name(l, e, "w2")] = (H, F)
    shapes["classifier"] = (cfg.classes, H)
    return {n: shapes[n] for n in param_names(cfg)}


def is_gate(name: str) -> bool:
    return name.endswith(".gate")


def is_expert(name: str) -> bool:
    return ".expert" in name


def frozen_names(cfg: SwitchConfig) -> set[str]:
    if not cfg.freeze_gating:
        return set()
    return {gate_name(l) for l in range(cfg.num_layers)}


def init_params(cfg: SwitchConfig, rng: RngState) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        fan_in = shape[1]
        std = 1.0 if name == "embedding" else 1.0 / math.sqrt(fan_in)
        params[name] = gaussian(shape, rng, std)
    return params


def check_params(params, cfg: SwitchConfig):
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ShapeError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")


# gating and routing

@dataclass
class GateOutput:
    logits: np.ndarray  # [B, T, N]
    probs: np.ndarray  # [B, T, N]
    top: np.ndarray  # [B, T] int64, lowest index wins ties


def gate_forward(x, w_gate) -> GateOutput:
    if x.ndim != 3 or w_gate.ndim != 2 or x.shape[-1] != w_gate.shape[1]:
        raise ShapeError(f"gate shapes do not match: x {x.shape}, W_g {w_gate.shape}")
    logits = matmul(x, w_gate.T)
    probs = softmax(logits)
    top = np.argmax(logits, axis=-1).astype(np.int64)
    return GateOutput(logits, probs, top)


@dataclass
class RoutingTable:
    """Compact form of the binary table G[e, b, t, c].

    ``slot[b, t]`` is the slot held by token (b, t) inside expert
    ``expert[b, t]`` or -1 if the token was dropped. ``slot_token[e, c]`` is
    the flat token index ``b * T + t`` occupying slot c of expert e, or -1.
    Slots of each expert are filled densely from 0, so the occupied slots of
    expert e are exactly ``0 .. occupancy[e] - 1``.
    """

    num_experts: int
    num_samples: int
    num_tokens: int
    capacity: int
    expert: np.ndarray  # [B, T]
    slot: np.ndarray  # [B, T]
    slot_token: np.ndarray  # [E, C]
    occupancy: np.ndarray  # [E]

    @property
    def dropped(self) -> np.ndarray:
        return self.slot < 0

    @property
    def num_dropped(self) -> int:
        return int(self.dropped.sum())

    def per_sample_counts(self) -> np.ndarray:
        """C_b^e as an array [B, E]: tokens of sample b placed in expert e."""
        counts = np.zeros((self.num_samples, self.num_experts), dtype=np.int64)
        b, t = np.nonzero(~self.dropped)
        np.add.at(counts, (b, self.expert[b, t]), 1)
        return counts

    def tokens_of(self, e: int) -> np.ndarray:
        """Flat token indices in slot order for the occupied slots of expert e."""
        return self.slot_token[e, : self.occupancy[e]]

    def slot_owner(self, e: int, full: bool = False) -> np.ndarray:
        """Origin sample per slot of expert e (-1 for empty slots when ``full``)."""
        toks = self.slot_token[e] if full else self.tokens_of(e)
        return np.where(toks >= 0, toks // self.num_tokens, -1)

    def dense(self) -> np.ndarray:
        E, B, T, C = self.num_experts, self.num_samples, self.num_tokens, self.capacity
        g = np.zeros((E, B, T, C), dtype=np.int8)
        b, t = np.nonzero(~self.dropped)
        g[self.expert[b, t], b, t, self.slot[b, t]] = 1
        return g

    def check(self):
        E, B, T, C = self.num_experts, self.num_samples, self.num_tokens, self.capacity
        if self.slot_token.shape != (E, C) or self.slot.shape != (B, T):
            raise InvariantError("routing table extents are inconsistent")
        seen = 0
        for e in range(E):
            occ = int(self.occupancy[e])
            toks = self.slot_token[e]
            if (toks[:occ] < 0).any() or (toks[occ:] >= 0).any():
                raise InvariantError(f"expert {e}: slots are not densely filled")
            b, t = np.divmod(toks[:occ], T)
            if (self.expert[b, t] != e).any() or (self.slot[b, t] != np.arange(occ)).any():
                raise InvariantError(f"expert {e}: slot/token maps disagree")
            seen += occ
        if seen + self.num_dropped != B * T:
            raise InvariantError("occupied slots plus drops do not cover the batch")


def route(gate: GateOutput, capacity: int) -> RoutingTable:
    """FCFS placement in ascending (b, t) order; tokens beyond capacity are dropped."""
    if capacity < 1:
        raise ParameterError("capacity must be >= 1")
    B, T, N = gate.probs.shape
    slot, counts, slot_token = kernels.fcfs_assign(gate.top.reshape(-1), N, capacity)
    return RoutingTable(N, B, T, int(capacity), gate.top.copy(), slot.reshape(B, T), slot_token, counts)


# experts

def expert_forward(w1, w2, x_slots):
    a = x_slots @ w1.T
    r = np.maximum(a, 0.0)
    y = r @ w2.T
    return a, r, y


def expert_backward(w1, w2, x_slots, a, r, dy):
    """Gradients through one expert for its occupied slots.

    Returns ``(da, dx, dw1, dw2)`` where ``da`` is the gradient at the first
    linear layer's output and ``dy`` the one at the second's.
    """
    dw2 = dy.T @ r
    da = (dy @ w2) * (a > 0)
    dw1 = da.T @ x_slots
    dx = da @ w1
    return da, dx, dw1, dw2


@dataclass
class ExpertTrace:
    x: np.ndarray  # [occ, H] slot inputs
    a: np.ndarray  # [occ, F] pre-activation
    r: np.ndarray  # [occ, F]
    y: np.ndarray  # [occ, H] expert output before gate scaling


def _switch(x, experts, table: RoutingTable, gate: GateOutput):
    B, T, H = x.shape
    if gate.top.shape != (B, T) or table.slot.shape != (B, T):
        raise InvariantError("routing table does not match the layer input")
    if not np.array_equal(table.expert, gate.top):
        raise InvariantError("routing table was built from a different gate output")
    xf = x.reshape(B * T, H)
    pf = gate.probs.reshape(B * T, -1)
    out = np.zeros_like(xf)
    traces = []
    for e, (w1, w2) in enumerate(experts):
        toks = table.tokens_of(e)
        xs = xf[toks]
        a, r, y = expert_forward(w1, w2, xs)
        out[toks] = pf[toks, e][:, None] * y
        traces.append(ExpertTrace(xs, a, r, y))
    return out.reshape(B, T, H), traces


def switch_forward(x, experts, table: RoutingTable, gate: GateOutput) -> np.ndarray:
    """Switch layer output p_e(x) * E_e(x) per routed token, zero for drops.

    ``experts`` is a sequence of ``(W1, W2)`` pairs. The residual is added by
    the caller.
    """
    return _switch(x, experts, table, gate)[0]


def layer_experts(params, layer: int, num_experts: int):
    return [(params[expert_name(layer, e, "w1")], params[expert_name(layer, e, "w2")]) for e in range(num_experts)]


# load balancing

def balance_fractions(gate: GateOutput, n_tokens: int):
    """(f, P): argmax fraction and mean router probability per expert."""
    if n_tokens <= 0:
        raise ParameterError("balance loss needs at least one token")
    N = gate.probs.shape[-1]
    f = np.bincount(gate.top.reshape(-1), minlength=N) / n_tokens
    P = gate.probs.reshape(-1, N).sum(axis=0) / n_tokens
    return f, P


def balance_loss(gate: GateOutput, table: RoutingTable | None, alpha: float, num_experts: int,
                 n_tokens: int) -> float:
    """alpha * N * sum_i f_i * P_i, with f counting argmax choices (drops included)."""
    f, P = balance_fractions(gate, n_tokens)
    return float(alpha * num_experts * np.dot(f, P))


# whole model

@dataclass
class LayerTrace:
    x: np.ndarray
    gate: GateOutput
    table: RoutingTable
    experts: list[ExpertTrace]


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    capacity: int
    h0: np.ndarray
    layers: list[LayerTrace]
    pooled: np.ndarray
    logits: np.ndarray

    @property
    def num_dropped(self) -> int:
        return sum(lt.table.num_dropped for lt in self.layers)

    def expert_load(self) -> list[list[int]]:
        return [lt.table.occupancy.tolist() for lt in self.layers]


def model_forward(tokens, params, cfg: SwitchConfig, capacity: int | None = None):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be [B, T], got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ParameterError(f"token id outside vocabulary [0, {cfg.vocab})")
    B, T = tokens.shape
    if capacity is None:
        capacity = cfg.capacity(B)
    h = params["embedding"][tokens]
    h0 = h
    layers = []
    for l in range(cfg.num_layers):
        gate = gate_forward(h, params[gate_name(l)])
        table = route(gate, capacity)
        out, ex = _switch(h, layer_experts(params, l, cfg.num_experts), table, gate)
        layers.append(LayerTrace(h, gate, table, ex))
        h = h + out
    pooled = h.mean(axis=1)
    logits = pooled @ params["classifier"].T
    return logits, ForwardTrace(tokens, capacity, h0, layers, pooled, logits)


def cross_entropy(logits, labels, reduction: str = "mean"):
    """Loss and its gradient w.r.t. the logits (``mean`` or ``sum`` over samples)."""
    labels = np.asarray(labels, dtype=np.int64)
    B = logits.shape[0]
    lsm = log_softmax(logits)
    per = -lsm[np.arange(B), labels]
    grad = np.exp(lsm)
    grad[np.arange(B), labels] -= 1.0
    if reduction == "sum":
        return float(per.sum()), grad
    if reduction == "mean":
        return float(per.mean()) if B else 0.0, grad / max(B, 1)
    if reduction == "none":
        return per, grad
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class LossBundle:
    task: float
    balance: float

    @property
    def total(self) -> float:
        return self.task + self.balance


def losses(trace: ForwardTrace, labels, cfg: SwitchConfig, reduction: str = "mean") -> LossBundle:
    task, _ = cross_entropy(trace.logits, labels, reduction)
    bal = 0.0
    if cfg.lb_mode == "batch":
        n = trace.tokens.size
        for lt in trace.layers:
            bal += balance_loss(lt.gate, lt.table, cfg.alpha, cfg.num_experts, n)
    return LossBundle(task, bal)


@dataclass
class ExpertBackTrace:
    dy: np.ndarray  # [occ, H] gradient at W2 output
    da: np.ndarray  # [occ, F] gradient at W1 output


@dataclass
class LayerBackTrace:
    d_gate_logits: np.ndarray  # [B, T, N]
    experts: list[ExpertBackTrace]


@dataclass
class BackwardTrace:
    d_logits: np.ndarray  # [B, K]
    d_h0: np.ndarray  # [B, T, H]
    layers: list[LayerBackTrace] = field(default_factory=list)


def model_backward(trace: ForwardTrace, d_logits, params, cfg: SwitchConfig):
    """Reverse pass for the objective whose logit gradient is ``d_logits``.

    The load-balancing term is added when ``cfg.lb_mode == "batch"``. The
    routing decision is treated as fixed; gradient reaches the gate only
    through the probability that scales each expert output (and through the
    balance loss). Gate gradients are zeroed afterwards when gating is frozen.
    """
    d_logits = np.asarray(d_logits, dtype=DTYPE)
    B, T = trace.tokens.shape
    if d_logits.shape != trace.logits.shape:
        raise ShapeError(f"d_logits {d_logits.shape} does not match logits {trace.logits.shape}")
    if len(trace.layers) != cfg.num_layers:
        raise ShapeError("trace was produced with a different number of layers")
    H = cfg.hidden
    N = cfg.num_experts
    grads = {}
    grads["classifier"] = d_logits.T @ trace.pooled
    d_pooled = d_logits @ params["classifier"]
    dh = np.broadcast_to(d_pooled[:, None, :] / T, (B, T, H)).copy()
    back_layers = []
    for l in reversed(range(cfg.num_layers)):
        lt = trace.layers[l]
        table = lt.table
        dout = dh.reshape(B * T, H)
        dx = dout.copy()  # residual path
        pf = lt.gate.probs.reshape(B * T, N)
        xf = lt.x.reshape(B * T, H)
        dp = np.zeros(B * T)
        ebt = []
        for e in range(N):
            w1 = params[expert_name(l, e, "w1")]
            w2 = params[expert_name(l, e, "w2")]
            et = lt.experts[e]
            toks = table.tokens_of(e)
            p = pf[toks, e]
            dy = p[:, None] * dout[toks]
            dp[toks] = np.einsum("ch,ch->c", dout[toks], et.y)
            da, dxe, dw1, dw2 = expert_backward(w1, w2, et.x, et.a, et.r, dy)
            dx[toks] += dxe
            grads[expert_name(l, e, "w1")] = dw1
            grads[expert_name(l, e, "w2")] = dw2
            ebt.append(ExpertBackTrace(dy, da))
        # d p_e / d logits_j = p_e (delta_ej - p_j), only for routed tokens
        routed = ~table.dropped.reshape(-1)
        top = table.expert.reshape(-1)
        p_top = pf[np.arange(B * T), top]
        coef = np.where(routed, p_top * dp, 0.0)
        dl = -coef[:, None] * pf
        dl[np.arange(B * T), top] += coef
        if cfg.lb_mode == "batch" and cfg.alpha > 0:
            f, _ = balance_fractions(lt.gate, B * T)
            c = cfg.alpha * N * f / (B * T)
            dl += pf * (c[None, :] - (pf @ c)[:, None])
        w_gate = params[gate_name(l)]
        g_gate = dl.T @ xf
        if cfg.freeze_gating:
            g_gate = np.zeros_like(g_gate)
        grads[gate_name(l)] = g_gate
        dx += dl @ w_gate
        back_layers.append(LayerBackTrace(dl.reshape(B, T, N), ebt))
        dh = dx.reshape(B, T, H)
    back_layers.reverse()
    g_emb = np.zeros_like(params["embedding"])
    np.add.at(g_emb, trace.tokens.reshape(-1), dh.reshape(B * T, H))
    grads["embedding"] = g_emb
    grads = {n: grads[n] for n in param_names(cfg)}
    return grads, BackwardTrace(d_logits, dh, back_layers)


def loss_and_grads(tokens, labels, params, cfg: SwitchConfig, reduction: str = "mean"):
    """Forward, losses and batch gradients of ``task + balance`` in one call."""
    logits, trace = model_forward(tokens, params, cfg)
    bundle = losses(trace, labels, cfg, reduction)
    _, d_logits = cross_entropy(logits, labels, reduction)
    grads, _ = model_backward(trace, d_logits, params, cfg)
    return bundle, grads, trace
