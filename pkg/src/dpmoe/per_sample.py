"""Per-sample gradients for the switch classifier.

Dense layers (embedding, gates, classifier) use the standard contraction
``g_b = sum_t dY[b, t]^T X[b, t]``. Expert weights see tokens from many
samples packed into slots, so their per-sample gradients need one of two
strategies:

``padded``
    scatter each expert's slots into a ``[B, max_b C_b, d]`` layout with
    zero padding and apply the dense rule;
``reindex``
    form the per-slot outer products directly on the packed layout and sum
    them into the sample that owns each slot, read off the routing table.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvariantError, ShapeError
from .model import (BackwardTrace, ForwardTrace, RoutingTable, SwitchConfig, cross_entropy, expert_name,
                    gate_name, model_backward, model_forward, param_names, param_shapes)

STRATEGIES = ("padded", "reindex")


def sq_norms(g: np.ndarray) -> np.ndarray:
    """Squared L2 norm of each leading-axis slice."""
    flat = g.reshape(g.shape[0], int(np.prod(g.shape[1:])))
    return np.einsum("bi,bi->b", flat, flat)


@dataclass
class PerSampleGradSet:
    """Per-parameter gradients with a leading sample axis."""

    grads: dict[str, np.ndarray]
    num_samples: int

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def names(self):
        return list(self.grads)

    def summed(self) -> dict[str, np.ndarray]:
        return {n: g.sum(axis=0) for n, g in self.grads.items()}

    def sq_norms(self) -> dict[str, np.ndarray]:
        """Squared L2 norm of each sample's gradient, per parameter: ``{name: [B]}``."""
        return {n: sq_norms(g) for n, g in self.grads.items()}

    def sample(self, b: int) -> dict[str, np.ndarray]:
        return {n: g[b] for n, g in self.grads.items()}


@dataclass
class PaddingStats:
    """Token rows processed per expert: padded layout vs. packed slots."""

    materialized: int = 0
    touched: int = 0
    per_expert: list = field(default_factory=list)  # (layer, expert, B*Cmax, sum_b C_b)

    @property
    def overhead(self) -> int:
        return self.materialized - self.touched


def dense_per_sample(X, dY) -> np.ndarray:
    """``out[b, i, j] = sum_t dY[b, t, i] * X[b, t, j]``."""
    X = np.asarray(X, dtype=np.float64)
    dY = np.asarray(dY, dtype=np.float64)
    if X.ndim != 3 or dY.ndim != 3 or X.shape[:2] != dY.shape[:2]:
        raise ShapeError(f"per-sample contraction needs [B,T,m] and [B,T,n], got {X.shape}, {dY.shape}")
    return np.matmul(dY.transpose(0, 2, 1), X)


def _padded_layout(table: RoutingTable, e: int):
    """slot_map[b, c] = packed slot index of the c-th token of sample b sent to e, or -1."""
    toks = table.tokens_of(e)
    B = table.num_samples
    if toks.size == 0:
        return np.full((B, 0), -1, dtype=np.int64)
    order = np.argsort(toks, kind="stable")  # flat index b*T+t sorts by (b, t)
    owners = toks[order] // table.num_tokens
    counts = np.bincount(owners, minlength=B)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(toks.size) - starts[owners]
    slot_map = np.full((B, int(counts.max())), -1, dtype=np.int64)
    slot_map[owners, rank] = order
    return slot_map


def pad_route(x, table: RoutingTable, e: int, fill: float = 0.0):
    """Gather the tokens routed to expert ``e`` into ``[B, Cmax_e, H]``.

    Positions with no token hold ``fill`` (zero by default). Returns
    ``(x_padded, slot_map)`` where ``slot_map[b, c]`` is the packed slot the
    entry came from (-1 for padding), which is what the backward scatter uses.
    """
    B, T, H = x.shape
    slot_map = _padded_layout(table, e)
    xs = x.reshape(B * T, H)[table.tokens_of(e)]
    return gather_padded(xs, slot_map, fill), slot_map


def gather_padded(slot_values, slot_map, fill: float = 0.0):
    B, cmax = slot_map.shape
    out = np.full((B, cmax, slot_values.shape[-1]), fill, dtype=np.float64)
    live = slot_map >= 0
    out[live] = slot_values[slot_map[live]]
    return out


def padding_overhead(table: RoutingTable, e: int) -> int:
    """Zero rows added by the padded layout: B * max_b C_b^e - sum_b C_b^e."""
    counts = table.per_sample_counts()[:, e]
    return int(table.num_samples * counts.max(initial=0) - counts.sum())


def _masked_contract(Xp, dYp, slot_map):
    mask = (slot_map >= 0)[..., None]
    return dense_per_sample(np.where(mask, Xp, 0.0), np.where(mask, dYp, 0.0))


def expert_per_sample_padded(trace: ForwardTrace, back: BackwardTrace, layer: int, e: int,
                             fill: float = 0.0) -> dict[str, np.ndarray]:
    """Per-sample gradients of expert ``e`` in ``layer`` via the padded layout.

    Returns ``{"w1": [B, F, H], "w2": [B, H, F]}``. ``fill`` only exists to
    check that padding content never leaks into the result.
    """
    lt = trace.layers[layer]
    et = lt.experts[e]
    bt = back.layers[layer].experts[e]
    xp, slot_map = pad_route(lt.x, lt.table, e, fill)
    dap = gather_padded(bt.da, slot_map, fill)
    rp = gather_padded(et.r, slot_map, fill)
    dyp = gather_padded(bt.dy, slot_map, fill)
    return {"w1": _masked_contract(xp, dap, slot_map), "w2": _masked_contract(rp, dyp, slot_map)}


def slot_owners_from_dense(G_e) -> np.ndarray:
    """Origin sample for each slot of a dense ``[B, T, C]`` table slice (-1 if empty)."""
    G_e = np.asarray(G_e)
    per_bc = G_e.sum(axis=1)  # [B, C]
    occupancy = per_bc.sum(axis=0)
    if (occupancy > 1).any():
        bad = np.nonzero(occupancy > 1)[0].tolist()
        raise InvariantError(f"slots {bad} hold more than one token")
    return np.where(occupancy == 1, per_bc.argmax(axis=0), -1).astype(np.int64)


def expert_per_sample_reindex(X_slots, dY_slots, routing, num_samples: int) -> np.ndarray:
    """Regroup per-slot gradients by origin sample.

    ``out[b] = sum over slots c owned by b of outer(dY_slots[c], X_slots[c])``.
    ``routing`` is either the dense table slice ``G[e]`` of shape ``[B, T, C]``
    or an already-resolved vector of slot owners (-1 for empty slots).
    """
    X_slots = np.asarray(X_slots, dtype=np.float64)
    dY_slots = np.asarray(dY_slots, dtype=np.float64)
    routing = np.asarray(routing)
    owner = slot_owners_from_dense(routing) if routing.ndim == 3 else routing.astype(np.int64)
    n = X_slots.shape[0]
    if owner.shape[0] < n:
        raise ShapeError(f"{n} slot rows but routing covers only {owner.shape[0]} slots")
    if (owner[n:] >= 0).any():
        raise InvariantError("routing table marks slots occupied beyond the provided slot rows")
    return kernels.segment_outer_sum(dY_slots, X_slots, owner[:n], num_samples)


def _one_hot(tokens, vocab):
    B, T = tokens.shape
    oh = np.zeros((B, T, vocab))
    oh[np.arange(B)[:, None], np.arange(T)[None, :], tokens] = 1.0
    return oh


def _assemble(trace: ForwardTrace, back: BackwardTrace, cfg: SwitchConfig, strategy: str):
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    B, T = trace.tokens.shape
    out = {}
    stats = PaddingStats()
    emb = dense_per_sample(_one_hot(trace.tokens, cfg.vocab), back.d_h0)  # [B, H, V]
    out["embedding"] = emb.transpose(0, 2, 1)
    for l in range(cfg.num_layers):
        lt = trace.layers[l]
        lb = back.layers[l]
        if cfg.freeze_gating:
            out[gate_name(l)] = np.zeros((B, cfg.num_experts, cfg.hidden))
        else:
            out[gate_name(l)] = dense_per_sample(lt.x, lb.d_gate_logits)
        counts = lt.table.per_sample_counts()
        for e in range(cfg.num_experts):
            materialized = int(B * counts[:, e].max(initial=0))
            touched = int(counts[:, e].sum())
            stats.materialized += materialized
            stats.touched += touched
            stats.per_expert.append((l, e, materialized, touched))
            if strategy == "padded":
                g = expert_per_sample_padded(trace, back, l, e)
                g1, g2 = g["w1"], g["w2"]
            else:
                owner = lt.table.slot_owner(e)
                et, bt = lt.experts[e], lb.experts[e]
                g1 = expert_per_sample_reindex(et.x, bt.da, owner, B)
                g2 = expert_per_sample_reindex(et.r, bt.dy, owner, B)
            out[expert_name(l, e, "w1")] = g1
            out[expert_name(l, e, "w2")] = g2
    out["classifier"] = dense_per_sample(trace.pooled[:, None, :], back.d_logits[:, None, :])
    return PerSampleGradSet({n: out[n] for n in param_names(cfg)}, B), stats


def private_config(cfg: SwitchConfig) -> SwitchConfig:
    """The batch-coupled balance loss has no per-sample form, so it is switched off."""
    if cfg.lb_mode == "off":
        return cfg
    return dataclasses.replace(cfg, lb_mode="off")


def compute_per_sample(tokens, labels, params, cfg: SwitchConfig, strategy: str = "reindex"):
    """Per-sample gradients plus the forward trace and padding statistics.

    Each sample's gradient is that of its own cross-entropy, so the rows sum
    to the gradient of the summed (not averaged) batch loss.
    """
    cfg = private_config(cfg)
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if tokens.shape[0] == 0:
        shapes = param_shapes(cfg)
        empty = PerSampleGradSet({n: np.zeros((0,) + s) for n, s in shapes.items()}, 0)
        return empty, None, PaddingStats()
    logits, trace = model_forward(tokens, params, cfg)
    _, d_logits = cross_entropy(logits, labels, reduction="sum")
    _, back = model_backward(trace, d_logits, params, cfg)
    gset, stats = _assemble(trace, back, cfg, strategy)
    return gset, trace, stats


def per_sample_gradients(tokens, labels, params, cfg: SwitchConfig, strategy: str = "reindex") -> PerSampleGradSet:
    return compute_per_sample(tokens, labels, params, cfg, strategy)[0]
