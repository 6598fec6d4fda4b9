"""Pure-NumPy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def fcfs_assign(experts, num_experts, capacity):
    experts = np.asarray(experts, dtype=np.int64)
    m = experts.shape[0]
    if m and (experts.min() < 0 or experts.max() >= num_experts):
        raise IndexError("expert id out of range")
    # rank of each token among earlier tokens bound for the same expert
    order = np.argsort(experts, kind="stable")
    sorted_e = experts[order]
    starts = np.searchsorted(sorted_e, np.arange(num_experts))
    rank = np.empty(m, dtype=np.int64)
    rank[order] = np.arange(m) - starts[sorted_e]
    accepted = rank < capacity
    slot = np.where(accepted, rank, -1)
    counts = np.minimum(np.bincount(experts, minlength=num_experts), capacity).astype(np.int64)
    slot_token = np.full((num_experts, capacity), -1, dtype=np.int64)
    idx = np.nonzero(accepted)[0]
    slot_token[experts[idx], rank[idx]] = idx
    return slot, counts, slot_token


def segment_outer_sum(dy, x, owner, num_samples):
    owner = np.asarray(owner, dtype=np.int64)
    out = np.zeros((num_samples, dy.shape[1], x.shape[1]))
    live = owner >= 0
    if not live.any():
        return out
    if owner[live].max() >= num_samples:
        raise IndexError("slot owner out of range")
    prods = np.einsum("ci,cj->cij", dy[live], x[live])
    np.add.at(out, owner[live], prods)
    return out
