"""Shared builders and independent oracles for the test suite."""
import numpy as np

from dpmoe.model import SwitchConfig, init_params, loss_and_grads
from dpmoe.tensor import RngState


def tiny_cfg(**kw):
    base = dict(num_experts=3, hidden=6, ffn_dim=5, num_layers=1, vocab=7, classes=3, max_tokens=4)
    base.update(kw)
    return SwitchConfig(**base)


def random_case(cfg, batch, seed):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, RngState(seed + 1000))
    tokens = rng.integers(0, cfg.vocab, size=(batch, cfg.max_tokens))
    labels = rng.integers(0, cfg.classes, size=batch)
    return params, tokens, labels


def random_arch(rng, num_layers_max=2):
    """A random small architecture with capacity_factor = N (no drops)."""
    N = int(rng.integers(1, 5))
    return SwitchConfig(num_experts=N, capacity_factor=N, lb_mode="off", hidden=int(rng.integers(1, 9)),
                        ffn_dim=int(rng.integers(1, 6)), num_layers=int(rng.integers(0, num_layers_max + 1)),
                        vocab=7, classes=3, max_tokens=int(rng.integers(1, 7)))


def microbatch_oracle(tokens, labels, params, cfg):
    """Per-sample gradients by running each sample alone (summed cross-entropy, no balance loss)."""
    out = {}
    for b in range(len(labels)):
        _, g, trace = loss_and_grads(tokens[b:b + 1], labels[b:b + 1], params, cfg, "sum")
        assert trace.num_dropped == 0, "microbatch oracle needs routing without drops"
        for n, v in g.items():
            out.setdefault(n, []).append(v)
    return {n: np.stack(v) for n, v in out.items()}


def rel_err(a, b, floor=1e-12):
    """Elementwise relative error with an absolute floor for exact zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / scale).max(initial=0.0))


def straight_line_logits(tokens, params, cfg, capacity):
    """Token-by-token forward written without the library's layout machinery."""
    B, T = tokens.shape
    N = cfg.num_experts
    h = np.array([[params["embedding"][tokens[b, t]] for t in range(T)] for b in range(B)])
    for l in range(cfg.num_layers):
        wg = params[f"layer{l}.gate"]
        used = [0] * N
        new = h.copy()
        for b in range(B):
            for t in range(T):
                z = wg @ h[b, t]
                p = np.exp(z - z.max())
                p /= p.sum()
                e = int(np.argmax(z))
                if used[e] >= capacity:
                    continue
                used[e] += 1
                w1 = params[f"layer{l}.expert{e}.w1"]
                w2 = params[f"layer{l}.expert{e}.w2"]
                new[b, t] = h[b, t] + p[e] * (w2 @ np.maximum(w1 @ h[b, t], 0.0))
        h = new
    pooled = h.mean(axis=1)
    return pooled @ params["classifier"].T


def central_fd(fn, params, name, h=1e-5):
    """Central finite differences of scalar ``fn(params)`` w.r.t. every entry of ``params[name]``."""
    out = np.zeros_like(params[name])
    for idx in np.ndindex(params[name].shape):
        work = {k: v.copy() for k, v in params.items()}
        work[name][idx] += h
        fp = fn(work)
        work[name][idx] -= 2 * h
        fm = fn(work)
        out[idx] = (fp - fm) / (2 * h)
    return out
