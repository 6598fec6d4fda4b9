"""Single-process simulation of expert + data parallelism for DP training.

Logical devices own a contiguous shard of the experts and read a contiguous
shard of each batch; dense weights are replicated. Devices only interact
through an :class:`Exchange`, which delivers every message in a canonical
order keyed by ``(origin device, sample, position)`` so the arithmetic, and
therefore the result, does not depend on the number of devices or on the
order in which devices happen to run.

Per-sample expert gradients are computed at the owning device by regrouping
per-slot products by ``(origin device, origin sample)``. Owners learn that
mapping from routing-table slices that the origin devices send after slot
assignment. Global clipping needs one extra round in which owners return
per-sample squared-norm fragments to the origins and origins broadcast the
resulting clip factors; per-layer clipping needs neither.
"""
from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .accountant import PrivacySpec
from .dp import ClipConfig, OptState, adamw_step, clip_scales, noisy_mean, quantile_summary, scaled_sum
from .errors import InvariantError, ParameterError
from .model import (SwitchConfig, cross_entropy, expert_backward, expert_forward, expert_name, frozen_names,
                    gate_forward, gate_name, is_expert, param_names)
from .per_sample import _one_hot, dense_per_sample, expert_per_sample_reindex, private_config, sq_norms
from .tensor import RngState

HEADER_BYTES = 8


@dataclass(frozen=True)
class DeviceSpec:
    device_id: int
    experts: tuple[int, ...]

    def sample_range(self, batch_size: int, num_devices: int) -> range:
        offsets = shard_offsets(batch_size, num_devices)
        return range(offsets[self.device_id], offsets[self.device_id + 1])


def shard_offsets(batch_size: int, num_devices: int) -> np.ndarray:
    """Boundaries of the contiguous sample shards (sizes differ by at most one)."""
    sizes = [len(a) for a in np.array_split(np.arange(batch_size), num_devices)]
    return np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)


def make_topology(num_devices: int, num_experts: int) -> list[DeviceSpec]:
    if num_devices < 1 or num_experts % num_devices:
        raise ParameterError(f"{num_devices} devices cannot evenly own {num_experts} experts")
    per = num_experts // num_devices
    return [DeviceSpec(d, tuple(range(d * per, (d + 1) * per))) for d in range(num_devices)]


def owner_map(topology) -> dict[int, int]:
    return {e: spec.device_id for spec in topology for e in spec.experts}


@dataclass
class TokenEnvelope:
    payload: np.ndarray  # [H]
    origin: tuple[int, int, int]  # (device, local sample, position)
    expert: int
    slot: int = -1


@dataclass(frozen=True)
class RoutingEntry:
    expert: int
    slot: int
    origin_device: int
    origin_sample: int
    position: int


@dataclass
class RoutingEnvelope:
    device_id: int
    entries: list[RoutingEntry] = field(default_factory=list)


@dataclass
class MessageStats:
    messages: dict[str, int]
    bytes: dict[str, int]
    expert_load: list
    drops: int

    @property
    def total_messages(self) -> int:
        return sum(self.messages.values())

    def to_dict(self) -> dict:
        return {"messages": dict(self.messages), "bytes": dict(self.bytes), "total_messages": self.total_messages,
                "expert_load": self.expert_load, "drops": self.drops}


def _nbytes(payload) -> int:
    if isinstance(payload, np.ndarray):
        return payload.nbytes
    if isinstance(payload, dict):
        return sum(_nbytes(v) for v in payload.values())
    if isinstance(payload, (list, tuple)):
        return sum(_nbytes(v) for v in payload)
    return HEADER_BYTES


class Exchange:
    """In-memory message bus with canonical, schedule-independent delivery.

    Messages a device sends to itself are delivered but not counted.
    """

    def __init__(self, num_devices: int):
        self.num_devices = num_devices
        self._boxes = defaultdict(list)
        self.log: list[tuple[str, int, int, int]] = []  # (kind, src, dst, nbytes)

    def send(self, kind: str, src: int, dst: int, key: tuple, payload):
        if src != dst:
            self.log.append((kind, src, dst, HEADER_BYTES + _nbytes(payload)))
        self._boxes[(dst, kind)].append(((src,) + tuple(key), payload))

    def receive(self, dst: int, kind: str) -> list:
        """Drain ``dst``'s ``kind`` mailbox, sorted by (source device, key)."""
        msgs = self._boxes.pop((dst, kind), [])
        msgs.sort(key=lambda m: m[0])
        return msgs

    def pending(self) -> int:
        return sum(len(v) for v in self._boxes.values())

    def stats(self, since: int = 0) -> tuple[Counter, Counter]:
        counts, sizes = Counter(), Counter()
        for kind, _, _, nb in self.log[since:]:
            counts[kind] += 1
            sizes[kind] += nb
        return counts, sizes


@dataclass
class ScatterResult:
    inputs: list[dict[int, list[TokenEnvelope]]]  # per owner device: expert -> envelopes in slot order
    assignments: list[list[tuple[int, int, int, int]]]  # per origin: (b, t, expert, slot or -1)
    drops: int


def all_to_all_scatter(routed, topology, capacity: int, exchange: Exchange) -> ScatterResult:
    """Move every routed token to the device owning its expert and assign slots.

    ``routed[d]`` holds device d's envelopes. Owners take arrivals in the
    canonical (origin device, b, t) order and fill slots first-come first-
    served; a token arriving at a full expert is dropped and its origin is
    told so. Every origin learns the slot (or drop) of each of its tokens.
    """
    owners = owner_map(topology)
    D = len(topology)
    for d in range(D):
        for env in routed[d]:
            _, b, t = env.origin
            exchange.send("token", d, owners[env.expert], (b, t), env)
    inputs = []
    drops = 0
    for spec in topology:
        arrived = exchange.receive(spec.device_id, "token")
        per_expert = {e: [] for e in spec.experts}
        for _, env in arrived:
            if env.expert not in per_expert:
                raise InvariantError(f"device {spec.device_id} received a token for expert {env.expert}")
            slots = per_expert[env.expert]
            if len(slots) < capacity:
                env.slot = len(slots)
                slots.append(env)
            else:
                env.slot = -1
                drops += 1
            od, b, t = env.origin
            exchange.send("slot_ack", spec.device_id, od, (b, t), (b, t, env.expert, env.slot))
        inputs.append(per_expert)
    assignments = []
    for d in range(D):
        assignments.append([payload for _, payload in exchange.receive(d, "slot_ack")])
    return ScatterResult(inputs, assignments, drops)


def sync_routing_slices(scatter: ScatterResult, topology, exchange: Exchange) -> list[RoutingEnvelope]:
    """Send each owner the slice of the origins' routing tables covering its slots.

    The result gives, for every occupied slot on a device, the (origin device,
    origin sample) pair. It is checked against the tokens the owner actually
    received.
    """
    owners = owner_map(topology)
    for d, rows in enumerate(scatter.assignments):
        for b, t, e, c in rows:
            if c >= 0:
                exchange.send("routing", d, owners[e], (b, t), RoutingEntry(e, c, d, b, t))
    envelopes = []
    for spec in topology:
        entries = [entry for _, entry in exchange.receive(spec.device_id, "routing")]
        env = RoutingEnvelope(spec.device_id, entries)
        seen = {(x.expert, x.slot): x for x in entries}
        if len(seen) != len(entries):
            raise InvariantError(f"device {spec.device_id}: duplicate routing entries")
        n_tokens = 0
        for e, toks in scatter.inputs[spec.device_id].items():
            for tok in toks:
                entry = seen.get((e, tok.slot))
                od, b, t = tok.origin
                if entry is None or (entry.origin_device, entry.origin_sample, entry.position) != (od, b, t):
                    raise InvariantError(f"device {spec.device_id}: routing slice disagrees with slot {e}/{tok.slot}")
                n_tokens += 1
        if n_tokens != len(entries):
            raise InvariantError(f"device {spec.device_id}: routing entries for slots that hold no token")
        envelopes.append(env)
    return envelopes


def dense_table_from_envelopes(envelopes, num_experts, batch_size, num_tokens, num_devices, capacity) -> np.ndarray:
    """Rebuild the global binary table G[e, b, t, c] from every device's routing slice."""
    offsets = shard_offsets(batch_size, num_devices)
    g = np.zeros((num_experts, batch_size, num_tokens, capacity), dtype=np.int64)
    for env in envelopes:
        for x in env.entries:
            g[x.expert, offsets[x.origin_device] + x.origin_sample, x.position, x.slot] += 1
    return g


class Device:
    def __init__(self, spec: DeviceSpec, params: dict, cfg: SwitchConfig, opt_hyper: dict):
        self.spec = spec
        self.cfg = cfg
        self.params = {n: p.copy() for n, p in params.items() if not is_expert(n) or self._owns(n)}
        self.opt = OptState(**opt_hyper)

    def _owns(self, name: str) -> bool:
        e = int(name.split(".expert")[1].split(".")[0])
        return e in self.spec.experts

    def dense_checksum(self) -> str:
        h = hashlib.sha256()
        for n in param_names(self.cfg):
            if not is_expert(n):
                h.update(self.params[n].tobytes())
        return h.hexdigest()


@dataclass
class _Local:
    tokens: np.ndarray
    labels: np.ndarray
    h: np.ndarray = None
    layers: list = field(default_factory=list)
    logits: np.ndarray = None
    pooled: np.ndarray = None


@dataclass
class _LocalLayer:
    x: np.ndarray
    gate: object
    expert: np.ndarray  # [Bl, T]
    slot: np.ndarray  # [Bl, T]
    y: np.ndarray  # [Bl*T, H] expert outputs received (zero for drops)


@dataclass
class _OwnerLayer:
    slots: dict  # expert -> list[TokenEnvelope]
    fwd: dict  # expert -> (x, a, r, y)
    routing: RoutingEnvelope


class Cluster:
    """A set of simulated devices holding one replicated-dense, sharded-expert model."""

    def __init__(self, params: dict, cfg: SwitchConfig, num_devices: int, opt_hyper: dict | None = None):
        self.cfg = private_config(cfg)
        self.topology = make_topology(num_devices, cfg.num_experts)
        hyper = opt_hyper or {}
        self.devices = [Device(spec, params, self.cfg, hyper) for spec in self.topology]
        self.exchange = Exchange(num_devices)

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    def gather_params(self) -> dict:
        out = {}
        for n in param_names(self.cfg):
            for dev in self.devices:
                if n in dev.params:
                    out[n] = dev.params[n].copy()
                    break
        return out

    def check_replicas(self):
        sums = {dev.dense_checksum() for dev in self.devices}
        if len(sums) != 1:
            raise InvariantError("dense parameter replicas diverged across devices")

    def step(self, batch, privacy: PrivacySpec, rng: RngState, clip: ClipConfig | None = None,
             schedule_seed: int | None = None):
        return distributed_dp_step(self, batch, privacy, rng, clip, schedule_seed)


def _order(D, schedule_rng):
    order = list(range(D))
    if schedule_rng is not None:
        schedule_rng.shuffle(order)
    return order


def distributed_dp_step(cluster: Cluster, batch, privacy: PrivacySpec, rng: RngState,
                        clip: ClipConfig | None = None, schedule_seed: int | None = None):
    """One DP-AdamW step across the simulated devices.

    Returns a dict with ``messages`` (:class:`MessageStats`) and aggregate
    metrics. Parameters are updated in place on the devices; afterwards every
    dense replica must be bit-identical.
    """
    if privacy.sigma is None:
        raise ParameterError("privacy spec has no noise multiplier; calibrate first")
    clip = clip or ClipConfig("global", privacy.clip_norm)
    cfg = cluster.cfg
    D = cluster.num_devices
    topo = cluster.topology
    ex = cluster.exchange
    log_start = len(ex.log)
    owners = owner_map(topo)
    sched = np.random.default_rng(schedule_seed) if schedule_seed is not None else None
    tokens, labels = batch
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, cfg.max_tokens)
    labels = np.asarray(labels, dtype=np.int64)
    B, T = tokens.shape
    offsets = shard_offsets(B, D)
    sizes = np.diff(offsets)
    H, N = cfg.hidden, cfg.num_experts
    capacity = cfg.capacity(B)
    devs = cluster.devices
    loc = [_Local(tokens[offsets[d]:offsets[d + 1]], labels[offsets[d]:offsets[d + 1]]) for d in range(D)]
    own: list[list[_OwnerLayer]] = [[] for _ in range(D)]

    # forward
    for d in _order(D, sched):
        loc[d].h = devs[d].params["embedding"][loc[d].tokens]
    drops = 0
    load = []
    for l in range(cfg.num_layers):
        routed = [None] * D
        for d in _order(D, sched):
            st = loc[d]
            Bl = sizes[d]
            gate = gate_forward(st.h, devs[d].params[gate_name(l)])
            st.layers.append(_LocalLayer(st.h, gate, gate.top.copy(), np.full((Bl, T), -1, dtype=np.int64),
                                         np.zeros((Bl * T, H))))
            routed[d] = [TokenEnvelope(st.h[b, t], (d, b, t), int(gate.top[b, t]))
                         for b in range(Bl) for t in range(T)]
        scatter = all_to_all_scatter(routed, topo, capacity, ex)
        drops += scatter.drops
        for d in range(D):
            ll = loc[d].layers[l]
            for b, t, e, c in scatter.assignments[d]:
                ll.slot[b, t] = c
        renv = sync_routing_slices(scatter, topo, ex)
        layer_load = [0] * N
        for d in _order(D, sched):
            fwd = {}
            for e in topo[d].experts:
                toks = scatter.inputs[d][e]
                layer_load[e] = len(toks)
                xs = np.array([tk.payload for tk in toks]).reshape(len(toks), H)
                w1 = devs[d].params[expert_name(l, e, "w1")]
                w2 = devs[d].params[expert_name(l, e, "w2")]
                a, r, y = expert_forward(w1, w2, xs)
                fwd[e] = (xs, a, r, y)
                for tk, row in zip(toks, y):
                    od, b, t = tk.origin
                    ex.send("expert_output", d, od, (b, t), row)
            own[d].append(_OwnerLayer(scatter.inputs[d], fwd, renv[d]))
        load.append(layer_load)
        for d in _order(D, sched):
            st = loc[d]
            Bl = sizes[d]
            ll = st.layers[l]
            pf = ll.gate.probs.reshape(Bl * T, N)
            out = np.zeros((Bl * T, H))
            for (_, b, t), row in ex.receive(d, "expert_output"):
                i = b * T + t
                ll.y[i] = row
                out[i] = pf[i, ll.expert[b, t]] * row
            st.h = st.h + out.reshape(Bl, T, H)
    for d in _order(D, sched):
        st = loc[d]
        st.pooled = st.h.mean(axis=1)
        st.logits = st.pooled @ devs[d].params["classifier"].T

    # backward with per-sample gradients
    ps: list[dict] = [dict() for _ in range(D)]  # dense: [Bl, ...] local; experts: [B, ...] global index
    dh = [None] * D
    for d in _order(D, sched):
        st = loc[d]
        _, dlog = cross_entropy(st.logits, st.labels, "sum")
        st.dlog = dlog
        ps[d]["classifier"] = dense_per_sample(st.pooled[:, None, :], dlog[:, None, :])
        d_pooled = dlog @ devs[d].params["classifier"]
        dh[d] = np.broadcast_to(d_pooled[:, None, :] / T, (sizes[d], T, H)).copy()
    for l in reversed(range(cfg.num_layers)):
        douts = [None] * D
        for d in _order(D, sched):
            ll = loc[d].layers[l]
            Bl = sizes[d]
            dout = dh[d].reshape(Bl * T, H)
            douts[d] = dout
            pf = ll.gate.probs.reshape(Bl * T, N)
            for b in range(Bl):
                for t in range(T):
                    c = ll.slot[b, t]
                    if c >= 0:
                        e = int(ll.expert[b, t])
                        i = b * T + t
                        ex.send("grad", d, owners[e], (b, t), (e, c, pf[i, e] * dout[i]))
        for d in _order(D, sched):
            ol = own[d][l]
            incoming = defaultdict(list)
            for _, (e, c, row) in ex.receive(d, "grad"):
                incoming[e].append((c, row))
            slot_owner = defaultdict(dict)
            for entry in ol.routing.entries:
                slot_owner[entry.expert][entry.slot] = (entry.origin_device, entry.origin_sample, entry.position)
            for e in topo[d].experts:
                xs, a, r, y = ol.fwd[e]
                n = xs.shape[0]
                dy = np.zeros((n, H))
                for c, row in incoming[e]:
                    dy[c] = row
                w1 = devs[d].params[expert_name(l, e, "w1")]
                w2 = devs[d].params[expert_name(l, e, "w2")]
                da, dxe, _, _ = expert_backward(w1, w2, xs, a, r, dy)
                # device-extended sample index: shard offset of origin device + origin sample
                keys = np.array([offsets[slot_owner[e][c][0]] + slot_owner[e][c][1] for c in range(n)],
                                dtype=np.int64)
                ps[d][expert_name(l, e, "w1")] = expert_per_sample_reindex(xs, da, keys, B)
                ps[d][expert_name(l, e, "w2")] = expert_per_sample_reindex(r, dy, keys, B)
                for c in range(n):
                    od, b, t = slot_owner[e][c]
                    ex.send("grad_return", d, od, (b, t), dxe[c])
        for d in _order(D, sched):
            ll = loc[d].layers[l]
            Bl = sizes[d]
            dout = douts[d]
            dx = dout.copy()
            routed = (ll.slot >= 0).reshape(-1)
            for (_, b, t), row in ex.receive(d, "grad_return"):
                dx[b * T + t] += row
            pf = ll.gate.probs.reshape(Bl * T, N)
            top = ll.expert.reshape(-1)
            dp = np.einsum("ch,ch->c", dout, ll.y)
            p_top = pf[np.arange(Bl * T), top]
            coef = np.where(routed, p_top * dp, 0.0)
            dl = -coef[:, None] * pf
            dl[np.arange(Bl * T), top] += coef
            if cfg.freeze_gating:
                ps[d][gate_name(l)] = np.zeros((Bl, N, H))
            else:
                ps[d][gate_name(l)] = dense_per_sample(ll.x, dl.reshape(Bl, T, N))
            dx += dl @ devs[d].params[gate_name(l)]
            dh[d] = dx.reshape(Bl, T, H)
    for d in _order(D, sched):
        emb = dense_per_sample(_one_hot(loc[d].tokens, cfg.vocab), dh[d])
        ps[d]["embedding"] = emb.transpose(0, 2, 1)

    # clipping
    names = param_names(cfg)
    dense_names = [n for n in names if not is_expert(n)]
    sq = [{n: sq_norms(g) for n, g in ps[d].items()} for d in range(D)]
    clipped = [dict() for _ in range(D)]
    norm_values = []
    clipped_count = 0
    if clip.mode == "global":
        for d in _order(D, sched):
            for od in range(D):
                frag = {n: sq[d][n][offsets[od]:offsets[od + 1]] for n in ps[d] if is_expert(n)}
                ex.send("norm_fragment", d, od, (), frag)
        scales = [None] * D
        for d in _order(D, sched):
            frags = {}
            for _, frag in ex.receive(d, "norm_fragment"):
                frags.update(frag)
            total = np.zeros(sizes[d])
            for n in names:
                total = total + (frags[n] if is_expert(n) else sq[d][n])
            norms = np.sqrt(total)
            norm_values.append(norms)
            clipped_count += int((norms > clip.clip_norm).sum())
            scales[d] = clip_scales(norms, clip.clip_norm)
            for od in range(D):
                ex.send("clip_scale", d, od, (), scales[d])
        for d in _order(D, sched):
            full = np.concatenate([s for _, s in ex.receive(d, "clip_scale")])
            for n, g in ps[d].items():
                clipped[d][n] = scaled_sum(g, full if is_expert(n) else scales[d])
    else:
        budgets = clip.layer_budgets(names)
        for d in _order(D, sched):
            for n, g in ps[d].items():
                clipped[d][n] = scaled_sum(g, clip_scales(np.sqrt(sq[d][n]), budgets[n]))
    # dense gradient all-reduce in canonical device order
    for d in _order(D, sched):
        for od in range(D):
            ex.send("grad_allreduce", d, od, (), {n: clipped[d][n] for n in dense_names})
    for d in _order(D, sched):
        parts = [p for _, p in ex.receive(d, "grad_allreduce")]
        for n in dense_names:
            total = parts[0][n]
            for p in parts[1:]:
                total = total + p[n]
            clipped[d][n] = total

    # noise and update
    frozen = frozen_names(cfg)
    denom = privacy.expected_batch_size()
    for d in _order(D, sched):
        dev = devs[d]
        mine = {n: clipped[d][n] for n in names if n in dev.params}
        noisy = noisy_mean(mine, privacy.sigma, clip.clip_norm, denom, rng, skip=frozen)
        dev.params, dev.opt = adamw_step(dev.params, noisy, dev.opt, frozen)
    if ex.pending():
        raise InvariantError("undelivered messages left in the exchange")
    cluster.check_replicas()

    counts, sizes = ex.stats(log_start)
    loss = sum(cross_entropy(st.logits, st.labels, "sum")[0] for st in loc) / B if B else None
    info = {
        "messages": MessageStats(dict(counts), dict(sizes), load, drops),
        "loss": loss,
        "batch_size": B,
    }
    if norm_values:
        allnorms = np.concatenate(norm_values)
        info["norm_quantiles"] = quantile_summary(allnorms)
        info["clip_fraction"] = clipped_count / B if B else None
        info["norms"] = allnorms
    return info
