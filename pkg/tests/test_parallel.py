import numpy as np
import pytest

from dpmoe.accountant import PrivacySpec
from dpmoe.dp import ClipConfig, OptState, dp_step
from dpmoe.errors import InvariantError, ParameterError
from dpmoe.model import SwitchConfig, gate_forward, init_params, route
from dpmoe.parallel import (Cluster, Exchange, TokenEnvelope, all_to_all_scatter, dense_table_from_envelopes,
                            make_topology, shard_offsets, sync_routing_slices)
from dpmoe.tensor import RngState

H = 3


def envelopes(top, num_devices):
    """Per-device token envelopes for a global [B, T] top-expert array."""
    B, T = top.shape
    offs = shard_offsets(B, num_devices)
    routed = []
    for d in range(num_devices):
        rows = []
        for b in range(offs[d + 1] - offs[d]):
            for t in range(T):
                gb = offs[d] + b
                rows.append(TokenEnvelope(np.full(H, float(gb * T + t)), (d, b, t), int(top[gb, t])))
        routed.append(rows)
    return routed


def test_topology_partitions():
    topo = make_topology(4, 8)
    assert [s.experts for s in topo] == [(0, 1), (2, 3), (4, 5), (6, 7)]
    assert list(shard_offsets(10, 4)) == [0, 3, 6, 8, 10]
    with pytest.raises(ParameterError):
        make_topology(3, 8)


def test_scatter_single_device_sends_nothing():
    top = np.array([[0, 1, 1], [1, 0, 0]])
    ex = Exchange(1)
    res = all_to_all_scatter(envelopes(top, 1), make_topology(1, 2), 6, ex)
    assert ex.log == [] and res.drops == 0
    assert [len(v) for v in res.inputs[0].values()] == [3, 3]


def test_scatter_full_crossover():
    top = np.array([[1, 1], [0, 0]])  # device 0 -> expert 1 (remote), device 1 -> expert 0 (remote)
    ex = Exchange(2)
    all_to_all_scatter(envelopes(top, 2), make_topology(2, 2), 4, ex)
    counts, _ = ex.stats()
    assert counts["token"] == top.size


@pytest.mark.parametrize("D", [1, 2, 4])
@pytest.mark.parametrize("seed", range(5))
def test_scatter_and_sync_match_single_device_route(D, seed):
    rng = np.random.default_rng(seed)
    B, T, E = 5, 4, 8
    gate = gate_forward(rng.standard_normal((B, T, H)), rng.standard_normal((E, H)))
    C = 2
    table = route(gate, C)
    ex = Exchange(D)
    topo = make_topology(D, E)
    res = all_to_all_scatter(envelopes(gate.top, D), topo, C, ex)
    assert res.drops == table.num_dropped
    pairs = sorted((int(tk.payload[0]), e) for dev in res.inputs for e, toks in dev.items() for tk in toks)
    want = sorted((int(i), e) for e in range(E) for i in table.tokens_of(e))
    assert pairs == want
    renv = sync_routing_slices(res, topo, ex)
    dense = dense_table_from_envelopes(renv, E, B, T, D, C)
    assert np.array_equal(dense, table.dense())
    dropped = {(b, t) for b, t in zip(*np.nonzero(table.dropped))}
    offs = shard_offsets(B, D)
    for env in renv:
        for x in env.entries:
            assert (offs[x.origin_device] + x.origin_sample, x.position) not in dropped
    assert ex.pending() == 0


def test_sync_detects_inconsistent_slice():
    top = np.array([[0, 1], [1, 0]])
    ex = Exchange(2)
    topo = make_topology(2, 2)
    res = all_to_all_scatter(envelopes(top, 2), topo, 4, ex)
    b, t, e, c = res.assignments[0][0]
    res.assignments[0][0] = (b, t, e, c + 1)  # corrupt the origin's view of its slot
    with pytest.raises(InvariantError):
        sync_routing_slices(res, topo, ex)


def small_setup(seed=0, B=6, cf=8.0, freeze=False):
    cfg = SwitchConfig(num_experts=8, capacity_factor=cf, lb_mode="off", hidden=4, ffn_dim=5, num_layers=2,
                       vocab=9, classes=3, max_tokens=3, freeze_gating=freeze)
    params = init_params(cfg, RngState(seed))
    rng = np.random.default_rng(seed)
    batches = [(rng.integers(0, 9, (B, 3)), rng.integers(0, 3, B)) for _ in range(5)]
    spec = PrivacySpec(epsilon=1.0, delta=1e-5, sample_rate=0.1, steps=5, sigma=0.7, clip_norm=0.5,
                       dataset_size=max(10 * B, 10))
    return cfg, params, batches, spec


def run_cluster(cfg, params, batches, spec, D, clip=None, schedule_seed=None):
    cluster = Cluster(params, cfg, D, {"lr": 0.05})
    infos = [cluster.step(b, spec, RngState(7, i), clip, schedule_seed) for i, b in enumerate(batches)]
    return cluster.gather_params(), infos


def test_single_device_equals_dp_step_bitwise():
    cfg, params, batches, spec = small_setup(cf=1.0)
    got, _ = run_cluster(cfg, params, batches, spec, 1)
    p, st = params, OptState(lr=0.05)
    for i, b in enumerate(batches):
        p, st, _ = dp_step(b, p, cfg, spec, st, RngState(7, i))
    for n in params:
        assert np.array_equal(got[n], p[n]), n


@pytest.mark.parametrize("mode", ["global", "per_layer"])
@pytest.mark.parametrize("cf", [1.0, 8.0])
def test_topology_invariance(mode, cf):
    cfg, params, batches, spec = small_setup(cf=cf)
    clip = ClipConfig(mode, 0.5)
    ref, _ = run_cluster(cfg, params, batches, spec, 1, clip)
    for D in (2, 4, 8):
        got, _ = run_cluster(cfg, params, batches, spec, D, clip)
        for n in ref:
            np.testing.assert_allclose(got[n], ref[n], rtol=0, atol=1e-12, err_msg=f"D={D} {n}")


def test_global_norms_match_single_device():
    cfg, params, batches, spec = small_setup()
    _, ref = run_cluster(cfg, params, batches[:1], spec, 1)
    _, got = run_cluster(cfg, params, batches[:1], spec, 4)
    np.testing.assert_allclose(got[0]["norms"], ref[0]["norms"], rtol=0, atol=1e-12)


def test_schedule_randomization_invariant():
    cfg, params, batches, spec = small_setup()
    ref, _ = run_cluster(cfg, params, batches, spec, 4)
    for s in range(3):
        got, _ = run_cluster(cfg, params, batches, spec, 4, schedule_seed=s)
        for n in ref:
            assert np.array_equal(got[n], ref[n])


def test_per_layer_sends_no_norm_messages():
    cfg, params, batches, spec = small_setup()
    _, infos = run_cluster(cfg, params, batches[:1], spec, 4, ClipConfig("per_layer", 0.5))
    msgs = infos[0]["messages"].messages
    assert "norm_fragment" not in msgs and "clip_scale" not in msgs
    _, infos = run_cluster(cfg, params, batches[:1], spec, 4, ClipConfig("global", 0.5))
    assert infos[0]["messages"].messages["norm_fragment"] > 0


def test_message_stats_summary():
    cfg, params, batches, spec = small_setup(cf=1.0)
    _, infos = run_cluster(cfg, params, batches[:1], spec, 2)
    ms = infos[0]["messages"]
    d = ms.to_dict()
    assert d["total_messages"] == sum(d["messages"].values()) > 0
    assert len(d["expert_load"]) == cfg.num_layers
    assert all(v > 0 for v in d["bytes"].values())


@pytest.mark.parametrize("B", [0, 1, 3])
def test_uneven_and_empty_batches(B):
    cfg, params, batches, spec = small_setup(B=B)
    ref, _ = run_cluster(cfg, params, batches[:2], spec, 1)
    got, infos = run_cluster(cfg, params, batches[:2], spec, 4)
    for n in ref:
        np.testing.assert_allclose(got[n], ref[n], rtol=0, atol=1e-12)
    assert infos[0]["batch_size"] == B


def test_frozen_gate_untouched_across_devices():
    cfg, params, batches, spec = small_setup(freeze=True)
    got, _ = run_cluster(cfg, params, batches[:2], spec, 2)
    assert np.array_equal(got["layer0.gate"], params["layer0.gate"])


def test_replica_divergence_detected():
    cfg, params, batches, spec = small_setup()
    cluster = Cluster(params, cfg, 2)
    cluster.devices[1].params["classifier"] = cluster.devices[1].params["classifier"] + 1e-9
    with pytest.raises(InvariantError):
        cluster.check_replicas()
