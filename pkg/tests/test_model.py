import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from floodcast import model as M
from floodcast import numerics as nx
from floodcast.errors import ContractError, DimensionError
from floodcast.graph import WatershedGraph, build_transitions

import oracles
from conftest import max_relative_error


def random_graph(rng, n):
    edges = []
    for i in range(1, n):
        edges.append((i, int(rng.integers(0, i)), float(rng.uniform(1.0, 50.0))))
    for _ in range(int(rng.integers(0, 3))):
        u = int(rng.integers(1, n)) if n > 1 else 0
        v = int(rng.integers(0, u)) if u > 0 else 0
        if u > v and all((u, v) != e[:2] for e in edges):
            edges.append((u, v, float(rng.uniform(1.0, 50.0))))
    return WatershedGraph([f"s{i}" for i in range(n)], edges, 0), edges


def with_norm(params, n):
    params.norm_stats = M.NormStats(np.zeros(n), np.ones(n), 0.0, 1.0, 0.0, 1.0)
    return params


def arrays(params):
    return {k: v.data for k, v in params.tensors.items()}


def test_dconv_identity_and_zero():
    g = WatershedGraph(["a", "b"], [(1, 0, 2.0)], 0)
    ts = build_transitions(g, 1)
    X = np.array([[0.5], [2.0]])
    np.testing.assert_array_equal(M.dconv(X, np.ones((1, 1, 1)), ts).data, X)
    ts2 = build_transitions(g, 2)
    assert not M.dconv(X, np.zeros((3, 1, 2)), ts2).data.any()
    with pytest.raises(DimensionError):
        M.dconv(np.ones((2, 2)), np.ones((1, 1, 2)), ts2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dconv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n, K = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    g, edges = random_graph(rng, n)
    X = rng.normal(size=(n, 2))
    theta = rng.normal(size=(3, 2, K))
    got = M.dconv(X, theta, build_transitions(g, K)).data
    ref = np.array(oracles.dconv_relu(X.tolist(), theta.tolist(), oracles.transition_from_edges(edges, n), K))
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_zero_parameter_fixed_point():
    g = WatershedGraph(["a", "b"], [(1, 0, 2.0)], 0)
    ts = build_transitions(g, 2)
    tensors = {f"gc_{q}_theta": np.zeros((3, 4, 2)) for q in "ruc"}
    tensors.update({f"gc_{q}_bias": np.zeros(3) for q in "ruc"})
    H = M.gcgru_step(np.ones((2, 1)), np.zeros((2, 3)), tensors, ts)
    assert not H.data.any()


def test_single_node_graph_gru_is_plain_gru():
    rng = np.random.default_rng(0)
    hidden = 4
    g = WatershedGraph(["a"], [], 0)
    ts = build_transitions(g, 1)
    gc = {f"gc_{q}_theta": rng.normal(size=(hidden, 1 + hidden, 1)) for q in "ruc"}
    gc.update({f"gc_{q}_bias": rng.normal(size=hidden) for q in "ruc"})
    plain = {f"rg_{q}_weight": gc[f"gc_{q}_theta"][:, :, 0].T for q in "ruc"}
    plain.update({f"rg_{q}_bias": gc[f"gc_{q}_bias"] for q in "ruc"})
    H = np.zeros((1, hidden))
    h = np.zeros((1, hidden))
    for _ in range(100):
        x = rng.normal(size=(1, 1))
        H = M.gcgru_step(x, H, gc, ts).data
        h = M.plain_gru_step(x, h, plain).data
        assert np.max(np.abs(H - h)) < 1e-10


def test_repeated_input_contracts():
    rng = np.random.default_rng(0)
    g = WatershedGraph(["a", "b", "c"], [(1, 0, 3.0), (2, 0, 9.0)], 0)
    ts = build_transitions(g, 2)
    p = M.init_params(3, 0, hidden_size=4, K=2, seed=0).tensors
    x = rng.normal(size=(3, 1))
    H = np.zeros((3, 4))
    steps = []
    for _ in range(40):
        new = M.gcgru_step(x, H, p, ts).data
        steps.append(np.linalg.norm(new - H))
        H = new
    tail = steps[-3:]
    assert tail[0] >= tail[1] >= tail[2]


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    g, edges = random_graph(rng, 4)
    params = with_norm(M.init_params(4, 0, hidden_size=3, K=3, T=5, decoder_layers=2, seed=0), 4)
    win = np.random.default_rng(1)
    stage, rain = win.normal(size=(5, 4)), win.normal(size=5)
    got = M.forward_batch(params, build_transitions(g, 3), stage[None], rain[None]).data[0]
    ref = oracles.forward(stage, rain, arrays(params), params.meta(), oracles.transition_from_edges(edges, 4))
    assert abs(got - ref) < 1e-10


def test_forward_contract():
    g = WatershedGraph(["a"], [], 0)
    params = with_norm(M.init_params(1, 0, hidden_size=2, K=1, T=3, seed=0), 1)
    params.norm_stats.rain_mean = 0.0
    w = M.ForecastWindow(np.ones((3, 1)), np.zeros(3), h=2)
    a, b = M.forward(w, params, g), M.forward(w, params, g)
    assert a == b
    with pytest.raises(ContractError):
        M.ForecastWindow(np.ones((3, 1)), np.zeros(3), h=7)


def test_constant_decoder_path():
    g = WatershedGraph(["a", "b"], [(1, 0, 1.0)], 0)
    params = with_norm(M.init_params(2, 0, hidden_size=2, K=2, T=4, seed=0), 2)
    params.tensors["dec0_weight"].data[:] = 0.0
    params.tensors["dec0_bias"].data[:] = 3.25
    w = M.ForecastWindow(np.full((4, 2), 7.0), np.zeros(4))
    assert M.forward(w, params, g) == pytest.approx(3.25, abs=1e-15)


def test_permuting_upstream_nodes_leaves_forecast_unchanged():
    rng = np.random.default_rng(2)
    edges = [(1, 0, 5.0), (2, 0, 12.0), (3, 1, 7.0)]
    g = WatershedGraph(["t", "a", "b", "c"], edges, 0)
    perm = [0, 3, 1, 2]  # new index of each old node
    g2 = WatershedGraph(["t", "b", "c", "a"], [(perm[u], perm[v], d) for u, v, d in edges], 0)
    params = with_norm(M.init_params(4, 0, hidden_size=3, K=3, T=6, seed=0), 4)
    stage, rain = rng.normal(size=(2, 6, 4)), rng.normal(size=(2, 6))
    stage2 = np.empty_like(stage)
    stage2[:, :, perm] = stage
    a = M.forward_batch(params, build_transitions(g, 3), stage, rain).data
    b = M.forward_batch(params, build_transitions(g2, 3), stage2, rain).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# --- loss -----------------------------------------------------------------------------


def test_loss_examples():
    w = M.BinWeights.fit(np.full(20, 2.0))
    y = np.linspace(1.0, 1.0, 5)
    preds = nx.Tensor(y + np.arange(5))
    assert M.weighted_mse_loss(preds, y, w).item() == pytest.approx(np.mean(np.arange(5) ** 2))
    assert M.weighted_mse_loss(nx.Tensor(y), y, w).item() == 0.0
    with pytest.raises(ContractError):
        M.weighted_mse_loss(nx.Tensor(np.zeros(0)), np.zeros(0), w)


def test_two_bin_weights():
    train_y = np.concatenate([np.zeros(90), np.ones(10)])
    w = M.BinWeights.fit(train_y, n_bins=2)
    w1, w2 = w(np.array([0.0, 1.0]))
    assert w1 == pytest.approx(np.log(1 + 100 / 90)) and w2 == pytest.approx(np.log(1 + 100 / 10))
    loss = M.weighted_mse_loss(nx.Tensor(np.array([1.0, 2.0])), np.array([0.0, 1.0]), w)
    assert loss.item() == pytest.approx(1.0, abs=1e-15)


def small_problem(seed, n=3, hidden=2, K=2, T=4, B=6):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, n)
    params = with_norm(M.init_params(n, 0, hidden_size=hidden, K=K, T=T, seed=seed), n)
    for t in params.tensors.values():
        t.data += rng.normal(scale=0.3, size=t.data.shape)
    stage, rain, y = rng.normal(size=(B, T, n)), rng.normal(size=(B, T)), rng.normal(size=B)
    return g, params, stage, rain, y


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_loss_gradient_through_model(seed):
    g, params, stage, rain, y = small_problem(seed)
    assert params.n_parameters() <= 200
    ts = build_transitions(g, params.K)
    w = M.BinWeights.fit(y, n_bins=3)

    def loss():
        return M.weighted_mse_loss(M.forward_batch(params, ts, stage, rain), y, w)

    assert max_relative_error(loss, params.parameters()) < 1e-4


# --- training ---------------------------------------------------------------------------


def ar1_dataset(seed=0, n=600, T=8, h=1):
    rng = np.random.default_rng(seed)
    s = np.zeros(n)
    for t in range(1, n):
        s[t] = 0.9 * s[t - 1] + rng.normal(scale=0.3)
    s += 5.0
    rain = rng.exponential(size=n)
    idx = np.arange(T, n - h + 1)
    stage = np.stack([s[i - T : i] for i in idx])[:, :, None]
    rr = np.stack([rain[i - T : i] for i in idx])
    y = s[idx + h - 1]
    return M.Dataset(stage, rr, y), s


def test_zero_epochs_returns_initial_params():
    ds, _ = ar1_dataset()
    g = WatershedGraph(["a"], [], 0)
    res = M.train(ds, ds, g, [{"hidden_size": 4}], seed=3, K=1, T=8, max_epochs=0)
    init = M.init_params(1, 0, hidden_size=4, K=1, T=8, seed=3)
    for k, v in init.tensors.items():
        np.testing.assert_array_equal(res.params.tensors[k].data, v.data)


def test_empty_grid_rejected():
    ds, _ = ar1_dataset()
    with pytest.raises(ContractError):
        M.train(ds, ds, WatershedGraph(["a"], [], 0), [], seed=0, K=1, T=8)


def test_training_beats_persistence_and_is_deterministic():
    ds, s = ar1_dataset(n=800)
    tr = M.Dataset(ds.stage[:500], ds.rain[:500], ds.y[:500])
    va = M.Dataset(ds.stage[500:650], ds.rain[500:650], ds.y[500:650])
    te = M.Dataset(ds.stage[650:], ds.rain[650:], ds.y[650:])
    g = WatershedGraph(["a"], [], 0)
    kw = dict(K=1, T=8, max_epochs=15, patience=5)
    grid = [{"lr": 0.01, "hidden_size": 4, "batch_size": 32}]
    r1 = M.train(tr, va, g, grid, seed=0, **kw)
    r2 = M.train(tr, va, g, grid, seed=0, **kw)
    assert r1.point == r2.point and r1.val_loss == r2.val_loss
    pred = M.predict(r1.params, build_transitions(g, 1), te.stage, te.rain)
    persistence = te.stage[:, -1, 0]
    assert np.mean(np.abs(pred - te.y)) < np.mean(np.abs(persistence - te.y))
    best = [row["val_loss"] for row in r1.history]
    running = np.minimum.accumulate(best)
    assert np.all(np.diff(running) <= 0)


def test_checkpoint_roundtrip(tmp_path):
    params = with_norm(M.init_params(3, 1, hidden_size=2, K=2, T=4, seed=0), 3)
    params.save(tmp_path / "m.json")
    back = M.BaseModelParams.load(tmp_path / "m.json")
    assert back.meta() == params.meta()
    for k in params.tensors:
        assert back.tensors[k].data.tobytes() == params.tensors[k].data.tobytes()


def test_constant_channel_rejected():
    with pytest.raises(ContractError):
        M.NormStats.fit(np.ones((5, 4, 2)), np.arange(20.0).reshape(5, 4), np.arange(5.0))
