import math

import numpy as np
import pytest

from moesim.compress import CompressionConfig, compress
from moesim.errors import TrainingError, ValidationError
from moesim.predictor import (
    FeatureVector,
    HistoryPredictor,
    MLPModel,
    OraclePredictor,
    RandomPredictor,
    TrainConfig,
    baseline_predict,
    bce_loss_and_grads,
    build_dataset,
    build_features,
    build_targets,
    demand_set,
    hot_recall,
    init_model,
    load_dataset,
    mlp_forward,
    predict_topb,
    routing_histogram,
    save_dataset,
    train,
    window_recall,
)
from moesim.trace import Modality, RoutingTrace, Token, TraceGenConfig, generate_trace

from oracles import direct_targets


def make_trace(routes, experts, k, embeddings=None):
    n = len(routes[0])
    tokens = [
        Token(i, Modality.TEXT, 1.0, np.asarray(embeddings[i], dtype=float) if embeddings else np.zeros(2))
        for i in range(n)
    ]
    route_experts = np.array(routes, dtype=np.int64)
    route_gates = np.full((len(routes), n, k), 1.0 / k)
    return RoutingTrace(len(routes), experts, k, tokens, route_experts, route_gates)


def gen(seed=0, **kw):
    base = dict(n_visual=12, n_text=4, layers=8, experts=16, k=2,
                clusters=2, cluster_support=5, rho=0.8, visual_noise=0.2, seed=seed)
    base.update(kw)
    return generate_trace(TraceGenConfig(**base))


# -- features ----------------------------------------------------------------


def test_histogram_single_activation_one_hot():
    trace = make_trace([[[3]]], experts=8, k=1)
    h = routing_histogram(trace, [0], 0, decay=0.5)
    assert h.tolist() == [0, 0, 0, 1.0, 0, 0, 0, 0]


def test_feature_hv_mean_of_identical_embeddings():
    trace = make_trace([[[0], [1]]], experts=4, k=1, embeddings=[[2.0, 3.0], [2.0, 3.0]])
    for tok in trace.tokens:
        tok.modality = Modality.VISUAL
    feat = build_features(trace, None, 0, 0.5)
    assert feat.h_v.tolist() == [2.0, 3.0]


def test_history_decay_zero_keeps_only_current_layer():
    trace = make_trace([[[0]], [[3]]], experts=4, k=1)
    h = routing_histogram(trace, [0], 1, decay=0.0)
    assert h.tolist() == [0, 0, 0, 1.0]


def test_histogram_unit_l1():
    trace = gen()
    h = routing_histogram(trace, trace.prefill_ids(), 4, decay=0.5)
    assert float(h.sum()) == pytest.approx(1.0)


# -- targets -----------------------------------------------------------------


def test_target_near_occurrence_wins():
    # expert 0 active at d=1 and d=3; expert 1 only at d=3; expert 2 never
    routes = [[[0]], [[0]], [[3]], [[1]]]
    trace = make_trace(routes, experts=4, k=1)
    g = build_targets(trace, 0, window=5, gamma=0.8, token_ids=[0])
    assert g[0] == 1.0
    assert g[1] == pytest.approx(0.8 ** 2)
    assert g[2] == 0.0


def test_target_last_layer_all_zero():
    trace = make_trace([[[0]], [[1]]], experts=4, k=1)
    assert build_targets(trace, 1, 5, 0.8, token_ids=[0]).tolist() == [0.0] * 4


def test_target_window_truncation_monotone():
    trace = gen(seed=5)
    ids = trace.prefill_ids()
    for layer in range(trace.layers - 1):
        prev = build_targets(trace, layer, 1, 0.8, token_ids=ids)
        for w in range(2, 6):
            cur = build_targets(trace, layer, w, 0.8, token_ids=ids)
            assert np.all(cur >= prev)
            prev = cur


def test_targets_match_direct_evaluation():
    rng = np.random.default_rng(7)
    for _ in range(60):
        trace = gen(seed=int(rng.integers(1000)), layers=int(rng.integers(3, 8)))
        layer = int(rng.integers(0, trace.layers - 1))
        window = int(rng.integers(1, 6))
        gamma = float(rng.choice([0.5, 0.8, 1.0]))
        ids = list(rng.choice(trace.prefill_ids(), size=5, replace=False))
        got = build_targets(trace, layer, window, gamma, token_ids=ids)
        want = direct_targets(trace, layer, window, gamma, ids)
        assert got.tolist() == want


# -- MLP ---------------------------------------------------------------------


def test_forward_zero_weights_zero_output():
    model = init_model(4, 3, d_hidden=5, d_bottleneck=2, seed=0)
    model.w1[:] = 0; model.w2[:] = 0; model.wo[:] = 0
    assert mlp_forward(model, np.ones(4)).tolist() == [0.0, 0.0, 0.0]


def test_forward_scalar_identity_chain():
    model = MLPModel(
        w1=np.array([[1.0]]), b1=np.zeros(1),
        w2=np.array([[1.0]]), b2=np.zeros(1),
        wo=np.array([[1.0]]), bo=np.zeros(1),
    )
    assert mlp_forward(model, np.array([2.0])).tolist() == [2.0]


def test_forward_relu_kills_negative_preactivation():
    model = MLPModel(
        w1=np.array([[1.0], [-1.0]]), b1=np.zeros(2),
        w2=np.array([[1.0, 1.0]]), b2=np.zeros(1),
        wo=np.array([[1.0]]), bo=np.zeros(1),
    )
    # unit 1 sees -x and contributes nothing for positive x
    assert mlp_forward(model, np.array([3.0])).tolist() == [3.0]


def test_forward_dim_mismatch():
    model = init_model(4, 3, seed=0)
    with pytest.raises(ValidationError):
        mlp_forward(model, np.ones(5))


def fd_grads(model, x, g, h=1e-6):
    """Central finite differences over every parameter array."""
    out = {}
    for name in ("w1", "b1", "w2", "b2", "wo", "bo"):
        arr = getattr(model, name)
        grad = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            lp, _ = bce_loss_and_grads(model, x, g)
            arr[idx] = old - h
            lm, _ = bce_loss_and_grads(model, x, g)
            arr[idx] = old
            grad[idx] = (lp - lm) / (2 * h)
        out[name] = grad
    return out


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    for trial in range(5):
        d_in, n_out = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        model = init_model(d_in, n_out, d_hidden=4, d_bottleneck=3, seed=trial)
        # stay clear of relu kinks so the finite-difference oracle is valid
        while True:
            x = rng.normal(size=(3, d_in))
            z1 = x @ model.w1.T + model.b1
            z2 = np.maximum(z1, 0.0) @ model.w2.T + model.b2
            if min(np.abs(z1).min(), np.abs(z2).min()) > 1e-3:
                break
        g = rng.random((3, n_out))
        _, grads = bce_loss_and_grads(model, x, g)
        fd = fd_grads(model, x, g)
        for name in grads:
            num = np.linalg.norm(grads[name] - fd[name])
            den = max(np.linalg.norm(fd[name]), 1e-12)
            assert num / den < 1e-4, name


def toy_dataset(n=6, d_in=5, n_out=4, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.normal(size=d_in), rng.random(n_out)) for _ in range(n)]


def test_training_reduces_loss_on_repeated_example():
    rng = np.random.default_rng(2)
    x, g = rng.normal(size=4), rng.random(3)
    data = [(x, g)] * 8
    cfg = TrainConfig(learning_rate=0.1, epochs=50, batch_size=4, seed=0)
    model = train(data, cfg, d_hidden=8, d_bottleneck=4)
    virgin = init_model(4, 3, d_hidden=8, d_bottleneck=4, seed=0)
    initial, _ = bce_loss_and_grads(virgin, np.stack([x] * 8), np.stack([g] * 8))
    assert model.final_loss < initial


def test_lr_zero_keeps_initial_weights():
    data = toy_dataset()
    cfg = TrainConfig(learning_rate=0.0, epochs=3, batch_size=2, seed=5)
    model = train(data, cfg, d_hidden=6, d_bottleneck=3)
    virgin = init_model(5, 4, d_hidden=6, d_bottleneck=3, seed=5)
    assert np.array_equal(model.w1, virgin.w1)
    assert np.array_equal(model.wo, virgin.wo)


def test_training_deterministic_per_seed():
    data = toy_dataset(seed=3)
    cfg = TrainConfig(learning_rate=0.05, epochs=10, batch_size=2, seed=9, dropout_rate=0.3)
    m1 = train(data, cfg, d_hidden=6, d_bottleneck=3)
    m2 = train(data, cfg, d_hidden=6, d_bottleneck=3)
    assert np.array_equal(m1.w1, m2.w1)
    assert m1.final_loss == m2.final_loss


def test_training_nan_raises_with_step():
    rng = np.random.default_rng(0)
    data = [(rng.normal(size=4) * 10, rng.random(3)) for _ in range(4)]
    cfg = TrainConfig(learning_rate=1e150, epochs=6, batch_size=2, seed=0)
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="step"):
        train(data, cfg, d_hidden=6, d_bottleneck=3)


def test_model_save_load_round_trip(tmp_path):
    data = toy_dataset(seed=4)
    cfg = TrainConfig(epochs=5, batch_size=3, seed=1)
    model = train(data, cfg, d_hidden=6, d_bottleneck=3)
    path = tmp_path / "model.json"
    model.save(path, cfg)
    loaded = MLPModel.load(path)
    assert np.array_equal(loaded.w1, model.w1)
    assert np.array_equal(loaded.bo, model.bo)
    assert loaded.final_loss == model.final_loss
    x = np.ones(5)
    assert mlp_forward(loaded, x).tolist() == mlp_forward(model, x).tolist()


def test_dataset_save_load_round_trip(tmp_path):
    trace = gen(seed=6)
    plan = compress(trace, CompressionConfig(alpha=0.1, beta=0.5))
    data = build_dataset(trace, plan, range(1, trace.layers - 1))
    path = tmp_path / "data.jsonl"
    save_dataset(data, path)
    loaded = load_dataset(path)
    assert len(loaded) == len(data)
    for (f, t), (lf, lt) in zip(data, loaded):
        assert np.array_equal(f.concat(), lf)
        assert np.array_equal(t, lt)


# -- selection / recall --------------------------------------------------------


def test_topb_ordering():
    assert predict_topb([0.1, 0.9, 0.5], 2) == [1, 2]


def test_topb_full_budget_is_permutation():
    assert sorted(predict_topb([0.3, 0.1, 0.2, 0.9], 4)) == [0, 1, 2, 3]


def test_topb_ties_break_by_lower_id():
    assert predict_topb([0.5, 0.5, 0.5, 0.5], 3) == [0, 1, 2]


def test_hot_recall_cases():
    trace = make_trace([[[0], [1]], [[2], [3]]], experts=6, k=1)
    assert hot_recall([2, 3, 5], trace, 0, token_ids=[0, 1]) == 1.0
    assert hot_recall([4, 5], trace, 0, token_ids=[0, 1]) == 0.0
    assert hot_recall([2, 5], trace, 0, token_ids=[0, 1]) == 0.5


def test_hot_recall_ratio_definition():
    routes = [[[0], [1], [2], [3]], [[1], [2], [3], [4]]]
    trace = make_trace(routes, experts=8, k=1)
    # next-layer set {1,2,3,4}; prediction holds two of them
    assert hot_recall([1, 2, 6], trace, 0, token_ids=[0, 1, 2, 3]) == 0.5


def test_oracle_contains_next_layer_when_budget_allows():
    """Next-layer experts carry the maximum decay weight, so any budget of at
    least |next set| must include all of them."""
    for seed in range(5):
        trace = gen(seed=seed)
        ids = trace.prefill_ids()
        oracle = OraclePredictor(trace, ids, window=5, gamma=0.8)
        for layer in range(trace.layers - 1):
            actual = demand_set(trace, layer + 1, ids)
            picks = oracle.predict(layer, len(actual))
            assert actual == set(picks)


def test_oracle_recall_perfect_with_enough_budget():
    for seed in range(8):
        trace = gen(seed=seed)
        ids = trace.prefill_ids()
        oracle = OraclePredictor(trace, ids)
        for layer in range(trace.layers - 1):
            actual = demand_set(trace, layer + 1, ids)
            if len(actual) <= 10:
                assert hot_recall(oracle.predict(layer, 10), trace, layer, ids) == 1.0


def test_history_rho_one_perfect_recall():
    trace = gen(seed=2, rho=1.0, visual_noise=0.0)
    ids = trace.prefill_ids()
    hist = HistoryPredictor(trace, ids, decay=0.0)
    for layer in range(trace.layers - 1):
        actual = demand_set(trace, layer + 1, ids)
        assert hot_recall(hist.predict(layer, len(actual)), trace, layer, ids) == 1.0


def test_random_expected_recall_matches_analytic():
    trace = gen(seed=0, experts=32)
    ids = trace.prefill_ids()
    rand = RandomPredictor(trace.experts, seed=99)
    layer = 3
    actual = demand_set(trace, layer + 1, ids)
    trials = 1200
    budget = 8
    recalls = [hot_recall(rand.predict(layer, budget), trace, layer, ids) for _ in range(trials)]
    mean = float(np.mean(recalls))
    expect = budget / trace.experts
    # hypergeometric std of the per-trial recall
    kk = len(actual)
    var = (
        budget * (kk / trace.experts) * (1 - kk / trace.experts)
        * (trace.experts - budget) / (trace.experts - 1)
    ) / kk ** 2
    assert abs(mean - expect) <= 3 * math.sqrt(var / trials)


def test_random_deterministic_per_seed():
    a = RandomPredictor(16, seed=5)
    b = RandomPredictor(16, seed=5)
    assert [a.predict(0, 4) for _ in range(3)] == [b.predict(0, 4) for _ in range(3)]


def test_baseline_dispatch():
    trace = gen(seed=1)
    ids = trace.prefill_ids()
    oracle = OraclePredictor(trace, ids)
    assert baseline_predict("oracle", oracle, 2, 5) == oracle.predict(2, 5)
    with pytest.raises(ValidationError):
        baseline_predict("nope", oracle, 2, 5)
    with pytest.raises(ValidationError):
        baseline_predict("random", oracle, 2, 5)


def test_window_recall_secondary_metric():
    trace = gen(seed=3)
    ids = trace.prefill_ids()
    oracle = OraclePredictor(trace, ids)
    for layer in range(trace.layers - 2):
        picks = oracle.predict(layer, trace.experts)
        assert window_recall(picks, trace, layer, 5, ids) == 1.0


def test_compression_helps_history_prediction():
    """History recall on the compressed retained set beats the raw set."""
    comp, raw = [], []
    for seed in range(20):
        trace = gen(seed=seed, n_visual=32, n_text=8, layers=10, experts=64,
                    k=4, clusters=4, cluster_support=8, visual_noise=0.3)
        plan = compress(trace, CompressionConfig(alpha=0.1, beta=0.5, prefix_layers=(0,)))
        kept = plan.retained_ids(trace)
        allp = trace.prefill_ids()
        h_c = HistoryPredictor(trace, kept)
        h_r = HistoryPredictor(trace, allp)
        budget = 20
        comp.append(np.mean([
            hot_recall(h_c.predict(l, budget), trace, l, kept) for l in range(1, trace.layers - 1)
        ]))
        raw.append(np.mean([
            hot_recall(h_r.predict(l, budget), trace, l, allp) for l in range(1, trace.layers - 1)
        ]))
    assert float(np.mean(comp)) >= float(np.mean(raw))
