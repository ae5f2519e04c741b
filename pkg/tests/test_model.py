"""Model forward pass against naive reference implementations."""

import numpy as np
import pytest

from relage import autodiff as ad
from relage import graphs, ingest, model


def random_bundle(seed, n_nodes):
    rng = np.random.default_rng(seed)
    beta = rng.random((30, n_nodes))
    annots = [
        ingest.CpGAnnotation(
            f"cg{i}", f"c{rng.integers(3)}", 100 + i,
            gene=f"g{rng.integers(3)}" if rng.random() < 0.7 else None)
        for i in range(n_nodes)
    ]
    return graphs.GraphBundle(
        tuple(a.cpg_id for a in annots),
        (graphs.build_comethylation_graph(beta, 0.3),
         graphs.build_chromosome_graph(annots),
         graphs.build_gene_graph(annots)),
        {})


def naive_pna_branch(weights, k, graph, x):
    """Literal per-node double loop over the message-passing layer."""
    n, f = x.shape
    pre_w, pre_b = weights[f"pre_w_{k}"], weights[f"pre_b_{k}"]
    post_w, post_b = weights[f"post_w_{k}"], weights[f"post_b_{k}"]
    d_mid = pre_w.shape[1]
    delta = graph.delta

    per_node = np.zeros((n, 12 * d_mid))
    for i in range(n):
        msgs = []
        for e in range(graph.n_arcs):
            if graph.dst[e] != i:
                continue
            j = graph.src[e]
            inp = np.concatenate([x[i], x[j], [graph.attr[e]]])
            msgs.append(np.maximum(inp @ pre_w + pre_b[0], 0.0))
        if msgs:
            m = np.stack(msgs)
            var = (m ** 2).mean(axis=0) - m.mean(axis=0) ** 2
            aggs = np.concatenate([
                m.mean(axis=0), m.max(axis=0), m.min(axis=0),
                np.sqrt(np.maximum(var, 0.0) + ad.EPS_STD)])
        else:
            aggs = np.zeros(4 * d_mid)
        deg = int((graph.dst == i).sum())
        amp = np.log(deg + 1.0) / delta if delta else 0.0
        att = (delta / np.log(deg + 1.0)) if deg > 0 and delta else 0.0
        per_node[i] = np.concatenate([aggs, amp * aggs, att * aggs])
    stacked = np.column_stack([x, per_node])
    return stacked @ post_w + post_b


@pytest.mark.parametrize("seed", range(6))
def test_pna_branch_matches_naive_double_loop(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 20))
    bundle = random_bundle(seed, n)
    params = model.init_params(n_nodes=n, seed=seed)
    cache = model.ModelCache(bundle).for_batch(1)
    x_np = rng.random((n, ingest.N_FEATURES))
    for k in (1, 2, 3):
        got = model.pna_branch_forward(model.wrap_weights(params), k,
                                       cache[k - 1], ad.tensor(x_np)).value
        want = naive_pna_branch(params.weights, k, bundle.graphs[k - 1], x_np)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_degree_scaler_product_is_one_for_connected_nodes():
    bundle = random_bundle(3, 12)
    cache = model.GraphCache(bundle.graphs[1], batch=1)
    deg = bundle.graphs[1].degrees
    prod = cache.amp.value[:, 0] * cache.att.value[:, 0]
    np.testing.assert_allclose(prod[(deg > 0) & (np.log(deg + 1) > 0)], 1.0,
                               atol=1e-12)
    assert np.all(cache.att.value[deg == 0] == 0.0)


def test_gated_fusion_alpha_simplex_and_convex_hull():
    rng = np.random.default_rng(4)
    params = model.init_params(n_nodes=8, seed=4)
    w = model.wrap_weights(params)
    hs = [ad.tensor(rng.normal(size=(8, model.EMBED_DIM))) for _ in range(3)]
    fused, alpha = model.gated_fusion(w, *hs)
    assert alpha.shape == (8, 3)
    assert np.all(alpha.value >= 0)
    np.testing.assert_allclose(alpha.value.sum(axis=1), 1.0, atol=1e-9)
    lo = np.minimum.reduce([h.value for h in hs])
    hi = np.maximum.reduce([h.value for h in hs])
    assert np.all(fused.value >= lo - 1e-12)
    assert np.all(fused.value <= hi + 1e-12)


def test_forward_shape_validation():
    bundle = random_bundle(5, 6)
    params = model.init_params(n_nodes=6, seed=0)
    with pytest.raises(model.ModelError, match="shape"):
        model.model_forward(params, bundle, np.zeros((5, ingest.N_FEATURES)))


def test_eval_forward_deterministic():
    bundle = random_bundle(6, 10)
    params = model.init_params(n_nodes=10, seed=1)
    x = np.random.default_rng(0).random((10, ingest.N_FEATURES))
    y1 = model.model_forward(params, bundle, x)
    y2 = model.model_forward(params, bundle, x)
    assert y1 == y2


def test_train_forward_applies_dropout():
    bundle = random_bundle(6, 10)
    params = model.init_params(n_nodes=10, seed=1, dropout=0.5)
    x = np.random.default_rng(0).random((10, ingest.N_FEATURES))
    y1 = model.model_forward(params, bundle, x, train=True, seed=1)
    y2 = model.model_forward(params, bundle, x, train=True, seed=2)
    assert y1 != y2


def test_branch_mask_blocks_branch_parameters():
    bundle = random_bundle(7, 10)
    params = model.init_params(n_nodes=10, seed=3)
    x = np.random.default_rng(1).random((10, ingest.N_FEATURES))
    base = model.model_forward(params, bundle, x, branch_mask=(1, 0, 1))
    perturbed = model.init_params(n_nodes=10, seed=3)
    perturbed.weights["pre_w_2"] += 10.0
    assert model.model_forward(perturbed, bundle, x,
                               branch_mask=(1, 0, 1)) == base
    assert model.model_forward(perturbed, bundle, x) != \
        model.model_forward(params, bundle, x)


def test_batched_forward_equals_per_sample():
    bundle = random_bundle(8, 9)
    params = model.init_params(n_nodes=9, seed=3)
    rng = np.random.default_rng(2)
    xs = rng.random((4, 9, ingest.N_FEATURES))
    cache = model.ModelCache(bundle)
    w = model.wrap_weights(params)
    batched = model.forward_batch(w, params, cache.for_batch(4),
                                  ad.tensor(xs.reshape(36, -1)), 4).value[:, 0]
    singles = [model.forward_batch(w, params, cache.for_batch(1),
                                   ad.tensor(xs[i]), 1).item()
               for i in range(4)]
    np.testing.assert_allclose(batched, singles, atol=1e-12)


def test_zero_init_predicts_target_mean():
    bundle = random_bundle(9, 8)
    params = model.init_params(n_nodes=8, seed=0, zero=True)
    from dataclasses import replace
    params = replace(params, y_mean=55.0, y_std=9.0)
    x = np.random.default_rng(3).random((8, ingest.N_FEATURES))
    assert model.model_forward(params, bundle, x) == pytest.approx(55.0)


def test_params_round_trip(tmp_path):
    bundle = random_bundle(10, 7)
    params = model.init_params(n_nodes=7, seed=5,
                               graph_hash=bundle.content_hash())
    path = tmp_path / "params.json"
    model.save_params(params, path)
    back = model.load_params(path, bundle)
    assert model.params_fingerprint(back) == model.params_fingerprint(params)
    assert back.n_nodes == 7 and back.graph_hash == params.graph_hash


def test_load_params_rejects_version_and_bundle_mismatch(tmp_path):
    import json
    bundle = random_bundle(11, 7)
    params = model.init_params(n_nodes=7, seed=5,
                               graph_hash=bundle.content_hash())
    path = tmp_path / "params.json"
    model.save_params(params, path)

    data = json.loads(path.read_text())
    data["version"] = "bogus"
    (tmp_path / "bad.json").write_text(json.dumps(data))
    with pytest.raises(model.ModelError, match="version"):
        model.load_params(tmp_path / "bad.json")

    other = random_bundle(12, 7)
    with pytest.raises(model.ModelError, match="different"):
        model.load_params(path, other)


def test_init_params_deterministic():
    a = model.init_params(n_nodes=6, seed=7)
    b = model.init_params(n_nodes=6, seed=7)
    c = model.init_params(n_nodes=6, seed=8)
    assert model.params_fingerprint(a) == model.params_fingerprint(b)
    assert model.params_fingerprint(a) != model.params_fingerprint(c)
