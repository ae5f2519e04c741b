"""The three-branch gated graph regression model.

One PNA-style message-passing layer per relational graph (4 aggregators x
3 degree scalers), node-level gated fusion of the three 64-dim branch
embeddings, a shared 64->1 compression per node, and an MLP head over the
transposed node-score vector that emits the scalar age prediction.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graphs import GraphBundle, RelationalGraph
from .ingest import N_FEATURES

PARAMS_VERSION = "relage-params-1"

EMBED_DIM = 64      # per-branch node representation width
HEAD_HIDDEN = 512   # width of the regression head's hidden layer
GATE_HIDDEN = 64
LAYERNORM_EPS = 1e-5

AGGREGATORS = ("mean", "max", "min", "std")


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    """All learnable weights plus architecture metadata.

    ``weights`` maps parameter-block names to float64 arrays.  Blocks, per
    branch k in 1..3: ``pre_w_k`` (2F+1, d_mid), ``pre_b_k`` (1, d_mid),
    ``post_w_k`` (F + 12*d_mid, 64), ``post_b_k`` (1, 64); gate:
    ``gate_w1/b1/w2/b2``; head: ``merge_w`` (64,1), ``merge_b``,
    ``head_w1`` (N,512), ``head_b1``, ``ln_gain``, ``ln_bias``,
    ``head_w2`` (512,1), ``head_b2``.
    """

    weights: dict[str, np.ndarray]
    n_nodes: int
    n_features: int = N_FEATURES
    d_mid: int = 16
    dropout: float = 0.1
    seed: int = 0
    graph_hash: str = ""
    y_mean: float = 0.0
    y_std: float = 1.0
    extra: dict = field(default_factory=dict)

    def block_names(self) -> list[str]:
        return list(self.weights)


def _branch_blocks(k: int, f: int, d_mid: int, rng, zero: bool) -> dict[str, np.ndarray]:
    def init(shape, fan_in):
        if zero:
            return np.zeros(shape)
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    pre_in = 2 * f + 1
    post_in = f + 4 * 3 * d_mid
    return {
        f"pre_w_{k}": init((pre_in, d_mid), pre_in),
        f"pre_b_{k}": np.zeros((1, d_mid)),
        f"post_w_{k}": init((post_in, EMBED_DIM), post_in),
        f"post_b_{k}": np.zeros((1, EMBED_DIM)),
    }


def init_params(n_nodes: int, n_features: int = N_FEATURES, d_mid: int = 16,
                dropout: float = 0.1, seed: int = 0, graph_hash: str = "",
                zero: bool = False) -> ModelParams:
    """He-style random initialization (or all-zero with ``zero=True``)."""
    rng = np.random.default_rng(seed)

    def init(shape, fan_in):
        if zero:
            return np.zeros(shape)
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    weights: dict[str, np.ndarray] = {}
    for k in (1, 2, 3):
        weights.update(_branch_blocks(k, n_features, d_mid, rng, zero))
    weights.update({
        "gate_w1": init((3 * EMBED_DIM, GATE_HIDDEN), 3 * EMBED_DIM),
        "gate_b1": np.zeros((1, GATE_HIDDEN)),
        "gate_w2": init((GATE_HIDDEN, 3), GATE_HIDDEN),
        "gate_b2": np.zeros((1, 3)),
        "merge_w": init((EMBED_DIM, 1), EMBED_DIM),
        "merge_b": np.zeros((1, 1)),
        "head_w1": init((n_nodes, HEAD_HIDDEN), n_nodes),
        "head_b1": np.zeros((1, HEAD_HIDDEN)),
        "ln_gain": np.ones((1, HEAD_HIDDEN)),
        "ln_bias": np.zeros((1, HEAD_HIDDEN)),
        "head_w2": init((HEAD_HIDDEN, 1), HEAD_HIDDEN),
        "head_b2": np.zeros((1, 1)),
    })
    return ModelParams(weights, n_nodes, n_features, d_mid, dropout, seed,
                       graph_hash)


class GraphCache:
    """Per-graph constants reused across forwards: arc indices tiled for a
    batch of ``b`` disjoint copies, edge attributes, and degree scalers."""

    def __init__(self, graph: RelationalGraph, batch: int):
        n, e = graph.n_nodes, graph.n_arcs
        # arcs sorted by dst so segment aggregation takes the reduceat path
        order = np.argsort(graph.dst, kind="stable")
        offs_e = np.repeat(np.arange(batch) * n, e)
        self.src = np.tile(graph.src[order], batch) + offs_e
        self.dst = np.tile(graph.dst[order], batch) + offs_e
        self.attr = ad.tensor(np.tile(graph.attr[order], batch).reshape(-1, 1))
        self.n_total = n * batch
        self.src_plan = ad.RowScatter(self.src, self.n_total)
        self.dst_plan = ad.RowScatter(self.dst, self.n_total)

        deg = graph.degrees.astype(np.float64)
        delta = graph.delta
        logdeg = np.log(deg + 1.0)
        if delta == 0.0:
            warnings.warn(f"{graph.relation}: empty graph, degree scalers set to 0")
            amp = np.zeros_like(logdeg)
            att = np.zeros_like(logdeg)
        else:
            amp = logdeg / delta
            att = np.where(deg > 0, delta / np.where(logdeg > 0, logdeg, 1.0), 0.0)
        self.amp = ad.tensor(np.tile(amp, batch).reshape(-1, 1))
        self.att = ad.tensor(np.tile(att, batch).reshape(-1, 1))


class ModelCache:
    """Caches per-batch-size graph constants for a bundle."""

    def __init__(self, bundle: GraphBundle):
        self.bundle = bundle
        self._by_batch: dict[int, list[GraphCache]] = {}

    def for_batch(self, batch: int) -> list[GraphCache]:
        if batch not in self._by_batch:
            self._by_batch[batch] = [GraphCache(g, batch) for g in self.bundle.graphs]
        return self._by_batch[batch]


def pna_branch_forward(w: dict[str, ad.Tensor], k: int, cache: GraphCache,
                       x: ad.Tensor) -> ad.Tensor:
    """One message-passing layer on one relation.

    Arc (j -> i) message: relu(pre_linear([x_i || x_j || a_ij])); the four
    aggregates per node are each scaled by {1, amplification, attenuation}
    and concatenated with the node's own features before the 64-dim output
    projection.  Input column order of the projection:
    [x || identity block || amplified block || attenuated block], each block
    holding the mean, max, min, std aggregates in that order.  ReLU and
    dropout are applied by the caller.
    """
    msg_in = ad.concat_cols([
        ad.gather_rows(x, cache.dst, cache.dst_plan),
        ad.gather_rows(x, cache.src, cache.src_plan),
        cache.attr,
    ])
    m = ad.relu(ad.add(ad.matmul(msg_in, w[f"pre_w_{k}"]), w[f"pre_b_{k}"]))
    aggs = ad.concat_cols([
        ad.segment_aggregate(m, cache.dst, cache.n_total, kind, cache.dst_plan)
        for kind in AGGREGATORS
    ])
    stacked = ad.concat_cols([
        x, aggs, ad.mul(aggs, cache.amp), ad.mul(aggs, cache.att)])
    return ad.add(ad.matmul(stacked, w[f"post_w_{k}"]), w[f"post_b_{k}"])


def gated_fusion(w: dict[str, ad.Tensor], h1: ad.Tensor, h2: ad.Tensor,
                 h3: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Node-level convex combination of the branches with learned weights."""
    z = ad.concat_cols([h1, h2, h3])
    hidden = ad.relu(ad.add(ad.matmul(z, w["gate_w1"]), w["gate_b1"]))
    alpha = ad.row_softmax(ad.add(ad.matmul(hidden, w["gate_w2"]), w["gate_b2"]))
    fused = None
    for i, h in enumerate((h1, h2, h3)):
        term = ad.mul(ad.slice_cols(alpha, i, i + 1), h)
        fused = term if fused is None else ad.add(fused, term)
    return fused, alpha


def readout_and_regress(w: dict[str, ad.Tensor], fused: ad.Tensor, batch: int,
                        n_nodes: int, p: float, rng, train: bool) -> ad.Tensor:
    """Per-node 64->1 compression, transpose to a length-N vector per sample,
    then the layernorm MLP head; returns a (batch, 1) prediction."""
    u = ad.relu(ad.add(ad.matmul(fused, w["merge_w"]), w["merge_b"]))
    v = ad.reshape(u, (batch, n_nodes))
    h = ad.add(ad.matmul(v, w["head_w1"]), w["head_b1"])
    h = ad.add(ad.mul(ad.layernorm(h, LAYERNORM_EPS), w["ln_gain"]), w["ln_bias"])
    h = ad.dropout(ad.relu(h), p, rng, train)
    return ad.add(ad.matmul(h, w["head_w2"]), w["head_b2"])


def wrap_weights(params: ModelParams, requires_grad: bool = False
                 ) -> dict[str, ad.Tensor]:
    return {name: ad.tensor(arr, requires_grad=requires_grad)
            for name, arr in params.weights.items()}


def forward_batch(w: dict[str, ad.Tensor], params: ModelParams,
                  caches: list[GraphCache], x: ad.Tensor, batch: int,
                  train: bool = False, rng: np.random.Generator | None = None,
                  branch_mask: tuple[int, int, int] = (1, 1, 1)) -> ad.Tensor:
    """Forward over ``batch`` disjoint graph copies stacked in ``x``.

    ``x`` has shape (batch * N, F).  ``branch_mask`` zeroes excluded branch
    representations end to end (the gate still runs over the concatenation
    with zero blocks); it is the single code path shared by occlusion
    explanations and ablation training.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = params.n_nodes
    if x.shape != (batch * n, params.n_features):
        raise ModelError(f"expected input shape {(batch * n, params.n_features)}, "
                         f"got {x.shape}")
    branches = []
    for k, (cache, keep) in enumerate(zip(caches, branch_mask), start=1):
        if not keep:
            branches.append(ad.tensor(np.zeros((batch * n, EMBED_DIM))))
            continue
        h = pna_branch_forward(w, k, cache, x)
        branches.append(ad.dropout(ad.relu(h), params.dropout, rng, train))
    fused, _alpha = gated_fusion(w, *branches)
    return readout_and_regress(w, fused, batch, n, params.dropout, rng, train)


def model_forward(params: ModelParams, bundle_or_cache, x: np.ndarray,
                  train: bool = False, seed: int = 0,
                  branch_mask: tuple[int, int, int] = (1, 1, 1)) -> float:
    """Single-sample prediction in years.  Deterministic when ``train`` is
    off (dropout disabled)."""
    cache = bundle_or_cache if isinstance(bundle_or_cache, ModelCache) \
        else ModelCache(bundle_or_cache)
    w = wrap_weights(params)
    rng = np.random.default_rng(seed)
    out = forward_batch(w, params, cache.for_batch(1), ad.tensor(x), 1,
                        train=train, rng=rng, branch_mask=branch_mask)
    return params.y_mean + params.y_std * out.item()


def save_params(params: ModelParams, path) -> None:
    data = {
        "version": PARAMS_VERSION,
        "weights": {k: v.tolist() for k, v in params.weights.items()},
        "meta": {
            "n_nodes": params.n_nodes,
            "n_features": params.n_features,
            "d_mid": params.d_mid,
            "dropout": params.dropout,
            "seed": params.seed,
            "graph_hash": params.graph_hash,
            "y_mean": params.y_mean,
            "y_std": params.y_std,
            "extra": params.extra,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True)


def load_params(path, bundle: GraphBundle | None = None) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("version") != PARAMS_VERSION:
        raise ModelError(f"unsupported parameter file version "
                         f"{data.get('version')!r}")
    meta = data["meta"]
    params = ModelParams(
        weights={k: np.array(v, dtype=np.float64)
                 for k, v in data["weights"].items()},
        n_nodes=meta["n_nodes"], n_features=meta["n_features"],
        d_mid=meta["d_mid"], dropout=meta["dropout"], seed=meta["seed"],
        graph_hash=meta["graph_hash"], y_mean=meta["y_mean"],
        y_std=meta["y_std"], extra=meta.get("extra", {}),
    )
    if bundle is not None:
        if params.n_nodes != len(bundle.node_ids):
            raise ModelError("parameter node count does not match graph bundle")
        if params.graph_hash and params.graph_hash != bundle.content_hash():
            raise ModelError("parameters were trained against a different "
                             "graph bundle")
    return params


def params_fingerprint(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name in sorted(params.weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.weights[name]).tobytes())
    return h.hexdigest()
