"""Construction and serialization of the three relational graphs.

All graphs share the fixed CpG node set and undirected semantics: every
edge is stored as two directed arcs with equal attributes.  G1 connects
sites whose beta-value correlation clears a threshold (signed correlation
kept as the edge attribute); G2 and G3 are unions of cliques over shared
chromosome and shared gene labels with constant attribute 1.0.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .ingest import CpGAnnotation

BUNDLE_VERSION = "relage-graphs-1"

RELATIONS = ("comethylation", "same_chromosome", "same_gene")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class RelationalGraph:
    """One edge relation over the shared node set, stored as symmetric arcs."""

    relation: str
    n_nodes: int
    src: np.ndarray        # (E,) int64 arc sources
    dst: np.ndarray        # (E,) int64 arc targets
    attr: np.ndarray       # (E,) float64, correlation for G1, 1.0 otherwise

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise GraphError(f"unknown relation {self.relation!r}")
        if not (self.src.shape == self.dst.shape == self.attr.shape):
            raise GraphError("arc arrays must have equal length")
        if self.src.size:
            if self.src.min() < 0 or max(self.src.max(), self.dst.max()) >= self.n_nodes:
                raise GraphError("arc endpoint out of range")
            if np.any(self.src == self.dst):
                raise GraphError("self-loops are not allowed")

    @property
    def n_arcs(self) -> int:
        return self.src.size

    @property
    def degrees(self) -> np.ndarray:
        """Per-node in-degree (equals out-degree by symmetry)."""
        return np.bincount(self.dst, minlength=self.n_nodes)

    @property
    def delta(self) -> float:
        """Mean over nodes of log(degree + 1), the degree-scaler statistic."""
        return float(np.log(self.degrees + 1.0).mean())


def _symmetric_from_pairs(relation: str, n_nodes: int, pairs_i: np.ndarray,
                          pairs_j: np.ndarray, attrs: np.ndarray) -> RelationalGraph:
    """Build the symmetric arc lists from one-direction pairs (i < j)."""
    src = np.concatenate([pairs_i, pairs_j]).astype(np.int64)
    dst = np.concatenate([pairs_j, pairs_i]).astype(np.int64)
    attr = np.concatenate([attrs, attrs]).astype(np.float64)
    order = np.lexsort((dst, src))
    return RelationalGraph(relation, n_nodes, src[order], dst[order], attr[order])


def build_comethylation_graph(beta: np.ndarray, threshold: float = 0.8
                              ) -> RelationalGraph:
    """G1: connect sites whose |Pearson correlation| >= threshold.

    ``beta`` must be the imputed beta matrix of the healthy training
    partition only, so test samples never leak into the topology.  The
    signed correlation is kept as the arc attribute.  Zero-variance sites
    have undefined correlations and get no edges (with a warning).
    """
    if not 0.0 < threshold <= 1.0:
        raise GraphError(f"threshold must be in (0,1], got {threshold}")
    if beta.shape[0] < 3:
        raise GraphError("need at least 3 samples to estimate correlations")
    if np.isnan(beta).any():
        raise GraphError("beta must be imputed before graph construction")
    n = beta.shape[1]
    sd = beta.std(axis=0)
    degenerate = sd == 0.0
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} zero-variance sites get no "
                      "comethylation edges")
    centered = beta - beta.mean(axis=0)
    safe_sd = np.where(degenerate, 1.0, sd)
    zscores = centered / safe_sd
    corr = (zscores.T @ zscores) / beta.shape[0]
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    np.clip(corr, -1.0, 1.0, out=corr)

    iu, ju = np.triu_indices(n, k=1)
    keep = np.abs(corr[iu, ju]) >= threshold
    return _symmetric_from_pairs("comethylation", n, iu[keep], ju[keep],
                                 corr[iu, ju][keep])


def _label_cliques(relation: str, labels: list[str | None]) -> RelationalGraph:
    n = len(labels)
    groups: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        if lab is not None:
            groups.setdefault(lab, []).append(i)
    pi, pj = [], []
    for members in groups.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                pi.append(members[a])
                pj.append(members[b])
    pi = np.array(pi, dtype=np.int64)
    pj = np.array(pj, dtype=np.int64)
    return _symmetric_from_pairs(relation, n, pi, pj, np.ones(pi.size))


def build_chromosome_graph(annots: list[CpGAnnotation]) -> RelationalGraph:
    """G2: union of cliques, one per chromosome, attribute 1.0."""
    return _label_cliques("same_chromosome", [a.chromosome for a in annots])


def build_gene_graph(annots: list[CpGAnnotation]) -> RelationalGraph:
    """G3: union of cliques per gene; sites without a gene stay isolated."""
    return _label_cliques("same_gene", [a.gene for a in annots])


@dataclass(frozen=True)
class GraphBundle:
    """The three relational graphs plus node ids and build provenance."""

    node_ids: tuple[str, ...]
    graphs: tuple[RelationalGraph, RelationalGraph, RelationalGraph]
    provenance: dict

    def __post_init__(self):
        for g, rel in zip(self.graphs, RELATIONS):
            if g.relation != rel:
                raise GraphError(f"graph order must be {RELATIONS}")
            if g.n_nodes != len(self.node_ids):
                raise GraphError("graph node count does not match node id list")

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(_bundle_dict(self), sort_keys=True).encode()).hexdigest()


def beta_hash(beta: np.ndarray) -> str:
    """Stable content hash of a beta matrix, for leakage provenance."""
    return hashlib.sha256(np.ascontiguousarray(beta).tobytes()).hexdigest()


def _bundle_dict(bundle: GraphBundle) -> dict:
    return {
        "version": BUNDLE_VERSION,
        "node_ids": list(bundle.node_ids),
        "relations": [
            {
                "relation": g.relation,
                "src": g.src.tolist(),
                "dst": g.dst.tolist(),
                "attr": g.attr.tolist(),
                "delta": g.delta,
            }
            for g in bundle.graphs
        ],
        "provenance": bundle.provenance,
    }


def save_graphs(bundle: GraphBundle, path) -> None:
    """Write the versioned bundle as JSON, gzipped when path ends in .gz."""
    payload = json.dumps(_bundle_dict(bundle), sort_keys=True).encode()
    path = str(path)
    if path.endswith(".gz"):
        # fixed mtime and no embedded filename so identical bundles are
        # byte-identical on disk
        with open(path, "wb") as raw, \
                gzip.GzipFile("", "wb", fileobj=raw, mtime=0) as fh:
            fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def load_graphs(path) -> GraphBundle:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        data = json.loads(fh.read().decode())
    if data.get("version") != BUNDLE_VERSION:
        raise GraphError(f"unsupported bundle version {data.get('version')!r}, "
                         f"expected {BUNDLE_VERSION!r}")
    node_ids = tuple(data["node_ids"])
    graphs = []
    for rec in data["relations"]:
        g = RelationalGraph(
            rec["relation"], len(node_ids),
            np.array(rec["src"], dtype=np.int64),
            np.array(rec["dst"], dtype=np.int64),
            np.array(rec["attr"], dtype=np.float64),
        )
        if abs(g.delta - rec["delta"]) > 1e-9:
            raise GraphError(f"stored delta for {g.relation} disagrees with arcs")
        graphs.append(g)
    if len(graphs) != 3:
        raise GraphError("bundle must contain exactly 3 relations")
    return GraphBundle(node_ids, tuple(graphs), data["provenance"])
