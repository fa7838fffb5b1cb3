"""GIN-style message-passing encoder over edge-weighted aggregation.

Each layer computes, for node v, MLP((1+eps) * H_v + sum_{u->v} w_uv * H_u)
with eps fixed at 0. Self-loop entries of the weight vector are pinned to 1,
so a single weighted scatter over the full edge list realizes the self term
and the neighbor sum in one pass. Readout is a per-graph sum; the projection
head is a two-layer perceptron with a relu in between.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .graphdata import GraphBatch

GIN_EPS = 0.0  # fixed, non-learnable


@dataclass
class MlpParams:
    """Two-layer perceptron: x @ w1 + b1, relu, @ w2 + b2."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def from_tensors(cls, ts):
        return cls(*ts)


GinLayerParams = MlpParams


@dataclass
class EncoderParams:
    layers: list

    def tensors(self):
        return [t for layer in self.layers for t in layer.tensors()]

    @classmethod
    def from_tensors(cls, ts):
        if len(ts) % 4:
            raise ShapeError("encoder-params", [], f"{len(ts)} tensors")
        return cls([MlpParams.from_tensors(ts[i:i + 4])
                    for i in range(0, len(ts), 4)])

    @property
    def out_dim(self):
        return self.layers[-1].w2.shape[1]


ProjectionParams = MlpParams


@dataclass(frozen=True)
class ModelDims:
    """Architecture defaults sized for desk-scale CPU runs."""

    feature_dim: int
    hidden: int = 32
    layers: int = 3
    proj_dim: int = 32
    aug_hidden: int = 16


def mlp_forward(x, p: MlpParams):
    h = ad.relu(ad.add(ad.matmul(x, p.w1), p.b1))
    return ad.add(ad.matmul(h, p.w2), p.b2)


def gin_layer_forward(batch: GraphBatch, h, weights, layer: MlpParams):
    """One message-passing round with per-edge weights.

    ``weights`` is an (n_edges, 1) column aligned with the batch edge list;
    its trailing self-loop entries must be 1.
    """
    if weights.shape != (batch.n_edges, 1):
        raise ShapeError("gin-layer", [weights.shape],
                         f"expected ({batch.n_edges}, 1) edge weights")
    if h.shape[0] != batch.n_nodes:
        raise ShapeError("gin-layer", [h.shape],
                         f"expected {batch.n_nodes} node rows")
    msgs = ad.gather_rows(h, batch.edge_src)
    agg = ad.scatter_add_rows(ad.mul(msgs, weights), batch.edge_dst,
                              batch.n_nodes)
    return mlp_forward(agg, layer)


def encode(batch: GraphBatch, weights, phi: EncoderParams):
    """K rounds of message passing; returns the final node matrix."""
    h = ad.constant(batch.features)
    for layer in phi.layers:
        h = gin_layer_forward(batch, h, weights, layer)
    return h


def readout(batch: GraphBatch, h):
    """Sum-pool node rows into one row per graph."""
    return ad.scatter_add_rows(h, batch.graph_of_node, batch.n_graphs)


def project(h, psi: ProjectionParams):
    """Map pooled representations to contrastive features (no normalization
    here; cosine similarity normalizes later)."""
    if h.shape[1] != psi.w1.shape[0]:
        raise ShapeError("project", [h.shape, psi.w1.shape],
                         "representation width does not match the head")
    return mlp_forward(h, psi)


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _init_mlp(rng, d_in, d_hidden, d_out, cls=MlpParams):
    return cls(
        w1=ad.constant(_xavier(rng, d_in, d_hidden)),
        b1=ad.constant(np.zeros((1, d_hidden))),
        w2=ad.constant(_xavier(rng, d_hidden, d_out)),
        b2=ad.constant(np.zeros((1, d_out))),
    )


def init_params(dims: ModelDims, seed):
    """Deterministic parameter init for encoder, projection head, augmenter.

    Weights are uniform within +-sqrt(6 / (fan_in + fan_out)); biases zero.
    Returned tensors are detached constants; the training loop adopts them
    onto its tape.
    """
    from .augmenter import AugmenterParams

    rng = np.random.default_rng(seed)
    layers = []
    d_in = dims.feature_dim
    for _ in range(dims.layers):
        layers.append(_init_mlp(rng, d_in, dims.hidden, dims.hidden))
        d_in = dims.hidden
    phi = EncoderParams(layers)
    psi = _init_mlp(rng, dims.hidden, dims.hidden, dims.proj_dim)
    sigma = _init_mlp(rng, 2 * dims.feature_dim, dims.aug_hidden, 1,
                      cls=AugmenterParams)
    return phi, psi, sigma
