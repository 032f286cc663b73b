"""Weighted fusion of the layer stack and the per-patch MLP connector.

Fusion is a convex combination of per-layer patch features under the router
weights; exactly P fused tokens come out, never L*P. The connector then maps
each fused patch into the decoder embedding space. Patch features exclude
the CLS vectors; those reach the model only through the multimodal router's
image path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .encoder import LayerStack
from .errors import ContractError, DimensionError
from .numkit import Node

SIMPLEX_TOL = 1e-6


@dataclass
class ConnectorParams:
    layers: list[tuple[Node, Node]]   # (weight, bias) pairs, d_visual -> d_dec
    d_visual: int
    d_dec: int


@dataclass
class FusedFeature:
    raw: Node      # [P, d_visual] convex combination of layer features
    tokens: Node   # [P, d_dec] after the connector


def init_connector(d_visual: int, hidden: tuple[int, ...], d_dec: int, seed: int = 0) -> ConnectorParams:
    rng = np.random.default_rng(seed)
    sizes = [d_visual, *hidden, d_dec]
    layers = [(nk.parameter(rng.normal(size=(sizes[i], sizes[i + 1])) / np.sqrt(sizes[i])),
               nk.parameter(np.zeros(sizes[i + 1])))
              for i in range(len(sizes) - 1)]
    return ConnectorParams(layers=layers, d_visual=d_visual, d_dec=d_dec)


def _check_simplex_rows(w: np.ndarray) -> None:
    sums = w.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL) or np.any(w < -SIMPLEX_TOL):
        raise ContractError("fusion weights must lie on the probability simplex")


def fuse(stack, w) -> Node:
    """Convex combination of layer features: out[p, d] = sum_l w[l] * F[l, p, d]."""
    raw = stack.patch_features if isinstance(stack, LayerStack) else stack
    stack_node = nk.as_node(raw)
    w_node = nk.as_node(w)
    if stack_node.value.ndim != 3:
        raise DimensionError(f"fuse: expected stack [L, P, D], got shape {stack_node.value.shape}")
    if w_node.value.ndim != 1 or w_node.value.shape[0] != stack_node.value.shape[0]:
        raise DimensionError(f"fuse: weight extent {w_node.value.shape} does not match "
                             f"{stack_node.value.shape[0]} layers")
    _check_simplex_rows(w_node.value)
    return nk.layer_mix(w_node, stack_node)


def fuse_batch(weights, stacks) -> Node:
    """Batched fusion; stacks may be per-sample [B, L, P, D] or one shared [L, P, D]."""
    w_node = nk.as_node(weights)
    _check_simplex_rows(w_node.value)
    return nk.layer_mix(w_node, nk.as_node(stacks))


def connect(params: ConnectorParams, raw) -> Node:
    """Apply the connector MLP to every patch row of [P, d_visual]."""
    x = nk.as_node(raw)
    if x.value.ndim != 2 or x.value.shape[1] != params.d_visual:
        raise DimensionError(f"connect: expected [P, {params.d_visual}], got {x.value.shape}")
    h = x
    for i, (wgt, b) in enumerate(params.layers):
        h = nk.add(nk.matmul(h, wgt), b)
        if i < len(params.layers) - 1:
            h = nk.gelu(h)
    return h


def connect_batch(params: ConnectorParams, fused: Node) -> Node:
    """Connector over [B, P, d_visual]; same MLP applied to every patch."""
    v = fused.value if isinstance(fused, Node) else np.asarray(fused)
    if v.ndim != 3 or v.shape[2] != params.d_visual:
        raise DimensionError(f"connect_batch: expected [B, P, {params.d_visual}], got {v.shape}")
    b, p, d = v.shape
    flat = nk.reshape(nk.as_node(fused), (b * p, d))
    out = connect(params, flat)
    return nk.reshape(out, (b, p, params.d_dec))


def fuse_and_connect(stack, w, params: ConnectorParams) -> FusedFeature:
    raw = fuse(stack, w)
    return FusedFeature(raw=raw, tokens=connect(params, raw))


def connector_parameters(params: ConnectorParams) -> dict[str, Node]:
    named: dict[str, Node] = {}
    for i, (w, b) in enumerate(params.layers):
        named[f"connector.l{i}.w"] = w
        named[f"connector.l{i}.b"] = b
    return named
