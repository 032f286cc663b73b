"""Query-conditioned layer router.

A small MLP maps a query embedding (text-only mode) or the concatenation of
projected text and global-image features (multimodal mode) to one logit per
encoder layer; softmax turns the logits into mixing weights. The final MLP
layer is zero-initialized so a fresh router is exactly uniform, which makes
collapse and diversification during training attributable to the losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ContractError, DimensionError
from .numkit import Node

TEXT_ONLY = "text"
MULTIMODAL = "multimodal"
ROUTER_MODES = (TEXT_ONLY, MULTIMODAL)


@dataclass
class RouterParams:
    mode: str
    layers: list[tuple[Node, Node]]   # (weight [in, out], bias [out]) per MLP layer
    w_t: Node | None                  # [d_text, d_proj], multimodal only
    w_v: Node | None                  # [d_visual, d_proj], multimodal only
    d_text: int
    d_visual: int
    d_proj: int
    n_layers: int

    def mlp_input_dim(self) -> int:
        return self.d_text if self.mode == TEXT_ONLY else 2 * self.d_proj


@dataclass
class RouterOutput:
    logits: Node   # [L]
    weights: Node  # [L], softmax(logits)


def init_router(d_text: int, n_layers: int, hidden: tuple[int, ...] = (64,),
                mode: str = TEXT_ONLY, d_visual: int = 0, d_proj: int = 64,
                seed: int = 0) -> RouterParams:
    """Fan-in-scaled Gaussian hidden layers, zero-initialized output layer."""
    if mode not in ROUTER_MODES:
        raise ContractError(f"unknown router mode {mode!r}")
    if mode == MULTIMODAL and (d_visual < 1 or d_proj < 1):
        raise ContractError("multimodal router needs d_visual and d_proj")
    rng = np.random.default_rng(seed)
    in_dim = d_text if mode == TEXT_ONLY else 2 * d_proj
    sizes = [in_dim, *hidden, n_layers]
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if i == len(sizes) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append((nk.parameter(w), nk.parameter(np.zeros(fan_out))))
    w_t = w_v = None
    if mode == MULTIMODAL:
        w_t = nk.parameter(rng.normal(size=(d_text, d_proj)) / np.sqrt(d_text))
        w_v = nk.parameter(rng.normal(size=(d_visual, d_proj)) / np.sqrt(d_visual))
    return RouterParams(mode=mode, layers=layers, w_t=w_t, w_v=w_v, d_text=d_text,
                        d_visual=d_visual, d_proj=d_proj, n_layers=n_layers)


def mlp_rows(layers: list[tuple[Node, Node]], x: Node) -> Node:
    """Apply an MLP to each row of a rank-2 input; GELU between layers."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = nk.add(nk.matmul(h, w), b)
        if i < len(layers) - 1:
            h = nk.gelu(h)
    return h


def _as_row(x, dim: int, name: str) -> Node:
    node = nk.as_node(x)
    if node.value.ndim != 1 or node.value.shape[0] != dim:
        raise DimensionError(f"{name}: expected a vector of extent {dim}, got shape {node.value.shape}")
    return nk.reshape(node, (1, dim))


def route_text_batch(params: RouterParams, f_text) -> tuple[Node, Node]:
    """Logits and weights for a [B, d_text] batch of query embeddings."""
    if params.mode != TEXT_ONLY:
        raise ContractError("route_text requires a text-only router")
    x = nk.as_node(f_text)
    if x.value.ndim != 2 or x.value.shape[1] != params.d_text:
        raise DimensionError(f"route_text: expected [B, {params.d_text}], got {x.value.shape}")
    z = mlp_rows(params.layers, x)
    return z, nk.softmax(z)


def route_text(params: RouterParams, f_text) -> RouterOutput:
    """Layer distribution for one query embedding (text-only mode)."""
    if params.mode != TEXT_ONLY:
        raise ContractError("route_text requires a text-only router")
    x = _as_row(f_text, params.d_text, "route_text")
    z = nk.reshape(mlp_rows(params.layers, x), (params.n_layers,))
    return RouterOutput(logits=z, weights=nk.softmax(z))


def multimodal_input_batch(params: RouterParams, f_text, f_image) -> Node:
    """Project text and image features to d_proj each and concatenate."""
    xt, xv = nk.as_node(f_text), nk.as_node(f_image)
    if xt.value.ndim != 2 or xt.value.shape[1] != params.d_text:
        raise DimensionError(f"route_multimodal: expected text [B, {params.d_text}], got {xt.value.shape}")
    if xv.value.ndim != 2 or xv.value.shape[1] != params.d_visual:
        raise DimensionError(f"route_multimodal: expected image [B, {params.d_visual}], got {xv.value.shape}")
    if xt.value.shape[0] != xv.value.shape[0]:
        raise DimensionError("route_multimodal: text and image batches differ in length")
    return nk.concat(nk.matmul(xt, params.w_t), nk.matmul(xv, params.w_v))


def route_multimodal_batch(params: RouterParams, f_text, f_image) -> tuple[Node, Node]:
    if params.mode != MULTIMODAL:
        raise ContractError("route_multimodal requires a multimodal router")
    z = mlp_rows(params.layers, multimodal_input_batch(params, f_text, f_image))
    return z, nk.softmax(z)


def route_multimodal(params: RouterParams, f_text, f_image) -> RouterOutput:
    """Layer distribution for one query conditioned on the global image feature
    (the penultimate-layer CLS vector)."""
    if params.mode != MULTIMODAL:
        raise ContractError("route_multimodal requires a multimodal router")
    xt = _as_row(f_text, params.d_text, "route_multimodal text")
    xv = _as_row(f_image, params.d_visual, "route_multimodal image")
    f_multi = nk.concat(nk.matmul(xt, params.w_t), nk.matmul(xv, params.w_v))
    z = nk.reshape(mlp_rows(params.layers, f_multi), (params.n_layers,))
    return RouterOutput(logits=z, weights=nk.softmax(z))


def mean_pool(token_embeddings: np.ndarray) -> np.ndarray:
    """Pool a [T, d_text] token matrix into one query embedding."""
    arr = np.asarray(token_embeddings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DimensionError(f"mean_pool: expected non-empty [T, d], got shape {arr.shape}")
    return arr.mean(axis=0)


def router_parameters(params: RouterParams) -> dict[str, Node]:
    named: dict[str, Node] = {}
    for i, (w, b) in enumerate(params.layers):
        tag = "out" if i == len(params.layers) - 1 else f"h{i}"
        named[f"router.{tag}.w"] = w
        named[f"router.{tag}.b"] = b
    if params.w_t is not None:
        named["router.w_t"] = params.w_t
    if params.w_v is not None:
        named["router.w_v"] = params.w_v
    return named
