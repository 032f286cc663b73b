"""Full pipeline assembly: router -> fusion -> connector -> decoder head.

The decoder head is the toy stand-in for the language model: it pools the
connected tokens, concatenates the query embedding, and predicts the answer
class. Freezing is structural - a parameter excluded from training simply
has requires_grad off, so it never appears in a gradient map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fusion, numkit as nk, router
from .errors import DimensionError
from .numkit import Node


@dataclass
class DecoderParams:
    layers: list[tuple[Node, Node]]   # (weight, bias) pairs
    d_in: int
    n_classes: int


@dataclass
class PipelineParams:
    router: router.RouterParams
    connector: fusion.ConnectorParams
    decoder: DecoderParams
    mode: str


@dataclass
class Batch:
    """One training/eval batch in array form."""

    f_text: np.ndarray        # [B, d_text]
    stacks: np.ndarray        # [B, L, P, d_visual] or shared [L, P, d_visual]
    cls_penultimate: np.ndarray  # [B, d_visual]
    targets: np.ndarray       # [B] int answer classes

    @property
    def size(self) -> int:
        return self.f_text.shape[0]


@dataclass
class ForwardResult:
    router_logits: Node   # [B, L]
    weights: Node         # [B, L]
    tokens: Node          # [B, P, d_dec]
    answer_logits: Node   # [B, n_classes]


def init_decoder(d_in: int, hidden: tuple[int, ...], n_classes: int, seed: int = 0) -> DecoderParams:
    rng = np.random.default_rng(seed)
    sizes = [d_in, *hidden, n_classes]
    layers = [(nk.parameter(rng.normal(size=(sizes[i], sizes[i + 1])) / np.sqrt(sizes[i])),
               nk.parameter(np.zeros(sizes[i + 1])))
              for i in range(len(sizes) - 1)]
    return DecoderParams(layers=layers, d_in=d_in, n_classes=n_classes)


def init_pipeline(dims, mode: str, seed: int) -> PipelineParams:
    """Build all learnable components from one seed. `dims` carries the model
    extents (see config.ModelDims)."""
    seeds = np.random.SeedSequence(seed).spawn(3)
    child = [int(s.generate_state(1)[0]) for s in seeds]
    rt = router.init_router(d_text=dims.d_text, n_layers=dims.n_layers,
                            hidden=tuple(dims.router_hidden), mode=mode,
                            d_visual=dims.d_visual, d_proj=dims.d_proj, seed=child[0])
    conn = fusion.init_connector(dims.d_visual, tuple(dims.connector_hidden), dims.d_dec,
                                 seed=child[1])
    dec = init_decoder(dims.d_dec + dims.d_text, tuple(dims.decoder_hidden), dims.n_classes,
                       seed=child[2])
    return PipelineParams(router=rt, connector=conn, decoder=dec, mode=mode)


def decoder_forward(params: DecoderParams, pooled: Node, f_text: Node) -> Node:
    x = nk.concat(pooled, f_text)
    if x.value.shape[1] != params.d_in:
        raise DimensionError(f"decoder: expected input extent {params.d_in}, got {x.value.shape[1]}")
    h = x
    for i, (w, b) in enumerate(params.layers):
        h = nk.add(nk.matmul(h, w), b)
        if i < len(params.layers) - 1:
            h = nk.gelu(h)
    return h


def forward_batch(params: PipelineParams, batch: Batch) -> ForwardResult:
    f_text = nk.constant(batch.f_text)
    if params.mode == router.TEXT_ONLY:
        logits, weights = router.route_text_batch(params.router, f_text)
    else:
        logits, weights = router.route_multimodal_batch(params.router, f_text,
                                                        nk.constant(batch.cls_penultimate))
    fused = fusion.fuse_batch(weights, nk.constant(batch.stacks))
    tokens = fusion.connect_batch(params.connector, fused)
    pooled = nk.mean_axis(tokens, 1)
    answer = decoder_forward(params.decoder, pooled, f_text)
    return ForwardResult(router_logits=logits, weights=weights, tokens=tokens,
                         answer_logits=answer)


def named_parameters(params: PipelineParams) -> dict[str, Node]:
    named = router.router_parameters(params.router)
    named.update(fusion.connector_parameters(params.connector))
    for i, (w, b) in enumerate(params.decoder.layers):
        named[f"decoder.l{i}.w"] = w
        named[f"decoder.l{i}.b"] = b
    return named


def component_of(name: str) -> str:
    return name.split(".", 1)[0]


def _collect_layers(arrays: dict[str, np.ndarray], tags: list[str]) -> list[tuple[Node, Node]]:
    return [(nk.parameter(arrays[f"{t}.w"]), nk.parameter(arrays[f"{t}.b"])) for t in tags]


def pipeline_from_arrays(arrays: dict[str, np.ndarray]) -> PipelineParams:
    """Rebuild a pipeline from named checkpoint arrays; the architecture is
    inferred from the names and shapes."""
    names = set(arrays)
    n_router_hidden = sum(1 for n in names if n.startswith("router.h") and n.endswith(".w"))
    router_tags = [f"router.h{i}" for i in range(n_router_hidden)] + ["router.out"]
    conn_tags = [f"connector.l{i}" for i in range(
        sum(1 for n in names if n.startswith("connector.l") and n.endswith(".w")))]
    dec_tags = [f"decoder.l{i}" for i in range(
        sum(1 for n in names if n.startswith("decoder.l") and n.endswith(".w")))]
    missing = [t + s for t in router_tags + conn_tags + dec_tags for s in (".w", ".b")
               if t + s not in names]
    if missing or not conn_tags or not dec_tags:
        raise DimensionError(f"checkpoint arrays do not form a pipeline (missing {missing})")
    mode = router.MULTIMODAL if "router.w_t" in names else router.TEXT_ONLY
    r_layers = _collect_layers(arrays, router_tags)
    n_layers = r_layers[-1][0].value.shape[1]
    if mode == router.MULTIMODAL:
        w_t = nk.parameter(arrays["router.w_t"])
        w_v = nk.parameter(arrays["router.w_v"])
        d_text, d_proj = w_t.value.shape
        d_visual = w_v.value.shape[0]
    else:
        w_t = w_v = None
        d_text = r_layers[0][0].value.shape[0]
        d_proj = 0
        d_visual = 0
    rt = router.RouterParams(mode=mode, layers=r_layers, w_t=w_t, w_v=w_v, d_text=d_text,
                             d_visual=d_visual, d_proj=d_proj, n_layers=n_layers)
    c_layers = _collect_layers(arrays, conn_tags)
    conn = fusion.ConnectorParams(layers=c_layers, d_visual=c_layers[0][0].value.shape[0],
                                  d_dec=c_layers[-1][0].value.shape[1])
    d_layers = _collect_layers(arrays, dec_tags)
    dec = DecoderParams(layers=d_layers, d_in=d_layers[0][0].value.shape[0],
                        n_classes=d_layers[-1][0].value.shape[1])
    return PipelineParams(router=rt, connector=conn, decoder=dec, mode=mode)


def set_trainable(params: PipelineParams, *, router_on: bool, connector_on: bool,
                  decoder_on: bool) -> None:
    flags = {"router": router_on, "connector": connector_on, "decoder": decoder_on}
    for name, node in named_parameters(params).items():
        node.requires_grad = flags[component_of(name)]


def trainable_parameters(params: PipelineParams) -> dict[str, Node]:
    return {n: p for n, p in named_parameters(params).items() if p.requires_grad}
