"""Shared fixtures: tiny pipeline configs, batch builders, and the harness
that rebuilds a pipeline from flat parameter arrays for finite-difference
checks over every learnable coordinate."""

import numpy as np

from layerroute import encoder, fusion, model, router
from layerroute.config import ModelDims
from layerroute.numkit import Node


def tiny_dims() -> ModelDims:
    return ModelDims(n_layers=3, n_patches=2, d_visual=4, d_text=5, d_proj=4, d_dec=4,
                     router_hidden=(6,), connector_hidden=(6,), decoder_hidden=(6,),
                     n_classes=3)


def random_batch(dims: ModelDims, batch_size: int, seed: int) -> model.Batch:
    """Random scenes and query embeddings at the given dims."""
    rng = np.random.default_rng(seed)
    groups = encoder.default_groups(dims.n_layers)
    emb = encoder.make_embeddings(dims.stack(), groups, dims.n_classes)
    stacks, cls = [], []
    for _ in range(batch_size):
        spec = encoder.SceneSpec(
            attributes={g: int(rng.integers(0, dims.n_classes)) for g in groups},
            noise_scale=0.1, seed=int(rng.integers(0, 2**62)))
        st = encoder.generate_stack(spec, dims.stack(), emb)
        stacks.append(st.patch_features)
        cls.append(encoder.penultimate_cls(st))
    return model.Batch(f_text=rng.normal(size=(batch_size, dims.d_text)),
                       stacks=np.stack(stacks), cls_penultimate=np.stack(cls),
                       targets=rng.integers(0, dims.n_classes, size=batch_size))


def flatten_pipeline(pipe: model.PipelineParams) -> tuple[list[str], list[np.ndarray]]:
    named = model.named_parameters(pipe)
    names = sorted(named)
    return names, [named[n].value.copy() for n in names]


def rebuild_pipeline(template: model.PipelineParams, names: list[str],
                     leaves: list[Node]) -> model.PipelineParams:
    """Clone the pipeline structure with the given nodes as its parameters."""
    byname = dict(zip(names, leaves))

    def pick(tag_pairs):
        return [(byname[f"{tag}.w"], byname[f"{tag}.b"]) for tag in tag_pairs]

    rt = template.router
    router_tags = [f"router.h{i}" for i in range(len(rt.layers) - 1)] + ["router.out"]
    new_router = router.RouterParams(
        mode=rt.mode, layers=pick(router_tags),
        w_t=byname.get("router.w_t"), w_v=byname.get("router.w_v"),
        d_text=rt.d_text, d_visual=rt.d_visual, d_proj=rt.d_proj, n_layers=rt.n_layers)
    conn_tags = [f"connector.l{i}" for i in range(len(template.connector.layers))]
    new_conn = fusion.ConnectorParams(layers=pick(conn_tags),
                                      d_visual=template.connector.d_visual,
                                      d_dec=template.connector.d_dec)
    dec_tags = [f"decoder.l{i}" for i in range(len(template.decoder.layers))]
    new_dec = model.DecoderParams(layers=pick(dec_tags), d_in=template.decoder.d_in,
                                  n_classes=template.decoder.n_classes)
    return model.PipelineParams(router=new_router, connector=new_conn, decoder=new_dec,
                                mode=template.mode)


def randomize_router_output_layer(params, seed: int, scl: float = 0.6) -> None:
    """Give the zero-initialized output layer random weights (tests that need a
    non-uniform router)."""
    rng = np.random.default_rng(seed)
    w, b = params.layers[-1]
    w.value = rng.normal(size=w.value.shape) * scl
    b.value = rng.normal(size=b.value.shape) * scl
