"""Frozen synthetic multi-layer encoder with depth-specialized features.

Layers are partitioned into contiguous depth groups; each group carries one
categorical attribute, embedded by a frozen Gaussian table. Within a group
the signal direction is shared but per-layer gain ramps up with depth, and
the dominant noise component (the "clutter") is drawn once per group and
scene, shared across that group's layers and patches. Concentrating weight
on a group's strongest layer therefore beats averaging the group, while
weight spent on other groups buys pure interference - the structure the
routing benchmark relies on.

Everything is a pure function of (spec, seed); stacks are never mutated
downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractError, DataError

# Per-layer signal gain ramps linearly over this range within each group.
GAIN_RANGE = (0.8, 1.4)
# Noise composition, multiplied by SceneSpec.noise_scale.
SHARED_NOISE_GAIN = 4.0
INDEP_NOISE_GAIN = 1.0
# Seed of the frozen embedding tables (the "encoder weights").
DEFAULT_WEIGHT_SEED = 90210

STACK_MAGIC = b"LSTK"
STACK_VERSION = 1
ENCODER_VERSION = "stack-v1"


@dataclass(frozen=True)
class StackDims:
    n_layers: int
    n_patches: int
    d_visual: int

    def validate(self) -> None:
        if self.n_layers < 2 or self.n_patches < 1 or self.d_visual < 1:
            raise ConfigError(f"invalid stack dims {self}")


@dataclass(frozen=True)
class SceneSpec:
    """One synthetic scene: attribute value per layer group, plus noise/seed."""

    attributes: dict[tuple[int, ...], int]
    noise_scale: float = 0.1
    seed: int = 0

    def groups(self) -> tuple[tuple[int, ...], ...]:
        return tuple(sorted(self.attributes, key=min))


@dataclass
class LayerStack:
    """Per-layer patch features [L, P, D_v] and per-layer CLS vectors [L, D_v]."""

    patch_features: np.ndarray
    cls_features: np.ndarray
    provenance: str = ""

    @property
    def n_layers(self) -> int:
        return self.patch_features.shape[0]


@dataclass(frozen=True)
class LayerEmbeddings:
    """Frozen embedding tables and per-layer gains for one world."""

    groups: tuple[tuple[int, ...], ...]
    tables: tuple[np.ndarray, ...]   # one [D_v, n_values] table per group
    gains: np.ndarray                # [L]
    n_values: int


def default_groups(n_layers: int) -> tuple[tuple[int, ...], ...]:
    """Partition 1..L into three contiguous depth groups (early/mid/late)."""
    if n_layers < 3:
        raise ConfigError(f"need at least 3 layers for depth groups, got {n_layers}")
    cuts = [round(n_layers / 3), round(2 * n_layers / 3)]
    idx = list(range(1, n_layers + 1))
    return (tuple(idx[: cuts[0]]), tuple(idx[cuts[0]: cuts[1]]), tuple(idx[cuts[1]:]))


def _check_partition(groups: tuple[tuple[int, ...], ...], n_layers: int) -> None:
    seen = [l for g in groups for l in g]
    if any(l < 1 or l > n_layers for l in seen):
        raise ConfigError(f"attribute group references a layer outside 1..{n_layers}")
    if sorted(seen) != list(range(1, n_layers + 1)):
        raise ConfigError("attribute groups must partition layers 1..L")


@lru_cache(maxsize=32)
def _cached_embeddings(n_layers: int, d_visual: int, groups: tuple[tuple[int, ...], ...],
                       n_values: int, weight_seed: int) -> LayerEmbeddings:
    rng = np.random.default_rng(weight_seed)
    tables = tuple(rng.normal(size=(d_visual, n_values)) / np.sqrt(d_visual) for _ in groups)
    gains = np.zeros(n_layers)
    lo, hi = GAIN_RANGE
    for g in groups:
        if len(g) == 1:
            gains[g[0] - 1] = 0.5 * (lo + hi)
        else:
            for i, l in enumerate(sorted(g)):
                gains[l - 1] = lo + (hi - lo) * i / (len(g) - 1)
    return LayerEmbeddings(groups=groups, tables=tables, gains=gains, n_values=n_values)


def make_embeddings(dims: StackDims, groups: tuple[tuple[int, ...], ...], n_values: int,
                    weight_seed: int = DEFAULT_WEIGHT_SEED) -> LayerEmbeddings:
    _check_partition(groups, dims.n_layers)
    return _cached_embeddings(dims.n_layers, dims.d_visual,
                              tuple(tuple(sorted(g)) for g in groups), n_values, weight_seed)


def generate_stack(spec: SceneSpec, dims: StackDims,
                   embeddings: LayerEmbeddings | None = None) -> LayerStack:
    """Render one scene into a frozen layer stack.

    Layer l carries gain[l] * table[group(l)][:, value] plus the group's
    shared clutter and independent per-layer/patch noise, all scaled by
    spec.noise_scale. CLS vectors are patch means.
    """
    dims.validate()
    if spec.noise_scale < 0:
        raise ConfigError(f"noise_scale must be nonnegative, got {spec.noise_scale}")
    groups = spec.groups()
    _check_partition(groups, dims.n_layers)
    if embeddings is None:
        n_values = max(spec.attributes.values()) + 1
        embeddings = make_embeddings(dims, groups, n_values)
    if tuple(tuple(sorted(g)) for g in embeddings.groups) != groups:
        raise ConfigError("embeddings were built for a different group structure")
    for g, v in spec.attributes.items():
        if not (0 <= v < embeddings.n_values):
            raise ConfigError(f"attribute value {v} outside 0..{embeddings.n_values - 1} for group {g}")

    rng = np.random.default_rng(spec.seed)
    L, P, D = dims.n_layers, dims.n_patches, dims.d_visual
    patch = np.empty((L, P, D))
    clutter = {g: rng.normal(size=D) for g in groups}
    eps = rng.normal(size=(L, P, D))
    for gi, g in enumerate(groups):
        signal = embeddings.tables[gi][:, spec.attributes[g]]
        for l in g:
            patch[l - 1] = (embeddings.gains[l - 1] * signal
                            + spec.noise_scale * (SHARED_NOISE_GAIN * clutter[g]
                                                  + INDEP_NOISE_GAIN * eps[l - 1]))
    return LayerStack(patch_features=patch, cls_features=patch.mean(axis=1),
                      provenance=f"{ENCODER_VERSION} seed={spec.seed} noise={spec.noise_scale}")


def penultimate_cls(stack: LayerStack) -> np.ndarray:
    """CLS vector of layer L-1 (1-indexed), the global image feature."""
    if stack.n_layers < 2:
        raise ContractError(f"penultimate layer undefined for {stack.n_layers} layers")
    return stack.cls_features[stack.n_layers - 2].copy()


# ---------------------------------------------------------------------------
# binary stack dumps


def dump_stack(stack: LayerStack, path) -> None:
    L, P, D = stack.patch_features.shape
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(struct.pack("<iiii", STACK_VERSION, L, P, D))
        fh.write(stack.patch_features.astype("<f8").tobytes())
        fh.write(stack.cls_features.astype("<f8").tobytes())


def read_stack_from(fh) -> LayerStack:
    head = fh.read(4)
    if head != STACK_MAGIC:
        raise DataError(f"not a layer-stack file (bad magic {head!r})")
    version, L, P, D = struct.unpack("<iiii", fh.read(16))
    if version != STACK_VERSION:
        raise DataError(f"unsupported stack format version {version}")
    n_patch = L * P * D
    buf = fh.read(8 * (n_patch + L * D))
    if len(buf) != 8 * (n_patch + L * D):
        raise DataError("truncated layer-stack payload")
    flat = np.frombuffer(buf, dtype="<f8")
    return LayerStack(patch_features=flat[:n_patch].reshape(L, P, D).copy(),
                      cls_features=flat[n_patch:].reshape(L, D).copy(),
                      provenance="loaded")


def load_stack(path) -> LayerStack:
    try:
        with open(path, "rb") as fh:
            return read_stack_from(fh)
    except OSError as exc:
        raise DataError(f"cannot read stack file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# linear probes (generator self-test)


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Least-squares one-vs-all readout: argmax of [X | 1] @ W."""
    X = np.hstack([features, np.ones((features.shape[0], 1))])
    Y = np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return W


def probe_accuracy(W: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    X = np.hstack([features, np.ones((features.shape[0], 1))])
    pred = (X @ W).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels, dtype=np.int64)))


def sample_layer_means(dims: StackDims, groups: tuple[tuple[int, ...], ...], n_values: int,
                       n: int, noise_scale: float, seed: int,
                       embeddings: LayerEmbeddings | None = None):
    """Draw n scenes; return per-layer patch means [n, L, D_v] and labels [n, G]."""
    if embeddings is None:
        embeddings = make_embeddings(dims, groups, n_values)
    rng = np.random.default_rng(seed)
    feats = np.empty((n, dims.n_layers, dims.d_visual))
    labels = np.empty((n, len(groups)), dtype=np.int64)
    for i in range(n):
        values = rng.integers(0, n_values, size=len(groups))
        spec = SceneSpec(attributes={g: int(v) for g, v in zip(groups, values)},
                         noise_scale=noise_scale, seed=int(rng.integers(0, 2**62)))
        stack = generate_stack(spec, dims, embeddings)
        feats[i] = stack.cls_features
        labels[i] = values
    return feats, labels


def specialization_matrix(dims: StackDims, groups: tuple[tuple[int, ...], ...], n_values: int,
                          noise_scale: float, seed: int = 0, n_train: int = 400,
                          n_test: int = 400) -> np.ndarray:
    """Probe accuracy of every (attribute group, layer) pair; the self-test
    asserts home-group layers beat all others."""
    tr_f, tr_y = sample_layer_means(dims, groups, n_values, n_train, noise_scale, seed)
    te_f, te_y = sample_layer_means(dims, groups, n_values, n_test, noise_scale, seed + 1)
    acc = np.zeros((len(groups), dims.n_layers))
    for gi in range(len(groups)):
        for l in range(dims.n_layers):
            W = fit_linear_probe(tr_f[:, l], tr_y[:, gi], n_values)
            acc[gi, l] = probe_accuracy(W, te_f[:, l], te_y[:, gi])
    return acc
