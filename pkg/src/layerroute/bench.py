"""Synthetic query benchmark, evaluation metrics, and the two analysis tools:
per-category routing heatmaps and the load-balancing sweep.

Query families map to depth groups of the synthetic encoder: `existence`
questions read the early group (presence cues live shallow), `detail`
questions read the mid or late group (fine structure lives deeper), and
`general` questions ask about any one group, so the category as a whole
spans the full depth range. Stage-1 pretraining uses a single constant
"describe it" embedding whose answer lives in the late group, which gives
the router no text signal to exploit - layer exploration there is driven
entirely by the load-balancing term.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder, model, objective, trainer
from .config import TrainConfig
from .errors import ConfigError, ContractError, DataError, DimensionError
from .trainer import Checkpoint, MetricsRow

CATEGORIES = ("general", "existence", "detail")
GENERIC = "generic"
# (kind, asked depth-group) pairs with a frozen embedding each
QUERY_KINDS = ((GENERIC, 2), ("existence", 0), ("detail", 1), ("detail", 2),
               ("general", 0), ("general", 1), ("general", 2))
QUERY_TABLE_TAG = 7301
STREAM_TAG = 4177
HELD_OUT_TAG = 9239
DEFAULT_THRESHOLD = 0.6

# Operating points reported for the full-scale training of this mechanism
# (mean VQA score vs. grounding-check accuracy). Context for reading desk
# sweeps qualitatively; never used as expected outputs.
FULL_SCALE_TRADEOFF_POINTS = {
    ("none", 0.0): (63.81, 87.30),
    ("pretrain_only", 0.005): (63.72, 87.34),
    ("pretrain_only", 0.01): (64.11, 87.91),
    ("pretrain_only", 0.1): (63.96, 87.01),
    ("full_stage", 0.005): (63.29, 87.76),
    ("full_stage", 0.01): (62.56, 84.32),
}

DEFAULT_SWEEP_GRID = (("none", 0.0), ("pretrain_only", 0.005), ("pretrain_only", 0.01),
                      ("pretrain_only", 0.1), ("full_stage", 0.005), ("full_stage", 0.01))


@dataclass(frozen=True)
class QuerySample:
    f_text: np.ndarray
    category: str
    oracle_layers: tuple[int, ...]   # 1-indexed, nonempty
    target: int
    stack_ref: int                   # scene seed


@dataclass
class Dataset:
    samples: list[QuerySample]
    stacks: list[encoder.LayerStack]
    groups: tuple[tuple[int, ...], ...]
    n_classes: int

    def __len__(self) -> int:
        return len(self.samples)


class World:
    """Frozen benchmark world: depth groups, embedding tables, query table."""

    def __init__(self, cfg: TrainConfig):
        dims = cfg.dims
        self.cfg = cfg
        self.dims = dims
        self.groups = encoder.default_groups(dims.n_layers)
        self.embeddings = encoder.make_embeddings(dims.stack(), self.groups, dims.n_classes,
                                                  weight_seed=cfg.data.world_seed)
        rng = np.random.default_rng(np.random.SeedSequence(
            [QUERY_TABLE_TAG, cfg.data.world_seed % (2 ** 63)]))
        self.query_table = {kind: rng.normal(size=dims.d_text) / np.sqrt(dims.d_text)
                            for kind in QUERY_KINDS}

    def draw(self, rng: np.random.Generator, category: str):
        """One sample of the given category; returns (sample, stack)."""
        if category == GENERIC:
            asked = 2
        elif category == "existence":
            asked = 0
        elif category == "detail":
            asked = int(rng.integers(1, 3))
        elif category == "general":
            asked = int(rng.integers(0, 3))
        else:
            raise ConfigError(f"unknown query category {category!r}")
        values = rng.integers(0, self.dims.n_classes, size=len(self.groups))
        scene_seed = int(rng.integers(0, 2 ** 62))
        spec = encoder.SceneSpec(
            attributes={g: int(v) for g, v in zip(self.groups, values)},
            noise_scale=self.cfg.data.noise_scale, seed=scene_seed)
        stack = encoder.generate_stack(spec, self.dims.stack(), self.embeddings)
        base = self.query_table[(category, asked)]
        if category == GENERIC:
            f_text = base.copy()   # the constant pretraining prompt
        else:
            f_text = base + self.cfg.data.query_noise * rng.normal(size=self.dims.d_text)
        sample = QuerySample(f_text=f_text, category=category,
                             oracle_layers=tuple(sorted(self.groups[asked])),
                             target=int(values[asked]), stack_ref=scene_seed)
        return sample, stack

    def batch_from(self, rng: np.random.Generator, categories: list[str]) -> model.Batch:
        """Vectorized batch synthesis; same scene distribution as `draw` but
        with bulk noise draws (its own deterministic stream)."""
        dims = self.dims
        B, G = len(categories), len(self.groups)
        L, P, D = dims.n_layers, dims.n_patches, dims.d_visual
        asked = np.empty(B, dtype=np.int64)
        for i, cat in enumerate(categories):
            if cat in (GENERIC,):
                asked[i] = 2
            elif cat == "existence":
                asked[i] = 0
            elif cat == "detail":
                asked[i] = int(rng.integers(1, 3))
            elif cat == "general":
                asked[i] = int(rng.integers(0, 3))
            else:
                raise ConfigError(f"unknown query category {cat!r}")
        values = rng.integers(0, dims.n_classes, size=(B, G))
        ns = self.cfg.data.noise_scale
        clutter = rng.normal(size=(B, G, D))
        eps = rng.normal(size=(B, L, P, D))
        patch = np.empty((B, L, P, D))
        gains = self.embeddings.gains
        for gi, g in enumerate(self.groups):
            sig = self.embeddings.tables[gi][:, values[:, gi]].T          # [B, D]
            base = ns * encoder.SHARED_NOISE_GAIN * clutter[:, gi]
            for l in g:
                patch[:, l - 1] = ((gains[l - 1] * sig + base)[:, None, :]
                                   + ns * encoder.INDEP_NOISE_GAIN * eps[:, l - 1])
        f_noise = rng.normal(size=(B, dims.d_text))
        f_text = np.empty((B, dims.d_text))
        targets = np.empty(B, dtype=np.int64)
        for i, cat in enumerate(categories):
            base_emb = self.query_table[(cat, int(asked[i]))]
            f_text[i] = base_emb if cat == GENERIC \
                else base_emb + self.cfg.data.query_noise * f_noise[i]
            targets[i] = values[i, asked[i]]
        return model.Batch(f_text=f_text, stacks=patch,
                           cls_penultimate=patch[:, L - 2].mean(axis=1), targets=targets)


class TrainingStream:
    """Deterministic batch source: stage 1 serves the generic prompt, stage 2
    serves the three query categories in seeded random order."""

    def __init__(self, cfg: TrainConfig):
        self.world = World(cfg)
        self.seed = cfg.seed % (2 ** 63)

    def batch(self, stage: int, step: int, batch_size: int) -> model.Batch:
        rng = np.random.default_rng(np.random.SeedSequence(
            [STREAM_TAG, self.seed, stage, step]))
        if stage == 1:
            cats = [GENERIC] * batch_size
        else:
            cats = [CATEGORIES[i] for i in rng.integers(0, len(CATEGORIES), size=batch_size)]
        return self.world.batch_from(rng, cats)


def generate_dataset(cfg: TrainConfig, n_per_category: int, seed: int) -> Dataset:
    """Evaluation dataset: n samples of each category plus their stacks."""
    if n_per_category < 0:
        raise ConfigError(f"n_per_category must be nonnegative, got {n_per_category}")
    world = World(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([HELD_OUT_TAG, seed % (2 ** 63)]))
    samples, stacks = [], []
    for cat in CATEGORIES:
        for _ in range(n_per_category):
            sample, stack = world.draw(rng, cat)
            samples.append(sample)
            stacks.append(stack)
    return Dataset(samples=samples, stacks=stacks, groups=world.groups,
                   n_classes=cfg.dims.n_classes)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class CategoryStats:
    n: int
    routing_accuracy: float
    task_accuracy: float
    group_mass: list[float]   # mean routing mass per depth group


@dataclass
class EvalReport:
    routing_accuracy: float
    task_accuracy: float
    mean_entropy: float
    threshold: float
    categories: list[str]          # one per row of `weights`
    weights: np.ndarray            # [N, L]
    per_category: dict[str, CategoryStats]


def _as_pipeline(params) -> model.PipelineParams:
    if isinstance(params, Checkpoint):
        return model.pipeline_from_arrays(params.arrays)
    return params


def evaluate(params, dataset: Dataset, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Routing and task accuracy of a checkpoint (or pipeline) on a dataset."""
    pipe = _as_pipeline(params)
    if not dataset.samples:
        raise ContractError("cannot evaluate on an empty dataset")
    if dataset.stacks[0].patch_features.shape[0] != pipe.router.n_layers:
        raise DimensionError("checkpoint and dataset disagree on the number of layers")
    batch = model.Batch(
        f_text=np.stack([s.f_text for s in dataset.samples]),
        stacks=np.stack([st.patch_features for st in dataset.stacks]),
        cls_penultimate=np.stack([encoder.penultimate_cls(st) for st in dataset.stacks]),
        targets=np.asarray([s.target for s in dataset.samples], dtype=np.int64))
    out = model.forward_batch(pipe, batch)
    weights = out.weights.value.copy()
    preds = out.answer_logits.value.argmax(axis=1)

    hits, corrects = [], []
    for i, sample in enumerate(dataset.samples):
        mass = weights[i, [l - 1 for l in sample.oracle_layers]].sum()
        hits.append(mass >= threshold)
        corrects.append(preds[i] == sample.target)
    hits = np.asarray(hits)
    corrects = np.asarray(corrects)

    per_category: dict[str, CategoryStats] = {}
    cats = [s.category for s in dataset.samples]
    for cat in sorted(set(cats)):
        idx = np.asarray([i for i, c in enumerate(cats) if c == cat])
        mass = [float(weights[idx][:, [l - 1 for l in g]].sum(axis=1).mean())
                for g in dataset.groups]
        per_category[cat] = CategoryStats(n=len(idx),
                                          routing_accuracy=float(hits[idx].mean()),
                                          task_accuracy=float(corrects[idx].mean()),
                                          group_mass=mass)
    return EvalReport(routing_accuracy=float(hits.mean()), task_accuracy=float(corrects.mean()),
                      mean_entropy=objective.entropy(weights.mean(axis=0)),
                      threshold=threshold, categories=cats, weights=weights,
                      per_category=per_category)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "routing_accuracy": report.routing_accuracy,
        "task_accuracy": report.task_accuracy,
        "mean_entropy": report.mean_entropy,
        "threshold": report.threshold,
        "per_category": {cat: dataclasses.asdict(stats)
                         for cat, stats in report.per_category.items()},
    }


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_heatmap(report: EvalReport, path) -> None:
    """Per-query layer weights as CSV; every row is a probability vector."""
    n_layers = report.weights.shape[1]
    header = "category,query_id," + ",".join(f"layer_{l}" for l in range(1, n_layers + 1))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for i, cat in enumerate(report.categories):
                row = ",".join(repr(x) for x in report.weights[i])
                fh.write(f"{cat},{i},{row}\n")
    except OSError as exc:
        raise DataError(f"cannot write heatmap to {path}: {exc}") from exc


def read_heatmap(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read heatmap {path}: {exc}") from exc
    if not lines or not lines[0].startswith("category,query_id,layer_1"):
        raise DataError(f"{path} is not a heatmap file")
    cats, rows = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        cats.append(parts[0])
        rows.append([float(x) for x in parts[2:]])
    return cats, np.asarray(rows)


# ---------------------------------------------------------------------------
# linear-probe oracle for dataset soundness


def _layer_mean_features(dataset: Dataset, layer_set: tuple[int, ...]) -> np.ndarray:
    cols = [l - 1 for l in layer_set]
    return np.stack([ds_stack.cls_features[cols].reshape(-1) for ds_stack in dataset.stacks])


def probe_task_accuracy(train_ds: Dataset, test_ds: Dataset, use_oracle: bool = True) -> float:
    """Least-squares probe reading only oracle (or only non-oracle) layers,
    fit and scored per (category, oracle-set) stratum."""
    n_layers = train_ds.stacks[0].patch_features.shape[0]
    strata = sorted({(s.category, s.oracle_layers) for s in train_ds.samples})
    total, correct = 0, 0
    for cat, oracle in strata:
        layer_set = oracle if use_oracle else tuple(
            l for l in range(1, n_layers + 1) if l not in oracle)
        tr_idx = [i for i, s in enumerate(train_ds.samples)
                  if (s.category, s.oracle_layers) == (cat, oracle)]
        te_idx = [i for i, s in enumerate(test_ds.samples)
                  if (s.category, s.oracle_layers) == (cat, oracle)]
        if not tr_idx or not te_idx:
            continue
        tr_feats = _layer_mean_features(train_ds, layer_set)[tr_idx]
        te_feats = _layer_mean_features(test_ds, layer_set)[te_idx]
        tr_y = np.asarray([train_ds.samples[i].target for i in tr_idx])
        te_y = np.asarray([test_ds.samples[i].target for i in te_idx])
        W = encoder.fit_linear_probe(tr_feats, tr_y, train_ds.n_classes)
        pred = (np.hstack([te_feats, np.ones((len(te_idx), 1))]) @ W).argmax(axis=1)
        correct += int((pred == te_y).sum())
        total += len(te_idx)
    if total == 0:
        raise ContractError("no overlapping strata between train and test datasets")
    return correct / total


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(dataset: Dataset, out_dir) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stacks_path = out / "stacks.bin"
    with open(stacks_path, "wb") as fh:
        for stack in dataset.stacks:
            tmp = out / ".stack_tmp"
            encoder.dump_stack(stack, tmp)
            fh.write(tmp.read_bytes())
    (out / ".stack_tmp").unlink()
    queries_path = out / "queries.csv"
    d_text = dataset.samples[0].f_text.shape[0] if dataset.samples else 0
    with open(queries_path, "w", encoding="utf-8") as fh:
        cols = ",".join(f"f_{j}" for j in range(d_text))
        fh.write(f"query_id,category,target,oracle_layers,stack_ref,{cols}\n")
        for i, s in enumerate(dataset.samples):
            oracle = ";".join(str(l) for l in s.oracle_layers)
            feats = ",".join(repr(x) for x in s.f_text)
            fh.write(f"{i},{s.category},{s.target},{oracle},{s.stack_ref},{feats}\n")
    manifest_path = out / "dataset.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump({"n_samples": len(dataset.samples), "n_classes": dataset.n_classes,
                   "groups": [list(g) for g in dataset.groups],
                   "files": ["queries.csv", "stacks.bin"]}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [str(queries_path), str(stacks_path), str(manifest_path)]


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    samples: list[QuerySample] = []
    with open(root / "queries.csv", "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("query_id,category,target,oracle_layers,stack_ref"):
            raise DataError(f"{root / 'queries.csv'} has an unexpected header")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) < 6:
                raise DataError(f"malformed query row: {line.strip()!r}")
            oracle = tuple(int(x) for x in parts[3].split(";"))
            samples.append(QuerySample(
                f_text=np.asarray([float(x) for x in parts[5:]]),
                category=parts[1], oracle_layers=oracle, target=int(parts[2]),
                stack_ref=int(parts[4])))
    stacks: list[encoder.LayerStack] = []
    with open(root / "stacks.bin", "rb") as fh:
        for _ in range(manifest["n_samples"]):
            stacks.append(encoder.read_stack_from(fh))
    if len(stacks) != len(samples):
        raise DataError(f"dataset has {len(samples)} queries but {len(stacks)} stacks")
    return Dataset(samples=samples, stacks=stacks,
                   groups=tuple(tuple(g) for g in manifest["groups"]),
                   n_classes=int(manifest["n_classes"]))


# ---------------------------------------------------------------------------
# lambda sweep


SCHEDULE_KINDS = ("none", "pretrain_only", "full_stage")


def make_schedule(kind: str, lam: float, epsilon: float = 1e-8) -> objective.StageSchedule:
    if kind == "none":
        return objective.StageSchedule(0.0, 0.0, epsilon)
    if kind == "pretrain_only":
        return objective.StageSchedule(lam, 0.0, epsilon)
    if kind == "full_stage":
        return objective.StageSchedule(lam, lam, epsilon)
    raise ConfigError(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")


@dataclass
class SweepRow:
    schedule_kind: str
    lam: float
    task_accuracy_general: float | None
    routing_accuracy_existence: float | None
    mean_entropy: float | None
    stage2_entropy_gap: float | None
    error: str | None = None


def run_cell(cfg: TrainConfig, n_eval_per_category: int = 100):
    """Train both stages and evaluate on a held-out dataset; returns
    (TrainResult, EvalReport, held-out Dataset)."""
    stream = TrainingStream(cfg)
    result = trainer.train(cfg, stream, stage="both")
    held_out = generate_dataset(cfg, n_eval_per_category, seed=cfg.seed)
    report = evaluate(result.checkpoints[2], held_out)
    return result, report, held_out


def stage2_entropy_gap(metrics: list[MetricsRow], n_layers: int) -> float:
    """Mean distance of the batch routing entropy from uniform over stage 2."""
    ents = [r.entropy for r in metrics if r.stage == 2]
    if not ents:
        raise ContractError("no stage-2 metrics rows")
    return float(math.log(n_layers) - np.mean(ents))


def sweep_lambda(base_cfg: TrainConfig, grid=DEFAULT_SWEEP_GRID,
                 n_eval_per_category: int = 100) -> list[SweepRow]:
    """Full two-stage train + eval per (schedule kind, lambda) cell; cell
    failures are recorded and the sweep continues."""
    rows: list[SweepRow] = []
    for kind, lam in grid:
        try:
            cfg = dataclasses.replace(base_cfg,
                                      schedule=make_schedule(kind, lam,
                                                             base_cfg.schedule.epsilon))
            result, report, _ = run_cell(cfg, n_eval_per_category)
            rows.append(SweepRow(
                schedule_kind=kind, lam=lam,
                task_accuracy_general=report.per_category["general"].task_accuracy,
                routing_accuracy_existence=report.per_category["existence"].routing_accuracy,
                mean_entropy=report.mean_entropy,
                stage2_entropy_gap=stage2_entropy_gap(result.metrics, base_cfg.dims.n_layers)))
        except Exception as exc:  # record and continue with the other cells
            rows.append(SweepRow(schedule_kind=kind, lam=lam, task_accuracy_general=None,
                                 routing_accuracy_existence=None, mean_entropy=None,
                                 stage2_entropy_gap=None, error=f"{type(exc).__name__}: {exc}"))
    return rows


SWEEP_HEADER = ("schedule,lambda,task_accuracy_general,routing_accuracy_existence,"
                "mean_entropy,stage2_entropy_gap,error")


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    def fmt(x):
        return "" if x is None else repr(x)

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# reference operating points from the full-scale system "
                 "(vqa_avg, grounding_acc); qualitative context only\n")
        for (kind, lam), (vqa, grounding) in FULL_SCALE_TRADEOFF_POINTS.items():
            fh.write(f"# reference {kind} lambda={lam}: ({vqa}, {grounding})\n")
        fh.write(SWEEP_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.schedule_kind},{r.lam!r},{fmt(r.task_accuracy_general)},"
                     f"{fmt(r.routing_accuracy_existence)},{fmt(r.mean_entropy)},"
                     f"{fmt(r.stage2_entropy_gap)},{r.error or ''}\n")


def parse_grid(spec: str):
    """Parse 'none:0;pretrain_only:0.01;full_stage:0.005' into grid pairs."""
    if spec.strip() == "default":
        return DEFAULT_SWEEP_GRID
    grid = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"grid cell {part!r} is not of the form kind:lambda")
        kind, lam = part.split(":", 1)
        kind = kind.strip()
        if kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {kind!r} in grid")
        try:
            grid.append((kind, float(lam)))
        except ValueError as exc:
            raise ConfigError(f"bad lambda in grid cell {part!r}") from exc
    if not grid:
        raise ConfigError("empty sweep grid")
    return tuple(grid)
