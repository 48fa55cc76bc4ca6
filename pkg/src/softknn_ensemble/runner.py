"""Experiment orchestration: config resolution and single-pass runs.

A run is fully determined by its resolved configuration plus one integer
seed: build the class-incremental stream, initialize the ensemble, train
online through every split exactly once, evaluate on every split's test set
after each stage, and derive the final accuracy, forgetting, and confusion
numbers. The wall clock only covers the training sections.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from .ensemble import EnsembleConfig, init_ensemble
from .errors import ConfigError, DataError
from .metrics import (
    ExperimentReport,
    confusion,
    evaluate,
    final_average_accuracy,
    forgetting,
)
from .soft_knn import SoftKnnConfig
from .stream_data import (
    EmbeddingDataset,
    StreamPlan,
    SyntheticSpec,
    default_splits,
    generate_synthetic_pair,
    load_embeddings,
    make_stream,
    split_test_sets,
)
from .training import AdamState, TrainConfig, train_batch

__all__ = [
    "KAPPA_BY_SIZE",
    "DatasetSpec",
    "RunConfig",
    "resolve_kappa",
    "run_config_from_dict",
    "load_dataset_pair",
    "run_single",
    "run_many",
    "aggregate_reports",
    "comparable_config",
]

# Neighbor counts paired with the ensemble sizes the defaults cover.
KAPPA_BY_SIZE = {16: 4, 64: 8, 128: 16, 1024: 32}


@dataclass(frozen=True)
class DatasetSpec:
    """Where the embeddings come from: generated clusters or files."""

    kind: str = "synthetic"
    classes: int = 10
    dim: int = 64
    train_per_class: int = 300
    test_per_class: int = 50
    center_norm: float = 1.0
    noise_std: float = 0.05
    seed: int = 7
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "files"):
            raise ConfigError(
                f"dataset.kind must be 'synthetic' or 'files', got {self.kind!r}")
        if self.kind == "files" and (not self.train_path or not self.test_path):
            raise ConfigError(
                "dataset.train_path and dataset.test_path are required "
                "when dataset.kind is 'files'")


@dataclass(frozen=True)
class RunConfig:
    """Complete experiment description with every default pinned."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    n_classifiers: int = 16
    kappa: int | None = None
    sigma: float = 5e-4
    iterations: int = 400
    gamma_threshold: float = 0.3
    tanh_scale: float = 250.0
    mode: str = "soft"
    vote_weighting: str = "distance"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 10
    train_keys: bool = False
    key_lr: float = 5e-4
    n_splits: int = 10
    class_order: tuple[int, ...] | None = None
    n_seeds: int = 5
    base_seed: int = 1
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if self.n_splits < 1:
            raise ConfigError(f"n_splits must be >= 1, got {self.n_splits}")


def resolve_kappa(n_classifiers: int, kappa: int | None) -> int:
    if kappa is not None:
        return kappa
    if n_classifiers in KAPPA_BY_SIZE:
        return KAPPA_BY_SIZE[n_classifiers]
    raise ConfigError(
        f"no default kappa for n_classifiers={n_classifiers}; "
        f"defaults exist for {sorted(KAPPA_BY_SIZE)}, pass kappa explicitly")


# Report configs carry these derived values on top of the input schema;
# accepting them lets a report's config block be replayed directly.
_DERIVED_KEYS = {
    "ensemble": {"embed_dim", "n_classes", "seed"},
    "train": {"adam_beta1", "adam_beta2", "adam_eps"},
    "stream": {"splits", "shuffle_seed", "batch_size"},
    "run": {"seed"},
}

_SECTION_FIELDS = {
    "dataset": {"kind", "classes", "dim", "train_per_class", "test_per_class",
                "center_norm", "noise_std", "seed", "train_path", "test_path"},
    "ensemble": {"n_classifiers", "kappa", "sigma", "iterations",
                 "gamma_threshold", "tanh_scale", "mode", "vote_weighting"},
    "train": {"learning_rate", "weight_decay", "batch_size", "train_keys",
              "key_lr"},
    "stream": {"n_splits", "class_order"},
    "run": {"n_seeds", "base_seed", "out_dir"},
}


def run_config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from the JSON schema, defaulting absent fields.

    Unknown sections or fields raise a ConfigError naming the offender;
    derived fields that reports add are tolerated and ignored.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown_sections = set(raw) - set(_SECTION_FIELDS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    sections: dict[str, dict] = {}
    for name, allowed in _SECTION_FIELDS.items():
        body = raw.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        derived = _DERIVED_KEYS.get(name, set())
        unknown = set(body) - allowed - derived
        if unknown:
            raise ConfigError(
                f"unknown fields in section {name!r}: {sorted(unknown)}")
        sections[name] = {k: v for k, v in body.items() if k in allowed}

    dataset = DatasetSpec(**sections["dataset"]) if sections["dataset"] \
        else DatasetSpec()
    flat: dict = {}
    flat.update(sections["ensemble"])
    flat.update(sections["train"])
    flat.update(sections["stream"])
    flat.update(sections["run"])
    if flat.get("class_order") is not None:
        flat["class_order"] = tuple(int(c) for c in flat["class_order"])
    try:
        return RunConfig(dataset=dataset, **flat)
    except TypeError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_dataset_pair(spec: DatasetSpec) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    if spec.kind == "synthetic":
        synth = SyntheticSpec(n_classes=spec.classes, embed_dim=spec.dim,
                              per_class=spec.train_per_class,
                              center_norm=spec.center_norm,
                              noise_std=spec.noise_std, seed=spec.seed)
        return generate_synthetic_pair(synth, spec.test_per_class)
    train = load_embeddings(spec.train_path)
    test = load_embeddings(spec.test_path)
    if train.embed_dim != test.embed_dim or train.n_classes != test.n_classes:
        raise DataError(
            f"train/test disagree: dims {train.embed_dim} vs {test.embed_dim}, "
            f"classes {train.n_classes} vs {test.n_classes}")
    return train, test


def _ensemble_config(rc: RunConfig, train: EmbeddingDataset,
                     seed: int) -> EnsembleConfig:
    knn = SoftKnnConfig(kappa=resolve_kappa(rc.n_classifiers, rc.kappa),
                        sigma=rc.sigma, iterations=rc.iterations,
                        gamma_threshold=rc.gamma_threshold)
    return EnsembleConfig(n_classifiers=rc.n_classifiers,
                          embed_dim=train.embed_dim,
                          n_classes=train.n_classes, soft_knn=knn,
                          mode=rc.mode, vote_weighting=rc.vote_weighting,
                          tanh_scale=rc.tanh_scale, seed=seed)


def _train_config(rc: RunConfig) -> TrainConfig:
    return TrainConfig(learning_rate=rc.learning_rate,
                       weight_decay=rc.weight_decay,
                       batch_size=rc.batch_size, train_keys=rc.train_keys,
                       key_lr=rc.key_lr)


def resolved_config_dict(rc: RunConfig, cfg: EnsembleConfig,
                         tcfg: TrainConfig, plan: StreamPlan,
                         seed: int) -> dict:
    """Everything needed to reproduce the run, defaults included."""
    return {
        "dataset": asdict(rc.dataset),
        "ensemble": {
            "n_classifiers": cfg.n_classifiers,
            "embed_dim": cfg.embed_dim,
            "n_classes": cfg.n_classes,
            "kappa": cfg.soft_knn.kappa,
            "sigma": cfg.soft_knn.sigma,
            "iterations": cfg.soft_knn.iterations,
            "gamma_threshold": cfg.soft_knn.gamma_threshold,
            "tanh_scale": cfg.tanh_scale,
            "mode": cfg.mode,
            "vote_weighting": cfg.vote_weighting,
            "seed": cfg.seed,
        },
        "train": {
            "learning_rate": tcfg.learning_rate,
            "weight_decay": tcfg.weight_decay,
            "batch_size": tcfg.batch_size,
            "train_keys": tcfg.train_keys,
            "key_lr": tcfg.key_lr,
            "adam_beta1": tcfg.adam_beta1,
            "adam_beta2": tcfg.adam_beta2,
            "adam_eps": tcfg.adam_eps,
        },
        "stream": {
            "splits": [list(s) for s in plan.splits],
            "batch_size": plan.batch_size,
            "shuffle_seed": plan.shuffle_seed,
        },
        "run": {
            "seed": seed,
            "base_seed": rc.base_seed,
            "n_seeds": rc.n_seeds,
            "out_dir": rc.out_dir,
        },
    }


def run_single(rc: RunConfig, seed: int,
               data: tuple[EmbeddingDataset, EmbeddingDataset] | None = None,
               ) -> ExperimentReport:
    """Train and evaluate one seed; returns the report without writing files.

    ``data`` short-circuits dataset construction when the caller already
    holds the train/test pair (multi-seed runs reuse it).
    """
    train_ds, test_ds = data if data is not None else load_dataset_pair(rc.dataset)
    cfg = _ensemble_config(rc, train_ds, seed)
    tcfg = _train_config(rc)
    splits = default_splits(train_ds.n_classes, rc.n_splits, rc.class_order)
    plan = StreamPlan(splits=splits, batch_size=rc.batch_size,
                      shuffle_seed=seed)
    test_sets = split_test_sets(test_ds, splits)

    state = init_ensemble(cfg)
    adam = AdamState.zeros(cfg.n_classifiers, cfg.embed_dim) \
        if tcfg.train_keys else None

    stream = make_stream(train_ds, plan)
    rows = []
    train_seconds = 0.0
    for split in splits:
        split_classes = set(split)
        n_examples = int(np.isin(train_ds.labels, list(split)).sum())
        n_batches = -(-n_examples // plan.batch_size)
        start = time.perf_counter()
        for _ in range(n_batches):
            batch = next(stream)
            if not split_classes.issuperset(batch[1].tolist()):
                raise RuntimeError("stream produced a batch outside its split")
            state, adam, _ = train_batch(state, adam, batch, cfg, tcfg)
        train_seconds += time.perf_counter() - start
        rows.append(evaluate(state, cfg, test_sets))
    matrix = np.stack(rows)

    sizes = [X.shape[0] for X, _ in test_sets]
    report = ExperimentReport(
        config=resolved_config_dict(rc, cfg, tcfg, plan, seed),
        accuracy_matrix=matrix,
        final_accuracy=final_average_accuracy(matrix, sizes),
        forgetting=forgetting(matrix) if len(splits) > 1 else 0.0,
        confusion=confusion(state, cfg, (test_ds.features, test_ds.labels)),
        train_seconds=train_seconds,
    )
    return report


def _worker_count(n_jobs: int) -> int:
    raw = os.environ.get("SOFTKNN_THREADS", "1")
    try:
        limit = int(raw)
    except ValueError:
        raise ConfigError(f"SOFTKNN_THREADS must be an integer, got {raw!r}")
    return max(1, min(limit, n_jobs))


def run_many(rc: RunConfig) -> list[ExperimentReport]:
    """One report per seed, base_seed ascending.

    Seeds are independent; SOFTKNN_THREADS > 1 runs them as parallel
    processes without changing any result.
    """
    seeds = [rc.base_seed + i for i in range(rc.n_seeds)]
    workers = _worker_count(len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(partial(run_single, rc), seeds))
    data = load_dataset_pair(rc.dataset)
    return [run_single(rc, seed, data=data) for seed in seeds]


def comparable_config(config: dict) -> dict:
    """Strip the per-seed fields so configs of sibling runs compare equal."""
    out = {k: dict(v) for k, v in config.items()}
    out["ensemble"].pop("seed", None)
    out["stream"].pop("shuffle_seed", None)
    out["run"].pop("seed", None)
    return out


def aggregate_reports(reports: list[ExperimentReport]) -> dict:
    """Mean and standard deviation of the headline numbers across seeds."""
    if not reports:
        raise ValueError("no reports to aggregate")
    first = comparable_config(reports[0].config)
    for r in reports[1:]:
        if comparable_config(r.config) != first:
            raise ConfigError("reports come from different configurations")
    acc = np.array([r.final_accuracy for r in reports])
    fgt = np.array([r.forgetting for r in reports])
    return {
        "n_runs": len(reports),
        "final_accuracy_mean": float(acc.mean()),
        "final_accuracy_std": float(acc.std()),
        "forgetting_mean": float(fgt.mean()),
        "forgetting_std": float(fgt.std()),
    }
