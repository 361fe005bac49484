"""Experiment harness: scenario matrices, ablation variants, top-k sweep,
metrics, confusion matrices, and deterministic report files.

All RNG is derived from (base_seed, condition, shot, task, repeat) keys, and
every variant within a scenario sees identical support/query splits, so
variant deltas are never sampling noise. Task evaluation runs in a thread
pool; results are keyed by task id, making outputs byte-identical for any
worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import adapt, infer, sample_source_batch
from .episodic import meta_train, sample_episode
from .errors import ArgumentError, ConfigurationError
from .model import ModelConfig, ModelState, save_checkpoint
from .seeding import seed_for
from .twinsim import (
    DEFAULT_SHIFT,
    DatasetArchive,
    DatasetConfig,
    DomainShift,
    Label,
    LABEL_NAMES,
    N_CLASSES,
    SPEEDS_RPM,
    SignalConfig,
    load_archive,
    make_dataset,
    save_archive,
)

VARIANTS = ("proposed", "wo_tta", "wo_cga", "wo_mpl", "mscnn_1d", "baseline")


@dataclass(frozen=True)
class VariantSpec:
    """How one ablation variant is built and evaluated."""

    arch: str
    use_tta: bool
    use_augmentation: bool


_VARIANT_SPECS = {
    "proposed": VariantSpec("mpl", True, True),
    "wo_tta": VariantSpec("mpl", False, False),
    "wo_cga": VariantSpec("mpl", True, False),
    "wo_mpl": VariantSpec("plain", True, True),
    "mscnn_1d": VariantSpec("mscnn1d", True, True),
    "baseline": VariantSpec("plain", False, False),
}


def variant_network(variant: str) -> VariantSpec:
    """Construction recipe for a variant: network arch + adaptation flags."""
    try:
        return _VARIANT_SPECS[variant]
    except KeyError:
        raise ArgumentError(f"unknown variant '{variant}' (known: {', '.join(VARIANTS)})") from None


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "desk"
    base_seed: int = 0
    workers: int = 1
    conditions: tuple[int, ...] = SPEEDS_RPM
    shots: tuple[int, ...] = (1, 3, 5, 10)
    tasks_per_scenario: int = 20
    repeats: int = 5
    queries_per_class: int = 15
    variants: tuple[str, ...] = VARIANTS
    iterations: int = 200
    meta_lr: float = 1e-3
    tta_epochs: int = 10
    tta_lr: float = 1e-3
    k_augment: int = 3
    source_batch_size: int = 40
    freeze_augment: bool = False
    shrinkage: float = 1e-3
    source_per_class: int = 200
    target_per_class: int = 40
    model: ModelConfig = field(default_factory=ModelConfig)
    signal: SignalConfig = field(default_factory=SignalConfig)
    shift: DomainShift = field(default_factory=lambda: DEFAULT_SHIFT)

    def __post_init__(self):
        if min(self.tasks_per_scenario, self.repeats, self.queries_per_class, self.iterations) < 1:
            raise ConfigurationError("counts must be positive")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        unknown = [v for v in self.variants if v not in _VARIANT_SPECS]
        if unknown:
            raise ConfigurationError(f"unknown variants: {unknown}")
        bad_speeds = [c for c in self.conditions if c not in SPEEDS_RPM]
        if bad_speeds:
            raise ConfigurationError(f"conditions must be among {SPEEDS_RPM}, got {bad_speeds}")
        for shot in self.shots:
            if shot + self.queries_per_class > self.target_per_class:
                raise ConfigurationError(
                    f"target pool of {self.target_per_class}/class cannot serve "
                    f"{shot}-shot support plus {self.queries_per_class} queries"
                )

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "profile",
                "base_seed",
                "workers",
                "tasks_per_scenario",
                "repeats",
                "queries_per_class",
                "iterations",
                "meta_lr",
                "tta_epochs",
                "tta_lr",
                "k_augment",
                "source_batch_size",
                "freeze_augment",
                "shrinkage",
                "source_per_class",
                "target_per_class",
            )
        }
        d["conditions"] = list(self.conditions)
        d["shots"] = list(self.shots)
        d["variants"] = list(self.variants)
        d["model"] = self.model.to_dict()
        d["signal"] = {
            "sample_rate_hz": self.signal.sample_rate_hz,
            "amplitude": self.signal.amplitude,
            "amp_jitter": self.signal.amp_jitter,
            "harmonics": [list(h) for h in self.signal.harmonics],
            "swf_severity": self.signal.swf_severity,
            "brb_sideband": self.signal.brb_sideband,
            "slip": self.signal.slip,
            "mrf_depth": self.signal.mrf_depth,
        }
        d["shift"] = {
            "noise_std": self.shift.noise_std,
            "amp_imbalance": list(self.shift.amp_imbalance),
            "phase_jitter_rad": self.shift.phase_jitter_rad,
            "harmonic_distortion": self.shift.harmonic_distortion,
            "dc_offset": self.shift.dc_offset,
        }
        return d


# Profile presets: "paper" mirrors the reference setup, "desk" shrinks the
# signal scale and network so the full matrix fits a desktop CPU budget,
# "ci" is a minutes-scale smoke matrix.
_PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": {
        "model": {
            "mscnn_channels": 4,
            "top_k": 5,
            "stage_channels": [8, 16, 24],
            "blocks_per_stage": 2,
            "embedding_dim": 24,
        },
        "signal": {"sample_rate_hz": 1280.0},
        "source_per_class": 200,
        "target_per_class": 40,
    },
    "ci": {
        "conditions": [2700],
        "shots": [1, 5],
        "tasks_per_scenario": 3,
        "repeats": 1,
        "iterations": 20,
        "model": {
            "mscnn_channels": 4,
            "top_k": 3,
            "stage_channels": [8, 8, 8],
            "blocks_per_stage": 1,
            "embedding_dim": 8,
        },
        "signal": {"sample_rate_hz": 1280.0},
        "source_per_class": 60,
        "target_per_class": 40,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(data: dict | None = None) -> ExperimentConfig:
    """Build a config from profile defaults plus overrides (nested dict)."""
    data = dict(data or {})
    profile = data.get("profile", "desk")
    if profile not in _PROFILES:
        raise ConfigurationError(f"unknown profile '{profile}' (known: {sorted(_PROFILES)})")
    merged = _merge(_PROFILES[profile], data)
    merged["profile"] = profile

    model_d = merged.pop("model", {})
    signal_d = merged.pop("signal", {})
    shift_d = merged.pop("shift", {})
    if "stage_channels" in model_d:
        model_d["stage_channels"] = tuple(model_d["stage_channels"])
    if "harmonics" in signal_d:
        signal_d["harmonics"] = tuple((int(o), float(a)) for o, a in signal_d["harmonics"])
    if "amp_imbalance" in shift_d:
        shift_d["amp_imbalance"] = tuple(shift_d["amp_imbalance"])
    for key in ("conditions", "shots", "variants"):
        if key in merged:
            merged[key] = tuple(merged[key])
    try:
        return ExperimentConfig(
            model=ModelConfig(**model_d),
            signal=SignalConfig(**signal_d),
            shift=DomainShift(**shift_d),
            **merged,
        )
    except TypeError as exc:
        raise ConfigurationError(f"bad config key: {exc}") from exc


def dataset_for_condition(cfg: ExperimentConfig, condition: int) -> DatasetArchive:
    ds_cfg = DatasetConfig(
        speed_rpm=condition,
        source_per_class=cfg.source_per_class,
        target_per_class=cfg.target_per_class,
        seed=cfg.base_seed,
        signal=cfg.signal,
        shift=cfg.shift,
    )
    return make_dataset(ds_cfg, min_target_per_class=max(cfg.shots) + cfg.queries_per_class)


def model_config_for(cfg: ExperimentConfig, arch: str, top_k: int | None = None) -> ModelConfig:
    return replace(
        cfg.model,
        arch=arch,
        top_k=cfg.model.top_k if top_k is None else top_k,
        sample_rate_hz=cfg.signal.sample_rate_hz
        if cfg.model.period_convention == "paper_literal"
        else cfg.model.sample_rate_hz,
    )


@dataclass
class TaskRecord:
    variant: str
    condition: int
    shot: int
    repeat: int
    task: int
    accuracy: float | None
    pre_accuracy: float | None
    adapted: bool
    fallback_reason: str | None
    failed: bool
    confusion: np.ndarray | None
    report: dict | None


@dataclass
class ScenarioRow:
    variant: str
    condition: int
    shot: int
    mean_accuracy: float
    std_accuracy: float
    per_task: list[dict]
    confusion: list[list[int]]


@dataclass
class ResultTable:
    rows: list[ScenarioRow]
    conditions: tuple[int, ...]
    shots: tuple[int, ...]
    variants: tuple[str, ...]
    failed_tasks: int
    total_tasks: int

    def row(self, variant: str, condition: int, shot: int) -> ScenarioRow:
        for r in self.rows:
            if (r.variant, r.condition, r.shot) == (variant, condition, shot):
                return r
        raise KeyError((variant, condition, shot))

    def to_dict(self) -> dict:
        return {
            "conditions": list(self.conditions),
            "shots": list(self.shots),
            "variants": list(self.variants),
            "failed_tasks": self.failed_tasks,
            "total_tasks": self.total_tasks,
            "rows": [
                {
                    "variant": r.variant,
                    "condition": r.condition,
                    "shot": r.shot,
                    "mean_accuracy": r.mean_accuracy,
                    "std_accuracy": r.std_accuracy,
                    "per_task": r.per_task,
                    "confusion": r.confusion,
                }
                for r in self.rows
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "ResultTable":
        return ResultTable(
            rows=[
                ScenarioRow(
                    variant=r["variant"],
                    condition=int(r["condition"]),
                    shot=int(r["shot"]),
                    mean_accuracy=float(r["mean_accuracy"]),
                    std_accuracy=float(r["std_accuracy"]),
                    per_task=r["per_task"],
                    confusion=r["confusion"],
                )
                for r in d["rows"]
            ],
            conditions=tuple(d["conditions"]),
            shots=tuple(d["shots"]),
            variants=tuple(d["variants"]),
            failed_tasks=int(d["failed_tasks"]),
            total_tasks=int(d["total_tasks"]),
        )


def _confusion(true_y: np.ndarray, pred_y: np.ndarray) -> np.ndarray:
    mat = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(mat, (true_y, pred_y), 1)
    return mat


def _evaluate_task(
    cfg: ExperimentConfig,
    models: dict[str, ModelState],
    target_pool: dict[Label, np.ndarray],
    source_x: np.ndarray,
    source_y: np.ndarray,
    condition: int,
    shot: int,
    repeat: int,
    task_idx: int,
) -> list[TaskRecord]:
    task_seed = seed_for(cfg.base_seed, "task", condition, shot, task_idx, repeat)
    episode = sample_episode(target_pool, N_CLASSES, shot, cfg.queries_per_class, seed=task_seed)
    batch_x, batch_y = sample_source_batch(
        source_x, source_y, cfg.source_batch_size, N_CLASSES, seed=task_seed
    )
    records: list[TaskRecord] = []
    for variant in cfg.variants:
        spec = variant_network(variant)
        state = models[spec.arch]
        k_aug = cfg.k_augment if spec.use_augmentation else 0
        task_name = f"{variant}/c{condition}/s{shot}/r{repeat}/t{task_idx}"
        try:
            if spec.use_tta:
                _, rep = adapt(
                    state,
                    episode.support_x,
                    episode.support_y,
                    batch_x,
                    batch_y,
                    N_CLASSES,
                    epochs=cfg.tta_epochs,
                    k_augment=k_aug,
                    lr=cfg.tta_lr,
                    seed=task_seed,
                    shrinkage=cfg.shrinkage,
                    freeze_augment=cfg.freeze_augment,
                    query_x=episode.query_x,
                    query_y=episode.query_y,
                    task_id=task_name,
                )
                preds = np.asarray(rep.post_predictions)
                record_report = rep.to_record()
                accuracy = rep.query_accuracy
                pre_accuracy = rep.pre_accuracy
                adapted = rep.adapted
                fallback = rep.fallback_reason
            else:
                preds, _, _ = infer(
                    state, episode.support_x, episode.support_y, episode.query_x, N_CLASSES
                )
                accuracy = float(np.mean(preds == episode.query_y))
                pre_accuracy = accuracy
                record_report = None
                adapted = False
                fallback = None
            records.append(
                TaskRecord(
                    variant=variant,
                    condition=condition,
                    shot=shot,
                    repeat=repeat,
                    task=task_idx,
                    accuracy=accuracy,
                    pre_accuracy=pre_accuracy,
                    adapted=adapted,
                    fallback_reason=fallback,
                    failed=False,
                    confusion=_confusion(episode.query_y, preds),
                    report=record_report,
                )
            )
        except Exception as exc:  # record the failure, keep the scenario alive
            records.append(
                TaskRecord(
                    variant=variant,
                    condition=condition,
                    shot=shot,
                    repeat=repeat,
                    task=task_idx,
                    accuracy=None,
                    pre_accuracy=None,
                    adapted=False,
                    fallback_reason=f"{type(exc).__name__}: {exc}",
                    failed=True,
                    confusion=None,
                    report=None,
                )
            )
    return records


def _train_models_for_scenario(
    cfg: ExperimentConfig,
    archs: list[str],
    source_pool: dict[Label, np.ndarray],
    condition: int,
    shot: int,
    repeat: int,
    out_dir: Path | None,
    top_k: int | None = None,
) -> dict[str, ModelState]:
    """Meta-train one model per distinct architecture.

    Variants sharing an architecture train identically (same seed, same
    episodes), so the trained model is shared rather than retrained.
    """
    models: dict[str, ModelState] = {}
    for arch in sorted(set(archs)):
        mc = model_config_for(cfg, arch, top_k=top_k)
        seed = seed_for(cfg.base_seed, "train", condition, shot, repeat, arch, mc.top_k)
        state, trace = meta_train(
            source_pool,
            mc,
            N_CLASSES,
            shot,
            cfg.queries_per_class,
            iterations=cfg.iterations,
            lr=cfg.meta_lr,
            seed=seed,
        )
        models[arch] = state
        if out_dir is not None:
            suffix = f"c{condition}_s{shot}_r{repeat}_{arch}"
            if top_k is not None:
                suffix += f"_k{top_k}"
            trace_path = out_dir / f"loss_trace_{suffix}.csv"
            with open(trace_path, "w") as fh:
                fh.write("iteration,loss\n")
                for it, value in trace:
                    fh.write(f"{it},{value!r}\n")
    return models


def _aggregate(
    cfg: ExperimentConfig, records: list[TaskRecord], variants: tuple[str, ...]
) -> tuple[list[ScenarioRow], int, int]:
    rows: list[ScenarioRow] = []
    failed = sum(1 for r in records if r.failed)
    total = len(records)
    for variant in variants:
        for condition in cfg.conditions:
            for shot in cfg.shots:
                group = [
                    r
                    for r in records
                    if (r.variant, r.condition, r.shot) == (variant, condition, shot)
                ]
                if not group:
                    continue
                group.sort(key=lambda r: (r.repeat, r.task))
                ok = [r for r in group if not r.failed]
                repeat_means = []
                for repeat in sorted({r.repeat for r in ok}):
                    accs = [r.accuracy for r in ok if r.repeat == repeat]
                    if accs:
                        repeat_means.append(float(np.mean(accs)))
                mean = 100.0 * float(np.mean(repeat_means)) if repeat_means else float("nan")
                std = 100.0 * float(np.std(repeat_means)) if repeat_means else float("nan")
                confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
                for r in ok:
                    confusion += r.confusion
                rows.append(
                    ScenarioRow(
                        variant=variant,
                        condition=condition,
                        shot=shot,
                        mean_accuracy=mean,
                        std_accuracy=std,
                        per_task=[
                            {
                                "repeat": r.repeat,
                                "task": r.task,
                                "accuracy": r.accuracy,
                                "pre_accuracy": r.pre_accuracy,
                                "adapted": r.adapted,
                                "failed": r.failed,
                                "fallback_reason": r.fallback_reason,
                            }
                            for r in group
                        ],
                        confusion=confusion.tolist(),
                    )
                )
    return rows, failed, total


def _write_reports_jsonl(out_dir: Path, records: list[TaskRecord]) -> list[Path]:
    paths = []
    keys = sorted({(r.variant, r.condition, r.shot) for r in records if r.report is not None})
    for variant, condition, shot in keys:
        path = out_dir / f"adaptation_reports_{variant}_c{condition}_s{shot}.jsonl"
        with open(path, "w") as fh:
            for r in sorted(
                (r for r in records if (r.variant, r.condition, r.shot) == (variant, condition, shot)),
                key=lambda r: (r.repeat, r.task),
            ):
                if r.report is None:
                    continue
                payload = {"repeat": r.repeat, "task": r.task, **r.report}
                fh.write(json.dumps(payload, sort_keys=True) + "\n")
        paths.append(path)
    return paths


def _echo_config(cfg: ExperimentConfig, out_dir: Path) -> Path:
    path = out_dir / "effective_config.json"
    path.write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    return path


@dataclass
class RunResult:
    table: ResultTable
    files: list[str]
    failed_tasks: int
    total_tasks: int

    @property
    def failure_fraction(self) -> float:
        return self.failed_tasks / self.total_tasks if self.total_tasks else 0.0


def run(cfg: ExperimentConfig, out_dir: str | Path, datasets_dir: str | Path | None = None) -> RunResult:
    """The full scenario matrix: conditions x shots x variants.

    Datasets are loaded from ``datasets_dir`` when given (one subdirectory
    per condition, as written by ``generate``), generated on the fly
    otherwise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = [_echo_config(cfg, out_dir)]
    all_records: list[TaskRecord] = []
    for condition in cfg.conditions:
        archive = _load_or_generate(cfg, condition, datasets_dir)
        source_pool = archive.class_arrays("virtual")
        target_pool = archive.class_arrays("physical")
        source_x = np.concatenate([source_pool[lbl] for lbl in Label])
        source_y = np.concatenate([np.full(len(source_pool[lbl]), int(lbl)) for lbl in Label])
        for shot in cfg.shots:
            for repeat in range(cfg.repeats):
                archs = [variant_network(v).arch for v in cfg.variants]
                models = _train_models_for_scenario(
                    cfg, archs, source_pool, condition, shot, repeat, out_dir
                )
                all_records.extend(
                    _run_tasks(cfg, models, target_pool, source_x, source_y, condition, shot, repeat)
                )
    rows, failed, total = _aggregate(cfg, all_records, cfg.variants)
    table = ResultTable(
        rows=rows,
        conditions=cfg.conditions,
        shots=cfg.shots,
        variants=cfg.variants,
        failed_tasks=failed,
        total_tasks=total,
    )
    table_path = out_dir / "result_table.json"
    table_path.write_text(json.dumps(table.to_dict(), sort_keys=True, indent=2) + "\n")
    files.append(table_path)
    files.extend(_write_reports_jsonl(out_dir, all_records))
    files.extend(report(table, out_dir))
    files.extend(sorted(out_dir.glob("loss_trace_*.csv")))
    return RunResult(
        table=table,
        files=sorted(str(p) for p in files),
        failed_tasks=failed,
        total_tasks=total,
    )


def _load_or_generate(
    cfg: ExperimentConfig, condition: int, datasets_dir: str | Path | None
) -> DatasetArchive:
    if datasets_dir is not None:
        path = Path(datasets_dir) / f"condition_{condition}"
        if path.exists():
            return load_archive(path)
    return dataset_for_condition(cfg, condition)


def generate_datasets(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[list[str], int]:
    """Write one archive per configured condition; returns (paths, samples)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[str] = []
    total = 0
    for condition in cfg.conditions:
        archive = dataset_for_condition(cfg, condition)
        directory = out_dir / f"condition_{condition}"
        save_archive(archive, directory)
        paths.append(str(directory))
        total += len(archive.samples)
    return paths, total


def _run_tasks(
    cfg: ExperimentConfig,
    models: dict[str, ModelState],
    target_pool,
    source_x,
    source_y,
    condition: int,
    shot: int,
    repeat: int,
) -> list[TaskRecord]:
    def job(task_idx: int) -> list[TaskRecord]:
        return _evaluate_task(
            cfg, models, target_pool, source_x, source_y, condition, shot, repeat, task_idx
        )

    task_ids = list(range(cfg.tasks_per_scenario))
    if cfg.workers == 1:
        batches = [job(t) for t in task_ids]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            batches = list(pool.map(job, task_ids))
    records: list[TaskRecord] = []
    for batch in batches:
        records.extend(batch)
    return records


def evaluate_scenario(
    cfg: ExperimentConfig,
    condition: int,
    shot: int,
    state: ModelState,
    variant: str = "proposed",
    out_dir: str | Path | None = None,
    datasets_dir: str | Path | None = None,
) -> RunResult:
    """Evaluate one trained model on one (condition, shot) scenario."""
    scoped = replace(cfg, conditions=(condition,), shots=(shot,), variants=(variant,), repeats=1)
    archive = _load_or_generate(cfg, condition, datasets_dir)
    target_pool = archive.class_arrays("physical")
    source_pool = archive.class_arrays("virtual")
    source_x = np.concatenate([source_pool[lbl] for lbl in Label])
    source_y = np.concatenate([np.full(len(source_pool[lbl]), int(lbl)) for lbl in Label])
    spec = variant_network(variant)
    records = _run_tasks(
        scoped, {spec.arch: state}, target_pool, source_x, source_y, condition, shot, repeat=0
    )
    rows, failed, total = _aggregate(scoped, records, (variant,))
    table = ResultTable(rows, (condition,), (shot,), (variant,), failed, total)
    files: list[str] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table_path = out_dir / "result_table.json"
        table_path.write_text(json.dumps(table.to_dict(), sort_keys=True, indent=2) + "\n")
        paths = [_echo_config(cfg, out_dir), table_path]
        paths.extend(_write_reports_jsonl(out_dir, records))
        paths.extend(report(table, out_dir))
        files = sorted(str(p) for p in paths)
    return RunResult(table=table, files=files, failed_tasks=failed, total_tasks=total)


def train_scenario(
    cfg: ExperimentConfig,
    condition: int,
    shot: int,
    variant: str = "proposed",
    repeat: int = 0,
    out_dir: str | Path | None = None,
    datasets_dir: str | Path | None = None,
) -> tuple[ModelState, Path | None]:
    """Meta-train the variant's network for one scenario; optionally save."""
    archive = _load_or_generate(cfg, condition, datasets_dir)
    source_pool = archive.class_arrays("virtual")
    spec = variant_network(variant)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    models = _train_models_for_scenario(
        cfg, [spec.arch], source_pool, condition, shot, repeat, out_path
    )
    state = models[spec.arch]
    ckpt = None
    if out_path is not None:
        ckpt = out_path / f"model_c{condition}_s{shot}_r{repeat}_{spec.arch}.ckpt"
        save_checkpoint(state, ckpt)
    return state, ckpt


def sweep_topk(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7),
    datasets_dir: str | Path | None = None,
) -> tuple[list[dict], list[str]]:
    """Accuracy vs top-k for the proposed and no-adaptation variants.

    Single condition; both variants are evaluated on identical task seeds
    (the task seed carries no k or variant component), so the comparison is
    paired at every k.
    """
    if len(cfg.conditions) != 1:
        raise ConfigurationError("sweep_topk requires exactly one condition")
    condition = cfg.conditions[0]
    shot = cfg.shots[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    archive = _load_or_generate(cfg, condition, datasets_dir)
    source_pool = archive.class_arrays("virtual")
    target_pool = archive.class_arrays("physical")
    source_x = np.concatenate([source_pool[lbl] for lbl in Label])
    source_y = np.concatenate([np.full(len(source_pool[lbl]), int(lbl)) for lbl in Label])

    sweep_cfg = replace(cfg, variants=("proposed", "wo_tta"))
    records: list[TaskRecord] = []
    per_k_rows: list[dict] = []
    for k in k_values:
        k_records: list[TaskRecord] = []
        for repeat in range(cfg.repeats):
            models = _train_models_for_scenario(
                sweep_cfg, ["mpl"], source_pool, condition, shot, repeat, out_dir, top_k=k
            )
            k_records.extend(
                _run_tasks(sweep_cfg, models, target_pool, source_x, source_y, condition, shot, repeat)
            )
        rows, _, _ = _aggregate(sweep_cfg, k_records, ("proposed", "wo_tta"))
        for row in rows:
            per_k_rows.append(
                {
                    "k": k,
                    "variant": row.variant,
                    "mean_accuracy": row.mean_accuracy,
                    "std_accuracy": row.std_accuracy,
                }
            )
        records.extend(k_records)

    csv_path = out_dir / "sweep_topk.csv"
    with open(csv_path, "w") as fh:
        fh.write("k,variant,mean_accuracy,std_accuracy\n")
        for row in per_k_rows:
            fh.write(f"{row['k']},{row['variant']},{row['mean_accuracy']:.4f},{row['std_accuracy']:.4f}\n")
    json_path = out_dir / "sweep_topk.json"
    json_path.write_text(json.dumps(per_k_rows, sort_keys=True, indent=2) + "\n")
    files = [str(_echo_config(cfg, out_dir)), str(csv_path), str(json_path)]
    return per_k_rows, sorted(files)


def scenario_average(table: ResultTable, variant: str, condition: int) -> float:
    """Plain mean of the shot columns, the table's "Average" convention."""
    values = [table.row(variant, condition, s).mean_accuracy for s in table.shots]
    return float(np.mean(values))


def report(table: ResultTable, out_dir: str | Path) -> list[Path]:
    """Emit the accuracy table CSV, raw per-task CSV, confusion-matrix grids,
    and a markdown summary. Deterministic bytes for identical tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []

    header = ["method"]
    for condition in table.conditions:
        header.extend([f"{condition}_{s}s" for s in table.shots])
        header.append(f"{condition}_avg")
    acc_path = out_dir / "accuracy_table.csv"
    with open(acc_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for variant in table.variants:
            cells = [variant]
            for condition in table.conditions:
                for shot in table.shots:
                    cells.append(f"{table.row(variant, condition, shot).mean_accuracy:.4f}")
                cells.append(f"{scenario_average(table, variant, condition):.4f}")
            fh.write(",".join(cells) + "\n")
    files.append(acc_path)

    raw_path = out_dir / "raw_accuracies.csv"
    with open(raw_path, "w") as fh:
        fh.write("variant,condition,shot,repeat,task,accuracy,pre_accuracy,adapted,failed\n")
        for row in table.rows:
            for t in row.per_task:
                acc = "" if t["accuracy"] is None else f"{t['accuracy']:.6f}"
                pre = "" if t["pre_accuracy"] is None else f"{t['pre_accuracy']:.6f}"
                fh.write(
                    f"{row.variant},{row.condition},{row.shot},{t['repeat']},{t['task']},"
                    f"{acc},{pre},{int(t['adapted'])},{int(t['failed'])}\n"
                )
    files.append(raw_path)

    for row in table.rows:
        path = out_dir / f"confusion_{row.variant}_{row.condition}rpm_{row.shot}s.txt"
        mat = np.asarray(row.confusion)
        width = max(5, len(str(mat.max())) + 2)
        with open(path, "w") as fh:
            fh.write(f"# rows: true class, columns: predicted ({row.variant}, "
                     f"{row.condition} rpm, {row.shot}-shot)\n")
            fh.write(" " * 5 + "".join(f"{name:>{width}}" for name in LABEL_NAMES) + "\n")
            for name, counts in zip(LABEL_NAMES, mat):
                fh.write(f"{name:<5}" + "".join(f"{int(c):>{width}}" for c in counts) + "\n")
        files.append(path)

    md_path = out_dir / "summary.md"
    with open(md_path, "w") as fh:
        fh.write("# Few-shot diagnosis results\n\n")
        fh.write(f"- conditions: {list(table.conditions)} rpm\n")
        fh.write(f"- shots: {list(table.shots)}\n")
        fh.write(f"- failed tasks: {table.failed_tasks} / {table.total_tasks}\n\n")
        columns = [
            f"{c} {label}"
            for c in table.conditions
            for label in [f"{s}s" for s in table.shots] + ["avg"]
        ]
        fh.write("| method | " + " | ".join(columns) + " |\n")
        fh.write("|" + "---|" * (1 + len(table.conditions) * (len(table.shots) + 1)) + "\n")
        for variant in table.variants:
            cells = [variant]
            for condition in table.conditions:
                for shot in table.shots:
                    cells.append(f"{table.row(variant, condition, shot).mean_accuracy:.2f}")
                cells.append(f"{scenario_average(table, variant, condition):.2f}")
            fh.write("| " + " | ".join(cells) + " |\n")
    files.append(md_path)
    return files
