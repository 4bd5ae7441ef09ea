"""Experiment configuration, multi-seed runs, the LR grid and ablation sweeps."""

from __future__ import annotations

import hashlib
import json
import os
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import tomlkit
import torch

from . import evaluator
from .backbone import Backbone, BackboneConfig, load_checkpoint, pretrain_base, save_checkpoint
from .data_stream import (LabeledDataset, SeenOnceAudit, load_manifest, make_synthetic, split_tasks,
                          stream_chunks, train_test_split)
from .errors import ConfigError, ContractError, ProlError
from .evaluator import MetricsLedger, RunTimer
from .learner import ABLATION_PRESETS, FULL, AblationFlags, Learner, LearnerConfig, OptimizerConfig
from .objectives import LossWeights
from .prompt_engine import MATCH_SOURCES, PromptConfig
from .report import emit_plots, emit_tables

LR_GRID = (0.001, 0.005, 0.01, 0.05, 0.1)


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    manifest: str = ""
    base_class_ids: tuple = ()
    cl_classes: int = 20
    base_classes: int = 4
    per_class: int = 60
    image_side: int = 16
    separation: float = 5.0
    data_seed: int = 0
    test_fraction: float = 0.2
    # protocol
    tasks: int = 5
    chunk_size: int = 10
    seeds: tuple = (0, 1, 2)
    # backbone
    layers: int = 4
    heads: int = 4
    dim: int = 64
    patch_size: int = 4
    mlp_ratio: float = 2.0
    checkpoint: str = ""
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    pretrain_seed: int = 0
    # prompts
    prompt_length: int = 5
    prompt_layers: tuple = (0, 1, 2, 3)
    eps_a: float = 0.2
    eps_b: float = 0.1
    match_source: str = "class_feature"
    generator_scale: float = 2.0
    # objective
    lambda1: float = 1.0
    lambda2: float = 0.03
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    ort_squared: bool = False
    standardize_gen: bool = True
    gate_grad: bool = True
    # optimisation
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lthres: float = 0.8
    t_max: int = 20
    min_lr: float = 0.005
    ablation: str = FULL
    # output
    outdir: str = ""

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.layers, self.heads, self.dim, self.patch_size, self.image_side, 3,
                              self.mlp_ratio)

    def learner_config(self, seed: int) -> LearnerConfig:
        return LearnerConfig(
            prompt=PromptConfig(self.prompt_length, self.prompt_layers, self.eps_a, self.eps_b, self.match_source),
            weights=LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5),
            optimizer=OptimizerConfig(self.lr, self.beta1, self.beta2, self.adam_eps),
            flags=AblationFlags.preset(self.ablation),
            threshold=self.lthres, t_max=self.t_max, min_lr=self.min_lr, ort_squared=self.ort_squared,
            standardize_gen=self.standardize_gen, generator_scale=self.generator_scale,
            gate_grad=self.gate_grad, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("outdir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


def default_outdir() -> str:
    return str(Path(os.environ.get("PROL_OUTDIR", "runs")) / "default")


def validate_config(raw: dict) -> tuple[ExperimentConfig, list[str]]:
    """Check cross-field invariants, fill defaults and report which were filled.

    Raises ConfigError carrying every problem found, not just the first.
    """
    problems, notes = [], []
    values = {}
    for key in raw:
        if key not in _FIELDS:
            problems.append(f"unknown key {key!r}")
    for name in _FIELDS:
        if name in raw:
            v = raw[name]
            default = getattr(_DEFAULTS, name)
            if isinstance(default, tuple):
                v = tuple(v) if isinstance(v, (list, tuple)) else (v,)
            elif isinstance(default, bool):
                if not isinstance(v, bool):
                    problems.append(f"{name} must be a boolean")
            elif isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            elif type(default) is not type(v):
                problems.append(f"{name} must be of type {type(default).__name__}, got {v!r}")
            values[name] = v
        elif name != "outdir":
            notes.append(f"{name} defaulted to {getattr(_DEFAULTS, name)!r}")
    values.setdefault("outdir", default_outdir())
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**values)

    if cfg.dim % cfg.heads:
        problems.append(f"embedding size {cfg.dim} is not divisible by heads {cfg.heads}")
    if cfg.layers < 1:
        problems.append("layers must be >= 1")
    if cfg.image_side % cfg.patch_size:
        problems.append("image_side must be a multiple of patch_size")
    if cfg.prompt_length < 2:
        problems.append("prompt length must be ≥ 2")
    if any(i < 0 or i >= cfg.layers for i in cfg.prompt_layers):
        problems.append(f"prompt layers {list(cfg.prompt_layers)} must lie in [0, {cfg.layers})")
    if list(cfg.prompt_layers) != sorted(set(cfg.prompt_layers)):
        problems.append("prompt layers must be strictly increasing")
    for k in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
        if not getattr(cfg, k) >= 0:
            problems.append(f"{k} must be >= 0")
    if not (cfg.eps_a > 0 and cfg.eps_b > 0):
        problems.append("eps_a and eps_b must be > 0")
    if cfg.match_source not in MATCH_SOURCES:
        problems.append(f"match_source must be one of {MATCH_SOURCES}")
    if cfg.ablation not in ABLATION_PRESETS:
        problems.append(f"ablation must be one of {list(ABLATION_PRESETS)}")
    if not cfg.lr > 0 or not cfg.min_lr > 0:
        problems.append("learning rates must be > 0")
    if cfg.t_max < 1:
        problems.append("t_max must be >= 1")
    if cfg.chunk_size < 1:
        problems.append("chunk_size must be >= 1")
    if cfg.tasks < 1:
        problems.append("tasks must be >= 1")
    if not cfg.seeds:
        problems.append("at least one seed is required")
    if not 0 < cfg.test_fraction < 1:
        problems.append("test_fraction must be in (0, 1)")
    if not cfg.manifest:
        if cfg.tasks > cfg.cl_classes:
            problems.append(f"cannot split {cfg.cl_classes} classes into {cfg.tasks} tasks")
        if cfg.separation <= 0:
            problems.append("separation must be > 0")
        if cfg.base_classes < 2 and not cfg.checkpoint:
            problems.append("pretraining needs base_classes >= 2 (or supply checkpoint)")
    if problems:
        raise ConfigError(problems)
    return cfg, notes


def load_config(path=None, overrides: dict | None = None) -> tuple[ExperimentConfig, list[str]]:
    raw = {}
    if path:
        try:
            raw = tomlkit.parse(Path(path).read_text(encoding="utf-8")).unwrap()
        except (OSError, tomlkit.exceptions.ParseError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(raw)


def save_config(cfg: ExperimentConfig, path, notes: Sequence[str] = ()) -> None:
    doc = tomlkit.document()
    for line in notes:
        doc.add(tomlkit.comment(line))
    for k, v in cfg.to_dict().items():
        doc[k] = v
    Path(path).write_text(tomlkit.dumps(doc), encoding="utf-8")


# ---------------------------------------------------------------- data and backbone

@dataclass
class PreparedData:
    train: LabeledDataset
    test: LabeledDataset
    base: LabeledDataset | None


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    if cfg.manifest:
        full = load_manifest(cfg.manifest)
        base_ids = [int(c) for c in cfg.base_class_ids]
        cl_ids = [c for c in range(full.class_count) if c not in base_ids]
    else:
        full = make_synthetic(cfg.cl_classes + cfg.base_classes, cfg.per_class, cfg.image_side,
                              cfg.separation, cfg.data_seed)
        cl_ids = list(range(cfg.cl_classes))
        base_ids = list(range(cfg.cl_classes, cfg.cl_classes + cfg.base_classes))
    base = full.select_classes(base_ids) if base_ids else None
    train, test = train_test_split(full.select_classes(cl_ids), cfg.test_fraction, cfg.data_seed)
    return PreparedData(train, test, base)


def obtain_backbone(cfg: ExperimentConfig, data: PreparedData, cache_dir=None, log=print) -> Backbone:
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint, cfg.backbone_config)
    if data.base is None:
        raise ContractError("no checkpoint given and no base classes available for pretraining")
    key = hashlib.sha256(json.dumps([cfg.backbone_config.__repr__(), cfg.manifest, list(cfg.base_class_ids),
                                     cfg.cl_classes, cfg.base_classes, cfg.per_class, cfg.separation,
                                     cfg.data_seed, cfg.pretrain_epochs, cfg.pretrain_lr,
                                     cfg.pretrain_seed]).encode()).hexdigest()[:12]
    path = Path(cache_dir) / f"backbone-{key}.ckpt" if cache_dir else None
    if path is not None and path.exists():
        return load_checkpoint(path, cfg.backbone_config)
    backbone = pretrain_base(cfg.backbone_config, data.base, cfg.pretrain_epochs, cfg.pretrain_lr,
                             cfg.pretrain_seed, log=None)
    if log:
        log(f"pretrained backbone: base-class train accuracy {backbone.train_accuracy:.3f}")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(backbone, path)
        # reload so every run sees exactly the on-disk (float32) weights
        backbone = load_checkpoint(path, cfg.backbone_config)
    return backbone


# ---------------------------------------------------------------- single seed

@dataclass
class SeedResult:
    seed: int
    ledger: MetricsLedger
    timing: list
    log_path: Path | None = None
    metrics: dict = field(default_factory=dict)
    learner: Learner | None = None
    audit: SeenOnceAudit | None = None


def run_seed(cfg: ExperimentConfig, seed: int, data: PreparedData, backbone: Backbone, outdir=None,
             on_step: Callable | None = None) -> SeedResult:
    """Train tasks 1..T once over their streams and evaluate after each task."""
    outdir = Path(outdir) if outdir else None
    log_fh = None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)
        log_fh = open(outdir / "train.log.jsonl", "w")

    def log(record):
        if log_fh:
            log_fh.write(json.dumps({k: record[k] for k in ("step", "intra", "inter", "sim", "ort", "gen",
                                                           "ce", "total", "lr", "mode")}) + "\n")

    torch.manual_seed(seed)
    learner = Learner(backbone, data.train.class_count, cfg.learner_config(seed), log=log)
    sequence = split_tasks(data.train, cfg.tasks, seed)
    audit = SeenOnceAudit(len(data.train))
    ledger = MetricsLedger(cfg.tasks)
    timer = RunTimer()
    tests = []
    result = SeedResult(seed, ledger, timer.records, outdir / "train.log.jsonl" if outdir else None,
                        learner=learner, audit=audit)
    try:
        for task in sequence:
            mask = np.isin(data.test.labels, task.classes)
            tests.append((data.test.images[mask], data.test.labels[mask]))
            stream = stream_chunks(data.train, task, cfg.chunk_size, seed * 1000 + task.task_id, audit)
            with timer.training(task.task_id) as rec:
                try:
                    learner.train_task(task.task_id, stream, on_step)
                except ProlError as exc:
                    raise type(exc)(f"seed {seed}, task {task.task_id}: {exc}") from exc
                rec.samples += len(task.indices)
            with timer.inference(task.task_id):
                evaluator.evaluate_after_task(learner, task.task_id, tests, ledger)
        result.metrics = evaluator.metrics(ledger)
    finally:
        if log_fh:
            log_fh.close()
        if outdir:
            ledger.to_csv(outdir / "ledger.csv")
            timer.to_json(outdir / "timing.json")
            if result.metrics:
                (outdir / "metrics.json").write_text(json.dumps(result.metrics, indent=1, sort_keys=True))
    return result


# ---------------------------------------------------------------- multi seed

@dataclass
class RunResult:
    config: ExperimentConfig
    seeds: list
    aggregate: dict
    config_hash: str
    outdir: Path | None
    failures: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def ledgers(self) -> list:
        return [s.ledger for s in self.seeds]


def aggregate(per_seed: Sequence[dict]) -> dict:
    out = {}
    for key in ("FAA", "CAA", "FFM"):
        vals = [m[key] for m in per_seed if m.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
        out[f"{key}_std"] = float(np.std(vals)) if vals else None
    curves = np.array([m["AA"] for m in per_seed]) if per_seed else np.zeros((0, 0))
    out["AA"] = curves.mean(0).tolist() if len(curves) else []
    out["AA_std"] = curves.std(0).tolist() if len(curves) else []
    return out


def run_experiment(cfg: ExperimentConfig, notes: Sequence[str] = (), log=print, backbone: Backbone | None = None,
                   data: PreparedData | None = None, write: bool = True) -> RunResult:
    out = Path(cfg.outdir) if (write and cfg.outdir) else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.toml", notes)
    data = data or prepare_data(cfg)
    if backbone is None:
        backbone = obtain_backbone(cfg, data, Path(cfg.outdir).parent / "_backbones" if out else None, log)
    seeds, failures = [], {}
    for seed in cfg.seeds:
        seed_dir = out / f"seed{seed}" if out else None
        try:
            res = run_seed(cfg, seed, data, backbone, seed_dir)
        except ProlError as exc:
            failures[seed] = str(exc)
            if seed_dir:
                seed_dir.mkdir(parents=True, exist_ok=True)
                (seed_dir / "error.txt").write_text(traceback.format_exc())
            if log:
                log(f"seed {seed} failed: {exc}")
            continue
        seeds.append(res)
        if log:
            m = res.metrics
            ffm = f"{m['FFM']:.2f}" if m["FFM"] is not None else "n/a"
            log(f"[{cfg.ablation}] seed {seed}: FAA {m['FAA']:.2f}  CAA {m['CAA']:.2f}  FFM {ffm}")
    agg = aggregate([s.metrics for s in seeds])
    result = RunResult(cfg, seeds, agg, cfg.digest(), out, failures)
    if out:
        doc = dict(agg, per_seed={str(s.seed): s.metrics for s in seeds}, config_hash=result.config_hash,
                   ablation=cfg.ablation, failures={str(k): v for k, v in failures.items()})
        (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        if seeds:
            emit_report({cfg.ablation: result.ledgers}, out, {cfg.ablation: [f"seed{s.seed}" for s in seeds]})
    return result


def emit_report(results, outdir, labels=None):
    table = emit_tables(results, outdir, labels)
    plots = emit_plots(results, Path(outdir) / "plots")
    return [table, *plots]


# ---------------------------------------------------------------- LR grid

def select_best(rows: Sequence[dict]) -> dict:
    """Highest FAA; ties broken by lower FFM, then lower lr."""
    def key(r):
        ffm = r["FFM"] if r["FFM"] is not None else 0.0
        return (-r["FAA"], ffm, r["lr"])
    return min(rows, key=key)


def grid_search_lr(cfg: ExperimentConfig, grid: Sequence[float] = LR_GRID, log=print,
                   backbone: Backbone | None = None, data: PreparedData | None = None):
    if not grid:
        raise ContractError("learning-rate grid is empty")
    data = data or prepare_data(cfg)
    root = Path(cfg.outdir) / "grid" if cfg.outdir else None
    backbone = backbone or obtain_backbone(cfg, data, Path(cfg.outdir).parent / "_backbones" if root else None, log)
    rows = []
    for lr in grid:
        sub = cfg.replace(lr=float(lr), seeds=cfg.seeds[:1],
                          outdir=str(root / f"lr_{lr:g}") if root else "")
        res = run_experiment(sub, log=log, backbone=backbone, data=data, write=root is not None)
        rows.append({"lr": float(lr), "FAA": res.aggregate["FAA"], "CAA": res.aggregate["CAA"],
                     "FFM": res.aggregate["FFM"]})
    best = select_best(rows)
    if root:
        import csv
        with open(root / "grid.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["lr", "FAA", "CAA", "FFM", "best"])
            w.writeheader()
            for r in rows:
                w.writerow(dict(r, best=r is best))
    return best["lr"], rows


# ---------------------------------------------------------------- ablation

def ablate(cfg: ExperimentConfig, names: Sequence[str] = tuple(ABLATION_PRESETS), log=print,
           backbone: Backbone | None = None, data: PreparedData | None = None) -> dict:
    data = data or prepare_data(cfg)
    root = Path(cfg.outdir) / "ablation" if cfg.outdir else None
    backbone = backbone or obtain_backbone(cfg, data, Path(cfg.outdir).parent / "_backbones" if root else None, log)
    results = {}
    for name in names:
        sub = cfg.replace(ablation=name, outdir=str(root / name.replace("+", "_")) if root else "")
        results[name] = run_experiment(sub, log=log, backbone=backbone, data=data, write=root is not None)
    if root:
        import csv
        with open(root / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "FAA", "FAA_std", "CAA", "CAA_std", "FFM", "FFM_std"])
            for name, res in results.items():
                a = res.aggregate
                w.writerow([name, *(f"{a[k]:.2f}" if a[k] is not None else "" for k in
                                    ("FAA", "FAA_std", "CAA", "CAA_std", "FFM", "FFM_std"))])
        ok = {n: r.ledgers for n, r in results.items() if r.seeds}
        if ok:
            emit_report(ok, root)
    return results


def load_results(outdir) -> dict:
    """Reconstruct ledgers from a run directory (or a directory of runs) for reporting."""
    outdir = Path(outdir)
    runs = [outdir] if (outdir / "config.toml").exists() else sorted(p.parent for p in outdir.glob("*/config.toml"))
    results = {}
    for run in runs:
        cfg, _ = load_config(run / "config.toml")
        ledgers = [MetricsLedger.from_csv(p, cfg.tasks) for p in sorted(run.glob("seed*/ledger.csv"))]
        results[cfg.ablation if len(runs) > 1 else run.name] = ledgers
    return results
