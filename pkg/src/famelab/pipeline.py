"""Experiment stages: dataset -> (train) -> pool -> sample -> evaluate.

Every stage is deterministic under the config seed.  Stage streams are
separated by fixed keys folded into the seed chain, so adding samples to one
stage never perturbs another.  A failed stage leaves whatever artifacts were
already written plus a FAILED marker naming the stage and cause.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, SweepSpec, config_to_dict
from .denoiser import load_checkpoint, save_checkpoint, train
from .errors import (
    FamelabError,
    InvalidArgumentError,
    NotFoundError,
    PipelineStageError,
)
from .gmm import GmmSpec, PRESET_NAMES, exact_sampler, load_spec, preset, save_spec
from .guidance import GuidanceConfig, guided_source
from .metrics import (
    EvalReport,
    class_report_csv,
    evaluate,
    make_scorer,
    render_report,
)
from .plots import mode_scatter_svg, side_by_side_svg
from .pool import PoolBuildConfig, build_pool, load_pool, save_pool
from .sampler import AnalyticSource, NeuralSource, SamplerConfig, sample_batch
from .schedule import Rng, derive_seed, make_schedule, trajectory_to_bytes

# stage stream keys; distinct constants keep the seed chains disjoint
_POOL_KEY = 101
_SAMPLE_KEY = 102
_REF_KEY = 103


def resolve_spec(cfg: ExperimentConfig) -> GmmSpec:
    if cfg.dataset in PRESET_NAMES:
        return preset(cfg.dataset)
    if os.path.exists(cfg.dataset):
        return load_spec(cfg.dataset)
    raise NotFoundError(f"dataset {cfg.dataset!r} is neither a preset nor a file")


def _resolve_classes(cfg: ExperimentConfig, spec: GmmSpec) -> list:
    if cfg.classes is None:
        return sorted(spec.classes)
    for c in cfg.classes:
        if c not in spec.classes:
            raise NotFoundError(f"class {c} not in dataset")
    return list(cfg.classes)


def _run_dir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out_dir) / cfg.name
    (p / "reports").mkdir(parents=True, exist_ok=True)
    (p / "plots").mkdir(exist_ok=True)
    (p / "trajectories").mkdir(exist_ok=True)
    return p


class _StageRunner:
    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        marker = run_dir / "FAILED"
        if marker.exists():
            marker.unlink()

    def __call__(self, name, fn):
        try:
            return fn()
        except Exception as exc:
            (self.run_dir / "FAILED").write_text(f"stage: {name}\ncause: {exc!r}\n")
            raise PipelineStageError(name, exc) from exc


def _base_source(cfg: ExperimentConfig, spec: GmmSpec, run_dir: Path):
    if cfg.source == "analytic":
        return AnalyticSource(spec)
    if cfg.checkpoint is not None:
        model = load_checkpoint(cfg.checkpoint)
    else:
        model = train(spec, cfg.train)
        save_checkpoint(model, run_dir / "checkpoint.mlpd")
    if model.dim != spec.dim:
        raise InvalidArgumentError(
            f"checkpoint dimension {model.dim} != dataset dimension {spec.dim}"
        )
    return NeuralSource(model)


def _obtain_pool(cfg, spec, base, schedule, classes, scorer, run_dir):
    if cfg.guidance.f == 0.0:
        return None
    if cfg.pool_path is not None:
        return load_pool(cfg.pool_path)
    build_w = cfg.pool_build_w if cfg.pool_build_w is not None else cfg.guidance.w
    builder = guided_source(base, None, GuidanceConfig(w=build_w))
    pool = build_pool(
        builder,
        SamplerConfig(schedule=schedule, method=cfg.method, record_outputs=True),
        scorer,
        PoolBuildConfig(
            n_candidates_per_class=cfg.pool_candidates,
            n_f=cfg.pool_n_f,
            mode=cfg.pool_mode,
            seed=derive_seed(cfg.seed, _POOL_KEY),
        ),
        classes,
        workers=cfg.workers,
    )
    save_pool(pool, run_dir / "pool.fmpl")
    return pool


def _sample_records(cfg, source, schedule, classes):
    sampler_cfg = SamplerConfig(
        schedule=schedule, method=cfg.method, record_outputs=cfg.save_trajectories
    )
    return sample_batch(
        source,
        sampler_cfg,
        derive_seed(cfg.seed, _SAMPLE_KEY),
        classes,
        cfg.n_per_class,
        workers=cfg.workers,
    )


def _group_by_class(records, classes, n_per_class):
    out = {}
    for b, c in enumerate(classes):
        block = records[b * n_per_class : (b + 1) * n_per_class]
        out[c] = np.stack([r.final_sample for r in block]).astype(np.float64)
    return out


def _reference_sets(cfg, spec, classes):
    return {
        c: exact_sampler(
            spec, Rng(derive_seed(cfg.seed, _REF_KEY, c)), class_id=c, n=cfg.n_per_class
        )
        for c in classes
    }


def _write_trajectories(records, classes, n_per_class, run_dir):
    for b, c in enumerate(classes):
        block = records[b * n_per_class : (b + 1) * n_per_class]
        path = run_dir / "trajectories" / f"class_{c}.traj"
        with open(path, "wb") as fh:
            for r in block:
                fh.write(trajectory_to_bytes(r))


def _write_report(cfg, spec, report, samples_by_class, reference_by_class, run_dir):
    (run_dir / "reports" / "class_quality.csv").write_text(class_report_csv(report))
    summary = {"config": config_to_dict(cfg), "report": report.to_dict()}
    (run_dir / "reports" / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    (run_dir / "reports" / "report.txt").write_text(render_report(report))
    if spec.dim == 2:
        pooled = np.concatenate([samples_by_class[c] for c in sorted(samples_by_class)])
        pooled_ref = np.concatenate(
            [reference_by_class[c] for c in sorted(reference_by_class)]
        )
        svg = mode_scatter_svg(spec, pooled_ref, pooled, title=cfg.name)
        (run_dir / "plots" / "modes.svg").write_text(svg)


def run_pipeline(cfg: ExperimentConfig) -> EvalReport:
    run_dir = _run_dir(cfg)
    stage = _StageRunner(run_dir)
    (run_dir / "config.echo").write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"
    )

    def dataset_stage():
        spec = resolve_spec(cfg)
        classes = _resolve_classes(cfg, spec)
        schedule = make_schedule(cfg.schedule_kind, cfg.n_steps, cfg.sigma_min, cfg.sigma_max)
        save_spec(spec, run_dir / "dataset.json")
        return spec, classes, schedule

    spec, classes, schedule = stage("dataset", dataset_stage)
    base = stage("train", lambda: _base_source(cfg, spec, run_dir))
    scorer = stage("evaluate-setup", lambda: make_scorer(spec, cfg.scorer))
    pool = stage(
        "pool", lambda: _obtain_pool(cfg, spec, base, schedule, classes, scorer, run_dir)
    )
    source = guided_source(base, pool, cfg.guidance)

    def sample_stage():
        records = _sample_records(cfg, source, schedule, classes)
        if cfg.save_trajectories:
            _write_trajectories(records, classes, cfg.n_per_class, run_dir)
        return records

    records = stage("sample", sample_stage)

    def evaluate_stage():
        samples = _group_by_class(records, classes, cfg.n_per_class)
        refs = _reference_sets(cfg, spec, classes)
        report = evaluate(samples, refs, scorer, spec=spec)
        _write_report(cfg, spec, report, samples, refs, run_dir)
        return report

    return stage("evaluate", evaluate_stage)


_SWEEP_COLUMNS = "value,frechet,precision,recall,mean_score,bad_mode_fraction,status"


def run_sweep(cfg: ExperimentConfig, sweep: SweepSpec) -> list:
    """One sampled+evaluated row per axis value, sharing the dataset, source,
    pool, and per-trajectory seeds; returns [(value, EvalReport | None), ...]
    and writes the table CSV.  A failed row is recorded and skipped."""
    run_dir = _run_dir(cfg)
    stage = _StageRunner(run_dir)

    def setup():
        spec = resolve_spec(cfg)
        classes = _resolve_classes(cfg, spec)
        schedule = make_schedule(cfg.schedule_kind, cfg.n_steps, cfg.sigma_min, cfg.sigma_max)
        base = _base_source(cfg, spec, run_dir)
        scorer = make_scorer(spec, cfg.scorer)
        return spec, classes, schedule, base, scorer

    spec, classes, schedule, base, scorer = stage("dataset", setup)

    # the pool is shared across rows; build it if any row will use replay
    f_values = sweep.values if sweep.axis == "f" else (cfg.guidance.f,)
    needs_pool = any(v > 0 for v in f_values)
    pool_cfg = cfg if cfg.guidance.f > 0 else replace(cfg, guidance=replace(cfg.guidance, f=0.02))
    pool = stage(
        "pool",
        lambda: _obtain_pool(pool_cfg, spec, base, schedule, classes, scorer, run_dir)
        if needs_pool
        else None,
    )

    rows = []
    results = []
    for value in sweep.values:
        try:
            guidance = replace(cfg.guidance, **{sweep.axis: value})
            row_cfg = replace(cfg, guidance=guidance, save_trajectories=False)
            source = guided_source(base, pool, guidance)
            records = _sample_records(row_cfg, source, schedule, classes)
            samples = _group_by_class(records, classes, cfg.n_per_class)
            refs = _reference_sets(cfg, spec, classes)
            report = evaluate(samples, refs, scorer, spec=spec)
            rows.append(
                f"{value:g},{report.frechet:.9g},{report.precision:.9g},"
                f"{report.recall:.9g},{report.mean_score:.9g},"
                f"{report.bad_mode_fraction:.9g},ok"
            )
            results.append((value, report))
        except FamelabError as exc:
            rows.append(f"{value:g},,,,,,failed: {type(exc).__name__}")
            results.append((value, None))
    csv = "\n".join([_SWEEP_COLUMNS] + rows) + "\n"
    (run_dir / "reports" / f"sweep_{sweep.axis}.csv").write_text(csv)
    return results


@dataclass(frozen=True)
class PairedCompareReport:
    n_pairs: int
    mean_delta: float
    median_delta: float
    fraction_improved: float
    report_a: EvalReport
    report_b: EvalReport


def _comparable(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    neutral = GuidanceConfig()
    strip = lambda c: replace(c, guidance=neutral, name="x", out_dir="x")
    return strip(a) == strip(b)


def compare_paired(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig) -> PairedCompareReport:
    """Run two guidance settings over identical per-trajectory seeds (hence
    identical initial noise) and report per-pair score deltas, b minus a."""
    if not _comparable(cfg_a, cfg_b):
        raise InvalidArgumentError("compared configs may differ only in guidance")
    run_dir = _run_dir(replace(cfg_a, name=f"{cfg_a.name}_vs_{cfg_b.name}"))
    stage = _StageRunner(run_dir)

    def setup():
        spec = resolve_spec(cfg_a)
        classes = _resolve_classes(cfg_a, spec)
        schedule = make_schedule(
            cfg_a.schedule_kind, cfg_a.n_steps, cfg_a.sigma_min, cfg_a.sigma_max
        )
        base = _base_source(cfg_a, spec, run_dir)
        scorer = make_scorer(spec, cfg_a.scorer)
        return spec, classes, schedule, base, scorer

    spec, classes, schedule, base, scorer = stage("dataset", setup)

    needs_pool = cfg_a.guidance.f > 0 or cfg_b.guidance.f > 0
    pool_side = cfg_b if cfg_b.guidance.f > 0 else cfg_a
    pool = stage(
        "pool",
        lambda: _obtain_pool(pool_side, spec, base, schedule, classes, scorer, run_dir)
        if needs_pool
        else None,
    )

    def run_side(cfg):
        source = guided_source(base, pool, cfg.guidance)
        records = _sample_records(replace(cfg, save_trajectories=False), source, schedule, classes)
        samples = _group_by_class(records, classes, cfg.n_per_class)
        refs = _reference_sets(cfg, spec, classes)
        return samples, refs, evaluate(samples, refs, scorer, spec=spec)

    samples_a, refs, report_a = stage("sample", lambda: run_side(cfg_a))
    samples_b, _, report_b = stage("sample", lambda: run_side(cfg_b))

    def pair_stage():
        lines = ["class,index,score_a,score_b,delta"]
        deltas = []
        for c in classes:
            sa = np.asarray(scorer(samples_a[c], c), dtype=np.float64)
            sb = np.asarray(scorer(samples_b[c], c), dtype=np.float64)
            for i, (x, y) in enumerate(zip(sa, sb)):
                lines.append(f"{c},{i},{x:.9g},{y:.9g},{y - x:.9g}")
            deltas.append(sb - sa)
        deltas = np.concatenate(deltas)
        (run_dir / "reports" / "pairs.csv").write_text("\n".join(lines) + "\n")
        if spec.dim == 2:
            pa = np.concatenate([samples_a[c] for c in classes])
            pb = np.concatenate([samples_b[c] for c in classes])
            svg = side_by_side_svg(spec, pa, pb, labels=(cfg_a.name, cfg_b.name))
            (run_dir / "plots" / "compare.svg").write_text(svg)
        return PairedCompareReport(
            n_pairs=len(deltas),
            mean_delta=float(deltas.mean()),
            median_delta=float(np.median(deltas)),
            fraction_improved=float((deltas > 0).mean()),
            report_a=report_a,
            report_b=report_b,
        )

    return stage("evaluate", pair_stage)
