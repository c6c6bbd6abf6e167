"""``comp-cse`` command line: generate -> preprocess -> train -> evaluate -> report.

Stages hand over through files in the output directory, so any stage can be
rerun on its own once its inputs exist::

    comp-cse all --config run.ini --out-dir runs/a
    comp-cse train --config run.ini --out-dir runs/a --seed 3
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import figures, nncore, pipeline, simgen, trainer
from .config import RunConfig, config_hash, load_config
from .errors import CompCseError

STAGES = ("generate", "preprocess", "train", "evaluate", "report")

FRAMES = "frames.csv"
DATASET = "dataset.csv"
CHECKPOINT = "checkpoint.json"
METRICS = "metrics.csv"
METRICS_MLP = "metrics_mlp.csv"
TIMING = "timing.csv"
TIMING_MLP = "timing_mlp.csv"
SCATTER = "scatter.csv"
CASE_REPORT = "case_report.csv"
HISTOGRAM = "histogram.csv"
FIGURES = "figures"
CHUNK_ROWS = 200_000


class Run:
    """Resolved paths and provenance header for one output directory."""

    def __init__(self, cfg: RunConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.header = [f"config_hash: {config_hash(cfg)}", f"seed: {cfg.seed}"]

    def path(self, name):
        return self.out / name

    def case_path(self, k, kind):
        return self.out / "cases" / f"case_{k + 1}_{kind}.csv"

    def require(self, path, producer):
        if not Path(path).is_file():
            raise FileNotFoundError(f"missing input file {path} (run `{producer}` first)")
        return path


def _say(msg):
    print(msg, flush=True)


def _write_stream(run, system, num_seconds, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", newline="") as fh:
        first = True
        for chunk in simgen.iter_frame_chunks(system, num_seconds):
            simgen.write_frames_csv(chunk, fh, run.header if first else (), write_header=first)
            first = False
            n += len(chunk)
    return n


def stage_generate(run: Run):
    cfg = run.cfg
    run.out.mkdir(parents=True, exist_ok=True)
    n = _write_stream(run, cfg.simgen, cfg.num_seconds, run.path(FRAMES))
    for k in range(cfg.cases.count):
        _write_stream(run, cfg.case_system(k), cfg.cases.num_seconds, run.case_path(k, "frames"))
    _say(f"generate: {n} frames over {cfg.num_seconds} s -> {run.path(FRAMES)}; {cfg.cases.count} case streams")


def _records_from_file(run, path, system):
    chunks = simgen.read_frames_csv(path, chunksize=CHUNK_ROWS)
    aggs = pipeline.aggregate_frame_chunks(chunks)
    p = run.cfg.pipeline
    return pipeline.records_from_aggregates(aggs, system, p.window_s, p.clean_threshold)


def stage_preprocess(run: Run):
    cfg = run.cfg
    kept, removed = _records_from_file(run, run.require(run.path(FRAMES), "generate"), cfg.simgen)
    dataset = pipeline.standardize_and_split(pipeline.build_feature_matrix(kept), cfg.pipeline.sizes, cfg.seed)
    pipeline.write_dataset(dataset, run.path(DATASET), run.header)
    for k in range(cfg.cases.count):
        src = run.require(run.case_path(k, "frames"), "generate")
        case_kept, _ = _records_from_file(run, src, cfg.case_system(k))
        if not case_kept:
            raise CompCseError(f"case {k + 1} produced no aligned records")
        case = pipeline.standardize_with(pipeline.build_feature_matrix(case_kept),
                                         dataset.feature_means, dataset.feature_stds)
        pipeline.write_dataset(case, run.case_path(k, "dataset"), run.header)
    sizes = ", ".join(f"{k}={len(v)}" for k, v in dataset.split.items())
    _say(f"preprocess: {len(kept)} aligned records kept, {len(removed)} removed as outliers; "
         f"{sizes} -> {run.path(DATASET)}")


def stage_train(run: Run):
    cfg = run.cfg
    dataset = pipeline.read_dataset(run.require(run.path(DATASET), "preprocess"))

    def progress(tag):
        return lambda r: _say(f"  {tag} epoch {r.epoch:3d}  loss {r.train_loss:.4f}  val_mae {r.val_mae:.4f}")

    net, log = trainer.train(dataset, cfg.train, on_epoch=progress("csepnn"))
    stats = {"feature_means": dataset.feature_means, "feature_stds": dataset.feature_stds}
    extra = {"config_hash": config_hash(cfg), "seed": cfg.seed}
    run.path(CHECKPOINT).write_bytes(nncore.save_checkpoint(net, stats, extra))
    trainer.write_metrics(log, run.path(METRICS), run.header)
    trainer.write_timing(log, run.path(TIMING), run.header)
    msg = f"train: final val MAE {log.final_val_mae:.4f} -> {run.path(CHECKPOINT)}, {run.path(METRICS)}"
    if cfg.baseline:
        _, mlp_log = trainer.train_mlp_baseline(dataset, cfg.train, on_epoch=progress("mlp"))
        trainer.write_metrics(mlp_log, run.path(METRICS_MLP), run.header)
        trainer.write_timing(mlp_log, run.path(TIMING_MLP), run.header)
        msg += f"; MLP final val MAE {mlp_log.final_val_mae:.4f} -> {run.path(METRICS_MLP)}"
    _say(msg)


def _load_cases(run):
    cases = []
    for k in range(run.cfg.cases.count):
        ds = pipeline.read_dataset(run.require(run.case_path(k, "dataset"), "preprocess"))
        cases.append((f"case_{k + 1}", ds.features, ds.labels, ds.raw_se))
    return cases


def stage_evaluate(run: Run):
    dataset = pipeline.read_dataset(run.require(run.path(DATASET), "preprocess"))
    net, _ = nncore.load_checkpoint(run.require(run.path(CHECKPOINT), "train").read_bytes())
    X_test, y_test = dataset.part("test")
    mae = trainer.evaluate_mae(net, X_test, y_test)
    trainer.export_scatter(net, X_test, y_test, run.path(SCATTER), run.header)
    cases = _load_cases(run)
    msg = f"evaluate: test MAE {mae:.4f} on {len(y_test)} samples -> {run.path(SCATTER)}"
    if cases:
        report = trainer.case_report(net, cases)
        trainer.write_case_report(report, run.path(CASE_REPORT), run.header)
        trainer.export_histogram(net, cases, run.path(HISTOGRAM), run.header)
        maes = ", ".join(f"{r.case_id}={r.mae:.3f}" for r in report.rows)
        msg += f"; case MAE {maes} -> {run.path(CASE_REPORT)}, {run.path(HISTOGRAM)}"
    _say(msg)


def stage_report(run: Run):
    fig_dir = run.path(FIGURES)
    fig_dir.mkdir(parents=True, exist_ok=True)
    curves = {"CSEPNN": run.require(run.path(METRICS), "train")}
    if run.path(METRICS_MLP).is_file():
        curves["MLP"] = run.path(METRICS_MLP)
    written = [fig_dir / "val_mae.png", fig_dir / "scatter.png"]
    figures.render_learning_curves(curves, written[0])
    figures.render_scatter(run.require(run.path(SCATTER), "evaluate"), written[1])
    if run.cfg.cases.count:
        written.append(fig_dir / "cases.png")
        figures.render_case_bars(run.require(run.path(HISTOGRAM), "evaluate"), written[2])
        _say(_case_table(run.path(CASE_REPORT)))
    _say("report: " + ", ".join(str(p) for p in written))


def _case_table(path):
    import pandas as pd

    t = pd.read_csv(path, comment="#").set_index("case").T
    t.index = ["Sample Size", "True CSE (Avg)", "Pred CSE (Avg)", "MAE"]
    return t.to_string(float_format=lambda v: f"{v:.2f}")


_RUNNERS = {
    "generate": stage_generate,
    "preprocess": stage_preprocess,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run(subcommand, cfg: RunConfig, out_dir=None) -> int:
    """Execute one stage (or ``all``); returns the process exit status."""
    if subcommand not in (*STAGES, "all"):
        print(f"error: unknown subcommand {subcommand!r}", file=sys.stderr)
        return 2
    r = Run(cfg, out_dir if out_dir is not None else cfg.out_dir)
    stages = STAGES if subcommand == "all" else (subcommand,)
    try:
        for stage in stages:
            _RUNNERS[stage](r)
    except (CompCseError, OSError, ValueError) as exc:
        print(f"error: {subcommand}: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="comp-cse", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=(*STAGES, "all"))
    parser.add_argument("--config", help="INI run configuration (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the seed of every stage")
    parser.add_argument("--out-dir", help="output directory (overrides [run] out_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except (CompCseError, OSError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    return run(args.subcommand, cfg, args.out_dir)


if __name__ == "__main__":
    sys.exit(main())
