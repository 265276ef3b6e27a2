"""Command-line experiment runner.

    covervid gen      --config exp.yaml
    covervid pretrain --config exp.yaml
    covervid cotrain  --config exp.yaml --checkpoint RUN/pretrain/model.ckpt
    covervid eval     --config exp.yaml --checkpoint RUN/cotrain/model.ckpt
    covervid probe    --config exp.yaml --checkpoint ... --probe reversal
    covervid report   RUN_A RUN_B --out summary/

Each run directory holds ``config.resolved.yaml`` (all defaults expanded),
one subdirectory per stage with ``model.ckpt`` and ``metrics.jsonl``, and a
``reports/`` directory of JSON and CSV documents.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from covervid.checkpoint import CheckpointError, file_digest, load_checkpoint, save_checkpoint
from covervid.config import ConfigError, ExperimentConfig, load_config, parse_config
from covervid.data import Dataset, DatasetSpec, generate
from covervid.evaluation import (
    ProbeReport,
    ablation_matrix,
    config_digest,
    default_ablation_grid,
    evaluate,
    reversal_probe,
    transfer_probe,
)
from covervid.model import ModelConfig, init_params
from covervid.train import MetricsSink, TrainConfig, cotrain, pretrain_spatial

log = logging.getLogger("covervid")

REPORT_CSV_COLUMNS = ("run", "config_hash", "table", "row", "column", "value")
CKPT_NAME = "model.ckpt"


class RunError(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------

def _generate_all(specs: list[DatasetSpec]) -> dict[str, Dataset]:
    return {s.id: generate(s) for s in specs}


def _dataset_digest(d: Dataset) -> str:
    import hashlib

    h = hashlib.sha256()
    for a in (d.train_x, d.train_y, d.eval_x, d.eval_y):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _snapshot(cfg: ExperimentConfig) -> None:
    _write_text(cfg.run_dir / "config.resolved.yaml", cfg.to_yaml())


def _stage_dir(cfg: ExperimentConfig, stage: str, overwrite: bool) -> Path:
    d = cfg.run_dir / stage
    if d.exists() and any(d.iterdir()):
        if not overwrite:
            raise RunError(f"{d} already exists; pass --overwrite to replace it")
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    return d


def model_hash(cfg: ModelConfig) -> str:
    return config_digest(cfg.to_dict())


def experiment_hash(cfg: ExperimentConfig) -> str:
    """Hash of the resolved config minus its output location."""
    doc = cfg.resolved()
    doc["io"] = {k: v for k, v in doc["io"].items() if k != "run_dir"}
    return config_digest(doc)


def _load_matching(cfg: ExperimentConfig, checkpoint) -> tuple:
    path = Path(checkpoint)
    if not path.is_file():
        raise RunError(f"checkpoint not found: {path}")
    params, ck_cfg, state, extra = load_checkpoint(path)
    if ck_cfg.to_dict() != cfg.model.to_dict():
        raise RunError(
            f"checkpoint model config {model_hash(ck_cfg)[:12]} does not match "
            f"config model section {model_hash(cfg.model)[:12]}"
        )
    return params, state, extra


def flatten_report(name: str, report: dict) -> dict[str, float]:
    """Flat ``metric -> value`` view used by thresholds."""
    out = {}
    if "accuracy" in report:
        out[f"eval.{report['dataset_id']}.accuracy"] = 100.0 * report["accuracy"]
        return out
    for row, cols in report["table"].items():
        for col, v in cols.items():
            out[f"{report['kind']}.{row}.{col}"] = v
    for k, v in report.get("deltas", {}).items():
        out[f"{report['kind']}.delta.{k}"] = v
    meta = report.get("meta", {})
    if "reversed_partner_labels" in meta:
        out[f"reversal.reversed_partner_labels.{meta['dataset']}"] = meta["reversed_partner_labels"]
    return out


def check_thresholds(cfg: ExperimentConfig, metrics: dict[str, float]) -> list[str]:
    failures = []
    for t in cfg.eval["thresholds"]:
        if t["metric"] not in metrics:
            continue
        v = metrics[t["metric"]]
        if "min" in t and v < t["min"]:
            failures.append(f"{t['name']}: {t['metric']}={v:g} < min {t['min']:g}")
        if "max" in t and v > t["max"]:
            failures.append(f"{t['name']}: {t['metric']}={v:g} > max {t['max']:g}")
    return failures


def _csv_text(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def probe_csv(report: ProbeReport) -> str:
    cols = sorted({c for row in report.table.values() for c in row})
    rows = [["condition"] + cols]
    for name, row in report.table.items():
        rows.append([name] + [("" if c not in row else f"{row[c]:.2f}") for c in cols])
    for k, v in report.deltas.items():
        rows.append([f"delta {k}", f"{v:.2f}"])
    return _csv_text(rows)


# -- commands ----------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig) -> Path:
    data = _generate_all(cfg.datasets)
    manifest = {
        "seed": cfg.seed,
        "datasets": [{"spec": d.spec.to_dict(), "sha256": _dataset_digest(d)} for d in data.values()],
    }
    out = cfg.run_dir / "datasets" / "manifest.json"
    _write_text(out, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    _snapshot(cfg)
    return out


def _train_stage(cfg: ExperimentConfig, stage: str, checkpoint, overwrite: bool) -> Path:
    if checkpoint is not None:
        params, _, _ = _load_matching(cfg, checkpoint)
    else:
        params = init_params(cfg.model)
    out = _stage_dir(cfg, stage, overwrite)
    _snapshot(cfg)
    tcfg: TrainConfig = getattr(cfg, stage)
    if stage == "pretrain":
        specs = [s for s in cfg.datasets if s.modality == "image"]
        if not specs:
            raise RunError("pretraining needs at least one image dataset")
    else:
        specs = list(cfg.datasets)
    data = _generate_all(specs)
    sink = MetricsSink(out / "metrics.jsonl")
    try:
        fn = pretrain_spatial if stage == "pretrain" else cotrain
        state = fn(params, cfg.model, data, tcfg, sink=sink)
    finally:
        sink.close()
    path = save_checkpoint(out / CKPT_NAME, params, cfg.model, state,
                           extra={"stage": stage, "init_checkpoint": None if checkpoint is None else str(checkpoint)})
    log.info("%s: wrote %s (sha256 %s)", stage, path, file_digest(path)[:12])
    return path


def cmd_pretrain(cfg: ExperimentConfig, checkpoint=None, overwrite: bool = False) -> Path:
    return _train_stage(cfg, "pretrain", checkpoint, overwrite)


def cmd_cotrain(cfg: ExperimentConfig, checkpoint=None, overwrite: bool = False) -> Path:
    return _train_stage(cfg, "cotrain", checkpoint, overwrite)


def cmd_eval(cfg: ExperimentConfig, checkpoint) -> tuple[list[Path], list[str]]:
    params, _, _ = _load_matching(cfg, checkpoint)
    data = _generate_all(cfg.datasets)
    rdir = cfg.run_dir / "reports"
    written, metrics = [], {}
    rows = [["dataset", "accuracy", "clips", "views"]]
    for ds, d in data.items():
        rep = evaluate(params, cfg.model, d, cfg.eval["views"]).to_dict()
        p = rdir / f"eval_{ds}.json"
        _write_text(p, json.dumps(rep, sort_keys=True, indent=2) + "\n")
        written.append(p)
        metrics.update(flatten_report(ds, rep))
        rows.append([ds, f"{100 * rep['accuracy']:.2f}", rep["clips"], rep["views"]])
    p = rdir / "eval.csv"
    _write_text(p, _csv_text(rows))
    written.append(p)
    return written, check_thresholds(cfg, metrics)


def cmd_probe(cfg: ExperimentConfig, checkpoint, probe: str, source_tag: str | None = None) -> tuple[list[Path], list[str]]:
    params, _, _ = _load_matching(cfg, checkpoint)
    data = _generate_all(cfg.datasets)
    rdir = cfg.run_dir / "reports"
    views = cfg.eval["views"]
    reports: dict[str, ProbeReport] = {}
    if probe == "reversal":
        for ds, d in data.items():
            if d.spec.modality == "video":
                reports[f"reversal_{ds}"] = reversal_probe(params, cfg.model, d, views)
    elif probe == "transfer":
        target = cfg.eval["transfer"]["target"]
        if target not in data:
            raise ConfigError(f"[eval] transfer target {target!r} is not a registered dataset")
        tcfg = TrainConfig.from_dict({**cfg.cotrain.to_dict(), "epochs": cfg.eval["transfer"]["head_epochs"],
                                      "lr_drop_epochs": None})
        tag = source_tag or Path(checkpoint).parent.name
        reports["transfer"], _ = transfer_probe(params, cfg.model, tag, data[target], tcfg, views)
    elif probe == "ablation":
        grid = default_ablation_grid(data, cfg.eval["ablation"]["image_weights"])
        sink = MetricsSink(cfg.run_dir / "ablation_metrics.jsonl")
        try:
            reports["ablation"] = ablation_matrix(params, cfg.model, data, grid, cfg.cotrain, views, sink)
        finally:
            sink.close()
    else:
        raise ConfigError(f"unknown probe {probe!r}")
    written, metrics = [], {}
    for name, rep in reports.items():
        rep.meta["config_hash"] = experiment_hash(cfg)
        rep.meta["model_hash"] = model_hash(cfg.model)
        p = rdir / f"probe_{name}.json"
        _write_text(p, rep.to_json())
        c = rdir / f"probe_{name}.csv"
        _write_text(c, probe_csv(rep))
        written += [p, c]
        metrics.update(flatten_report(name, rep.to_dict()))
    return written, check_thresholds(cfg, metrics)


def _md_table(header: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(str(c) for c in r) + " |")
    return "\n".join(lines)


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.1f}"


def cmd_report(run_dirs, out=None) -> tuple[str, str]:
    """Merge probe reports of one or more runs into Markdown and CSV.

    CSV columns are fixed: ``run, config_hash, table, row, column, value``.
    """
    run_dirs = [Path(r) for r in run_dirs]
    missing, per_run = [], []
    for rd in run_dirs:
        files = sorted((rd / "reports").glob("probe_*.json")) if (rd / "reports").is_dir() else []
        if not files:
            missing.append(f"{rd}: no probe reports under {rd / 'reports'}")
            continue
        per_run.append((rd, [json.loads(f.read_text()) for f in files]))
    if missing:
        raise RunError("missing reports:\n  " + "\n  ".join(missing))

    model_hashes = sorted({r["meta"].get("model_hash", "?") for _, reps in per_run for r in reps})
    md = ["# Probe summary", ""]
    if len(model_hashes) > 1:
        md += [f"**WARNING: runs use different model configurations** ({', '.join(h[:12] for h in model_hashes)})", ""]
    rows_csv = [list(REPORT_CSV_COLUMNS)]
    for rd, reps in per_run:
        md += [f"## {rd.name}", ""]
        for rep in reps:
            chash = rep["meta"].get("config_hash", "")
            md.append(f"config `{chash[:12]}`")
            md.append("")
            if rep["kind"] == "reversal":
                ds = rep["meta"]["dataset"]
                t = rep["table"]
                header = ["dataset", "normal", "reversed", "delta"]
                row = [ds, _fmt(t["normal"][ds]), _fmt(t["reversed"][ds]), _fmt(rep["deltas"][f"reversed:{ds}"])]
                if "reversed_partner_labels" in rep["meta"]:
                    header.append("reversed (partner labels)")
                    row.append(_fmt(rep["meta"]["reversed_partner_labels"]))
                md += ["### Frame-reversal", "", _md_table(header, [row]), ""]
            else:
                title = {"ablation": "### Co-training / loss-weight ablation",
                         "transfer": "### Frozen-feature transfer"}[rep["kind"]]
                cols = sorted({c for r in rep["table"].values() for c in r})
                md += [title, "", _md_table(["condition"] + cols,
                                            [[n] + [_fmt(r.get(c)) for c in cols] for n, r in rep["table"].items()]), ""]
            for rname, cols in rep["table"].items():
                for cname, v in cols.items():
                    rows_csv.append([rd.name, chash, rep["kind"], rname, cname, f"{v:.4f}"])
            for k, v in rep.get("deltas", {}).items():
                rows_csv.append([rd.name, chash, rep["kind"], "delta", k, f"{v:.4f}"])
    md_text = "\n".join(md).rstrip() + "\n"
    csv_text = _csv_text(rows_csv)
    if out is not None:
        out = Path(out)
        _write_text(out / "summary.md", md_text)
        _write_text(out / "summary.csv", csv_text)
    return md_text, csv_text


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="covervid", description="Video/image co-training experiments")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, checkpoint=False, required_ckpt=False):
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--out", help="run directory (overrides io.run_dir)")
        p.add_argument("--seed", type=int, help="override io.seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=required_ckpt)

    common(sub.add_parser("gen", help="write dataset manifests"))
    for verb in ("pretrain", "cotrain"):
        p = sub.add_parser(verb, help=f"run the {verb} stage")
        common(p, checkpoint=True)
        p.add_argument("--overwrite", action="store_true")
    common(sub.add_parser("eval", help="evaluate a checkpoint on every dataset"), checkpoint=True, required_ckpt=True)
    p = sub.add_parser("probe", help="run a probe experiment")
    common(p, checkpoint=True, required_ckpt=True)
    p.add_argument("--probe", required=True, choices=("reversal", "transfer", "ablation"))
    p.add_argument("--source-tag", help="label for the transfer source (default: checkpoint directory name)")
    p = sub.add_parser("report", help="merge probe reports into Markdown + CSV")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "report":
            cmd_report(args.runs, args.out)
            print(Path(args.out) / "summary.md")
            return 0
        cfg = load_config(args.config, seed=args.seed, run_dir=args.out)
        failures: list[str] = []
        if args.verb == "gen":
            print(cmd_gen(cfg))
        elif args.verb == "pretrain":
            print(cmd_pretrain(cfg, args.checkpoint, args.overwrite))
        elif args.verb == "cotrain":
            print(cmd_cotrain(cfg, args.checkpoint, args.overwrite))
        elif args.verb == "eval":
            written, failures = cmd_eval(cfg, args.checkpoint)
            print("\n".join(str(p) for p in written))
        elif args.verb == "probe":
            written, failures = cmd_probe(cfg, args.checkpoint, args.probe, args.source_tag)
            print("\n".join(str(p) for p in written))
        for f in failures:
            print(f"THRESHOLD FAILED {f}", file=sys.stderr)
        return 1 if failures else 0
    # config, dataset, trainer and checkpoint errors are all ValueError subclasses
    except (ValueError, RunError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
