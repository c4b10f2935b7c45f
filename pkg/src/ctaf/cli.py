"""Command-line entry point: ``ctaf synth | ingest | train | eval | report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .datamodel import ClipWindow, WindowValidationError, read_windows, validate_window, write_windows
from .evaluation import (
    METRICS,
    AlignmentReport,
    bootstrap_ci,
    head_bin_scores,
    paired_delta,
    subject_alignment,
    three_bin_probe,
)
from .ingest import IngestError, load_manifest, read_labels, read_streams, windows_from_streams
from .model import ModelConfig
from .numerics import NumericError, checkpoint
from .numerics.checkpoint import CheckpointError, atomic_write_bytes
from .seeding import derive_seed
from .synthgen import generate_dataset, write_ground_truth
from .trainer import FoldPlan, TrainConfig, embed_dataset, loocv_splits, prepare_fold, train_fold

log = logging.getLogger("ctaf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VARIANTS = {True: "with_time", False: "no_time"}


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# file helpers


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, text.encode())


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence], delimiter: str = "\t") -> None:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    write_text(path, buf.getvalue())


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else f"{float(v):.6f}"
    return str(v)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_version() -> str:
    """Package version plus a digest of the installed sources."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    code_version: str
    inputs: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command, "config": self.config, "seeds": self.seeds,
            "code_version": self.code_version, "inputs": self.inputs, "options": self.options,
            "outputs": sorted(self.outputs), "checkpoints": self.checkpoints,
        }

    def write(self, out_dir: Path) -> None:
        write_json(out_dir / "manifest.json", self.to_dict())

    @staticmethod
    def read(path: Path) -> dict:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            return json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise DataError(f"manifest not found: {path}") from exc


def _config_and_options(args) -> tuple[RunConfig, dict]:
    if getattr(args, "from_manifest", None):
        m = RunManifest.read(Path(args.from_manifest))
        return config_from_dict(m["config"]), m
    return load_config(args.config), {}


def _write_windows(path: Path, windows: Sequence[ClipWindow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_windows(path, windows)


def _load_windows(data_dir: Path) -> list[ClipWindow]:
    path = Path(data_dir) / "windows.jsonl"
    if not path.exists():
        raise DataError(f"no dataset at {path}")
    return read_windows(path)


# --------------------------------------------------------------------------
# synth / ingest


def cmd_synth(args) -> int:
    cfg, _ = _config_and_options(args)
    out = Path(args.out)
    windows, truths = generate_dataset(cfg.synth, workers=cfg.workers)
    _write_windows(out / "windows.jsonl", windows)
    write_ground_truth(out / "ground_truth.csv", truths)
    RunManifest(
        command="synth", config=cfg.to_dict(), seeds={"root": cfg.seed}, code_version=code_version(),
        outputs=["windows.jsonl", "ground_truth.csv"],
        checkpoints={}, inputs={}, options={"n_windows": len(windows)},
    ).write(out)
    print(f"wrote {len(windows)} windows to {out / 'windows.jsonl'}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    manifest = load_manifest(args.manifest)
    records = read_streams(args.streams)
    labels = read_labels(args.labels) if args.labels else None
    windows = [validate_window(w) for w in windows_from_streams(records, manifest, labels)]
    out = Path(args.out)
    _write_windows(out / "windows.jsonl", windows)
    inputs = {"manifest": str(args.manifest), "streams": str(args.streams)}
    digests = {"streams": sha256(Path(args.streams))}
    if args.labels:
        inputs["labels"] = str(args.labels)
        digests["labels"] = sha256(Path(args.labels))
    RunManifest(
        command="ingest", config={}, seeds={}, code_version=code_version(),
        inputs={**inputs, "sha256": digests}, outputs=["windows.jsonl"], options={"n_windows": len(windows)},
    ).write(out)
    print(f"wrote {len(windows)} windows to {out / 'windows.jsonl'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def fold_dir(run_dir: Path, use_time: bool, plan: FoldPlan) -> Path:
    return run_dir / VARIANTS[use_time] / f"fold{plan.index:02d}_{plan.held_out}"


def _history_rows(result) -> tuple[list[str], list[list]]:
    terms = list(result.history[0].train_terms)
    header = ["epoch", "train_total", "val_objective", *terms, "selected"]
    rows = [
        [h.epoch, repr(h.train_total), repr(h.val_objective), *(repr(h.train_terms[k]) for k in terms),
         int(h.epoch == result.best_epoch)]
        for h in result.history
    ]
    return header, rows


def _train_job(job) -> dict:
    plan, train_cfg, windows, out_dir = job
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    losses = io.StringIO()
    result = train_fold(plan, train_cfg, windows, loss_log=losses)
    ckpt = out_dir / "checkpoint.ctaf"
    checkpoint.save(ckpt, result.params, {
        "model": train_cfg.model.to_dict(),
        "use_time": train_cfg.use_time,
        "fold": {"index": plan.index, "held_out": plan.held_out, "train_subjects": list(plan.train_subjects),
                 "val_subject": plan.val_subject},
        "best_epoch": result.best_epoch,
    })
    header, rows = _history_rows(result)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    write_text(out_dir / "history.tsv", buf.getvalue())
    write_text(out_dir / "losses.tsv", losses.getvalue())
    write_json(out_dir / "stats.json", {
        "norm_stats": result.norm_stats.to_dict(), "label_stats": result.label_stats.to_dict(),
    })
    return {"seconds": time.perf_counter() - t0, "best_epoch": result.best_epoch}


def cmd_train(args) -> int:
    cfg, prior = _config_and_options(args)
    data_dir = Path(args.data or prior.get("inputs", {}).get("data", ""))
    ablate = args.ablate_time or prior.get("options", {}).get("ablate_time", False)
    workers = args.workers or cfg.workers
    out = Path(args.out)
    windows = _load_windows(data_dir)
    plans = loocv_splits([w.subject for w in windows])
    if args.folds:
        keep = {int(i) for i in args.folds.split(",")}
        plans = [p for p in plans if p.index in keep]
    variants = (True, False) if ablate else (True,)
    jobs = [(p, cfg.train_config(ut), windows, fold_dir(out, ut, p)) for ut in variants for p in plans]

    t0 = time.perf_counter()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            infos = list(pool.map(_train_job, jobs))
    else:
        infos = [_train_job(j) for j in jobs]
    elapsed = time.perf_counter() - t0

    ckpts, outputs = {}, []
    for (plan, tc, _, d), info in zip(jobs, infos):
        rel = d.relative_to(out)
        key = f"{VARIANTS[tc.use_time]}/{plan.held_out}"
        ckpts[key] = {"path": str(rel / "checkpoint.ctaf"), "fold": plan.index, "best_epoch": info["best_epoch"],
                      "sha256": sha256(d / "checkpoint.ctaf")}
        outputs += [str(rel / f) for f in ("checkpoint.ctaf", "history.tsv", "losses.tsv", "stats.json")]
    seeds = {"root": cfg.seed, "init": {str(p.index): derive_seed(cfg.seed, "init", p.index) for p in plans}}
    write_json(out / "timing.json", {
        "total_seconds": elapsed, "workers": workers,
        "folds": {f"{VARIANTS[j[1].use_time]}/{j[0].held_out}": i["seconds"] for j, i in zip(jobs, infos)},
    })
    RunManifest(
        command="train", config=cfg.to_dict(), seeds=seeds, code_version=code_version(),
        inputs={"data": str(data_dir), "windows_sha256": sha256(data_dir / "windows.jsonl")},
        options={"ablate_time": ablate, "folds": [p.index for p in plans]},
        outputs=outputs + ["timing.json"], checkpoints=ckpts,
    ).write(out)
    print(f"trained {len(jobs)} fold model(s) in {elapsed:.1f}s -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def _eval_fold(run_dir: Path, entry: dict, plan: FoldPlan, windows, cfg: RunConfig, taus) -> dict:
    params, meta = checkpoint.load(run_dir / entry["path"])
    model_cfg = ModelConfig(**meta["model"])
    if meta["fold"]["held_out"] != plan.held_out:
        raise DataError(f"checkpoint {entry['path']} was trained for {meta['fold']['held_out']}, not {plan.held_out}")
    data = prepare_fold(plan, windows, cfg.train.coverage_threshold)
    test = embed_dataset(params, model_cfg, data.test, use_time=meta["use_time"])
    train = embed_dataset(params, model_cfg, data.train, use_time=meta["use_time"])
    rows = {tau: subject_alignment(test, tau, plan.held_out) for tau in taus}
    mode = None if cfg.eval.probe_mode == "auto" else cfg.eval.probe_mode
    probe = three_bin_probe(train.z_f, train.labels, test.z_f, test.labels, mode,
                            seed=derive_seed(cfg.seed, "probe", plan.index))
    ls = data.label_stats
    head = head_bin_scores(test.y_hat, ls.mu, ls.sigma, train.labels, test.labels, mode)
    first = int(np.argmax([m.sum() > 0 for m in test.m_e]))
    example = {"clip_id": test.clip_ids[first], "t_e": test.t_e[first], "t_p": test.t_p[first],
               "m_e": test.m_e[first], "m_p": test.m_p[first], "A_e2p": test.align_e2p[first]}
    return {"alignment": rows, "probe": probe, "head": head, "example": example}


def _probe_table(per_subject: dict[str, dict], n_resamples: int, seed: int) -> tuple[list, dict]:
    rows, macro = [], {}
    subjects = sorted(per_subject)
    for dim in ("arousal", "valence"):
        for metric in ("accuracy", "macro_f1"):
            vals = [getattr(per_subject[s][dim], metric) for s in subjects]
            macro[f"{dim}_{metric}"] = bootstrap_ci(vals, n_resamples, seed=seed)
    for s in subjects:
        sc = per_subject[s]
        rows.append([s, sc["arousal"].accuracy, sc["arousal"].macro_f1, sc["valence"].accuracy, sc["valence"].macro_f1,
                     sc["arousal"].n])
    return rows, macro


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    run = RunManifest.read(run_dir)
    cfg = config_from_dict(run["config"])
    data_dir = Path(args.data or run["inputs"]["data"])
    windows = _load_windows(data_dir)
    out = Path(args.out)
    plans = {p.held_out: p for p in loocv_splits([w.subject for w in windows])}
    taus = sorted(set(cfg.eval.tau_sweep) | {cfg.eval.tau})
    nr, seed = cfg.eval.n_resamples, derive_seed(cfg.seed, "bootstrap")

    variants: dict[str, dict[str, dict]] = {}
    for key, entry in sorted(run["checkpoints"].items()):
        variant, subject = key.split("/")
        if subject not in plans:
            raise DataError(f"checkpoint for unknown subject {subject}")
        variants.setdefault(variant, {})[subject] = _eval_fold(run_dir, entry, plans[subject], windows, cfg, taus)
    if not variants:
        raise DataError("run manifest lists no checkpoints")
    variants = {v: variants[v] for v in (*VARIANTS.values(), *sorted(variants)) if v in variants}
    subject_sets = {v: set(r) for v, r in variants.items()}
    if len({frozenset(s) for s in subject_sets.values()}) > 1:
        raise DataError(f"variants cover different subjects: {subject_sets}")

    outputs, summary = [], {"tau": cfg.eval.tau, "variants": {}, "deltas": {}}
    reports: dict[str, AlignmentReport] = {}
    align_header = ["subject", "n_windows", *METRICS, "chance_e2p", "chance_p2e", "mean_offset_s"]
    for variant, folds in variants.items():
        rows = [folds[s]["alignment"][cfg.eval.tau] for s in sorted(folds)]
        rep = AlignmentReport.from_rows(rows, cfg.eval.tau, nr, seed)
        reports[variant] = rep
        table = [[r.subject, r.n_windows, r.cos_pos, r.cos_neg, r.retr_e2p, r.retr_p2e, r.chance_e2p, r.chance_p2e,
                  r.mean_offset] for r in rep.rows]
        table.append(["MACRO", sum(r.n_windows for r in rep.rows),
                      *(rep.macro[k].mean for k in (*METRICS, "chance_e2p", "chance_p2e")),
                      float(np.mean([r.mean_offset for r in rep.rows]))])
        write_table(out / f"alignment_{variant}.tsv", align_header, table)
        outputs.append(f"alignment_{variant}.tsv")

        probe_rows, probe_macro = _probe_table({s: f["probe"] for s, f in folds.items()}, nr, seed)
        head_rows, head_macro = _probe_table({s: f["head"] for s, f in folds.items()}, nr, seed)
        ph = ["subject", "arousal_accuracy", "arousal_macro_f1", "valence_accuracy", "valence_macro_f1", "n"]
        write_table(out / f"probe_{variant}.tsv", ph, probe_rows)
        write_table(out / f"headbins_{variant}.tsv", ph, head_rows)
        outputs += [f"probe_{variant}.tsv", f"headbins_{variant}.tsv"]

        ex_rows = []
        for s in sorted(folds):
            ex = folds[s]["example"]
            for i, row in enumerate(ex["A_e2p"]):
                ex_rows.append([s, ex["clip_id"], i, ex["t_e"][i], int(ex["m_e"][i]), *row])
        n_p = max(len(folds[s]["example"]["t_p"]) for s in folds)
        write_table(out / f"alignment_matrix_{variant}.tsv",
                    ["subject", "clip_id", "eeg_token", "t_e", "m_e", *(f"p{j}" for j in range(n_p))], ex_rows)
        outputs.append(f"alignment_matrix_{variant}.tsv")

        summary["variants"][variant] = {
            "alignment": rep.to_dict(),
            "probe": {"macro": {k: v.to_dict() for k, v in probe_macro.items()},
                      "subjects": {s: {d: sc.to_dict() for d, sc in f["probe"].items()} for s, f in sorted(folds.items())}},
            "head_bins": {"macro": {k: v.to_dict() for k, v in head_macro.items()}},
        }

    sweep = []
    for variant, folds in variants.items():
        for s in sorted(folds):
            for tau in taus:
                r = folds[s]["alignment"][tau]
                sweep.append([variant, s, tau, r.retr_e2p, r.retr_p2e, r.chance_e2p, r.chance_p2e])
    write_table(out / "tau_sweep.tsv", ["variant", "subject", "tau", "retr_e2p", "retr_p2e", "chance_e2p", "chance_p2e"], sweep)
    outputs.append("tau_sweep.tsv")

    table2 = []
    if {"with_time", "no_time"} <= set(reports):
        w, n = reports["with_time"], reports["no_time"]
        for metric in METRICS:
            d = paired_delta(w.values(metric), n.values(metric), nr, seed)
            summary["deltas"][metric] = d.to_dict()
            write_table(out / f"scatter_{metric}.csv", ["subject", "with_time", "no_time"],
                        [[s, w.values(metric)[s], n.values(metric)[s]] for s in w.subjects], delimiter=",")
            outputs.append(f"scatter_{metric}.csv")
            wm, nm = w.macro[metric], n.macro[metric]
            table2.append([metric, wm.mean, wm.lo, wm.hi, nm.mean, nm.lo, nm.hi, d.ci.mean, d.ci.lo, d.ci.hi,
                           d.median, d.q1, d.q3, d.n_positive])
        header2 = ["metric", "with_time", "with_lo", "with_hi", "no_time", "no_lo", "no_hi",
                   "delta", "delta_lo", "delta_hi", "delta_median", "delta_q1", "delta_q3", "n_positive"]
    else:
        v = next(iter(reports))
        for metric in METRICS:
            m = reports[v].macro[metric]
            table2.append([metric, m.mean, m.lo, m.hi])
        header2 = ["metric", v, f"{v}_lo", f"{v}_hi"]
    write_table(out / "table2_alignment.tsv", header2, table2)

    table1 = []
    for variant in variants:
        for mode in ("probe", "head_bins"):
            mac = summary["variants"][variant][mode]["macro"]
            table1.append([variant, mode, *(x for k in ("arousal_accuracy", "arousal_macro_f1", "valence_accuracy",
                                                           "valence_macro_f1")
                                             for x in (mac[k]["mean"], mac[k]["lo"], mac[k]["hi"]))])
    header1 = ["variant", "mode"] + [f"{k}{suf}" for k in ("arousal_acc", "arousal_f1", "valence_acc", "valence_f1")
                                     for suf in ("", "_lo", "_hi")]
    write_table(out / "table1_probe.tsv", header1, table1)
    outputs += ["table2_alignment.tsv", "table1_probe.tsv", "summary.json"]
    write_json(out / "summary.json", summary)
    RunManifest(
        command="eval", config=cfg.to_dict(), seeds={"root": cfg.seed, "bootstrap": seed},
        code_version=code_version(), inputs={"run": str(run_dir), "data": str(data_dir)},
        outputs=outputs, checkpoints=run["checkpoints"],
    ).write(out)
    print(f"evaluated {sum(len(f) for f in variants.values())} fold model(s) -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# report


def _ci(d: dict) -> str:
    return f"{d['mean']:.3f} [{d['lo']:.3f}, {d['hi']:.3f}]"


def cmd_report(args) -> int:
    eval_dir = Path(args.eval)
    try:
        summary = json.loads((eval_dir / "summary.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no evaluation summary in {eval_dir}") from exc
    lines = [f"# CTAF evaluation (tau = {summary['tau']} s)", "", "## Cross-modal alignment", ""]
    variants = list(summary["variants"])
    lines.append("| metric | " + " | ".join(variants) + " |")
    lines.append("|---" * (len(variants) + 1) + "|")
    for metric in METRICS:
        cells = [_ci(summary["variants"][v]["alignment"]["macro"][metric]) for v in variants]
        lines.append(f"| {metric} | " + " | ".join(cells) + " |")
    if summary["deltas"]:
        lines += ["", "## With time minus no time", "", "| metric | mean [95% CI] | median | IQR | subjects > 0 |",
                  "|---|---|---|---|---|"]
        for metric, d in summary["deltas"].items():
            lines.append(f"| {metric} | {_ci(d['ci'])} | {d['median']:.3f} | [{d['q1']:.3f}, {d['q3']:.3f}] | "
                         f"{d['n_positive']}/{len(d['deltas'])} |")
    lines += ["", "## 3-bin classification (linear probe on z_f)", "",
              "| variant | arousal acc | arousal F1 | valence acc | valence F1 |", "|---|---|---|---|---|"]
    for v in variants:
        mac = summary["variants"][v]["probe"]["macro"]
        lines.append(f"| {v} | " + " | ".join(_ci(mac[k]) for k in (
            "arousal_accuracy", "arousal_macro_f1", "valence_accuracy", "valence_macro_f1")) + " |")
    text = "\n".join(lines) + "\n"
    out = Path(args.out) if args.out else eval_dir / "report.md"
    write_text(out, text)
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctaf", description="Cross-temporal attention fusion: data, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic dataset with known lags")
    s.add_argument("--config", help="TOML run config (defaults if omitted)")
    s.add_argument("--from-manifest", help="reuse the config recorded in a manifest")
    s.add_argument("--out", required=True, help="output data directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="bin raw per-channel streams into windows")
    s.add_argument("--manifest", required=True, help="TOML channel manifest")
    s.add_argument("--streams", required=True, help="CSV with subject,channel,timestamp_s,value")
    s.add_argument("--labels", help="CSV with subject,start_s,arousal,valence")
    s.add_argument("--out", required=True, help="output data directory")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="leave-one-subject-out training")
    s.add_argument("--data", help="data directory holding windows.jsonl")
    s.add_argument("--config", help="TOML run config (defaults if omitted)")
    s.add_argument("--from-manifest", help="rerun with the config, data and options of a train manifest")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--ablate-time", action="store_true", help="also train the variant without time features")
    s.add_argument("--workers", type=int, help="parallel fold trainings (overrides config)")
    s.add_argument("--folds", help="comma-separated fold indices to train (default all)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="alignment metrics and 3-bin probe for a trained run")
    s.add_argument("--run", required=True, help="run directory from 'train'")
    s.add_argument("--data", help="data directory (default: the one recorded in the run)")
    s.add_argument("--out", required=True, help="output directory for tables")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="render the evaluation summary as markdown tables")
    s.add_argument("--eval", required=True, help="directory from 'eval'")
    s.add_argument("--out", help="markdown path (default <eval>/report.md)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IngestError, WindowValidationError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
