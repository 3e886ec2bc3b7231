"""Command-line entry point: ``osa-transfer <command> ...``.

Every command writes ``run.json`` (resolved arguments plus the files it
produced) into its output directory. Library errors exit with the error's
code and a one-line message on stderr; usage errors exit with 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset, dsp, events, metrics, model, physio, synth
from .errors import MetricsError, OsaError

log = logging.getLogger("osa_transfer")

PAEDIATRIC = model.TrainConfig.paediatric(False)
ADULT = model.TrainConfig.adult()


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _delays(text: str) -> list[float]:
    """'lo:hi:step' (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            return [float(v) for v in np.arange(lo, hi + step / 2, step)]
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad delay grid {text!r}") from None


def _load_nights(manifest: Path, jobs: int) -> list[dataset.NightData]:
    records = dataset.load_manifest(manifest)
    log.info("preparing %d nights", len(records))
    if jobs <= 1:
        return [dataset.prepare_night(r) for r in records]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(dataset.prepare_night, records))


def _write_run(out: Path, args: argparse.Namespace, outputs: list[Path], extra: dict | None = None):
    missing = [str(p) for p in outputs if not Path(p).exists()]
    if missing:
        raise OsaError(f"outputs not written: {missing}")
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k != "func"}
    doc = {"command": args.command, "args": resolved,
           "outputs": [str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p)
                       for p in outputs]}
    if extra:
        doc.update(extra)
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _model_config(args) -> model.ModelConfig:
    return model.ModelConfig(channels=args.channels, embedding_dim=args.embedding_dim,
                             task_mode=args.task, stem_pool=args.stem_pool)


def _finetune_config(args, freeze: bool = False) -> model.TrainConfig:
    return model.TrainConfig(args.epochs, args.batch_size, args.lr, args.patience, freeze, args.seed)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    tmpl = synth.SynthConfig(duration_h=args.duration_h, target_ahi=args.target_ahi,
                             delay_mean_s=args.delay_mean, delay_sd_s=args.delay_sd,
                             snore_snr_db=args.snr_db, cohort=args.cohort)
    manifest = synth.generate_cohort(args.nights, tmpl, args.seed, args.out, args.prefix)
    _write_run(args.out, args, [manifest, args.out / "truth.json"])
    print(manifest)
    return 0


def cmd_features(args) -> int:
    records = dataset.load_manifest(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)

    def one(rec):
        feats = dsp.extract_features(rec.load_audio())
        path = args.out / f"{rec.night_id}.osaf"
        dsp.write_feature_cache(path, feats)
        return path, len(feats)

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]
    index = {r.night_id: {"file": p.name, "segments": n} for r, (p, n) in zip(records, results)}
    (args.out / "features.json").write_text(json.dumps(
        {"config": dsp.FEATURE_MANIFEST, "nights": index}, indent=2, sort_keys=True) + "\n")
    _write_run(args.out, args, [p for p, _ in results] + [args.out / "features.json"])
    return 0


def cmd_pretrain(args) -> int:
    nights = _load_nights(args.manifest, args.jobs)
    cfg = model.TrainConfig(args.epochs, args.batch_size, args.lr, None, False, args.seed,
                            args.delay)
    resume = model.Checkpoint.load(args.resume) if args.resume else None
    ckpt = model.train_adult(nights, _model_config(args), cfg, resume=resume)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out / "adult.ckpt")
    ckpt.write_curve(args.out / "curve.csv")
    _write_run(args.out, args, [args.out / "adult.ckpt", args.out / "curve.csv"],
               {"fingerprint": model.fingerprint(ckpt.net)})
    return 0


def cmd_finetune(args) -> int:
    nights = _load_nights(args.manifest, args.jobs)
    adult = model.Checkpoint.load(args.adult)
    cfg = _finetune_config(args, args.strategy == "frozen")
    ckpt = model.fine_tune(adult, nights, args.strategy, args.delay, cfg, task_mode=args.task)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out / "finetuned.ckpt")
    ckpt.write_curve(args.out / "curve.csv")
    _write_run(args.out, args, [args.out / "finetuned.ckpt", args.out / "curve.csv"],
               {"adult_fingerprint": model.fingerprint(adult.net),
                "fingerprint": model.fingerprint(ckpt.net)})
    return 0


def cmd_predict(args) -> int:
    nights = _load_nights(args.manifest, args.jobs)
    ckpt = model.Checkpoint.load(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    outputs, rows = [], []
    for n in nights:
        preds = model.predict_night(ckpt, n)
        evs = events.group_segments([(w, p.y_hat) for w, p in preds], args.threshold)
        rep = events.compute_ahi(evs, n.record.sleep_time_h)
        path = args.out / f"{n.night_id}.json"
        events.write_night_report(path, n.night_id, evs, rep, args.threshold)
        seg_path = args.out / f"{n.night_id}_segments.csv"
        with open(seg_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "start_s", "end_s", "y_hat", "s_hat"])
            for win, p in preds:
                w.writerow([win.index, f"{win.start_s:g}", f"{win.end_s:g}", f"{p.y_hat:.6f}",
                            "" if p.s_hat is None else f"{p.s_hat:.6f}"])
        outputs += [path, seg_path]
        rows.append([n.night_id, rep.event_count, f"{rep.sleep_time_h:g}", f"{rep.ahi:.2f}",
                     rep.severity.value])
    summary = args.out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["night_id", "event_count", "sleep_time_h", "ahi", "severity"])
        w.writerows(rows)
    _write_run(args.out, args, outputs + [summary])
    return 0


def cmd_cv(args) -> int:
    configs = metrics.parse_grid(args.grid)
    if not configs:
        raise MetricsError("empty configuration grid")
    nights = _load_nights(args.manifest, args.jobs)
    adult = {}
    for path in [args.adult] + ([args.adult_single] if args.adult_single else []):
        ck = model.Checkpoint.load(path)
        adult[ck.task_mode] = ck
    # freeze_encoder and the per-fold seed are set per configuration inside run_cv
    table = metrics.run_cv(nights, adult, configs, seed=args.seed, k=args.k,
                           train_config=_finetune_config(args),
                           leak_free=args.leak_free, threshold=args.threshold)
    args.out.mkdir(parents=True, exist_ok=True)
    csv_text, text = metrics.render_report(table)
    (args.out / "results.csv").write_text(csv_text)
    (args.out / "results.txt").write_text(text)
    print(text, end="")
    _write_run(args.out, args, [args.out / "results.csv", args.out / "results.txt"],
               {"folds": table.meta["folds"], "leak_free": args.leak_free})
    return 0


def cmd_delay_analyze(args) -> int:
    records = dataset.load_manifest(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    per_night, estimates = [], []
    classes: list[str] = []
    sweeps: list[dict[str, np.ndarray]] = []
    weights: list[dict[str, int]] = []
    for rec in records:
        trace = rec.load_spo2()
        try:
            base = physio.compute_baseline(trace)
            est = physio.estimate_event_delays(trace, base, rec.annotations)
        except OsaError as exc:
            log.warning("%s: %s", rec.night_id, exc)
            per_night.append([rec.night_id, len(rec.annotations), 0, ""])
            continue
        estimates.append(est)
        per_night.append([rec.night_id, len(rec.annotations), len(est.per_event),
                          "" if est.night_median_s is None else f"{est.night_median_s:g}"])
        duration = trace.end_s - trace.t0
        count = int((duration - dsp.SEGMENT_S) // dsp.SHIFT_S) + 1
        windows = [dsp.SegmentWindow(i, trace.t0 + i * dsp.SHIFT_S) for i in range(max(count, 0))]
        samples = dataset.label_segments(rec, windows)
        kinds = [s.kind for s in samples]
        sweeps.append(physio.delay_sweep(trace, base, windows, kinds, args.delays))
        weights.append({k: kinds.count(k) for k in set(kinds)})
        classes = sorted(set(classes) | set(kinds))
    global_median = physio.global_median_delay(estimates)

    delays_csv = args.out / "delays.csv"
    with open(delays_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["night_id", "n_events", "n_estimated", "median_delay_s"])
        w.writerows(per_night)
        w.writerow(["GLOBAL", sum(r[1] for r in per_night), sum(r[2] for r in per_night),
                    f"{global_median:g}"])
    # segment-weighted mean over nights, per class and delay
    sweep_csv = args.out / "sweep.csv"
    with open(sweep_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delay_s"] + [f"mean_desat_{c}" for c in classes])
        for j, d in enumerate(args.delays):
            row = [f"{d:g}"]
            for c in classes:
                num = den = 0.0
                for sw, wt in zip(sweeps, weights):
                    if c in sw and not np.isnan(sw[c][j]):
                        num += sw[c][j] * wt[c]
                        den += wt[c]
                row.append(f"{num / den:.6f}" if den else "")
            w.writerow(row)
    print(f"global median delay: {global_median:g} s")
    _write_run(args.out, args, [delays_csv, sweep_csv], {"global_median_delay_s": global_median})
    return 0


def cmd_report(args) -> int:
    if args.fixture is None:
        table = metrics.load_table1()
    else:
        if not args.fixture.exists():
            raise MetricsError(f"missing report file: {args.fixture}")
        text = args.fixture.read_text()
        id_col = args.id_column or ("id" if text.startswith("id,") else "night_id")
        table = metrics.parse_report_csv(text, id_column=id_col)
    csv_text, text = metrics.render_report(table)
    print(text, end="")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.csv").write_text(csv_text)
        (args.out / "report.txt").write_text(text)
        _write_run(args.out, args, [args.out / "report.csv", args.out / "report.txt"],
                   {"footer": table.footer()})
    return 0


# -- parser -----------------------------------------------------------------

def _add_train_flags(p, defaults: model.TrainConfig, patience: bool):
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    if patience:
        p.add_argument("--patience", type=int, default=defaults.early_stop_patience)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osa-transfer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1, help="parallel nights (default 1)")
        return p

    p = command("synth", cmd_synth, "generate a synthetic cohort")
    p.add_argument("--nights", type=int, required=True)
    p.add_argument("--cohort", choices=sorted(synth.COHORTS), default="child")
    p.add_argument("--duration-h", type=float, default=8.0)
    p.add_argument("--target-ahi", type=float, default=8.0)
    p.add_argument("--delay-mean", type=float, default=26.0)
    p.add_argument("--delay-sd", type=float, default=6.0)
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--prefix", default=None, help="night id prefix (default: cohort name)")

    p = command("features", cmd_features, "extract and cache log-Mel features")
    p.add_argument("--manifest", type=Path, required=True)

    for name, func, help_text in (("pretrain", cmd_pretrain, "train the adult model"),
                                  ("finetune", cmd_finetune, "fine-tune on a paediatric cohort")):
        p = command(name, func, help_text)
        p.add_argument("--manifest", type=Path, required=True)
        p.add_argument("--task", choices=model.TASK_MODES, default="multi")
        p.add_argument("--delay", default="none", help="SpO2 label delay: none | fd | sd")
    pre = sub.choices["pretrain"]
    _add_train_flags(pre, ADULT, patience=False)
    pre.add_argument("--channels", type=_ints, default=model.ModelConfig.channels)
    pre.add_argument("--embedding-dim", type=int, default=model.ModelConfig.embedding_dim)
    pre.add_argument("--stem-pool", type=_ints, default=model.ModelConfig.stem_pool)
    pre.add_argument("--resume", type=Path, default=None)
    ft = sub.choices["finetune"]
    _add_train_flags(ft, PAEDIATRIC, patience=True)
    ft.add_argument("--adult", type=Path, required=True)
    ft.add_argument("--strategy", choices=model.STRATEGIES, required=True)

    p = command("predict", cmd_predict, "predict events, AHI and severity per night")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=events.DEFAULT_THRESHOLD)

    p = command("cv", cmd_cv, "cross-validate transfer configurations")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--adult", type=Path, required=True, help="adult checkpoint")
    p.add_argument("--adult-single", type=Path, default=None,
                   help="separate single-task adult checkpoint for S-* configurations")
    p.add_argument("--grid", default="all", help="comma-separated configurations or 'all'")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--threshold", type=float, default=events.DEFAULT_THRESHOLD)
    p.add_argument("--leak-free", action=argparse.BooleanOptionalAction, default=True,
                   help="estimate FD/SD delays from each fold's training nights only")
    _add_train_flags(p, PAEDIATRIC, patience=True)

    p = command("delay-analyze", cmd_delay_analyze, "estimate airflow-to-SpO2 delays")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--delays", type=_delays, default=_delays("0:60:2"),
                   help="sweep grid, 'lo:hi:step' or a list (default 0:60:2)")

    p = command("report", cmd_report, "render a results table with MAE/RMSE footer",
                out_required=False)
    p.add_argument("--fixture", type=Path, default=None,
                   help="results CSV (default: the bundled Table 1 fixture)")
    p.add_argument("--id-column", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    try:
        return args.func(args)
    except OsaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
