"""``koopflow`` command line: generate, train, evaluate, ablate, compare, plotdata."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .extensions import EXTENSIONS
from .gridsim import Dataset, GridModel, generate_dataset, ieee14, make_faults
from .pipeline import (
    EvalReport,
    ExperimentConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("koopflow")


class UsageError(Exception):
    """Bad flags, config or missing inputs; exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------- helpers


def _load_dataset(path) -> Dataset:
    p = Path(path)
    if not (p / "dataset.json").exists():
        raise UsageError(f"dataset not found: {p} (expected {p / 'dataset.json'})")
    return Dataset.load(p)


def _parse_split(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--split must look like 9:2, got {text!r}") from None
    if a < 0 or b < 0 or a + b == 0:
        raise UsageError(f"--split parts must be nonnegative with a positive sum, got {text!r}")
    return a, b


def _load_run(run_dir) -> tuple[Path, dict]:
    run = Path(run_dir)
    meta_path = run / "run.json"
    if not meta_path.exists():
        raise UsageError(f"not a run directory: {run} (missing run.json)")
    return run, json.loads(meta_path.read_text())


def _write_report(run: Path, report: EvalReport, stem: str = "report") -> None:
    (run / f"{stem}.json").write_text(report.to_json())
    (run / f"{stem}.csv").write_text(report.to_csv())


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.buses == "ieee14":
        model = ieee14(args.seed)
    else:
        topo = Path(args.buses)
        if not topo.exists():
            raise UsageError(f"topology file not found: {topo}")
        try:
            model = GridModel.from_dict(json.loads(topo.read_text()))
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"invalid topology spec {topo}: {exc}") from None
    if args.dt > 0.01:
        raise UsageError(f"--dt {args.dt} under-resolves the 0.1 s fault (need dt <= 0.01)")
    if args.faults < 1:
        raise UsageError("--faults must be >= 1")
    n_train, n_test = _parse_split(args.split) if args.split else (None, None)
    if n_train is not None and n_train + n_test != args.faults:
        # proportional split, e.g. 9:2 applied to 99 faults gives 81/18
        n_train = int(round(args.faults * n_train / (n_train + n_test)))
    faults = make_faults(args.faults, model.n_bus, seed=args.seed)
    ds = generate_dataset(model, faults, seed=args.seed, dt=args.dt, t_end=args.t_end, n_train=n_train)
    out = Path(args.out)
    try:
        ds.save(out)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test trajectories to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise UsageError(f"config not found: {cfg_path}")
    try:
        config = ExperimentConfig.from_json(cfg_path.read_text())
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{cfg_path}: {exc}") from None
    if args.dataset:
        config.dataset = args.dataset
    if not config.dataset:
        raise UsageError("config has no dataset path (set 'dataset' or pass --dataset)")
    ds_path = Path(config.dataset)
    if not ds_path.is_absolute() and not ds_path.exists() and (cfg_path.parent / ds_path).exists():
        ds_path = cfg_path.parent / ds_path
    dataset = _load_dataset(ds_path)

    run = Path(args.out) / config.hash()
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(config.to_json())
    try:
        result = train(config, dataset)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(run / "checkpoint.json", result.forecaster)
    _write_report(run, result.report)
    (run / "history.csv").write_text(result.history_csv())
    (run / "run.json").write_text(json.dumps({"kind": "train", "dataset": str(ds_path.resolve())}, indent=1))
    r = result.report
    print(f"{run}: train RRMSE {r.rrmse_train:.4f}%  test RRMSE {r.rrmse_test:.4f}%")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run, meta = _load_run(args.run)
    forecaster = load_checkpoint(run / "checkpoint.json")
    dataset = _load_dataset(args.dataset or meta["dataset"])
    report = evaluate(forecaster, dataset, args.teacher_forcing_interval)
    stem = "report" if args.teacher_forcing_interval == 0 else f"report_tf{args.teacher_forcing_interval}"
    _write_report(run, report, stem)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    ext = None if args.extension == "none" else args.extension
    dataset = _load_dataset(args.dataset)
    try:
        forecaster, report = run_ablation(
            dataset, ext, delay=args.delay, stride=args.stride, ridge=args.ridge, seed=args.seed,
            extension_dim=args.extension_dim,
        )
    except np.linalg.LinAlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.out:
        config = forecaster.config
        config.dataset = str(Path(args.dataset).resolve())
        run = Path(args.out) / f"ablate-{config.hash()}"
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(config.to_json())
        save_checkpoint(run / "checkpoint.json", forecaster)
        _write_report(run, report)
        (run / "run.json").write_text(json.dumps({"kind": "ablate", "dataset": config.dataset}, indent=1))
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def compare_rows(reports: list[EvalReport]) -> list[dict]:
    """Table rows with markers against the no-extension run of the same base model.

    ``↑`` means the hybrid beats the baseline (lower RRMSE), ``↓`` means it is worse.
    """
    baselines = {r.architecture: r for r in reports if r.extension == "none"}
    rows = []
    for r in reports:
        row = {"extension": r.extension, "base": r.architecture,
               "train": r.rrmse_train, "test": r.rrmse_test, "train_marker": "", "test_marker": ""}
        base = baselines.get(r.architecture)
        if base is not None and r.extension != "none":
            for col, b, h in (("train", base.rrmse_train, r.rrmse_train), ("test", base.rrmse_test, r.rrmse_test)):
                if h != b:
                    row[col + "_marker"] = "↑" if b - h > 0 else "↓"
        rows.append(row)
    return rows


def cmd_compare(args) -> int:
    reports = []
    for d in args.runs:
        path = Path(d) / "report.json"
        if not path.exists():
            raise UsageError(f"missing report file: {path}")
        reports.append(EvalReport.from_dict(json.loads(path.read_text())))
    rows = compare_rows(reports)
    fields = ["extension", "base", "train", "train_marker", "test", "test_marker"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "train": repr(row["train"]), "test": repr(row["test"])})
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    cells = [["extension", "base", "train %", "test %"]] + [
        [r["extension"], r["base"], f"{r['train']:.4f}{r['train_marker']}", f"{r['test']:.4f}{r['test_marker']}"]
        for r in rows
    ]
    widths = [max(len(c[i]) for c in cells) for i in range(4)]
    for c in cells:
        print("  ".join(v.ljust(w) for v, w in zip(c, widths)).rstrip())
    if not args.csv:
        print()
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def plot_rows(forecaster, dataset: Dataset, trajectory: str, bus: int):
    try:
        traj = dataset.trajectory(trajectory)
    except KeyError:
        raise UsageError(f"unknown trajectory id {trajectory!r}") from None
    if not 0 <= bus < dataset.n_bus:
        raise UsageError(f"unknown bus {bus}; dataset has buses 0..{dataset.n_bus - 1}")
    times, truth, pred = forecaster.predict(traj)
    return times, truth[:, bus], pred[:, bus]


def cmd_plotdata(args) -> int:
    run, meta = _load_run(args.run)
    forecaster = load_checkpoint(run / "checkpoint.json")
    dataset = _load_dataset(args.dataset or meta["dataset"])
    times, truth, pred = plot_rows(forecaster, dataset, args.trajectory, args.bus)
    lines = ["t,true,predicted"] + [
        ",".join(format(v, ".17g") for v in row) for row in zip(times, truth, pred)
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="koopflow", description="Koopman forecasting of grid frequency with invertible encoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate fault trajectories")
    g.add_argument("--buses", default="ieee14", help="'ieee14' or a GridModel JSON file")
    g.add_argument("--faults", type=int, default=11)
    g.add_argument("--dt", type=float, default=0.005)
    g.add_argument("--t-end", type=float, default=10.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--split", default="9:2", help="train:test ratio, e.g. 9:2")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", help="override the config's dataset path")
    t.add_argument("--out", default="runs", help="parent of the config-hash run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="re-evaluate a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset")
    e.add_argument("--teacher-forcing-interval", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="identity encoder plus optional extension, K fitted by EDMD")
    a.add_argument("--extension", default="none", choices=("none", *EXTENSIONS))
    a.add_argument("--dataset", required=True)
    a.add_argument("--extension-dim", type=int)
    a.add_argument("--delay", type=int, default=4)
    a.add_argument("--stride", type=int, default=1)
    a.add_argument("--ridge", type=float, default=1e-8)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", help="also save a run directory under this parent")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("compare", help="comparison table from run reports")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--csv", help="write the CSV table here")
    c.set_defaults(func=cmd_compare)

    p = sub.add_parser("plotdata", help="t,true,predicted CSV for one trajectory and bus")
    p.add_argument("--run", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--bus", type=int, required=True)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"koopflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"koopflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"koopflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
