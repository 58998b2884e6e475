"""Command line: run, sweep, report and gen-trace.

Exit codes: 0 success, 1 simulation error (or a partially failed sweep),
2 usage error (bad arguments, invalid config, missing files).
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import sys
import time
import traceback
from pathlib import Path

from . import __version__
from .apps import (
    FCW_LATENCY_BUDGET_MS,
    default_base_stations,
    default_rsus,
    run_data_collection,
    run_fcw,
)
from .config import ConfigError, ScenarioConfig, STACK_CHOICES, dumps, load
from .engine import derive_seed
from .flowmon import (
    FLOWS_CSV_COLUMNS,
    aggregate,
    dumps_json,
    flow_row,
    flows_csv,
    histogram_csv,
    sinr_histogram,
)
from .mobility import TraceError, load_trace, synth_corridor, write_trace

SCHEMA_VERSION = 1
WORKERS_ENV = "CAVSIM_WORKERS"
SWEEP_AXES = ("speed", "rate_vpm", "stack")
RUN_ARTIFACTS = ("flows.csv", "summary.json", "sinr_hist.csv")
FCW_SWEEP_METRICS = ("delay_ms", "status")
DATACOL_SWEEP_METRICS = ("loss_ratio", "mean_delay_ms", "rx_bitrate_kbps", "tx_bitrate_kbps", "sinr_mode_db")


class UsageError(Exception):
    pass


# running one scenario ------------------------------------------------------------


@dataclasses.dataclass
class RunOutput:
    flows_csv: str
    summary: dict
    sinr_hist_csv: str


def simulate(cfg: ScenarioConfig) -> RunOutput:
    """Run every selected stack of ``cfg`` and render the three report files."""
    rows = []
    runs = {}
    hists = {}
    trace = None
    if cfg.app == "data_collection" and cfg.trace_path:
        trace = load_trace(cfg.trace_path)
    for stack in cfg.stacks():
        if cfg.app == "fcw":
            res = run_fcw(
                stack, cfg.speed_mph, cfg.bs_distance_m,
                follower_gap=cfg.follower_gap_m, followers=cfg.followers, seed=cfg.seed,
                trigger_s=cfg.trigger_s, packet_bytes=cfg.warning_bytes,
                background_bsm=cfg.background_bsm,
                dsrc_params=cfg.dsrc_params(), mmwave_params=cfg.mmwave_params(),
            )
            fm = res.flowmon
            for st in fm.flows.values():
                st.stack, st.app = stack, "fcw"
        else:
            res = run_data_collection(
                stack, cfg.rate_vpm, cfg.speed_mph, cfg.duration_s,
                seed=cfg.seed, length=cfg.length_m, prefill=cfg.prefill, trace=trace,
                rsu_xs=cfg.rsu_x_m or default_rsus(cfg.length_m, cfg.rsu_spacing_m),
                rsu_y=cfg.rsu_y_m,
                base_stations=cfg.bs_positions or default_base_stations(cfg.length_m, cfg.bs_spacing_m, cfg.bs_offset_m),
                packet_bytes=cfg.packet_size or None, rate_kbps=cfg.rate_kbps or None,
                dsrc_bsm=cfg.dsrc_bsm, dsrc_unicast=cfg.dsrc_unicast,
                dsrc_params=cfg.dsrc_params(), mmwave_params=cfg.mmwave_params(),
            )
            fm = res.flowmon
        runs[stack] = res.summary()
        rows += [flow_row(k, st) for k, st in sorted(fm.flows.items())]
        hists[stack] = sinr_histogram(aggregate(fm.flows, fm.duration), 1.0)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "app": cfg.app,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "runs": runs,
    }
    return RunOutput(flows_csv(rows), summary, histogram_csv(hists))


def _sha256(data: str) -> str:
    return hashlib.sha256(data.encode()).hexdigest()


def write_run(cfg: ScenarioConfig, out: Path, command: str = "run") -> dict:
    t0 = time.perf_counter()
    result = simulate(cfg)
    wall = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "flows.csv": result.flows_csv,
        "summary.json": dumps_json(result.summary),
        "sinr_hist.csv": result.sinr_hist_csv,
        "config.cfg": dumps(cfg),
    }
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "artifacts": {name: _sha256(text) for name, text in sorted(files.items())},
        "flows_csv_columns": list(FLOWS_CSV_COLUMNS),
        "wall_time_s": round(wall, 3),
    }
    (out / "manifest.json").write_text(dumps_json(manifest))
    return result.summary


# sweep ---------------------------------------------------------------------------------


def _axis_value(axis: str, raw: str):
    if axis == "stack":
        v = raw.strip().lower()
        if v not in STACK_CHOICES:
            raise UsageError(f"stack value must be one of {', '.join(STACK_CHOICES)}, got {raw!r}")
        return v
    try:
        v = float(raw)
    except ValueError:
        raise UsageError(f"{axis} value must be a number, got {raw!r}") from None
    if not math.isfinite(v) or v <= 0:
        raise UsageError(f"{axis} value must be positive, got {raw!r}")
    return int(v) if v == int(v) else v


def sweep_columns(app: str) -> list[str]:
    metrics = FCW_SWEEP_METRICS if app == "fcw" else DATACOL_SWEEP_METRICS
    return ["axis", "value", "seed", "status"] + [f"{s}_{m}" for s in ("dsrc", "mmwave") for m in metrics]


def sweep_row(app: str, summary: dict) -> dict:
    row = {}
    for stack, run in summary["runs"].items():
        if app == "fcw":
            row[f"{stack}_delay_ms"] = run["max_delay_ms"]
            row[f"{stack}_status"] = "PASS" if run["within_budget"] else "FAIL"
        else:
            agg = run["aggregate"]
            for m in DATACOL_SWEEP_METRICS:
                row[f"{stack}_{m}"] = run["sinr_mode_db"] if m == "sinr_mode_db" else agg[m]
    return row


def _sweep_one(cfg_dict: dict, out: str) -> tuple[str, dict]:
    cfg_dict = dict(cfg_dict)
    cfg_dict["bs_positions"] = [tuple(p) for p in cfg_dict["bs_positions"]]
    cfg = ScenarioConfig(**cfg_dict)
    try:
        summary = write_run(cfg, Path(out), command="sweep")
    except Exception:
        return "FAILED", {"error": traceback.format_exc(limit=3)}
    return "OK", sweep_row(cfg.app, summary)


def worker_limit(n_jobs: int) -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        limit = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(limit, n_jobs))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def run_sweep(cfg: ScenarioConfig, axis: str, values: list, out: Path) -> tuple[str, int]:
    jobs = []
    for i, v in enumerate(values):
        c = dataclasses.replace(cfg, dsrc=dict(cfg.dsrc), mmwave=dict(cfg.mmwave))
        c.seed = derive_seed(cfg.seed, "sweep", i)
        if axis == "speed":
            c.speed_mph = float(v)
        elif axis == "rate_vpm":
            c.rate_vpm = float(v)
        else:
            c.stack = v
        sub = out / f"{i:03d}_{axis}_{v}"
        c.output_dir = str(sub)
        jobs.append((i, v, c, sub))
    results: dict[int, tuple[str, dict]] = {}
    workers = worker_limit(len(jobs))
    if workers == 1:
        for i, _, c, sub in jobs:
            results[i] = _sweep_one(c.to_dict(), str(sub))
    else:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {ex.submit(_sweep_one, c.to_dict(), str(sub)): i for i, _, c, sub in jobs}
            for f in cf.as_completed(futs):
                try:
                    results[futs[f]] = f.result()
                except Exception:
                    results[futs[f]] = ("FAILED", {"error": traceback.format_exc(limit=3)})
    cols = sweep_columns(cfg.app)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    failed = 0
    for i, v, c, _ in jobs:
        status, row = results[i]
        failed += status != "OK"
        row = {**row, "axis": axis, "value": v, "seed": c.seed, "status": status}
        w.writerow([_cell(row.get(k)) for k in cols])
    return buf.getvalue(), failed


# report ------------------------------------------------------------------------------------


def _fmt(v, spec: str = ".3f") -> str:
    if v is None or v == "":
        return "-"
    if isinstance(v, float):
        return format(v, spec)
    return str(v)


def _dat(v) -> str:
    if v is None or v == "":
        return "NaN"
    return str(v)


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def report_run(d: Path) -> tuple[str, dict[str, str]]:
    summary = json.loads((d / "summary.json").read_text())
    flows = _read_csv(d / "flows.csv")
    lines = []
    dat = {}
    runs = summary["runs"]
    if summary["app"] == "fcw":
        lines.append(f"{'stack':<8} {'follower':>8} {'status':<16} {'delay_ms':>10}  budget {FCW_LATENCY_BUDGET_MS:.0f} ms")
        speed = None
        delays = {}
        for stack, run in runs.items():
            speed = run["speed_mph"]
            for f, o in run["followers"].items():
                ok = o["status"] == "DELIVERED" and o["end_to_end_delay_ms"] < FCW_LATENCY_BUDGET_MS
                lines.append(f"{stack:<8} {f:>8} {o['status']:<16} {_fmt(o['end_to_end_delay_ms']):>10}  {'PASS' if ok else 'FAIL'}")
            delays[stack] = run["max_delay_ms"]
        dat["delay_vs_speed.dat"] = (
            "# speed_mph dsrc_delay_ms mmwave_delay_ms\n"
            f"{_dat(speed)} {_dat(delays.get('dsrc'))} {_dat(delays.get('mmwave'))}\n"
        )
    else:
        lines.append(f"{'stack':<8} {'loss_ratio':>10} {'delay_ms':>10} {'rx_kbps':>12} {'tx_kbps':>12} {'sinr_mode_db':>12}")
        rate = None
        loss = {}
        for stack, run in runs.items():
            a = run["aggregate"]
            rate = run["rate_vpm"]
            loss[stack] = a["loss_ratio"]
            lines.append(
                f"{stack:<8} {_fmt(a['loss_ratio'], '.4f'):>10} {_fmt(a['mean_delay_ms']):>10} "
                f"{_fmt(a['rx_bitrate_kbps'], '.1f'):>12} {_fmt(a['tx_bitrate_kbps'], '.1f'):>12} {_fmt(run['sinr_mode_db'], '.1f'):>12}"
            )
            if run.get("sinr_mode_offset_db") is not None:
                lines.append(f"{'':<8} SINR mode offset from the 50 dB reference: {run['sinr_mode_offset_db']:+.1f} dB (calibration diagnostic)")
        lines.append("")
        lines.append("per-flow HD streaming check (1200-4000 Kbps received):")
        lines.append(f"{'stack':<8} {'app':<6} {'src':>5} {'dst':>5} {'rx_kbps':>10}  hd_capable")
        for r in flows:
            hd = "yes" if r["hd_streaming_capable"] == "1" else "no"
            rx = float(r["rx_bitrate_kbps"]) if r["rx_bitrate_kbps"] else None
            lines.append(f"{r['stack']:<8} {r['app']:<6} {r['src']:>5} {r['dst']:>5} {_fmt(rx, '.1f'):>10}  {hd}")
        dat["loss_vs_rate.dat"] = (
            "# rate_vpm dsrc_loss_ratio mmwave_loss_ratio\n"
            f"{_dat(rate)} {_dat(loss.get('dsrc'))} {_dat(loss.get('mmwave'))}\n"
        )
    blocks = {}
    for r in _read_csv(d / "sinr_hist.csv"):
        blocks.setdefault(r["stack"], []).append(f"{r['bin_lo_db']} {r['bin_hi_db']} {r['count']}")
    text = "# bin_lo_db bin_hi_db count; one block per stack\n"
    for stack in sorted(blocks):
        text += f"# {stack}\n" + "\n".join(blocks[stack]) + "\n\n\n"
    dat["sinr_hist.dat"] = text
    return "\n".join(lines) + "\n", dat


def report_sweep(d: Path) -> tuple[str, dict[str, str]]:
    rows = _read_csv(d / "sweep.csv")
    cols = list(rows[0].keys()) if rows else []
    lines = [" ".join(f"{c:>16}" for c in cols)]
    lines += [" ".join(f"{r[c] or '-':>16}" for c in cols) for r in rows]
    axis = rows[0]["axis"] if rows else ""
    metric_cols = [c for c in cols if c not in ("axis", "value", "seed", "status") and not c.endswith("_status")]
    body = "# " + " ".join([axis] + metric_cols) + "\n"
    body += "".join(" ".join([r["value"]] + [_dat(r[c]) for c in metric_cols]) + "\n" for r in rows)
    name = {"speed": "delay_vs_speed.dat", "rate_vpm": "loss_vs_rate.dat"}.get(axis, "sweep.dat")
    return "\n".join(lines) + "\n", {name: body}


# commands ------------------------------------------------------------------------------------


def _load(path: str) -> ScenarioConfig:
    return load(path)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    if args.out:
        cfg.output_dir = args.out
    out = Path(cfg.output_dir)
    summary = write_run(cfg, out)
    print(f"wrote {', '.join(RUN_ARTIFACTS)}, manifest.json to {out}")
    if cfg.app == "fcw":
        for stack, run in summary["runs"].items():
            for f, o in run["followers"].items():
                print(f"{stack} follower {f}: {o['status']} {_fmt(o['end_to_end_delay_ms'])} ms")
    return 0


def cmd_sweep(args) -> int:
    values = [v for v in (args.values or "").split(",") if v.strip()]
    if not values:
        raise UsageError("--values must list at least one value")
    vals = [_axis_value(args.axis, v) for v in values]
    cfg = _load(args.config)
    out = Path(args.out or (cfg.output_dir + f"_sweep_{args.axis}"))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    text, failed = run_sweep(cfg, args.axis, vals, out)
    (out / "sweep.csv").write_text(text)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": "sweep",
        "axis": args.axis,
        "values": vals,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "artifacts": {"sweep.csv": _sha256(text)},
        "sweep_columns": sweep_columns(cfg.app),
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    (out / "manifest.json").write_text(dumps_json(manifest))
    print(f"wrote sweep.csv ({len(vals)} rows) to {out}")
    if failed:
        print(f"{failed} of {len(vals)} runs FAILED", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    d = Path(args.run_dir)
    if (d / "sweep.csv").is_file():
        text, dat = report_sweep(d)
    elif all((d / n).is_file() for n in RUN_ARTIFACTS):
        text, dat = report_run(d)
    else:
        missing = [n for n in RUN_ARTIFACTS if not (d / n).is_file()]
        raise UsageError(f"{d}: missing run artifacts: {', '.join(missing)}")
    for name, body in dat.items():
        (d / name).write_text(body)
    sys.stdout.write(text)
    return 0


def cmd_gen_trace(args) -> int:
    for name in ("rate_vpm", "speed_mph", "length_m", "duration_s"):
        if getattr(args, name) <= 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    samples = synth_corridor(args.rate_vpm, args.speed_mph, args.length_m, args.duration_s,
                             args.seed, prefill=args.prefill)
    write_trace(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cavsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("config", help="config file or preset name")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one scenario per axis value")
    s.add_argument("config", help="config file or preset name")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="summarise a run or sweep directory")
    rp.add_argument("run_dir")
    rp.set_defaults(func=cmd_report)

    g = sub.add_parser("gen-trace", help="write a synthetic corridor trace")
    g.add_argument("--rate-vpm", type=float, default=20.0)
    g.add_argument("--speed-mph", type=float, default=45.0)
    g.add_argument("--length-m", type=float, default=1500.0)
    g.add_argument("--duration-s", type=float, default=60.0)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--prefill", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        for problem in e.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    except (UsageError, TraceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
