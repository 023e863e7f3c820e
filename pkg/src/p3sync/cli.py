"""Command-line surface: plan, simulate, server, worker, bench, report.

Exit codes: 0 success, 1 usage or data error, 2 protocol violation, 3 timeout.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import metrics as metrics_mod
from .hashing import fnv1a64
from .metrics import (
    NetSampler,
    clip_samples,
    idle_fraction,
    iteration_starts_from_csv,
    iterations_from_csv,
    samples_from_csv,
    throughput,
    write_text,
)
from .model import BUILTIN_NAMES, ModelProfile, ProfileError, builtin_profile, resolve_profile, save_profile, total_params
from .plan import (
    BASELINE_MODE,
    DEFAULT_BIG_THRESHOLD,
    DEFAULT_MAX_SLICE,
    P3_MODE,
    PlanError,
    load_plan,
    make_baseline_plan,
    make_p3_plan,
    plan_to_csv,
    save_plan,
)
from .proto import ProtocolError
from .queues import DeadlockError
from .server import ServerEngine
from .sim import POLICIES, ScenarioError, load_scenario, simulate
from .transport import parse_addr
from .worker import TrainingWorker, WorkerConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PROTOCOL = 2
EXIT_TIMEOUT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunConfig:
    mode: str = P3_MODE
    profile: str = "toy3"
    num_workers: int = 2
    num_servers: int = 0  # 0 -> num_workers
    max_slice: int = DEFAULT_MAX_SLICE
    big_threshold: int = DEFAULT_BIG_THRESHOLD
    lr: float = 0.1
    iterations: int = 10
    batch_size: int = 32
    throttle_rate: float = 0.0  # bits/second; 0 disables shaping
    throttle_burst: int = 50 * 1024
    seed: int = 0
    output_dir: str = "bench-out"
    skip_iterations: int = 5
    idle_threshold: int = 4096
    timeout: float = 240.0
    dump_params: bool = True

    def resolved_servers(self) -> int:
        return self.num_servers if self.num_servers > 0 else self.num_workers


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(RunConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = RunConfig(**{**cfg.__dict__, **raw})
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def _make_plan(cfg: RunConfig, profile: ModelProfile):
    if cfg.mode == P3_MODE:
        return make_p3_plan(profile, cfg.resolved_servers(), cfg.max_slice)
    return make_baseline_plan(profile, cfg.resolved_servers(), cfg.big_threshold, cfg.seed)


# -- plan ---------------------------------------------------------------


def cmd_plan(args) -> int:
    profile = resolve_profile(args.profile)
    if args.mode == P3_MODE:
        plan = make_p3_plan(profile, args.num_servers, args.max_slice)
    else:
        plan = make_baseline_plan(profile, args.num_servers, args.big_threshold, args.seed)
    sys.stdout.write(plan_to_csv(plan))
    return EXIT_OK


# -- simulate -------------------------------------------------------------


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.policy:
        from dataclasses import replace

        scenario = replace(scenario, policy=args.policy)
        scenario.validate()
    timeline = simulate(scenario)
    csv_text = timeline.to_csv()
    if args.csv:
        write_text(args.csv, csv_text)
    sys.stdout.write(csv_text)
    s = timeline.summary()
    parts = [f"makespan={s['makespan']}"]
    if "inter_iteration_delay" in s:
        parts.append(f"inter_iteration_delay={s['inter_iteration_delay']}")
    parts.append(f"uplink_utilization={s['uplink_utilization']}")
    parts.append(f"downlink_utilization={s['downlink_utilization']}")
    sys.stdout.write("# summary " + " ".join(parts) + "\n")
    return EXIT_OK


# -- server ---------------------------------------------------------------


def cmd_server(args) -> int:
    host, port = parse_addr(args.listen)
    plan = load_plan(args.plan)
    engine = ServerEngine(
        host=host,
        port=port,
        rank=args.rank,
        mode=args.mode,
        plan=plan,
        num_workers=args.num_workers,
        lr=args.lr,
        throttle_rate=args.throttle_rate or None,
        throttle_burst=args.throttle_burst,
        poll_timeout=args.deadlock_timeout,
    )
    print(f"READY {engine.addr[0]}:{engine.addr[1]}", flush=True)
    sampler = NetSampler(engine.counters)
    sampler.start()
    try:
        engine.run()
    finally:
        sampler.stop()
    if args.digest:
        write_text(args.digest, engine.digests_csv())
    if args.net_util:
        write_text(args.net_util, metrics_mod.samples_to_csv(sampler.samples))
    return EXIT_OK


# -- worker ---------------------------------------------------------------


def cmd_worker(args) -> int:
    profile = resolve_profile(args.profile)
    plan = load_plan(args.plan)
    servers = [parse_addr(a) for a in args.servers.split(",") if a]
    cfg = WorkerConfig(
        rank=args.rank,
        mode=args.mode,
        servers=servers,
        iterations=args.iterations,
        lr=args.lr,
        batch_size=args.batch_size,
        throttle_rate=args.throttle_rate or None,
        throttle_burst=args.throttle_burst,
        deadlock_timeout=args.deadlock_timeout,
    )
    worker = TrainingWorker(cfg, profile, plan)
    worker.run()
    if args.outdir:
        worker.write_outputs(args.outdir, dump_params=args.dump_params)
    print(f"DONE rank={args.rank} digest={worker.params_digest():016x}", flush=True)
    return EXIT_OK


# -- bench ---------------------------------------------------------------


class _ChildFailure(Exception):
    def __init__(self, what: str, code: int):
        super().__init__(f"{what} exited with code {code}")
        self.code = code


def _read_ready(proc: subprocess.Popen, timeout: float) -> str:
    result: list[str] = []

    def scan():
        for line in proc.stdout:
            line = line.strip()
            if line.startswith("READY "):
                result.append(line.split(" ", 1)[1])
                return

    t = threading.Thread(target=scan, daemon=True)
    t.start()
    t.join(timeout)
    if not result:
        raise TimeoutError("server did not report READY")
    return result[0]


def _drain(proc: subprocess.Popen) -> None:
    def pump():
        try:
            for _ in proc.stdout:
                pass
        except ValueError:
            pass

    threading.Thread(target=pump, daemon=True).start()


def run_bench(cfg: RunConfig) -> dict:
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    profile = resolve_profile(cfg.profile)
    profile_path = outdir / "profile.json"
    save_profile(profile, profile_path)
    plan = _make_plan(cfg, profile)
    plan_path = outdir / "plan.csv"
    save_plan(plan, plan_path)

    num_servers = cfg.resolved_servers()
    deadline = time.monotonic() + cfg.timeout
    procs: list[subprocess.Popen] = []
    base = [sys.executable, "-m", "p3sync"]
    throttle = ["--throttle-rate", str(cfg.throttle_rate), "--throttle-burst", str(cfg.throttle_burst)]

    def spawn(cmd_args, log_name):
        log = open(outdir / log_name, "w")
        p = subprocess.Popen(
            base + cmd_args, stdout=subprocess.PIPE, stderr=log, text=True
        )
        p._log_handle = log  # closed with the process
        procs.append(p)
        return p

    try:
        addrs = []
        for rank in range(num_servers):
            p = spawn(
                [
                    "server",
                    "--listen", "127.0.0.1:0",
                    "--rank", str(rank),
                    "--mode", cfg.mode,
                    "--plan", str(plan_path),
                    "--num-workers", str(cfg.num_workers),
                    "--lr", str(cfg.lr),
                    "--digest", str(outdir / f"digest_server{rank}.csv"),
                    "--net-util", str(outdir / f"net_util_server{rank}.csv"),
                    *throttle,
                ],
                f"server{rank}.log",
            )
            addrs.append(_read_ready(p, timeout=30))
            _drain(p)

        workers = []
        for rank in range(cfg.num_workers):
            w = spawn(
                [
                    "worker",
                    "--rank", str(rank),
                    "--servers", ",".join(addrs),
                    "--mode", cfg.mode,
                    "--profile", str(profile_path),
                    "--plan", str(plan_path),
                    "--iterations", str(cfg.iterations),
                    "--lr", str(cfg.lr),
                    "--batch-size", str(cfg.batch_size),
                    "--outdir", str(outdir),
                    *(["--dump-params"] if (cfg.dump_params and rank == 0) else []),
                    *throttle,
                ],
                f"worker{rank}.log",
            )
            _drain(w)
            workers.append(w)

        for p in procs:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("bench watchdog expired")
            try:
                code = p.wait(timeout=remaining)
            except subprocess.TimeoutExpired:
                raise TimeoutError("bench watchdog expired") from None
            if code != 0:
                raise _ChildFailure(" ".join(p.args[3:5]), code)
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
                p.wait()
            if p.stdout:
                p.stdout.close()
            getattr(p, "_log_handle").close()

    return summarize_run(cfg, outdir, profile)


def summarize_run(cfg: RunConfig, outdir: Path, profile: ModelProfile) -> dict:
    digests = []
    windows = []
    walls = starts = None
    for rank in range(cfg.num_workers):
        digests.append((outdir / f"digest_worker{rank}.txt").read_text().strip())
        csv_text = (outdir / f"throughput_worker{rank}.csv").read_text()
        wall_ms = iterations_from_csv(csv_text)
        if rank == 0:
            walls = wall_ms
            starts = iteration_starts_from_csv(csv_text)
        rep = throughput(wall_ms, cfg.batch_size, cfg.num_workers, cfg.skip_iterations)
        windows.append(rep.window_seconds)
    if len(set(digests)) != 1:
        raise ProtocolError(f"worker digests disagree: {digests}")
    measured = len(walls) - cfg.skip_iterations
    rate = measured * cfg.batch_size * cfg.num_workers / max(windows)

    # idle time over the same post-warmup window the throughput uses
    samples = samples_from_csv((outdir / "net_util_worker0.csv").read_text())
    t0 = starts[cfg.skip_iterations]
    t1 = starts[-1] + walls[-1]
    clipped = clip_samples(samples, t0, t1)
    idle = idle_fraction(clipped if len(clipped) >= 2 else samples, cfg.idle_threshold)

    dump = outdir / "params_worker0.bin"
    servers_checked = 0
    if dump.exists():
        servers_checked = _verify_server_digests(cfg, outdir, profile, dump.read_bytes())

    summary = {
        "mode": cfg.mode,
        "profile": profile.name,
        "num_workers": cfg.num_workers,
        "num_servers": cfg.resolved_servers(),
        "iterations": cfg.iterations,
        "batch_size": cfg.batch_size,
        "skip_iterations": cfg.skip_iterations,
        "idle_threshold": cfg.idle_threshold,
        "samples_per_second": rate,
        "idle_fraction": idle,
        "digest": digests[0],
        "server_slices_verified": servers_checked,
    }
    write_text(outdir / "summary.json", json.dumps(summary, indent=2) + "\n")
    return summary


def _verify_server_digests(cfg: RunConfig, outdir: Path, profile: ModelProfile, blob: bytes) -> int:
    layer_base = {}
    cursor = 0
    for layer in profile.layers:
        layer_base[layer.index] = cursor
        cursor += layer.param_count
    checked = 0
    for rank in range(cfg.resolved_servers()):
        path = outdir / f"digest_server{rank}.csv"
        lines = path.read_text().splitlines()[1:]
        for line in lines:
            layer, sl, offset, length, digest = line.split(",")
            start = 4 * (layer_base[int(layer)] + int(offset))
            want = fnv1a64(blob[start : start + 4 * int(length)])
            if f"{want:016x}" != digest:
                raise ProtocolError(
                    f"server {rank} slice {layer}/{sl} digest {digest} != worker-side {want:016x}"
                )
            checked += 1
    return checked


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    summary = run_bench(cfg)
    for k, v in summary.items():
        print(f"{k}={v}")
    return EXIT_OK


def cmd_report(args) -> int:
    outdir = Path(args.output_dir)
    summary = json.loads((outdir / "summary.json").read_text())
    for k, v in summary.items():
        print(f"{k}={v}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="p3sync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print a synchronization plan as CSV")
    p.add_argument("--profile", required=True, help=f"profile file or builtin: {', '.join(BUILTIN_NAMES)}")
    p.add_argument("--mode", choices=[P3_MODE, BASELINE_MODE], default=P3_MODE)
    p.add_argument("--num-servers", type=int, default=1)
    p.add_argument("--max-slice", type=int, default=DEFAULT_MAX_SLICE)
    p.add_argument("--big-threshold", type=int, default=DEFAULT_BIG_THRESHOLD)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run a scenario and print its timeline")
    p.add_argument("scenario")
    p.add_argument("--policy", choices=POLICIES, default=None)
    p.add_argument("--csv", default=None, help="also write the timeline CSV here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("server", help="run one parameter server")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--mode", choices=[P3_MODE, BASELINE_MODE], required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--num-workers", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--throttle-rate", type=float, default=0.0, help="bits/second; 0 = off")
    p.add_argument("--throttle-burst", type=int, default=50 * 1024)
    p.add_argument("--deadlock-timeout", type=float, default=60.0)
    p.add_argument("--digest", default=None, help="write per-slice parameter digests here")
    p.add_argument("--net-util", default=None)
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("worker", help="run one training worker")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--servers", required=True, help="comma-separated host:port list")
    p.add_argument("--mode", choices=[P3_MODE, BASELINE_MODE], required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--iterations", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--throttle-rate", type=float, default=0.0, help="bits/second; 0 = off")
    p.add_argument("--throttle-burst", type=int, default=50 * 1024)
    p.add_argument("--deadlock-timeout", type=float, default=60.0)
    p.add_argument("--outdir", default=None)
    p.add_argument("--dump-params", action="store_true")
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("bench", help="run servers+workers on loopback and aggregate metrics")
    p.add_argument("--config", default=None, help="JSON file with RunConfig fields")
    p.add_argument("--mode", choices=[P3_MODE, BASELINE_MODE], default=None)
    p.add_argument("--profile", default=None)
    p.add_argument("--num-workers", type=int, default=None)
    p.add_argument("--num-servers", type=int, default=None)
    p.add_argument("--max-slice", type=int, default=None)
    p.add_argument("--big-threshold", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--throttle-rate", type=float, default=None, help="bits/second; 0 = off")
    p.add_argument("--throttle-burst", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--skip-iterations", type=int, default=None)
    p.add_argument("--idle-threshold", type=int, default=None)
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="print the summary of a finished bench directory")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except ProtocolError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (DeadlockError, TimeoutError) as exc:
        print(f"timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except _ChildFailure as exc:
        print(f"bench failed: {exc}", file=sys.stderr)
        return exc.code
    except (ProfileError, PlanError, ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
