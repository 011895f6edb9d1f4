"""Command-line entry point: ``dagbft sim | walkthrough | cluster``."""

from __future__ import annotations

import argparse
import asyncio
import csv
import io
import itertools
import logging
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .simnet import CSV_COLUMNS, FaultPlan, SimConfig, estimate_direct_commit_rate, run
from .transport import ClusterConfig, NodeOptions, prefix_hash, run_local_cluster, run_node
from .walkthrough import run_walkthrough


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _wave_list(text: str) -> list[int]:
    waves = _int_list(text)
    bad = [w for w in waves if w not in (3, 4, 5)]
    if bad or not waves:
        raise argparse.ArgumentTypeError("--wave takes values from {3,4,5}")
    return waves


def _scheduler_list(text: str) -> list[str]:
    names = [x for x in text.split(",") if x]
    bad = [x for x in names if x not in ("sync", "random", "adversarial")]
    if bad or not names:
        raise argparse.ArgumentTypeError("--scheduler takes sync, random or adversarial")
    return names


def _crash(text: str) -> tuple[int, int, Optional[int]]:
    """``V@T`` or ``V@T/R``: validator V crashes at time T, restarts at R."""
    try:
        who, _, when = text.partition("@")
        at, _, back = when.partition("/")
        return int(who), int(at), int(back) if back else None
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected V@T or V@T/R, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dagbft", description="DAG-based BFT consensus harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run simulations and emit CSV metrics")
    sim.add_argument("--n", type=int, default=4)
    sim.add_argument("--faults", type=_int_list, default=[0],
                     help="validators crashed from the start (highest ids); comma list sweeps")
    sim.add_argument("--crash", type=_crash, action="append", default=[],
                     help="explicit crash V@T or crash-and-restart V@T/R (repeatable)")
    sim.add_argument("--byzantine", type=int, default=0,
                     help="equivocating validators (highest ids after the crashed ones)")
    sim.add_argument("--equivocations", type=int, default=2, help="blocks per round per equivocator")
    sim.add_argument("--wave", type=_wave_list, default=[5])
    sim.add_argument("--leaders", type=_int_list, default=[2])
    sim.add_argument("--scheduler", type=_scheduler_list, default=["sync"])
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--seeds", type=int, default=1, help="run seeds seed..seed+SEEDS-1")
    sim.add_argument("--rounds", type=int, default=100)
    sim.add_argument("--waves", type=int, default=10_000,
                     help="waves per point for --estimate-commit-rate")
    sim.add_argument("--load", type=float, default=0.0, help="transactions per hop")
    sim.add_argument("--out", type=Path, help="write CSV here instead of stdout")
    sim.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    sim.add_argument("--estimate-commit-rate", action="store_true",
                     help="compare the direct-commit rate per wave with its lower bound")

    sub.add_parser("walkthrough", help="replay the ten-round example DAG and check it")

    cl = sub.add_parser("cluster", help="run validators over TCP")
    mode = cl.add_mutually_exclusive_group(required=True)
    mode.add_argument("--local", type=int, metavar="N", help="run N nodes in this process")
    mode.add_argument("--config", type=Path, help="peer config; run the node given by --id")
    mode.add_argument("--write-config", type=Path, metavar="PATH",
                      help="write a localhost peer config for --n nodes and exit")
    cl.add_argument("--id", type=int)
    cl.add_argument("--n", type=int, default=4)
    cl.add_argument("--base-port", type=int, default=7100)
    cl.add_argument("--host", default="127.0.0.1")
    cl.add_argument("--seed", type=int, default=0)
    cl.add_argument("--wave", type=int, choices=(3, 4, 5), default=5)
    cl.add_argument("--leaders", type=int, default=2)
    cl.add_argument("--duration", type=float, default=10.0, help="seconds")
    cl.add_argument("--load", type=float, default=0.0, help="transactions per second")
    cl.add_argument("--data-dir", type=Path)
    cl.add_argument("--kill", type=_crash, metavar="V@T[/R]",
                    help="kill node V after T seconds, restart it from its log at R")
    cl.add_argument("--dump", type=Path, help="write the committed digests, one per line")
    return p


# -- sim --------------------------------------------------------------------------


def _fault_plan(args, n: int, crashed: int) -> FaultPlan:
    crashes = {v: 0 for v in range(n - crashed, n)}
    recoveries = {}
    for v, at, back in args.crash:
        crashes[v] = at
        if back is not None:
            recoveries[v] = back
    taken = set(crashes)
    byz = [v for v in range(n - 1, -1, -1) if v not in taken][:args.byzantine]
    return FaultPlan(crashes=crashes, recoveries=recoveries, byzantine=tuple(sorted(byz)),
                     equivocation_k=args.equivocations)


def _configs(args) -> list[SimConfig]:
    out = []
    for sched, wave, leaders, crashed in itertools.product(args.scheduler, args.wave,
                                                           args.leaders, args.faults):
        for seed in range(args.seed, args.seed + args.seeds):
            out.append(SimConfig(n=args.n, wave_length=wave, leaders=leaders, scheduler=sched,
                                 seed=seed, rounds=args.rounds, load=args.load,
                                 faults=_fault_plan(args, args.n, crashed)))
    return out


def _run_one(config: SimConfig) -> dict[str, str]:
    return run(config).csv_row()


def cmd_sim(args) -> int:
    if args.estimate_commit_rate:
        return _estimate(args)
    try:
        configs = _configs(args)
        if (args.n - 1) % 3 or args.n < 1:
            raise ValueError(f"--n must be 3f+1, got {args.n}")
        for c in configs:
            if not 1 <= c.leaders <= c.n:
                raise ValueError(f"--leaders must be between 1 and {c.n}")
            c.wave  # validates the wave shape
            c.faults.check(c.n, c.f)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_run_one, configs))
    else:
        rows = [_run_one(c) for c in configs]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out is not None:
        args.out.write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    bad = [r["seed"] for r in rows if r["safety_ok"] != "true"]
    if bad:
        print(f"safety: VIOLATED (seeds {','.join(bad)})")
        return 1
    print("safety: OK")
    return 0


def _estimate(args) -> int:
    f = (args.n - 1) // 3
    header = ("f", "leaders", "wave", "waves", "direct", "rate", "ci_low", "ci_high", "bound",
              "meets_bound")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    failed = False
    for wave, leaders in itertools.product(args.wave, args.leaders):
        try:
            est = estimate_direct_commit_rate(f, leaders, wave, waves=args.waves, seed=args.seed)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        failed |= not est.meets_bound
        writer.writerow((f, leaders, wave, est.waves, est.direct, f"{est.rate:.4f}",
                         f"{est.interval[0]:.4f}", f"{est.interval[1]:.4f}", f"{est.bound:.4f}",
                         "yes" if est.meets_bound else "no"))
    if args.out is not None:
        args.out.write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 1 if failed else 0


# -- walkthrough --------------------------------------------------------------------


def cmd_walkthrough(args) -> int:
    result = run_walkthrough()
    for line in result.lines:
        print(line)
    print("leaders:  " + " ".join(result.leaders))
    print("sequence: " + " ".join(result.sequence))
    if result.ok:
        print("walkthrough: OK")
        return 0
    for m in result.mismatches:
        print("mismatch: " + m)
    return 1


# -- cluster ------------------------------------------------------------------------


def _dump(path: Optional[Path], digests: Sequence[bytes]) -> None:
    if path is not None:
        path.write_text("".join(d.hex() + "\n" for d in digests))


def cmd_cluster(args) -> int:
    if args.write_config is not None:
        ports = range(args.base_port, args.base_port + args.n)
        ClusterConfig.local(args.n, ports, seed=args.seed, host=args.host,
                            wave_length=args.wave, leaders=args.leaders).save(args.write_config)
        print(f"wrote {args.write_config}")
        return 0
    data_dir = args.data_dir or Path(tempfile.mkdtemp(prefix="dagbft-"))
    if args.config is not None:
        config = ClusterConfig.load(args.config)
        if args.id is None or not 0 <= args.id < config.n:
            print("error: --id must name a validator in the config", file=sys.stderr)
            return 2
        node = asyncio.run(run_node(config, args.id, args.duration, data_dir=data_dir))
        seq = node.sequence
        print(f"v{args.id}: committed {len(seq)} blocks, prefix {prefix_hash(seq)}")
        _dump(args.dump, seq)
        return 0
    kill = restart = None
    if args.kill is not None:
        v, at, back = args.kill
        kill, restart = (v, float(at)), (float(back) if back is not None else None)
    report = asyncio.run(run_local_cluster(
        args.local, args.duration, data_dir=data_dir, seed=args.seed, load=args.load,
        wave_length=args.wave, leaders=args.leaders, kill=kill, restart_at=restart,
        options=NodeOptions()))
    common = report.common_prefix()
    for v, h in report.prefix_hashes().items():
        print(f"v{v}: committed {len(report.sequences[v])} blocks, "
              f"prefix[{common}] {h}")
    lat = sorted(report.tx_latencies)
    mean = f"{sum(lat) / len(lat):.3f}s" if lat else "n/a"
    print(f"transactions committed: {report.committed_txs}, resubmitted: {report.resubmissions}, "
          f"mean latency: {mean}")
    if args.dump is not None:
        _dump(args.dump, report.sequences[min(report.sequences)])
    if not report.consistent():
        print("safety: VIOLATED")
        return 1
    print("safety: OK")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"sim": cmd_sim, "walkthrough": cmd_walkthrough, "cluster": cmd_cluster}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
