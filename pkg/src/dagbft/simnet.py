"""Deterministic discrete-event network simulator.

Time is an integer count of message delays (hops). Every message takes at
least one hop; schedulers only choose how many. Events with the same
delivery time are handed to each recipient as one batch, so a validator
inserts everything that arrived, runs one commit pass and then proposes.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import logging
import math
import random
import struct
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Optional, Union

from . import crypto
from .committer import HistoryCache, Rule, SlotDecision, direct_commit_lower_bound, is_cert
from .dag import VALID, DagStore, genesis_blocks
from .types import Block, BlockRef, Committee, Transaction, WaveConfig
from .validator import EquivocatorValidator, Validator
from .wire import WriteAheadLog

log = logging.getLogger(__name__)

BLOCK, FETCH_REQUEST, FETCH_RESPONSE, WAKE, CRASH, RECOVER = range(6)


# -- schedulers ---------------------------------------------------------------


class Synchronous:
    name = "sync"

    def __init__(self, delay: int = 1) -> None:
        if delay < 1:
            raise ValueError("delay must be at least one hop")
        self.delay = delay

    def bind(self, n: int, f: int, rng: random.Random) -> None:
        pass

    def block_delay(self, block: Block, src: int, dst: int) -> int:
        return self.delay

    def control_delay(self, src: int, dst: int) -> int:
        return self.delay


class RandomModel:
    """Each validator gets its own block and a fresh uniformly random 2f of
    the others' round-r blocks after one hop; the rest trail by 1-3 hops."""

    name = "random"

    def __init__(self, tail: tuple[int, int] = (1, 3)) -> None:
        self.tail = tail
        self._fast: dict[tuple[int, int], frozenset[int]] = {}

    def bind(self, n: int, f: int, rng: random.Random) -> None:
        self.n, self.f, self.rng = n, f, rng
        self._fast.clear()

    def _fast_set(self, dst: int, round_: int) -> frozenset[int]:
        key = (dst, round_)
        chosen = self._fast.get(key)
        if chosen is None:
            others = [v for v in range(self.n) if v != dst]
            chosen = frozenset(self.rng.sample(others, 2 * self.f))
            self._fast[key] = chosen
            if len(self._fast) > 64 * self.n:
                for k in [k for k in self._fast if k[1] < round_ - 16]:
                    del self._fast[k]
        return chosen

    def block_delay(self, block: Block, src: int, dst: int) -> int:
        if src != block.author or block.author in self._fast_set(dst, block.round):
            return 1
        return 1 + self.rng.randint(*self.tail)

    def control_delay(self, src: int, dst: int) -> int:
        return 1


class Adversarial:
    """Delay-by-round and delay-by-author adversary with a hard bound.

    Each round a fresh set of ``f`` authors is slowed down towards every
    recipient, a fixed set of ``f`` recipients lags on everything, and all
    messages get random jitter that reorders deliveries within a round.
    Nothing is ever dropped.
    """

    name = "adversarial"

    def __init__(self, bound: int = 8, jitter: int = 2) -> None:
        if bound < 1:
            raise ValueError("bound must be at least one hop")
        self.bound = bound
        self.jitter = jitter
        self._victims: dict[int, frozenset[int]] = {}

    def bind(self, n: int, f: int, rng: random.Random) -> None:
        self.n, self.f, self.rng = n, f, rng
        self._victims.clear()
        self.laggards = frozenset(rng.sample(range(n), f))

    def _slow_authors(self, round_: int) -> frozenset[int]:
        chosen = self._victims.get(round_)
        if chosen is None:
            chosen = frozenset(self.rng.sample(range(self.n), self.f))
            self._victims[round_] = chosen
            self._victims.pop(round_ - 32, None)
        return chosen

    def block_delay(self, block: Block, src: int, dst: int) -> int:
        d = 1 + self.rng.randint(0, self.jitter)
        if src in self._slow_authors(block.round):
            d += self.rng.randint(1, self.bound)
        if dst in self.laggards:
            d += self.rng.randint(0, self.bound // 2)
        return min(d, self.bound + self.jitter + 1)

    def control_delay(self, src: int, dst: int) -> int:
        return 1 + self.rng.randint(0, self.jitter)


Scheduler = Union[Synchronous, RandomModel, Adversarial]


def make_scheduler(name: str) -> Scheduler:
    try:
        return {"sync": Synchronous, "random": RandomModel, "adversarial": Adversarial}[name]()
    except KeyError:
        raise ValueError(f"unknown scheduler {name!r}") from None


# -- faults and load ----------------------------------------------------------


@dataclass(frozen=True)
class FaultPlan:
    crashes: dict[int, int] = field(default_factory=dict)      # validator -> crash time
    recoveries: dict[int, int] = field(default_factory=dict)   # validator -> restart time
    byzantine: tuple[int, ...] = ()
    equivocation_k: int = 2

    @classmethod
    def crash_at_start(cls, ids: Iterable[int]) -> "FaultPlan":
        return cls(crashes={v: 0 for v in ids})

    def faulty_at(self, t: float) -> set[int]:
        down = {v for v, c in self.crashes.items()
                if c <= t and not (v in self.recoveries and self.recoveries[v] <= t)}
        return down | set(self.byzantine)

    def check(self, n: int, f: int) -> None:
        for v in itertools.chain(self.crashes, self.recoveries, self.byzantine):
            if not 0 <= v < n:
                raise ValueError(f"fault plan names unknown validator {v}")
        for v, t in self.recoveries.items():
            if v not in self.crashes or t <= self.crashes[v]:
                raise ValueError(f"validator {v} recovers without crashing first")
        if self.equivocation_k < 2:
            raise ValueError("equivocators need k >= 2")
        instants = {0, *self.crashes.values(), *self.recoveries.values()}
        for t in instants:
            if len(self.faulty_at(t)) > f:
                raise ValueError(f"more than f={f} validators faulty at time {t}")

    def describe(self) -> str:
        return f"crash={len(self.crashes)};byz={len(self.byzantine)}"


class LoadGenerator:
    """Open-loop client: a fixed rate of fresh transactions, each sent to a
    random validator and re-sent to a different one if it is not committed
    within ``timeout``."""

    def __init__(self, rate: float, targets: list[int], *, seed: int = 0, timeout: int = 50,
                 tx_size: int = 32, client: int = 0) -> None:
        if rate < 0:
            raise ValueError("load must be non-negative")
        self.rate = rate
        self.targets = list(targets)
        self.rng = random.Random(seed)
        self.timeout = timeout
        self.tx_size = max(tx_size, 12)
        self.client = client
        self._credit = 0.0
        self._seq = 0
        self._deadlines: list[tuple[float, int, bytes]] = []
        self.last_target: dict[bytes, int] = {}
        self.submitted: dict[bytes, float] = {}
        self.committed: dict[bytes, float] = {}
        self.resubmissions = 0

    def _make_tx(self) -> Transaction:
        self._seq += 1
        head = struct.pack(">IQ", self.client, self._seq)
        return head + b"\x00" * (self.tx_size - len(head))

    def tick(self, now: float, elapsed: float = 1.0) -> list[tuple[int, Transaction]]:
        out = []
        self._credit += self.rate * elapsed
        while self._credit >= 1.0:
            self._credit -= 1.0
            tx = self._make_tx()
            target = self.rng.choice(self.targets)
            self.submitted[tx] = now
            self.last_target[tx] = target
            heapq.heappush(self._deadlines, (now + self.timeout, self._seq, tx))
            out.append((target, tx))
        while self._deadlines and self._deadlines[0][0] <= now:
            _, seq, tx = heapq.heappop(self._deadlines)
            if tx in self.committed:
                continue
            others = [t for t in self.targets if t != self.last_target[tx]] or self.targets
            target = self.rng.choice(others)
            self.last_target[tx] = target
            self.resubmissions += 1
            heapq.heappush(self._deadlines, (now + self.timeout, seq, tx))
            out.append((target, tx))
        return out

    def on_commit(self, tx: Transaction, now: float) -> Optional[float]:
        if tx in self.committed or tx not in self.submitted:
            return None
        self.committed[tx] = now
        return now - self.submitted[tx]


# -- configuration and report -------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    n: int = 4
    wave_length: int = 5
    leaders: int = 2
    scheduler: str = "sync"
    seed: int = 0
    rounds: int = 20
    load: float = 0.0
    faults: FaultPlan = field(default_factory=FaultPlan)
    tx_size: int = 32
    client_timeout: int = 50
    fetch_cap: int = 10
    all_committers: bool = True
    keep_blocks: bool = True
    max_time: Optional[int] = None

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def wave(self) -> WaveConfig:
        return WaveConfig(self.wave_length, self.leaders)


CSV_COLUMNS = ("seed", "n", "f", "wave_len", "leaders", "scheduler", "faults", "rounds",
               "txs_committed", "mean_latency_hops", "p50_latency_hops", "p99_latency_hops",
               "direct_commits", "indirect_commits", "skips", "commit_rate", "safety_ok")


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile; NaN for no data."""
    if not values:
        return math.nan
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.4f}"


@dataclass
class CheckResult:
    ok: bool
    details: str = ""

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class RunReport:
    config: SimConfig
    honest: list[int]
    reference: int
    sequences: dict[int, list[bytes]]
    decisions: dict[int, list[SlotDecision]]
    proposals: dict[int, list[Block]]
    blocks: dict[bytes, Block]
    tx_latencies: list[float]
    current_rounds: dict[int, int]
    end_time: int
    events: int

    # -- metrics -----------------------------------------------------------

    @property
    def reference_decisions(self) -> list[SlotDecision]:
        return self.decisions.get(self.reference, [])

    def count(self, rule: Rule, commit: bool) -> int:
        return sum(1 for d in self.reference_decisions
                   if d.rule is rule and d.status.is_commit == commit)

    @property
    def direct_commits(self) -> int:
        return self.count(Rule.DIRECT, True)

    @property
    def indirect_commits(self) -> int:
        return self.count(Rule.INDIRECT, True)

    @property
    def skips(self) -> int:
        return sum(1 for d in self.reference_decisions if d.status.is_skip)

    def decided_rounds(self) -> list[int]:
        """Rounds whose every slot was emitted at the reference validator."""
        per_round: dict[int, int] = {}
        for d in self.reference_decisions:
            per_round[d.slot.round] = per_round.get(d.slot.round, 0) + 1
        return sorted(r for r, c in per_round.items() if c == self.config.leaders)

    def commit_rate(self, first: int = 1, last: Optional[int] = None) -> tuple[int, int]:
        """(rounds with a direct commit, decided rounds) over [first, last]."""
        rounds = [r for r in self.decided_rounds()
                  if r >= first and (last is None or r <= last)]
        wanted = set(rounds)
        hits = {d.slot.round for d in self.reference_decisions
                if d.slot.round in wanted and d.rule is Rule.DIRECT and d.status.is_commit}
        return len(hits), len(rounds)

    def safety(self) -> CheckResult:
        for check in (check_prefix_consistency, check_single_certificate, check_no_honest_equivocation):
            result = check(self)
            if not result:
                return result
        return CheckResult(True)

    def csv_row(self, safety: Optional[bool] = None) -> dict[str, str]:
        cfg = self.config
        lat = self.tx_latencies
        hits, total = self.commit_rate()
        if safety is None:
            safety = bool(self.safety())
        return {
            "seed": str(cfg.seed), "n": str(cfg.n), "f": str(cfg.f),
            "wave_len": str(cfg.wave_length), "leaders": str(cfg.leaders),
            "scheduler": cfg.scheduler, "faults": cfg.faults.describe(),
            "rounds": str(cfg.rounds), "txs_committed": str(len(lat)),
            "mean_latency_hops": _fmt(sum(lat) / len(lat) if lat else math.nan),
            "p50_latency_hops": _fmt(percentile(lat, 50)),
            "p99_latency_hops": _fmt(percentile(lat, 99)),
            "direct_commits": str(self.direct_commits),
            "indirect_commits": str(self.indirect_commits),
            "skips": str(self.skips),
            "commit_rate": _fmt(hits / total if total else math.nan),
            "safety_ok": "true" if safety else "false",
        }

    def summary(self) -> str:
        row = self.csv_row()
        lines = [f"{k}: {row[k]}" for k in CSV_COLUMNS]
        lines.append(f"committed blocks (reference v{self.reference}): "
                     f"{len(self.sequences.get(self.reference, []))}")
        return "\n".join(lines)

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(",".join(self.csv_row().values()).encode())
        for v in sorted(self.sequences):
            h.update(struct.pack(">I", v))
            for d in self.sequences[v]:
                h.update(d)
        return h.hexdigest()


# -- the simulation loop ------------------------------------------------------


class Simulation:
    def __init__(self, config: SimConfig, scheduler: Optional[Scheduler] = None) -> None:
        self.config = config
        cfg = config.wave
        self.committee, self.keys = crypto.generate_committee(config.n, seed=config.seed)
        cfg.check_committee(self.committee)
        config.faults.check(config.n, config.f)
        self.scheduler = scheduler or make_scheduler(config.scheduler)
        self.net_rng = random.Random(f"net-{config.seed}")
        self.scheduler.bind(config.n, config.f, self.net_rng)
        self.cache = HistoryCache()
        self.verified: set[bytes] = set()
        faults = config.faults
        self.byzantine = set(faults.byzantine)
        self.honest = [v for v in range(config.n) if v not in self.byzantine]
        stable = [v for v in self.honest if v not in faults.crashes]
        self.reference = (stable or self.honest)[0]
        self.wals = {v: WriteAheadLog.in_memory() for v in faults.recoveries}
        self.validators: dict[int, Validator] = {v: self._spawn(v) for v in range(config.n)}
        self.crashed: set[int] = set()
        self.load = LoadGenerator(config.load, list(range(config.n)), seed=config.seed,
                                  timeout=config.client_timeout, tx_size=config.tx_size) \
            if config.load > 0 else None
        self.tx_latencies: list[float] = []
        self.proposals: dict[int, dict[bytes, Block]] = {v: {} for v in range(config.n)}
        self.blocks: dict[bytes, Block] = {g.digest: g for g in genesis_blocks(self.committee)}
        self._queue: list[tuple] = []
        self._seq = itertools.count()
        self._wakes: dict[int, int] = {}
        self._live = 0  # queued events other than wake-ups
        self.events = 0
        self.now = 0

    def _runs_committer(self, v: int) -> bool:
        if v in self.byzantine:
            return False
        return self.config.all_committers or v == self.reference

    def _spawn(self, v: int) -> Validator:
        cfg = self.config
        kwargs = dict(wal=self.wals.get(v), cache=self.cache, verified=self.verified,
                      observer=self._observe if v == self.reference else None,
                      run_committer=self._runs_committer(v), max_round=cfg.rounds,
                      fetch_cap=cfg.fetch_cap)
        if v in self.byzantine:
            return EquivocatorValidator(self.keys[v], self.committee, cfg.wave,
                                        k=cfg.faults.equivocation_k, **kwargs)
        return Validator(self.keys[v], self.committee, cfg.wave, **kwargs)

    def _observe(self, v: int, block: Block, now: int) -> None:
        if self.load is None:
            return
        for tx in block.transactions:
            latency = self.load.on_commit(tx, now)
            if latency is not None:
                self.tx_latencies.append(latency)

    # -- event plumbing ----------------------------------------------------

    def _push(self, time: int, dst: int, kind: int, src: int, payload) -> None:
        if kind != WAKE:
            self._live += 1
        heapq.heappush(self._queue, (time, next(self._seq), dst, kind, src, payload))

    def _send_block(self, src: int, dst: int, block: Block) -> None:
        self._push(self.now + self.scheduler.block_delay(block, src, dst), dst, BLOCK, src, block)

    def _dispatch(self, src: int, eff) -> None:
        n = self.config.n
        for block, recipients in eff.outgoing:
            if block.author == src:
                self.proposals[src][block.digest] = block
            if self.config.keep_blocks:
                self.blocks[block.digest] = block
            for dst in (recipients if recipients is not None else range(n)):
                if dst != src:
                    self._send_block(src, dst, block)
        for dst, block in eff.hints:
            self._send_block(src, dst, block)
        for dst, refs in eff.requests:
            self._push(self.now + self.scheduler.control_delay(src, dst), dst, FETCH_REQUEST, src,
                       refs)
        self._schedule_wake(src)

    def _schedule_wake(self, v: int) -> None:
        due = self.validators[v].next_wakeup()
        if due is None:
            return
        due = max(due, self.now + 1)
        if self._wakes.get(v) == due:
            return
        self._wakes[v] = due
        self._push(due, v, WAKE, v, None)

    def _crash(self, v: int) -> None:
        self.crashed.add(v)
        log.debug("t=%d: v%d crashes at round %d", self.now, v, self.validators[v].current_round)

    def _recover(self, v: int) -> None:
        cfg = self.config
        old = self.validators[v]
        for b in old.proposed:
            self.proposals[v][b.digest] = b
        wal = self.wals[v]
        fresh = Validator.recover(
            wal, self.keys[v], self.committee, cfg.wave, now=self.now, cache=self.cache,
            verified=self.verified, observer=self._observe if v == self.reference else None,
            run_committer=self._runs_committer(v), max_round=cfg.rounds, fetch_cap=cfg.fetch_cap)
        self.validators[v] = fresh
        self.crashed.discard(v)
        log.debug("t=%d: v%d recovers at round %d", self.now, v, fresh.current_round)
        self._dispatch(v, fresh.announce())
        self._dispatch(v, fresh.tick(self.now))

    def _deliver_batch(self, v: int, events: list[tuple]) -> None:
        if v in self.crashed:
            return
        validator = self.validators[v]
        deliveries = []
        requests = []
        for _, _, _, kind, src, payload in events:
            if kind == BLOCK:
                deliveries.append((payload, src))
            elif kind == FETCH_RESPONSE:
                deliveries.extend((b, src) for b in payload)
            elif kind == FETCH_REQUEST:
                requests.append((src, payload))
        eff = validator.handle(deliveries, self.now)
        for src, refs in requests:
            blocks = validator.on_sync_request(refs, src)
            if blocks:
                self._push(self.now + self.scheduler.control_delay(v, src), src, FETCH_RESPONSE,
                           v, blocks)
        self._dispatch(v, eff)

    def _submit_load(self, upto: int) -> None:
        if self.load is None:
            return
        for t in range(self._load_time + 1, upto + 1):
            for target, tx in self.load.tick(t):
                if target not in self.crashed:
                    self.validators[target].submit_transaction(tx)
        self._load_time = upto

    def _finished(self) -> bool:
        rounds = self.config.rounds
        for v in self.honest:
            if v in self.crashed:
                continue
            if self.validators[v].current_round < rounds:
                return False
        return self._live == 0

    def run(self) -> RunReport:
        cfg = self.config
        max_time = cfg.max_time if cfg.max_time is not None else 40 * cfg.rounds + 200
        for v, t in sorted(cfg.faults.crashes.items()):
            self._push(t, v, CRASH, v, None)
        for v, t in sorted(cfg.faults.recoveries.items()):
            self._push(t, v, RECOVER, v, None)
        self._load_time = -1
        self._submit_load(0)
        for v in range(cfg.n):
            if cfg.faults.crashes.get(v) == 0:
                self.crashed.add(v)
                continue
            self._dispatch(v, self.validators[v].tick(0))
        while self._queue:
            t = self._queue[0][0]
            if t > max_time:
                log.warning("seed %d: stopping at time limit %d", cfg.seed, max_time)
                break
            self.now = t
            batch: dict[int, list[tuple]] = {}
            controls = []
            while self._queue and self._queue[0][0] == t:
                ev = heapq.heappop(self._queue)
                self.events += 1
                if ev[3] != WAKE:
                    self._live -= 1
                if ev[3] in (CRASH, RECOVER):
                    controls.append(ev)
                else:
                    batch.setdefault(ev[2], []).append(ev)
            for ev in controls:
                if ev[3] == CRASH:
                    self._crash(ev[2])
            self._submit_load(t)
            for v in sorted(batch):
                if self._wakes.get(v) == t:
                    del self._wakes[v]
                self._deliver_batch(v, batch[v])
            for ev in controls:
                if ev[3] == RECOVER:
                    self._recover(ev[2])
            if self._finished():
                break
        return self._report()

    def _report(self) -> RunReport:
        for v, validator in self.validators.items():
            for b in validator.proposed:
                self.proposals[v][b.digest] = b
        sequences = {}
        decisions = {}
        for v in self.honest:
            committer = self.validators[v].committer
            if committer is not None:
                sequences[v] = [r.digest for r in committer.sequence]
                decisions[v] = list(committer.emitted)
        return RunReport(
            config=self.config, honest=list(self.honest), reference=self.reference,
            sequences=sequences, decisions=decisions,
            proposals={v: list(p.values()) for v, p in self.proposals.items()},
            blocks=self.blocks, tx_latencies=self.tx_latencies,
            current_rounds={v: val.current_round for v, val in self.validators.items()},
            end_time=self.now, events=self.events)


def run(config: SimConfig, scheduler: Optional[Scheduler] = None) -> RunReport:
    return Simulation(config, scheduler).run()


# -- invariant checks ---------------------------------------------------------


def check_prefix_consistency(report: RunReport) -> CheckResult:
    """Honest commit sequences are pairwise prefix-comparable, duplicate
    free, and no slot is committed at one validator and skipped (or
    committed to another block) at another."""
    seqs = report.sequences
    longest = max(seqs.values(), key=len, default=[])
    for v, seq in seqs.items():
        if seq != longest[:len(seq)]:
            first = next(i for i, (a, b) in enumerate(zip(seq, longest)) if a != b)
            return CheckResult(False, f"v{v} diverges at position {first}")
        if len(set(seq)) != len(seq):
            return CheckResult(False, f"v{v} delivers a block twice")
    outcome: dict[tuple[int, int], tuple[int, Optional[bytes]]] = {}
    for v, decisions in report.decisions.items():
        for d in decisions:
            mine = d.status.block.digest if d.status.is_commit else None
            seen = outcome.setdefault(d.slot.key, (v, mine))
            if seen[1] != mine:
                return CheckResult(False, f"slot {d.slot.key}: v{seen[0]} and v{v} disagree")
    return CheckResult(True)


def union_store(blocks: Iterable[Block], committee: Committee) -> DagStore:
    store = DagStore(committee, max_pending=1 << 62)
    for b in sorted(blocks, key=lambda b: b.round):
        if b.round == 0:
            store.add_genesis([b])
        elif b.digest not in store.blocks:
            store.insert(b, VALID)
    return store


def check_single_certificate(report: RunReport, store: Optional[DagStore] = None) -> CheckResult:
    """No two blocks of one (author, round) both hold a certificate anywhere
    in the union of all created blocks."""
    committee, _ = crypto.generate_committee(report.config.n, seed=report.config.seed)
    store = store or union_store(report.blocks.values(), committee)
    w = report.config.wave_length
    cache = HistoryCache()
    for (round_, author), slot in sorted(store._slots.items()):
        if len(slot) < 2 or round_ == 0:
            continue
        certified = [b for b in slot
                     if any(is_cert(c, b, store, cache) for c in store.round_blocks(round_ + w - 1))]
        if len(certified) > 1:
            return CheckResult(False, f"v{author} round {round_}: {len(certified)} certified blocks")
    return CheckResult(True)


def check_no_honest_equivocation(report: RunReport) -> CheckResult:
    for v in report.honest:
        rounds: dict[int, bytes] = {}
        for b in report.proposals.get(v, []):
            if rounds.setdefault(b.round, b.digest) != b.digest:
                return CheckResult(False, f"honest v{v} signed two blocks at round {b.round}")
    return CheckResult(True)


def _common_core_ok(prev_parents: list[int], top_parents: list[int], direct: list[int]) -> bool:
    """Bitmask form: ``prev_parents[j]`` is the set of round-r blocks under
    round-(r+1) block j; ``top_parents[k]`` is the set of round-(r+1) blocks
    under round-(r+2) block k and ``direct[k]`` its round-r parents."""
    common = -1
    for k, mask in enumerate(top_parents):
        reach = direct[k]
        j = 0
        while mask:
            if mask & 1:
                reach |= prev_parents[j]
            mask >>= 1
            j += 1
        common &= reach
        if not common:
            return False
    return True


def check_common_core(source: Union[RunReport, DagStore], committee: Optional[Committee] = None,
                      rounds: Optional[Iterable[int]] = None) -> CheckResult:
    """Every round r (with round r+2 present) has a block reachable from all
    round-(r+2) blocks."""
    if isinstance(source, RunReport):
        committee = committee or crypto.generate_committee(source.config.n, seed=source.config.seed)[0]
        store = union_store(source.blocks.values(), committee)
    else:
        store = source
    top = store.highest_round
    for r in (rounds if rounds is not None else range(0, top - 1)):
        low, mid, high = (store.round_blocks(r + i) for i in range(3))
        if not low or not high:
            continue
        low_idx = {b.digest: i for i, b in enumerate(low)}
        mid_idx = {b.digest: i for i, b in enumerate(mid)}
        prev = [sum(1 << low_idx[p.digest] for p in b.parents if p.digest in low_idx) for b in mid]
        tops = [sum(1 << mid_idx[p.digest] for p in b.parents if p.digest in mid_idx) for b in high]
        direct = [sum(1 << low_idx[p.digest] for p in b.parents if p.digest in low_idx) for b in high]
        if not _common_core_ok(prev, tops, direct):
            return CheckResult(False, f"round {r}")
    return CheckResult(True)


def enumerate_common_core(n: int = 4) -> tuple[int, int]:
    """Check every legal parent choice over three rounds of ``n`` blocks.

    Returns (configurations checked, violations).
    """
    f = (n - 1) // 3
    full = (1 << n) - 1
    choices = [m for m in range(full + 1) if bin(m).count("1") >= 2 * f + 1]
    checked = violations = 0
    zeros = [0] * n
    for mid in itertools.product(choices, repeat=n):
        mid = list(mid)
        for high in itertools.product(choices, repeat=n):
            checked += 1
            if not _common_core_ok(mid, list(high), zeros):
                violations += 1
    return checked, violations


# -- commit-rate estimation ---------------------------------------------------


def wilson_interval(successes: int, trials: int, confidence: float = 0.99) -> tuple[float, float]:
    if trials == 0:
        return (0.0, 1.0)
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass
class RateEstimate:
    f: int
    leaders: int
    wave_length: int
    waves: int
    direct: int
    rate: float
    interval: tuple[float, float]
    bound: float
    common_core: Optional[CheckResult] = None

    @property
    def half_width(self) -> float:
        return (self.interval[1] - self.interval[0]) / 2

    @property
    def meets_bound(self) -> bool:
        return self.rate >= self.bound - self.half_width


def estimate_direct_commit_rate(f: int, leaders: int, wave_length: int, *, waves: int = 10_000,
                                seed: int = 0, confidence: float = 0.99,
                                check_core: bool = False) -> RateEstimate:
    """Fraction of waves in which the reference validator directly commits
    at least one slot, under the random network model. With ``check_core``
    the reference validator's DAG is also checked for a common core."""
    bound = direct_commit_lower_bound(f, leaders, wave_length)
    config = SimConfig(n=3 * f + 1, wave_length=wave_length, leaders=leaders, scheduler="random",
                       seed=seed, rounds=waves + 4 * wave_length, all_committers=False,
                       keep_blocks=False)
    sim = Simulation(config)
    report = sim.run()
    hits, total = report.commit_rate(1, waves)
    rate = hits / total if total else 0.0
    core = check_common_core(sim.validators[sim.reference].store) if check_core else None
    return RateEstimate(f, leaders, wave_length, total, hits, rate,
                        wilson_interval(hits, total, confidence), bound, core)
