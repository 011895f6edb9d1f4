"""Asyncio TCP runner for validators on a real network.

Each node keeps one outbound connection per peer and accepts inbound ones.
A connection opens with a 4-byte big-endian sender id, then carries
:mod:`dagbft.wire` frames. Outbound queues are bounded; when a queue is full
the oldest block frame goes first, since pull synchronization recovers any
block a peer never received.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import socket
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from . import crypto
from .coin import CoinSetup
from .simnet import LoadGenerator
from .types import Block, Committee, Transaction, ValidatorId, WaveConfig
from .validator import Effects, Validator
from .wire import (MAX_FRAME, DecodeError, FrameKind, WriteAheadLog, decode_block, decode_blocks,
                   decode_refs, encode_block, encode_blocks, encode_frame, encode_refs)

log = logging.getLogger(__name__)

QUEUE_LIMIT = 10_000
RESPONSE_CHUNK = 500  # blocks per fetch-response frame
_PREAMBLE = struct.Struct(">I")
_LEN = struct.Struct(">I")


# -- peer configuration ---------------------------------------------------------


@dataclass(frozen=True)
class PeerInfo:
    id: ValidatorId
    host: str
    port: int
    public_key: bytes

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass
class ClusterConfig:
    """Committee listing shared by every node of a deployment.

    Signatures are keyed MACs, so the listed key doubles as the signing key
    and ``coin_seed`` is the dealer secret every share key derives from.
    That is fine for local clusters and tests, not for adversarial networks.
    """

    peers: list[PeerInfo]
    coin_seed: bytes
    wave_length: int = 5
    leaders: int = 2

    @property
    def n(self) -> int:
        return len(self.peers)

    @property
    def wave(self) -> WaveConfig:
        return WaveConfig(self.wave_length, self.leaders)

    def committee(self) -> Committee:
        return Committee(self.n, tuple(p.public_key for p in self.peers),
                         CoinSetup(seed=self.coin_seed, n=self.n))

    def keys(self, vid: ValidatorId) -> crypto.ValidatorKeys:
        setup = CoinSetup(seed=self.coin_seed, n=self.n)
        return crypto.ValidatorKeys(vid, self.peers[vid].public_key, setup.share_secret(vid))

    @classmethod
    def local(cls, n: int, ports: Iterable[int], *, seed: int = 0, host: str = "127.0.0.1",
              wave_length: int = 5, leaders: int = 2) -> "ClusterConfig":
        committee, _ = crypto.generate_committee(n, seed=seed)
        peers = [PeerInfo(i, host, port, committee.public_keys[i])
                 for i, port in zip(range(n), ports)]
        if len(peers) != n:
            raise ValueError("need one port per validator")
        return cls(peers, committee.coin_setup.seed, wave_length, leaders)

    def to_json(self) -> str:
        return json.dumps({
            "wave_length": self.wave_length,
            "leaders": self.leaders,
            "coin_seed": self.coin_seed.hex(),
            "peers": [{"id": p.id, "address": p.address, "public_key": p.public_key.hex()}
                      for p in self.peers],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClusterConfig":
        raw = json.loads(text)
        peers = []
        for i, entry in enumerate(sorted(raw["peers"], key=lambda p: p["id"])):
            if entry["id"] != i:
                raise ValueError("peer ids must be 0..n-1")
            host, _, port = entry["address"].rpartition(":")
            peers.append(PeerInfo(i, host, int(port), bytes.fromhex(entry["public_key"])))
        return cls(peers, bytes.fromhex(raw["coin_seed"]), raw.get("wave_length", 5),
                   raw.get("leaders", 2))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClusterConfig":
        return cls.from_json(Path(path).read_text())


def free_ports(count: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(count):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


# -- outbound channels ---------------------------------------------------------


class OutboundQueue:
    """Bounded frame queue that sheds the oldest block frame when full."""

    def __init__(self, limit: int = QUEUE_LIMIT) -> None:
        self.limit = limit
        self.items: deque[tuple[FrameKind, bytes]] = deque()
        self.dropped = 0
        self.ready = asyncio.Event()

    def __len__(self) -> int:
        return len(self.items)

    def push(self, kind: FrameKind, frame: bytes) -> None:
        if len(self.items) >= self.limit:
            for i, (k, _) in enumerate(self.items):
                if k is FrameKind.BLOCK:
                    del self.items[i]
                    break
            else:
                self.items.popleft()
            self.dropped += 1
        self.items.append((kind, frame))
        self.ready.set()

    async def pop(self) -> bytes:
        while not self.items:
            self.ready.clear()
            await self.ready.wait()
        return self.items.popleft()[1]


class PeerChannel:
    """Keeps one connection to a peer alive and drains its queue into it."""

    def __init__(self, me: ValidatorId, peer: PeerInfo, *, limit: int = QUEUE_LIMIT,
                 backoff: float = 0.05, max_backoff: float = 2.0) -> None:
        self.me = me
        self.peer = peer
        self.queue = OutboundQueue(limit)
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.failures = 0
        self.connected = False
        self._task: Optional[asyncio.Task] = None

    def send(self, kind: FrameKind, body: bytes) -> None:
        self.queue.push(kind, encode_frame(kind, body))

    def start(self) -> None:
        self._task = asyncio.ensure_future(self._run())

    async def close(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass

    async def _run(self) -> None:
        delay = self.backoff
        while True:
            writer = None
            try:
                _, writer = await asyncio.open_connection(self.peer.host, self.peer.port)
                writer.write(_PREAMBLE.pack(self.me))
                self.connected = True
                delay = self.backoff
                while True:
                    writer.write(await self.queue.pop())
                    await writer.drain()
            except OSError as exc:
                # unreachable peers are expected under asynchrony; keep trying
                self.failures += 1
                log.debug("v%d -> v%d: %s", self.me, self.peer.id, exc)
            finally:
                self.connected = False
                if writer is not None:
                    writer.close()
            await asyncio.sleep(delay)
            delay = min(self.max_backoff, delay * 2)


# -- a validator node ------------------------------------------------------------


@dataclass
class NodeOptions:
    unit: float = 0.01  # seconds per validator time unit
    min_block_interval: int = 5
    round_patience: int = 0
    fetch_base: int = 10
    fetch_cap: int = 100
    max_round: Optional[int] = None
    queue_limit: int = QUEUE_LIMIT
    fsync: bool = False


class Node:
    """One validator process: TCP server, peer channels and the event loop
    that serializes every input into the validator."""

    def __init__(self, config: ClusterConfig, vid: ValidatorId, *,
                 data_dir: Optional[Union[str, Path]] = None,
                 options: Optional[NodeOptions] = None,
                 on_commit: Optional[Callable[[ValidatorId, Block, int], None]] = None) -> None:
        self.config = config
        self.id = vid
        self.options = options or NodeOptions()
        self.on_commit = on_commit
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.validator: Optional[Validator] = None
        self.channels: dict[int, PeerChannel] = {}
        self.rejected = 0
        self._ingress: asyncio.Queue = asyncio.Queue()
        self._server: Optional[asyncio.base_events.Server] = None
        self._tasks: list[asyncio.Task] = []
        self._conns: set[asyncio.StreamWriter] = set()
        self._wal: Optional[WriteAheadLog] = None
        self._t0 = 0.0

    @property
    def wal_path(self) -> Optional[Path]:
        return self.data_dir / f"v{self.id}.wal" if self.data_dir is not None else None

    def now(self) -> int:
        return int((asyncio.get_event_loop().time() - self._t0) / self.options.unit)

    def _build_validator(self) -> Validator:
        opts = self.options
        committee = self.config.committee()
        keys = self.config.keys(self.id)
        kwargs = dict(observer=self._observe, max_round=opts.max_round,
                      fetch_base=opts.fetch_base, fetch_cap=opts.fetch_cap,
                      min_block_interval=opts.min_block_interval,
                      round_patience=opts.round_patience)
        path = self.wal_path
        if path is None:
            return Validator(keys, committee, self.config.wave, **kwargs)
        path.parent.mkdir(parents=True, exist_ok=True)
        existed = path.exists() and path.stat().st_size > 0
        self._wal = WriteAheadLog.open(path, fsync=opts.fsync)
        if existed:
            v = Validator.recover(self._wal, keys, committee, self.config.wave, now=self.now(),
                                  **kwargs)
            log.info("v%d recovered at round %d", self.id, v.current_round)
            return v
        return Validator(keys, committee, self.config.wave, wal=self._wal, **kwargs)

    def _observe(self, vid: ValidatorId, block: Block, now: int) -> None:
        if self.on_commit is not None:
            self.on_commit(vid, block, now)

    async def listen(self, t0: Optional[float] = None) -> None:
        """Load state and accept connections without sending anything yet."""
        loop = asyncio.get_event_loop()
        self._t0 = loop.time() if t0 is None else t0
        self.validator = self._build_validator()
        me = self.config.peers[self.id]
        self._server = await asyncio.start_server(self._accept, me.host, me.port)

    async def start(self, t0: Optional[float] = None) -> None:
        if self._server is None:
            await self.listen(t0)
        for peer in self.config.peers:
            if peer.id != self.id:
                ch = PeerChannel(self.id, peer, limit=self.options.queue_limit)
                ch.start()
                self.channels[peer.id] = ch
        self._apply(self.validator.announce())
        self._tasks.append(asyncio.ensure_future(self._main()))

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        for t in self._tasks:
            try:
                await t
            except asyncio.CancelledError:
                pass
        self._tasks.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for w in list(self._conns):
            w.close()
        for ch in self.channels.values():
            await ch.close()
        self.channels.clear()
        if self._wal is not None:
            self._wal.close()
            self._wal = None

    def submit(self, tx: Transaction):
        return self.validator.submit_transaction(tx)

    # -- ingress ---------------------------------------------------------------

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._conns.add(writer)
        try:
            (sender,) = _PREAMBLE.unpack(await reader.readexactly(_PREAMBLE.size))
            if not 0 <= sender < self.config.n or sender == self.id:
                log.warning("v%d: dropping connection claiming id %d", self.id, sender)
                return
            while True:
                (length,) = _LEN.unpack(await reader.readexactly(_LEN.size))
                if not 1 <= length <= MAX_FRAME:
                    log.warning("v%d: bad frame length from v%d", self.id, sender)
                    return
                payload = await reader.readexactly(length)
                try:
                    kind = FrameKind(payload[0])
                except ValueError:
                    log.warning("v%d: unknown frame kind from v%d", self.id, sender)
                    return
                self._ingress.put_nowait((sender, kind, payload[1:]))
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            self._conns.discard(writer)
            writer.close()

    async def _main(self) -> None:
        unit = self.options.unit
        while True:
            try:
                first = await asyncio.wait_for(self._ingress.get(), unit)
                batch = [first]
                while not self._ingress.empty():
                    batch.append(self._ingress.get_nowait())
            except asyncio.TimeoutError:
                batch = []
            self._process(batch)

    def _process(self, batch: list[tuple[int, FrameKind, bytes]]) -> None:
        # frames go in one at a time, as read off the wire; handing the
        # validator a whole backlog at once would let it jump rounds it
        # could have taken part in
        v = self.validator
        if not batch:
            self._apply(v.tick(self.now()))
            return
        for sender, kind, body in batch:
            try:
                if kind is FrameKind.BLOCK:
                    self._apply(v.handle([(decode_block(body), sender)], self.now()))
                elif kind is FrameKind.FETCH_RESPONSE:
                    self._apply(v.handle([(b, sender) for b in decode_blocks(body)], self.now()))
                else:
                    blocks = v.on_sync_request(decode_refs(body), sender)
                    for i in range(0, len(blocks), RESPONSE_CHUNK):
                        self._send(sender, FrameKind.FETCH_RESPONSE,
                                   encode_blocks(blocks[i:i + RESPONSE_CHUNK]))
            except DecodeError as exc:
                self.rejected += 1
                log.debug("v%d: undecodable frame from v%d: %s", self.id, sender, exc)

    # -- egress ----------------------------------------------------------------

    def _send(self, peer: int, kind: FrameKind, body: bytes) -> None:
        ch = self.channels.get(peer)
        if ch is not None:
            ch.send(kind, body)

    def _apply(self, eff: Effects) -> None:
        for block, recipients in eff.outgoing:
            body = encode_block(block)
            for peer in (recipients if recipients is not None else self.channels):
                self._send(peer, FrameKind.BLOCK, body)
        for peer, block in eff.hints:
            self._send(peer, FrameKind.BLOCK, encode_block(block))
        for peer, refs in eff.requests:
            self._send(peer, FrameKind.FETCH_REQUEST, encode_refs(refs))

    # -- observation -----------------------------------------------------------

    @property
    def sequence(self) -> list[bytes]:
        committer = self.validator.committer if self.validator is not None else None
        return [r.digest for r in committer.sequence] if committer is not None else []


def prefix_hash(digests: Iterable[bytes]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for d in digests:
        h.update(d)
    return h.hexdigest()


# -- an in-process cluster --------------------------------------------------------


@dataclass
class ClusterReport:
    sequences: dict[int, list[bytes]]
    tx_latencies: list[float] = field(default_factory=list)
    committed_txs: int = 0
    resubmissions: int = 0
    dropped_frames: int = 0

    def common_prefix(self) -> int:
        return min((len(s) for s in self.sequences.values()), default=0)

    def consistent(self) -> bool:
        seqs = list(self.sequences.values())
        if not seqs:
            return True
        for a in seqs:
            for b in seqs:
                k = min(len(a), len(b))
                if a[:k] != b[:k]:
                    return False
        return True

    def prefix_hashes(self, length: Optional[int] = None) -> dict[int, str]:
        k = self.common_prefix() if length is None else length
        return {v: prefix_hash(s[:k]) for v, s in sorted(self.sequences.items())}


class LocalCluster:
    """``n`` nodes on localhost inside one event loop, with an open-loop
    client submitting ``load`` transactions per second."""

    def __init__(self, n: int = 4, *, data_dir: Union[str, Path], seed: int = 0,
                 wave_length: int = 5, leaders: int = 2, load: float = 0.0,
                 client_timeout: float = 2.0, options: Optional[NodeOptions] = None,
                 config: Optional[ClusterConfig] = None) -> None:
        self.data_dir = Path(data_dir)
        self.options = options or NodeOptions()
        self.config = config or ClusterConfig.local(n, free_ports(n), seed=seed,
                                                    wave_length=wave_length, leaders=leaders)
        self.n = self.config.n
        unit = self.options.unit
        self.load = LoadGenerator(load * unit, list(range(self.n)), seed=seed,
                                  timeout=max(1, round(client_timeout / unit))) if load > 0 else None
        self.tx_latencies: list[float] = []
        self.nodes: dict[int, Node] = {}
        self.down: set[int] = set()
        self._t0 = 0.0
        self._client: Optional[asyncio.Task] = None
        self._dropped = 0

    def _node(self, vid: int) -> Node:
        return Node(self.config, vid, data_dir=self.data_dir, options=self.options,
                    on_commit=self._on_commit)

    def _on_commit(self, vid: int, block: Block, now: int) -> None:
        if self.load is None:
            return
        for tx in block.transactions:
            latency = self.load.on_commit(tx, now)
            if latency is not None:
                self.tx_latencies.append(latency * self.options.unit)

    async def start(self) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.config.save(self.data_dir / "peers.json")
        self._t0 = asyncio.get_event_loop().time()
        for vid in range(self.n):
            self.nodes[vid] = self._node(vid)
            await self.nodes[vid].listen(self._t0)
        for node in self.nodes.values():
            await node.start()
        if self.load is not None:
            self._client = asyncio.ensure_future(self._drive_load())

    async def _drive_load(self) -> None:
        last = 0
        while True:
            await asyncio.sleep(self.options.unit)
            now = int((asyncio.get_event_loop().time() - self._t0) / self.options.unit)
            for t in range(last + 1, now + 1):
                for target, tx in self.load.tick(t):
                    if target not in self.down:
                        self.nodes[target].submit(tx)
            last = now

    async def kill(self, vid: int) -> None:
        node = self.nodes[vid]
        self._dropped += sum(ch.queue.dropped for ch in node.channels.values())
        await node.stop()
        self.down.add(vid)

    async def restart(self, vid: int) -> None:
        node = self._node(vid)
        self.nodes[vid] = node
        await node.start(self._t0)
        self.down.discard(vid)

    async def stop(self) -> None:
        if self._client is not None:
            self._client.cancel()
            try:
                await self._client
            except asyncio.CancelledError:
                pass
        for vid in range(self.n):
            if vid not in self.down:
                await self.kill(vid)

    def sequences(self) -> dict[int, list[bytes]]:
        return {vid: node.sequence for vid, node in self.nodes.items()}

    def report(self) -> ClusterReport:
        dropped = self._dropped + sum(ch.queue.dropped for node in self.nodes.values()
                                      for ch in node.channels.values())
        return ClusterReport(
            sequences=self.sequences(), tx_latencies=list(self.tx_latencies),
            committed_txs=len(self.load.committed) if self.load else 0,
            resubmissions=self.load.resubmissions if self.load else 0, dropped_frames=dropped)


async def run_local_cluster(n: int, duration: float, *, data_dir: Union[str, Path],
                            seed: int = 0, load: float = 0.0, wave_length: int = 5,
                            leaders: int = 2, kill: Optional[tuple[int, float]] = None,
                            restart_at: Optional[float] = None,
                            options: Optional[NodeOptions] = None) -> ClusterReport:
    """Run a cluster for ``duration`` seconds, optionally killing node
    ``kill[0]`` at ``kill[1]`` seconds and restarting it at ``restart_at``."""
    cluster = LocalCluster(n, data_dir=data_dir, seed=seed, load=load, wave_length=wave_length,
                           leaders=leaders, options=options)
    await cluster.start()
    schedule = []
    if kill is not None:
        schedule.append((kill[1], "kill"))
        if restart_at is not None:
            schedule.append((restart_at, "restart"))
    elapsed = 0.0
    try:
        for at, action in sorted(schedule):
            await asyncio.sleep(max(0.0, at - elapsed))
            elapsed = max(elapsed, at)
            if action == "kill":
                await cluster.kill(kill[0])
            else:
                await cluster.restart(kill[0])
        await asyncio.sleep(max(0.0, duration - elapsed))
    finally:
        await cluster.stop()
    return cluster.report()


async def run_node(config: ClusterConfig, vid: int, duration: float, *,
                   data_dir: Union[str, Path], options: Optional[NodeOptions] = None) -> Node:
    node = Node(config, vid, data_dir=data_dir, options=options)
    await node.start()
    try:
        await asyncio.sleep(duration)
    finally:
        await node.stop()
    return node
