import asyncio
import struct

import pytest

from dagbft.simnet import SimConfig, run
from dagbft.transport import (ClusterConfig, ClusterReport, LocalCluster, Node, NodeOptions,
                              OutboundQueue, free_ports, prefix_hash, run_local_cluster)
from dagbft.wire import FrameKind, encode_frame


def test_config_json_round_trip(tmp_path):
    cfg = ClusterConfig.local(4, [9000, 9001, 9002, 9003], seed=3, wave_length=4, leaders=1)
    path = tmp_path / "peers.json"
    cfg.save(path)
    back = ClusterConfig.load(path)
    assert back == cfg
    assert back.committee() == cfg.committee()
    assert back.keys(2) == cfg.keys(2)
    assert back.peers[1].address == "127.0.0.1:9001"


def test_config_rejects_gaps_and_missing_ports():
    cfg = ClusterConfig.local(4, [1, 2, 3, 4])
    text = cfg.to_json().replace('"id": 3', '"id": 7')
    with pytest.raises(ValueError):
        ClusterConfig.from_json(text)
    with pytest.raises(ValueError):
        ClusterConfig.local(4, [1, 2, 3])


def test_config_keys_sign_like_generated_committee():
    from dagbft import crypto
    committee, keys = crypto.generate_committee(4, seed=5)
    cfg = ClusterConfig.local(4, free_ports(4), seed=5)
    assert cfg.committee() == committee
    assert cfg.keys(1) == keys[1]


def test_outbound_queue_drops_oldest_block_frame_first():
    q = OutboundQueue(limit=3)
    q.push(FrameKind.FETCH_REQUEST, b"req")
    q.push(FrameKind.BLOCK, b"b1")
    q.push(FrameKind.BLOCK, b"b2")
    q.push(FrameKind.BLOCK, b"b3")
    assert [f for _, f in q.items] == [b"req", b"b2", b"b3"]
    q.push(FrameKind.FETCH_RESPONSE, b"resp")
    assert [f for _, f in q.items] == [b"req", b"b3", b"resp"]
    assert q.dropped == 2


def test_outbound_queue_without_blocks_drops_oldest():
    q = OutboundQueue(limit=2)
    for body in (b"a", b"b", b"c"):
        q.push(FrameKind.FETCH_REQUEST, body)
    assert [f for _, f in q.items] == [b"b", b"c"] and q.dropped == 1


def test_cluster_report_consistency():
    a, b = b"\x01" * 32, b"\x02" * 32
    assert ClusterReport({0: [a, b], 1: [a]}).consistent()
    assert not ClusterReport({0: [a, b], 1: [b]}).consistent()
    r = ClusterReport({0: [a, b], 1: [a]})
    assert r.common_prefix() == 1
    assert r.prefix_hashes() == {0: prefix_hash([a]), 1: prefix_hash([a])}


def test_local_cluster_commits_consistently(tmp_path):
    report = asyncio.run(run_local_cluster(4, 3.0, data_dir=tmp_path, seed=1, load=200))
    assert report.consistent()
    assert report.common_prefix() > 20
    assert len(set(report.prefix_hashes().values())) == 1
    assert report.committed_txs > 0


def test_local_cluster_survives_kill_and_restart(tmp_path):
    report = asyncio.run(run_local_cluster(4, 5.0, data_dir=tmp_path, seed=2, load=100,
                                           kill=(3, 1.0), restart_at=2.5))
    assert report.consistent()
    seqs = report.sequences
    assert len(seqs[3]) > 0
    assert report.common_prefix() > 20
    assert (tmp_path / "v3.wal").stat().st_size > 0


def test_tcp_run_matches_synchronous_simulation(tmp_path):
    """With patience for every round's full set of blocks, the TCP cluster
    builds exactly the DAG of the synchronous simulator."""
    rounds = 30
    sim = run(SimConfig(n=4, seed=7, rounds=rounds))
    options = NodeOptions(round_patience=50, min_block_interval=1, max_round=rounds)

    async def go():
        cluster = LocalCluster(4, data_dir=tmp_path, seed=7, options=options)
        await cluster.start()
        try:
            for _ in range(200):
                await asyncio.sleep(0.05)
                if all(n.validator.current_round >= rounds for n in cluster.nodes.values()) \
                        and all(len(s) >= len(sim.sequences[0]) for s in cluster.sequences().values()):
                    break
        finally:
            await cluster.stop()
        return cluster.sequences()

    seqs = asyncio.run(go())
    for v in range(4):
        assert seqs[v] == sim.sequences[v]


def test_node_drops_bad_preamble_and_garbage_frames(tmp_path):
    cfg = ClusterConfig.local(4, free_ports(4), seed=0)

    async def go():
        node = Node(cfg, 0, data_dir=tmp_path, options=NodeOptions(max_round=0))
        await node.start()
        try:
            host, port = cfg.peers[0].host, cfg.peers[0].port
            _, w = await asyncio.open_connection(host, port)
            w.write(struct.pack(">I", 0))  # claims to be the node itself
            w.write(encode_frame(FrameKind.BLOCK, b"\x00"))
            await w.drain()
            _, w2 = await asyncio.open_connection(host, port)
            w2.write(struct.pack(">I", 1) + encode_frame(FrameKind.BLOCK, b"\xff\xff"))
            await w2.drain()
            await asyncio.sleep(0.2)
            w.close()
            w2.close()
            return node.rejected, node.validator.store.highest_round
        finally:
            await node.stop()

    rejected, highest = asyncio.run(go())
    assert rejected == 1
    assert highest == 0
