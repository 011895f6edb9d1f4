"""Uncertified DAG-based BFT consensus with multi-leader waves and a
deterministic network simulator."""

from .coin import CoinSetup, combine, elect, make_share, verify_share
from .committer import (Committer, Decider, HistoryCache, Rule, SlotDecision,
                        direct_commit_lower_bound, is_cert, is_vote, linearize_sub_dags,
                        try_decide, try_direct_decide, try_indirect_decide)
from .crypto import ValidatorKeys, generate_committee
from .dag import (DagStore, InsertStatus, InvalidBlock, InvalidReason, Validation, Verdict,
                  genesis_blocks, validate_block)
from .simnet import (FaultPlan, LoadGenerator, RunReport, SimConfig, Simulation,
                     check_common_core, check_prefix_consistency, check_single_certificate,
                     estimate_direct_commit_rate, run)
from .types import (SKIP, UNDECIDED, Block, BlockRef, CoinShare, CoinValue, Committee, Decision,
                    LeaderSlot, SlotStatus, WaveConfig, canonical_parent_order)
from .validator import EquivocatorValidator, Validator
from .wire import (WalKind, WalRecord, WriteAheadLog, decode_block, encode_block, replay_wal)

__all__ = [
    "Block", "BlockRef", "CoinSetup", "CoinShare", "CoinValue", "Committee", "Committer",
    "DagStore", "Decider", "Decision", "EquivocatorValidator", "FaultPlan", "HistoryCache",
    "InsertStatus", "InvalidBlock", "InvalidReason", "LeaderSlot", "LoadGenerator", "Rule",
    "RunReport", "SKIP", "SimConfig", "Simulation", "SlotDecision", "SlotStatus", "UNDECIDED",
    "Validation", "Validator", "ValidatorKeys", "Verdict", "WalKind", "WalRecord", "WaveConfig",
    "WriteAheadLog", "canonical_parent_order", "check_common_core", "check_prefix_consistency",
    "check_single_certificate", "combine", "decode_block", "direct_commit_lower_bound", "elect",
    "encode_block", "estimate_direct_commit_rate", "generate_committee", "genesis_blocks",
    "is_cert", "is_vote", "linearize_sub_dags", "make_share", "replay_wal", "run", "try_decide",
    "try_direct_decide", "try_indirect_decide", "validate_block", "verify_share",
]
