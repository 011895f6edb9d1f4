"""A hand-built ten-round DAG exercising every decision path.

Four validators, wave length 5, two leaders per round. The DAG contains a
skipped leader (L6a), an equivocating leader (v0 at round 4 proposes both
L5b and L5b'), and a slot (L1a) that can only be decided through a later
anchor (L6b). The leader assignment is fixed by a table instead of a coin,
since no single coin offset reproduces it.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import crypto
from .coin import make_share
from .committer import Committer, HistoryCache
from .dag import DagStore
from .types import Block, CoinValue, Committee, WaveConfig, canonical_parent_order

# propose round -> (leader for offset 0, leader for offset 1)
LEADER_TABLE = {0: (3, 0), 1: (0, 1), 2: (1, 3), 3: (0, 3), 4: (3, 0), 5: (0, 1)}

# name -> (author, round, parent names); parent order here is irrelevant
LAYOUT: list[tuple[str, int, int, tuple[str, ...]]] = [
    ("B00", 0, 0, ()), ("B10", 1, 0, ()), ("B20", 2, 0, ()), ("B30", 3, 0, ()),
    ("B01", 0, 1, ("B00", "B10", "B20")),
    ("B11", 1, 1, ("B10", "B00", "B20")),
    ("B21", 2, 1, ("B20", "B00", "B10")),
    ("B31", 3, 1, ("B30", "B00", "B10")),
    ("B02", 0, 2, ("B01", "B11", "B21")),
    ("B12", 1, 2, ("B11", "B01", "B21")),
    ("B22", 2, 2, ("B21", "B01", "B11")),
    ("B32", 3, 2, ("B31", "B01", "B11")),
    ("B03", 0, 3, ("B02", "B12", "B22")),
    ("B13", 1, 3, ("B12", "B32", "B22")),
    ("B23", 2, 3, ("B22", "B32", "B12")),
    ("B33", 3, 3, ("B32", "B02", "B12")),
    ("B34", 3, 4, ("B33", "B13", "B23")),
    ("L5b", 0, 4, ("B03", "B13", "B23")),
    ("L5b'", 0, 4, ("B03", "B13", "B33")),
    ("B14", 1, 4, ("B13", "B03", "B23")),
    ("B24", 2, 4, ("B23", "B03", "B13")),
    ("B05", 0, 5, ("L5b", "B14", "B24")),
    ("B15", 1, 5, ("B14", "B24", "B34")),
    ("B25", 2, 5, ("B24", "L5b'", "B34")),
    ("B35", 3, 5, ("B34", "L5b'", "B14")),
    ("B06", 0, 6, ("B05", "B15", "B25")),
    ("B16", 1, 6, ("B15", "B25", "B35")),
    ("B26", 2, 6, ("B25", "B15", "B35")),
    ("B36", 3, 6, ("B35", "B15", "B25")),
    ("B07", 0, 7, ("B06", "B16", "B26")),
    ("B17", 1, 7, ("B16", "B26", "B36")),
    ("B27", 2, 7, ("B26", "B16", "B36")),
    ("B37", 3, 7, ("B36", "B16", "B26")),
    ("B08", 0, 8, ("B07", "B17", "B27", "B37")),
    ("B18", 1, 8, ("B17", "B27", "B37")),
    ("B28", 2, 8, ("B27", "B17", "B37")),
    ("B38", 3, 8, ("B37", "B17", "B27")),
    ("B09", 0, 9, ("B08", "B18", "B28")),
    ("B19", 1, 9, ("B18", "B28", "B38")),
    ("B29", 2, 9, ("B28", "B18", "B38")),
]

ALIASES = {
    "L1a": "B30", "L1b": "B00", "L2a": "B01", "L2b": "B11", "L3a": "B12", "L3b": "B32",
    "L4a": "B03", "L4b": "B33", "L5a": "B34", "L6a": "B05", "L6b": "B15",
}

EXPECTED_LEADERS = ["L1a", "L1b", "L2a", "L2b", "L3a", "L3b", "L4a", "L4b", "L5a", "L5b'", "L6b"]

EXPECTED_SEQUENCE = [
    "L1a", "L1b", "B10", "B20", "L2a", "L2b", "B21", "L3a", "B31", "L3b", "B02", "B22",
    "L4a", "L4b", "B13", "B23", "L5a", "L5b'", "B14", "B24", "L6b",
]

CONFIG = WaveConfig(wave_length=5, leaders_per_round=2)


def table_elect(value: CoinValue, offset: int) -> int:
    propose = value.round - (CONFIG.wave_length - 1)
    return LEADER_TABLE.get(propose, (value.value, value.value + 1))[offset] % 4


@dataclass
class Walkthrough:
    committee: Committee
    blocks: dict[str, Block]
    store: DagStore

    def block(self, name: str) -> Block:
        return self.blocks[ALIASES.get(name, name)]

    def name_of(self, block: Block) -> str:
        for alias, target in ALIASES.items():
            if self.blocks[target].digest == block.digest:
                return alias
        for name, b in self.blocks.items():
            if b.digest == block.digest:
                return name
        raise KeyError(block)

    def committer(self, cache: HistoryCache | None = None) -> Committer:
        return Committer(self.store, CONFIG, cache=cache, elect=table_elect, start_round=0)


def build_blocks(committee: Committee, keys: list[crypto.ValidatorKeys]) -> dict[str, Block]:
    blocks: dict[str, Block] = {}
    for name, author, round_, parent_names in LAYOUT:
        parents = [blocks[p].ref for p in parent_names]
        share = make_share(author, round_, keys[author].coin_secret)
        unsigned = Block(author, round_, canonical_parent_order(author, parents),
                         (f"tx-{name}".encode(),), share)
        blocks[name] = unsigned.signed(crypto.sign(keys[author].signing_key, unsigned.digest))
    return blocks


def build() -> Walkthrough:
    committee, keys = crypto.generate_committee(4, seed=0)
    blocks = build_blocks(committee, keys)
    store = DagStore(committee)
    for name, _, round_, _ in LAYOUT:
        b = blocks[name]
        if round_ == 0:
            store.add_genesis([b])
        else:
            store.insert(b)
    return Walkthrough(committee, blocks, store)


EXPECTED_ANCHORS = {"L1a": "L6b"}

# label -> (status, rule) for the slots whose outcome is the point of the fixture
EXPECTED_CLASSIFICATIONS = {
    "L1a": ("commit", "indirect"),
    "L5b": ("skip", "direct"),
    "L5b'": ("commit", "direct"),
    "L6a": ("skip", "direct"),
    "L6b": ("commit", "direct"),
}


@dataclass
class SlotLine:
    label: str
    round: int
    offset: int
    status: str
    rule: str
    anchor: str = ""

    def __str__(self) -> str:
        via = f" via anchor {self.anchor}" if self.anchor else ""
        return (f"{self.label:5} round {self.round} offset {self.offset}: "
                f"{self.status} ({self.rule}){via}")


@dataclass
class WalkthroughResult:
    lines: list[SlotLine]
    leaders: list[str]
    sequence: list[str]
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def run_walkthrough() -> WalkthroughResult:
    """Decide every slot of the fixture and compare with the expected
    outcome. Each stored block of a slot gets a line, so an equivocating
    leader shows both its committed and its skipped twin."""
    w = build()
    committer = w.committer()
    sequence = [w.name_of(b) for b in committer.extend_commit_sequence()]
    leaders = [w.name_of(b) for b in committer.committed_leaders]
    lines = []
    for d in committer.emitted:
        rule = d.rule.value if d.rule is not None else "-"
        anchor = w.name_of(d.anchor) if d.anchor is not None else ""
        blocks = sorted(w.store.slot_blocks(d.slot.round, d.slot.elected), key=w.name_of)
        if not blocks:
            lines.append(SlotLine(f"({d.slot.round},{d.slot.offset})", d.slot.round,
                                  d.slot.offset, "skip", rule, anchor))
        for b in blocks:
            chosen = d.status.is_commit and d.status.block.digest == b.digest
            lines.append(SlotLine(w.name_of(b), d.slot.round, d.slot.offset,
                                  "commit" if chosen else "skip", rule, anchor))
    mismatches = []
    if leaders != EXPECTED_LEADERS:
        mismatches.append(f"leaders {leaders} != expected {EXPECTED_LEADERS}")
    if sequence != EXPECTED_SEQUENCE:
        mismatches.append(f"sequence {sequence} != expected {EXPECTED_SEQUENCE}")
    by_label = {line.label: (line.status, line.rule) for line in lines}
    for label, want in EXPECTED_CLASSIFICATIONS.items():
        if by_label.get(label) != want:
            mismatches.append(f"{label}: got {by_label.get(label)}, expected {want}")
    anchors = {line.label: line.anchor for line in lines}
    for label, want in EXPECTED_ANCHORS.items():
        if anchors.get(label) != want:
            mismatches.append(f"{label}: anchor {anchors.get(label)!r}, expected {want}")
    if committer.extend_commit_sequence():
        mismatches.append("a second commit pass produced more blocks")
    return WalkthroughResult(lines, leaders, sequence, mismatches)
