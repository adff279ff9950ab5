"""Kernel event traces: the schema the engine emits and the simulator
consumes, JSONL persistence, and structural validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import MalformedTrace, ParseError

TRANSFER_KINDS = ("fetch_q", "fetch_kv", "update_kv", "send_o")
EVENT_KINDS = TRANSFER_KINDS + ("compute",)

# block coordinate arity per kind: [i] for q-side events, [i, j] otherwise
_BLOCK_ARITY = {"fetch_q": 1, "send_o": 1, "fetch_kv": 2, "update_kv": 2, "compute": 2}


@dataclass
class Event:
    kind: str
    seq: int
    block: tuple
    bytes: int = 0
    flops: int = 0
    issue_order: int = 0
    # compute-only tile descriptors, used for MXU and bank-conflict modeling
    rows: int | None = None
    cols: int | None = None
    d_k: int | None = None
    bank_stride: int | None = None

    def __post_init__(self):
        self.block = tuple(int(b) for b in self.block)

    @property
    def key(self):
        return (self.kind, self.seq, self.block)

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "seq": self.seq,
            "block": list(self.block),
            "bytes": self.bytes,
            "flops": self.flops,
            "issue_order": self.issue_order,
        }
        if self.kind == "compute":
            out.update(rows=self.rows, cols=self.cols, d_k=self.d_k, bank_stride=self.bank_stride)
        return out

    @staticmethod
    def from_json(obj: dict) -> "Event":
        try:
            return Event(
                kind=obj["kind"],
                seq=int(obj["seq"]),
                block=tuple(obj["block"]),
                bytes=int(obj["bytes"]),
                flops=int(obj["flops"]),
                issue_order=int(obj["issue_order"]),
                rows=obj.get("rows"),
                cols=obj.get("cols"),
                d_k=obj.get("d_k"),
                bank_stride=obj.get("bank_stride"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad trace event {obj!r}: {exc}") from exc


@dataclass
class EventTrace:
    events: list = field(default_factory=list)

    def append(self, event: Event):
        event.issue_order = len(self.events)
        self.events.append(event)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, idx):
        return self.events[idx]

    def counts(self) -> dict:
        out = {k: 0 for k in EVENT_KINDS}
        for e in self.events:
            out[e.kind] += 1
        return out

    def bytes_moved(self, kinds=TRANSFER_KINDS) -> int:
        return sum(e.bytes for e in self.events if e.kind in kinds)

    def total_flops(self) -> int:
        return sum(e.flops for e in self.events if e.kind == "compute")

    def validate(self):
        """Structural well-formedness; raises MalformedTrace on violation.

        Checks issue-order contiguity, block arity, payload placement (bytes
        on transfers, flops on computes), key uniqueness, and the dependency
        discipline: a block is computed only after its query and KV fetches,
        an update only after the fetch of the block it overlaps, and an
        output send only after at least one compute for that query block.
        """
        seen = set()
        fetched_q = set()
        fetched_kv = set()
        computed_q = set()
        for pos, e in enumerate(self.events):
            if e.kind not in EVENT_KINDS:
                raise MalformedTrace(f"event {pos}: unknown kind {e.kind!r}")
            if e.issue_order != pos:
                raise MalformedTrace(f"event {pos}: issue_order {e.issue_order} != position")
            if len(e.block) != _BLOCK_ARITY[e.kind]:
                raise MalformedTrace(f"event {pos}: {e.kind} block {e.block} has wrong arity")
            if e.key in seen:
                raise MalformedTrace(f"event {pos}: duplicate {e.key}")
            seen.add(e.key)
            if e.kind == "compute":
                if e.bytes != 0 or e.flops < 0:
                    raise MalformedTrace(f"event {pos}: compute payload invalid")
                if None in (e.rows, e.cols, e.d_k, e.bank_stride):
                    raise MalformedTrace(f"event {pos}: compute missing tile descriptors")
                if (e.seq, e.block[0]) not in fetched_q:
                    raise MalformedTrace(f"event {pos}: compute before fetch_q {e.block}")
                if (e.seq, e.block) not in fetched_kv:
                    raise MalformedTrace(f"event {pos}: compute before fetch_kv {e.block}")
                computed_q.add((e.seq, e.block[0]))
            else:
                if e.flops != 0 or e.bytes < 0:
                    raise MalformedTrace(f"event {pos}: transfer payload invalid")
                if e.kind == "fetch_q":
                    fetched_q.add((e.seq, e.block[0]))
                elif e.kind == "fetch_kv":
                    fetched_kv.add((e.seq, e.block))
                elif e.kind == "update_kv":
                    if (e.seq, e.block) not in fetched_kv:
                        raise MalformedTrace(f"event {pos}: update before fetch_kv {e.block}")
                elif e.kind == "send_o":
                    if (e.seq, e.block[0]) not in computed_q:
                        raise MalformedTrace(f"event {pos}: send_o before any compute {e.block}")

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e.to_json()) + "\n")

    @staticmethod
    def from_jsonl(path) -> "EventTrace":
        trace = EventTrace()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"bad trace line: {exc}") from exc
                trace.events.append(Event.from_json(obj))
        return trace
