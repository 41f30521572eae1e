"""Label-switching forwarding plane: shim codec, FTN, ILM and NHLFE tables.

Handoffs are enacted by rewriting the next hop of the NHLFE entries that
belong to a label switched path (LSP). Table updates are copy-on-write: a
packet is forwarded end to end against one snapshot, so it never observes a
half-applied rewire.
"""
from __future__ import annotations

import enum
import ipaddress
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import NamedTuple

DEFAULT_TTL = 64
MAX_STACK_DEPTH = 4
LABEL_LIMIT = 1 << 20

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17


class MplsError(Exception):
    pass


class MalformedStack(MplsError):
    pass


class UnknownLsp(MplsError, KeyError):
    pass


@dataclass(frozen=True)
class ShimHeader:
    label: int
    tc: int = 0
    bottom_of_stack: bool = True
    ttl: int = DEFAULT_TTL

    def encode(self) -> int:
        if not 0 <= self.label < LABEL_LIMIT:
            raise ValueError(f"label {self.label} does not fit in 20 bits")
        if not 0 <= self.tc < 8:
            raise ValueError(f"tc {self.tc} does not fit in 3 bits")
        if not 0 <= self.ttl < 256:
            raise ValueError(f"ttl {self.ttl} does not fit in 8 bits")
        return (self.label << 12) | (self.tc << 9) | (int(bool(self.bottom_of_stack)) << 8) | self.ttl

    @classmethod
    def decode(cls, word: int) -> ShimHeader:
        if not 0 <= word < (1 << 32):
            raise ValueError(f"{word:#x} is not a 32-bit word")
        return cls(word >> 12, (word >> 9) & 0x7, bool((word >> 8) & 0x1), word & 0xFF)

    def to_bytes(self) -> bytes:
        return struct.pack("!I", self.encode())

    @classmethod
    def from_bytes(cls, data: bytes) -> ShimHeader:
        return cls.decode(struct.unpack("!I", data[:4])[0])


def encode(header: ShimHeader) -> int:
    return header.encode()


def decode(word: int) -> ShimHeader:
    return ShimHeader.decode(word)


class FlowKey(NamedTuple):
    src_ip: int
    src_port: int
    dst_ip: int
    dst_port: int
    proto: int


def _ip(value) -> int | None:
    if value is None or value == "*":
        return None
    return int(ipaddress.IPv4Address(value))


def flow(src_ip, src_port: int, dst_ip, dst_port: int, proto: int) -> FlowKey:
    return FlowKey(_ip(src_ip), src_port, _ip(dst_ip), dst_port, proto)


@dataclass(frozen=True)
class Fec:
    """5-tuple classifier; ``None`` fields are wildcards."""

    src_ip: int | None = None
    src_port: int | None = None
    dst_ip: int | None = None
    dst_port: int | None = None
    proto: int | None = None

    def __post_init__(self):
        for name in ("src_ip", "dst_ip"):
            object.__setattr__(self, name, _ip(getattr(self, name)))
        if all(getattr(self, f) is None for f in FlowKey._fields):
            raise ValueError("FEC needs at least one non-wildcard field")

    def matches(self, key: FlowKey) -> bool:
        return all(want is None or want == got
                   for want, got in zip((self.src_ip, self.src_port, self.dst_ip,
                                         self.dst_port, self.proto), key))


class Op(str, enum.Enum):
    PUSH = "PUSH"
    POP = "POP"
    SWAP = "SWAP"


@dataclass(frozen=True)
class NhlfeEntry:
    idx: int
    op: Op
    out_label: int | None = None
    # None means deliver locally
    next_hop: str | None = None
    lsp: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "op", Op(self.op))
        if self.op is Op.POP:
            if self.out_label is not None:
                raise ValueError(f"POP entry {self.idx} must not carry an out_label")
        elif self.out_label is None or not 0 <= self.out_label < LABEL_LIMIT:
            raise ValueError(f"{self.op.value} entry {self.idx} needs a 20-bit out_label")


@dataclass
class Packet:
    flow: FlowKey
    payload: bytes = b""
    stack: tuple[ShimHeader, ...] = ()

    def to_bytes(self) -> bytes:
        return b"".join(h.to_bytes() for h in self.stack) + self.payload

    @classmethod
    def from_bytes(cls, flow_key: FlowKey, data: bytes) -> Packet:
        stack = []
        offset = 0
        while True:
            if len(data) - offset < 4:
                raise MalformedStack("truncated label stack")
            h = ShimHeader.from_bytes(data[offset:offset + 4])
            stack.append(h)
            offset += 4
            if h.bottom_of_stack:
                break
        return cls(flow_key, data[offset:], tuple(stack))


def ftn_classify(table, key: FlowKey) -> int | None:
    """First matching FEC wins; ``None`` means pass through unlabelled."""
    for fec, idx in table:
        if fec.matches(key):
            return idx
    return None


def ilm_lookup(table: dict[int, int], top_label: int) -> int | None:
    """``None`` means the packet is discarded."""
    return table.get(top_label)


def nhlfe_apply(entry: NhlfeEntry, packet: Packet) -> tuple[Packet | None, str | None]:
    """Rewrite the label stack. Returns ``(None, None)`` when the TTL expires."""
    stack = packet.stack
    if entry.op is Op.PUSH:
        if len(stack) >= MAX_STACK_DEPTH:
            raise MalformedStack(f"label stack deeper than {MAX_STACK_DEPTH}")
        top = ShimHeader(entry.out_label, 0, not stack, DEFAULT_TTL)
        stack = (top,) + stack
    else:
        if not stack:
            raise MalformedStack(f"{entry.op.value} on an empty label stack")
        if entry.op is Op.SWAP:
            top = stack[0]
            if top.ttl <= 1:
                return None, None
            stack = (replace(top, label=entry.out_label, ttl=top.ttl - 1),) + stack[1:]
        else:
            stack = stack[1:]
    return Packet(packet.flow, packet.payload, stack), entry.next_hop


@dataclass
class NodeTables:
    ftn: list[tuple[Fec, int]] = field(default_factory=list)
    ilm: dict[int, int] = field(default_factory=dict)
    nhlfe: dict[int, NhlfeEntry] = field(default_factory=dict)


class Verdict(str, enum.Enum):
    DELIVERED = "delivered"
    PASS_THROUGH = "pass_through"
    DISCARDED = "discarded"
    TTL_EXPIRED = "ttl_expired"


@dataclass
class ForwardResult:
    verdict: Verdict
    path: list[str]
    packet: Packet
    version: int


class ForwardingPlane:
    """Per-node MPLS tables with atomic copy-on-write updates."""

    max_hops = 32

    def __init__(self, tables: dict[str, NodeTables] | None = None):
        # (version, tables) is swapped as one reference; never mutated in place
        self._state = (0, dict(tables or {}))
        self._lock = threading.Lock()

    def snapshot(self) -> tuple[int, dict[str, NodeTables]]:
        return self._state

    @property
    def version(self) -> int:
        return self._state[0]

    def tables(self, node: str) -> NodeTables:
        return self._state[1][node]

    def nodes(self) -> list[str]:
        return list(self._state[1])

    def lsp_ids(self) -> set[str]:
        return {e.lsp for t in self._state[1].values() for e in t.nhlfe.values() if e.lsp}

    def forward(self, ingress: str, packet: Packet) -> ForwardResult:
        version, tables = self.snapshot()
        node = ingress
        path = [node]
        for _ in range(self.max_hops):
            t = tables.get(node)
            if t is None:
                return ForwardResult(Verdict.DISCARDED, path, packet, version)
            if packet.stack:
                idx = ilm_lookup(t.ilm, packet.stack[0].label)
            else:
                idx = ftn_classify(t.ftn, packet.flow)
                if idx is None:
                    verdict = Verdict.PASS_THROUGH if node == ingress else Verdict.DELIVERED
                    return ForwardResult(verdict, path, packet, version)
            entry = t.nhlfe.get(idx) if idx is not None else None
            if entry is None:
                return ForwardResult(Verdict.DISCARDED, path, packet, version)
            rewritten, next_hop = nhlfe_apply(entry, packet)
            if rewritten is None:
                return ForwardResult(Verdict.TTL_EXPIRED, path, packet, version)
            packet = rewritten
            if next_hop is None:
                if packet.stack:
                    continue
                return ForwardResult(Verdict.DELIVERED, path, packet, version)
            node = next_hop
            path.append(node)
        return ForwardResult(Verdict.DISCARDED, path, packet, version)

    def rewire_lsp(self, old_next_hop: str, new_next_hop: str, lsp: str) -> int:
        """Point every NHLFE entry of ``lsp`` that exits to ``old_next_hop`` at
        ``new_next_hop``. Returns the number of entries changed."""
        with self._lock:
            if lsp not in self.lsp_ids():
                raise UnknownLsp(lsp)
            version, tables = self._state
            changed = 0
            new_tables = {}
            for node, t in tables.items():
                entries = t.nhlfe
                hits = [i for i, e in entries.items()
                        if e.lsp == lsp and e.next_hop == old_next_hop]
                if hits and old_next_hop != new_next_hop:
                    entries = dict(entries)
                    for i in hits:
                        entries[i] = replace(entries[i], next_hop=new_next_hop)
                    changed += len(hits)
                    t = NodeTables(t.ftn, t.ilm, entries)
                new_tables[node] = t
            if changed:
                self._state = (version + 1, new_tables)
            return changed


def rewire_lsp(plane: ForwardingPlane, old_next_hop: str, new_next_hop: str, lsp: str) -> ForwardingPlane:
    plane.rewire_lsp(old_next_hop, new_next_hop, lsp)
    return plane
