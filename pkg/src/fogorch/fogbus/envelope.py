"""Framework message envelope and its length-prefixed JSON wire format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

KINDS = frozenset(
    {"register_actor", "placement_request", "task_command", "task_result", "final_result", "log", "ack"}
)

_HEADER = struct.Struct(">I")


class EnvelopeError(ValueError):
    pass


def split_address(address: str) -> tuple[str, int]:
    """Split 'host:port', validating both halves."""
    host, sep, port = str(address).rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise EnvelopeError(f"not an address:port pair: {address!r}")
    return host, int(port)


def join_address(host: str, port: int) -> str:
    return f"{host}:{port}"


@dataclass(frozen=True)
class Envelope:
    kind: str
    request_id: str
    reply_to: str
    dest: str
    payload: dict = field(default_factory=dict)
    # number of proxy traversals so far; transport metadata, not payload
    hops: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EnvelopeError(f"unknown message kind {self.kind!r}")
        split_address(self.reply_to)
        split_address(self.dest)

    def to_wire(self) -> bytes:
        doc = {
            "kind": self.kind,
            "request_id": self.request_id,
            "reply_to": self.reply_to,
            "dest": self.dest,
            "payload": self.payload,
        }
        if self.hops:
            doc["hops"] = self.hops
        body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _HEADER.pack(len(body)) + body

    @classmethod
    def from_wire(cls, data: bytes) -> Envelope:
        if len(data) < _HEADER.size:
            raise EnvelopeError("truncated frame header")
        (length,) = _HEADER.unpack_from(data)
        body = data[_HEADER.size:]
        if len(body) != length:
            raise EnvelopeError(f"frame length {length} does not match body of {len(body)} bytes")
        doc = json.loads(body.decode("utf-8"))
        return cls(
            kind=doc["kind"],
            request_id=doc["request_id"],
            reply_to=doc["reply_to"],
            dest=doc["dest"],
            payload=doc["payload"],
            hops=doc.get("hops", 0),
        )

    def payload_bytes(self) -> bytes:
        return json.dumps(self.payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
