"""Full-mesh op broadcast with idempotent apply.

Each replica keeps a per-peer outbox that is retried until the peer
acknowledges.  Receivers drop op ids they have already applied; the apply
callback resolves conflicts by last-writer-wins on (key, version).
"""

from __future__ import annotations

import asyncio
import logging
import uuid
from collections import deque
from collections.abc import Awaitable, Callable, Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any

from .errors import LiotsError, MalformedRequest
from .service import Transport

log = logging.getLogger(__name__)

OP_KINDS = ("registration", "identity", "token", "policy")


@dataclass(frozen=True)
class ReplicationOp:
    kind: str
    payload: Any
    origin_domain: str
    version: int
    op_id: str = field(default_factory=lambda: str(uuid.uuid4()))

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise MalformedRequest(f"unknown replication op kind {self.kind!r}")

    def to_wire(self) -> dict:
        return {"opId": self.op_id, "kind": self.kind, "payload": self.payload,
                "originDomain": self.origin_domain, "version": self.version}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> ReplicationOp:
        try:
            return cls(data["kind"], data["payload"], data["originDomain"], int(data["version"]), data["opId"])
        except (KeyError, TypeError, ValueError):
            raise MalformedRequest("malformed replication op") from None


class Replicator:
    def __init__(self, transport: Transport, origin: str,
                 apply: Callable[[ReplicationOp], Awaitable[None] | None],
                 peers: Iterable[str] = (), retry_delay: float = 0.05, max_delay: float = 2.0):
        self.transport = transport
        self.origin = origin
        self.apply = apply
        self.retry_delay = retry_delay
        self.max_delay = max_delay
        self.seen: set[str] = set()
        self.applied = 0
        self._outboxes: dict[str, deque[ReplicationOp]] = {}
        self._senders: dict[str, asyncio.Task] = {}
        self.peers: list[str] = []
        for peer in peers:
            self.add_peer(peer)

    def add_peer(self, peer: str) -> None:
        peer = peer.rstrip("/")
        if peer not in self.peers:
            self.peers.append(peer)
            self._outboxes[peer] = deque()

    async def receive(self, op: ReplicationOp) -> bool:
        """Apply ``op`` unless already seen; returns whether it was applied."""
        if op.op_id in self.seen:
            return False
        self.seen.add(op.op_id)
        try:
            result = self.apply(op)
            if asyncio.iscoroutine(result):
                await result
        except Exception:
            self.seen.discard(op.op_id)
            raise
        self.applied += 1
        return True

    async def originate(self, kind: str, payload: Any, version: int) -> ReplicationOp:
        """Apply locally and queue for every peer."""
        op = ReplicationOp(kind, payload, self.origin, version)
        await self.receive(op)
        self.broadcast(op)
        return op

    def broadcast(self, op: ReplicationOp) -> None:
        for peer in self.peers:
            self._outboxes[peer].append(op)
            self._kick(peer)

    def _kick(self, peer: str) -> None:
        task = self._senders.get(peer)
        if task is None or task.done():
            self._senders[peer] = asyncio.ensure_future(self._sender(peer))

    async def _sender(self, peer: str) -> None:
        box = self._outboxes[peer]
        delay = self.retry_delay
        while box:
            batch = list(box)
            try:
                reply = await self.transport.post(
                    peer + "/v1/replicate", {"ops": [op.to_wire() for op in batch]}, timeout=5.0
                )
                ok = reply.ok
            except (LiotsError, ValueError) as exc:  # peer down: keep queued
                log.debug("replication to %s failed: %s", peer, exc)
                ok = False
            if ok:
                for _ in batch:
                    box.popleft()
                delay = self.retry_delay
            else:
                await asyncio.sleep(delay)
                delay = min(delay * 2, self.max_delay)

    def resume(self) -> None:
        """Restart senders for every peer with queued ops."""
        for peer, box in self._outboxes.items():
            if box:
                self._kick(peer)

    def pending(self) -> int:
        return sum(len(box) for box in self._outboxes.values())

    async def drain(self, timeout: float = 10.0) -> None:
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while self.pending():
            if loop.time() > deadline:
                raise TimeoutError(f"{self.pending()} replication ops still queued")
            self.resume()
            await asyncio.sleep(0.01)

    async def stop(self) -> None:
        for task in self._senders.values():
            task.cancel()
        await asyncio.gather(*self._senders.values(), return_exceptions=True)
        self._senders.clear()

    async def handle(self, body) -> dict:
        ops = body.get("ops") if isinstance(body, dict) else None
        if not isinstance(ops, list):
            raise MalformedRequest("'ops' list required")
        applied = 0
        for raw in ops:
            applied += await self.receive(ReplicationOp.from_wire(raw))
        return {"applied": applied}
