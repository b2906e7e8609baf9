"""Discovery registry of provider availability.

The same class serves as intra-domain discovery and, with replication peers
configured, as a federation discovery replica.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable
from dataclasses import dataclass
from functools import cached_property

from .errors import InvalidCallback, MalformedRequest, StaleVersion, UnknownSubscription
from .model import (
    AvailabilityNotification,
    QueryRequest,
    Registration,
    Subscription,
    is_valid_url,
    match_registration,
    now_ms,
)
from .replication import ReplicationOp, Replicator
from .service import Service, deliver

log = logging.getLogger(__name__)


@dataclass
class _RegEntry:
    registration: Registration
    registered_at: int  # epoch ms, set by the replica that first accepted it

    def expired(self, now: int) -> bool:
        return now - self.registered_at >= self.registration.ttl * 1000

    @cached_property
    def wire(self) -> dict:
        return self.registration.to_wire()

    def rank(self) -> tuple:
        return (self.registration.version, self.registered_at, json.dumps(self.wire, sort_keys=True))


@dataclass
class _AvailSub:
    subscription: Subscription
    created: float

    def expired(self, now: float) -> bool:
        return now - self.created > self.subscription.ttl


class RegistrationStore:
    """Registrations plus availability subscriptions, without I/O."""

    def __init__(self):
        self.regs: dict[str, _RegEntry] = {}
        self.avail_subs: dict[str, _AvailSub] = {}
        # versions of evicted registrations, so older ones stay rejected
        self.floor: dict[str, int] = {}

    def live(self, now_ms_: int) -> list[Registration]:
        return [e.registration for e in self.regs.values()
                if not e.registration.is_tombstone and not e.expired(now_ms_)]

    def sweep(self, now_ms_: int) -> int:
        dead = [k for k, e in self.regs.items() if e.expired(now_ms_)]
        for k in dead:
            self.floor[k] = max(self.floor.get(k, 0), self.regs.pop(k).registration.version)
        return len(dead)


class Discovery(Service):
    kind = "discovery"

    def __init__(self, *, peers: Iterable[str] = (), domain: str = "", **kwargs):
        super().__init__(**kwargs)
        self.domain = domain
        self.store = RegistrationStore()
        self.replicator = Replicator(self.transport, domain, self._apply_op, peers)
        self.sent_notifications = 0

    def routes(self):
        return {
            "/v1/registerContext": self._h_register,
            "/v1/discoverContextAvailability": self._h_discover,
            "/v1/subscribeContextAvailability": self._h_subscribe,
            "/v1/unsubscribeContext": self._h_unsubscribe,
            "/v1/replicate": self._h_replicate,
        }

    async def on_start(self) -> None:
        self.every(self._sweep_interval, self._sweep)

    async def stop(self) -> None:
        await self.replicator.stop()
        await super().stop()

    def _sweep_interval(self) -> float:
        ttls = [e.registration.ttl for e in self.store.regs.values() if e.registration.ttl > 0]
        return max(min(ttls) / 4, 0.05) if ttls else 1.0

    async def _sweep(self) -> None:
        self.store.sweep(now_ms(self.clock))

    # -- operations --

    async def register(self, reg: Registration) -> Registration:
        """Upsert when the version is newer.  Re-sending the stored version
        with identical content renews its lifetime; anything else older is
        rejected with StaleVersion."""
        current = self.store.regs.get(reg.registration_id)
        if current is not None:
            stored = current.registration
            if reg.version < stored.version or (
                reg.version == stored.version and
                (reg.content() != stored.content() or reg.ttl != stored.ttl)
            ):
                raise StaleVersion(
                    f"registration {reg.registration_id} v{reg.version} <= stored v{stored.version}"
                )
        elif reg.version < self.store.floor.get(reg.registration_id, 0):
            raise StaleVersion(f"registration {reg.registration_id} v{reg.version} was superseded")
        payload = {"registration": reg.to_wire(), "registeredAt": now_ms(self.clock)}
        await self.replicator.originate("registration", payload, reg.version)
        return reg

    def _apply_op(self, op: ReplicationOp) -> None:
        if op.kind != "registration":
            raise MalformedRequest(f"discovery cannot apply {op.kind} ops")
        entry = _RegEntry(Registration.from_wire(op.payload["registration"]), int(op.payload["registeredAt"]))
        current = self.store.regs.get(entry.registration.registration_id)
        if current is not None and entry.rank() <= current.rank():
            return
        if current is None and entry.registration.version < self.store.floor.get(
                entry.registration.registration_id, 0):
            return
        renewal = current is not None and current.registration.version == entry.registration.version
        self.store.regs[entry.registration.registration_id] = entry
        if not renewal and not entry.registration.is_tombstone:
            self._notify_subscribers(entry.registration)

    def _discover_entries(self, q: QueryRequest) -> list[_RegEntry]:
        now = now_ms(self.clock)
        hits = [e for e in self.store.regs.values()
                if not e.registration.is_tombstone and not e.expired(now) and match_registration(q, e.registration)]
        return sorted(hits, key=lambda e: e.registration.registration_id)

    def discover(self, q: QueryRequest) -> list[Registration]:
        return [e.registration for e in self._discover_entries(q)]

    def subscribe_availability(self, sub: Subscription) -> str:
        if sub.kind != "availability":
            raise MalformedRequest("discovery only accepts availability subscriptions")
        if not is_valid_url(sub.callback_endpoint):
            raise InvalidCallback(f"invalid callback {sub.callback_endpoint!r}")
        self._purge_subs()
        self.store.avail_subs[sub.subscription_id] = _AvailSub(sub, self.clock())
        matching = self.discover(sub.as_query())
        if matching:
            self._send(sub, matching)
        return sub.subscription_id

    def unsubscribe(self, subscription_id: str) -> None:
        if self.store.avail_subs.pop(subscription_id, None) is None:
            raise UnknownSubscription(f"unknown subscription {subscription_id}")

    def _purge_subs(self) -> None:
        now = self.clock()
        for sid in [s for s, e in self.store.avail_subs.items() if e.expired(now)]:
            del self.store.avail_subs[sid]

    def _notify_subscribers(self, reg: Registration) -> None:
        self._purge_subs()
        for entry in list(self.store.avail_subs.values()):
            if match_registration(entry.subscription.as_query(), reg):
                self._send(entry.subscription, [reg])

    def _send(self, sub: Subscription, regs: list[Registration]) -> None:
        note = AvailabilityNotification(sub.subscription_id, tuple(regs))
        self.sent_notifications += 1
        self.spawn(deliver(self.transport, sub.callback_endpoint, note, token_source=self.auth))

    # -- HTTP --

    async def _h_register(self, body, request):
        reg = await self.register(Registration.from_wire(body))
        return {"registrationId": reg.registration_id, "version": reg.version}

    async def _h_discover(self, body, request):
        entries = self._discover_entries(QueryRequest.from_wire(body))
        return {"registrations": [e.wire for e in entries]}

    async def _h_subscribe(self, body, request):
        return {"subscriptionId": self.subscribe_availability(Subscription.from_wire(body))}

    async def _h_unsubscribe(self, body, request):
        sid = body.get("subscriptionId") if isinstance(body, dict) else None
        if not isinstance(sid, str):
            raise MalformedRequest("subscriptionId required")
        self.unsubscribe(sid)
        return {"subscriptionId": sid}

    async def _h_replicate(self, body, request):
        return await self.replicator.handle(body)
