"""Context manager: stores the latest context per entity, answers queries and
pushes notifications to context subscribers."""

from __future__ import annotations

import asyncio
import json
import logging
import uuid
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import InvalidCallback, MalformedElement, MalformedRequest, UnknownSubscription
from .model import (
    Attribute,
    ContextElement,
    EntityRef,
    Notification,
    QueryRequest,
    QueryResponse,
    Registration,
    Scope,
    Subscription,
    filter_attributes,
    is_valid_url,
    match_entity,
    now_ms,
)
from .service import Service, deliver

log = logging.getLogger(__name__)

_REG_NAMESPACE = uuid.UUID("6f1c7d2e-35a8-4b8e-9a53-2f0d3c6b1e90")


@dataclass
class _SubEntry:
    subscription: Subscription
    created: float

    def expired(self, now: float) -> bool:
        return now - self.created > self.subscription.ttl


class ContextStore:
    """In-memory element and subscription tables (no I/O)."""

    def __init__(self):
        self.elements: dict[tuple[str, str], dict[str, Attribute]] = {}
        self.subscriptions: dict[str, _SubEntry] = {}

    def upsert(self, batch: Sequence[ContextElement], stamp: int) -> list[ContextElement]:
        """Apply a batch attribute-wise; returns the updated parts only."""
        updated = []
        for element in batch:
            attrs = self.elements.setdefault(element.key, {})
            fresh = []
            for attr in element.attributes:
                if attr.timestamp is None:
                    attr = replace(attr, timestamp=stamp)
                attrs[attr.name] = attr
                fresh.append(attr)
            updated.append(ContextElement(element.entity, tuple(fresh)))
        return updated

    def element(self, key: tuple[str, str]) -> ContextElement:
        attrs = self.elements[key]
        return ContextElement(EntityRef(*key), tuple(attrs[n] for n in sorted(attrs)))

    def query(self, q: QueryRequest) -> list[ContextElement]:
        keys: set[tuple[str, str]] = set()
        for ref in q.entities:
            if not ref.is_pattern and ref.type != "*":
                if (ref.id, ref.type) in self.elements:
                    keys.add((ref.id, ref.type))
                continue
            for key in self.elements:
                if key not in keys and match_entity(ref, EntityRef(*key)):
                    keys.add(key)
        wanted = sorted(set(q.attribute_names))
        out = []
        for key in sorted(keys, key=lambda k: (k[1], k[0])):
            if wanted:
                attrs = self.elements[key]
                out.append(ContextElement(EntityRef(*key), tuple(attrs[n] for n in wanted if n in attrs)))
            else:
                out.append(self.element(key))
        return out

    def types(self) -> set[str]:
        return {t for _, t in self.elements}


class ContextManager(Service):
    """Per-provider CM.

    ``announce_to`` lists discovery or registrar endpoints that receive this
    CM's availability: ``announce="type"`` sends one registration listing the
    stored entity types, ``announce="entity"`` sends concrete entity ids
    (grouped by type, and by location when an entity has a geo-point
    ``location`` attribute).  ``service_delay``/``workers`` model a CM with
    finite processing capacity.
    """

    kind = "context-manager"

    def __init__(self, *, snapshot_path: str | Path | None = None,
                 announce_to: Iterable[str] = (), announce: str = "type",
                 registration_ttl: float = 300, service_delay: float = 0.0,
                 workers: int | None = None, exposed_endpoint: str | None = None,
                 **kwargs):
        super().__init__(**kwargs)
        if announce not in ("type", "entity"):
            raise ValueError("announce must be 'type' or 'entity'")
        self.store = ContextStore()
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        self.announce_to = list(announce_to)
        self.announce = announce
        self.registration_ttl = registration_ttl
        self.service_delay = service_delay
        # per-worker time at which it next becomes free (virtual FIFO queue)
        self._free_at = [0.0] * workers if workers else None
        self.exposed_endpoint = exposed_endpoint
        self.dropped_notifications = 0
        self.delivered_notifications = 0
        self._announced: dict[str, Registration] = {}
        self._announce_pending = False
        if self.snapshot_path and self.snapshot_path.exists():
            self._replay_snapshot()

    def routes(self):
        return {
            "/v1/updateContext": self._h_update,
            "/v1/queryContext": self._h_query,
            "/v1/subscribeContext": self._h_subscribe,
            "/v1/unsubscribeContext": self._h_unsubscribe,
        }

    async def on_start(self) -> None:
        if self.announce_to:
            self.schedule_announce()
            self.every(lambda: max(self.registration_ttl / 2, 0.05), self.announce_availability)

    @property
    def public_endpoint(self) -> str:
        return self.exposed_endpoint or self.endpoint

    # -- operations --

    async def publish(self, elements: Sequence[ContextElement]) -> None:
        for element in elements:
            if element.entity.is_pattern or element.entity.type == "*":
                raise MalformedElement("published elements need a concrete id and type")
        before = self._availability_key()
        stamp = now_ms(self.clock)
        # applied without awaiting: a concurrent query sees all or none of the batch
        updated = self.store.upsert(elements, stamp)
        self._append_snapshot(updated)
        self._dispatch(updated)
        if self.announce_to and self._availability_key() != before:
            self.schedule_announce()

    def query(self, q: QueryRequest) -> QueryResponse:
        return QueryResponse(tuple(self.store.query(q)))

    def subscribe(self, sub: Subscription) -> str:
        if sub.kind != "context":
            raise MalformedRequest("context managers only accept context subscriptions")
        if not is_valid_url(sub.callback_endpoint):
            raise InvalidCallback(f"invalid callback {sub.callback_endpoint!r}")
        self._purge_expired()
        self.store.subscriptions[sub.subscription_id] = _SubEntry(sub, self.clock())
        current = [
            e for e in (filter_attributes(x, sub.attribute_names)
                        for x in self.store.query(sub.as_query()))
            if e.attributes
        ]
        if current:
            self._notify(sub, current)
        return sub.subscription_id

    def unsubscribe(self, subscription_id: str) -> None:
        if self.store.subscriptions.pop(subscription_id, None) is None:
            raise UnknownSubscription(f"unknown subscription {subscription_id}")

    # -- notifications --

    def _purge_expired(self) -> None:
        now = self.clock()
        for sid in [s for s, e in self.store.subscriptions.items() if e.expired(now)]:
            del self.store.subscriptions[sid]

    def _dispatch(self, updated: list[ContextElement]) -> None:
        self._purge_expired()
        for entry in list(self.store.subscriptions.values()):
            sub = entry.subscription
            payload = []
            for element in updated:
                if sub.matches(element):
                    element = filter_attributes(element, sub.attribute_names)
                    if element.attributes:
                        payload.append(element)
            if payload:
                self._notify(sub, payload)

    def _notify(self, sub: Subscription, elements: list[ContextElement]) -> None:
        note = Notification(sub.subscription_id, tuple(elements))
        self.spawn(self._deliver(sub.callback_endpoint, note))

    async def _deliver(self, url: str, note: Notification) -> None:
        if await deliver(self.transport, url, note, token_source=self.auth):
            self.delivered_notifications += 1
        else:
            self.dropped_notifications += 1
            log.info("%s dropped notification for %s", self.name, note.subscription_id)

    # -- availability announcements --

    def _availability_key(self):
        if self.announce == "type":
            return frozenset(self.store.types())
        return frozenset(self.store.elements)

    def availability(self) -> list[Registration]:
        """Registrations describing what this CM currently holds."""
        endpoint = self.public_endpoint
        if self.announce == "type":
            types = sorted(self.store.types())
            if not types:
                return []
            groups = {"types": [EntityRef("*", t, True) for t in types]}
            scopes = {"types": Scope()}
        else:
            groups: dict[str, list[EntityRef]] = {}
            scopes: dict[str, Scope] = {}
            for key in sorted(self.store.elements, key=lambda k: (k[1], k[0])):
                location = self.store.elements[key].get("location")
                if location is not None and location.value_type == "geo-point":
                    scope = Scope.point(*location.value)
                    group = f"{key[1]}@{scope.value[0]!r},{scope.value[1]!r}"
                else:
                    scope = Scope()
                    group = key[1]
                groups.setdefault(group, []).append(EntityRef(*key))
                scopes[group] = scope
        regs = []
        for group, refs in groups.items():
            reg_id = str(uuid.uuid5(_REG_NAMESPACE, f"{endpoint}|{group}"))
            regs.append(Registration(endpoint, tuple(refs), (), scopes[group],
                                     self.registration_ttl, reg_id))
        return regs

    def schedule_announce(self) -> None:
        if not self._announce_pending:
            self._announce_pending = True
            self.spawn(self.announce_availability())

    async def announce_availability(self) -> None:
        """Send current registrations (version bumped on content change) and
        refresh unchanged ones; vanished groups are tombstoned."""
        self._announce_pending = False
        current = {r.registration_id: r for r in self.availability()}
        outgoing = []
        for reg_id, reg in current.items():
            prev = self._announced.get(reg_id)
            version = 1 if prev is None else prev.version + (prev.content() != reg.content())
            outgoing.append(replace(reg, version=version))
        for reg_id, prev in self._announced.items():
            if reg_id not in current and not prev.is_tombstone:
                outgoing.append(replace(prev, ttl=0, version=prev.version + 1))
        self._announced.update({r.registration_id: r for r in outgoing})
        for reg in outgoing:
            for target in self.announce_to:
                await deliver(self.transport, target.rstrip("/") + "/v1/registerContext", reg,
                              token_source=self.auth)

    # -- persistence --

    def _append_snapshot(self, updated: list[ContextElement]) -> None:
        if self.snapshot_path is None:
            return
        with self.snapshot_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps([e.to_wire() for e in updated], separators=(",", ":")) + "\n")

    def _replay_snapshot(self) -> None:
        for line in self.snapshot_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                batch = [ContextElement.from_wire(e) for e in json.loads(line)]
                self.store.upsert(batch, now_ms(self.clock))

    # -- HTTP handlers --

    async def _throttle(self):
        """Hold the request for ``service_delay``.  With ``workers`` set,
        requests queue FIFO for one of that many servers; completion times
        are computed in loop time so scheduling jitter does not accumulate."""
        if not self.service_delay:
            return
        now = asyncio.get_running_loop().time()
        if self._free_at is None:
            await asyncio.sleep(self.service_delay)
            return
        slot = min(range(len(self._free_at)), key=self._free_at.__getitem__)
        done = max(now, self._free_at[slot]) + self.service_delay
        self._free_at[slot] = done
        await asyncio.sleep(done - now)

    async def _h_update(self, body, request):
        raw = body.get("elements") if isinstance(body, dict) else None
        if not isinstance(raw, list):
            raise MalformedElement("updateContext needs an 'elements' list")
        elements = [ContextElement.from_wire(e) for e in raw]
        await self._throttle()
        await self.publish(elements)
        return {"code": 200}

    async def _h_query(self, body, request):
        q = QueryRequest.from_wire(body)
        await self._throttle()
        return self.query(q).to_wire()

    async def _h_subscribe(self, body, request):
        sub = Subscription.from_wire(body)
        await self._throttle()
        return {"subscriptionId": self.subscribe(sub)}

    async def _h_unsubscribe(self, body, request):
        sid = body.get("subscriptionId") if isinstance(body, dict) else None
        if not isinstance(sid, str):
            raise MalformedRequest("subscriptionId required")
        self.unsubscribe(sid)
        return {"subscriptionId": sid}
