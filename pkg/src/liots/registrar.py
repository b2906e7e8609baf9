"""IoT Registrar: turns raw provider availability into coarsened
registrations for the federation discovery, driven by privacy directives."""

from __future__ import annotations

import asyncio
import json
import logging
import uuid
from collections import OrderedDict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from .errors import LiotsError, MalformedRequest, UnknownSubscription
from .model import (
    AvailabilityNotification,
    EntityRef,
    Registration,
    Scope,
    Subscription,
    glob_match,
    normalize_endpoint,
    snap_to_grid,
)
from .service import Service, resolve_token

log = logging.getLogger(__name__)

KEY_FIELDS = ("entityType", "entityId", "gridCell", "namedRegion")
_SYNTH_NAMESPACE = uuid.UUID("0b5e4a52-9c6e-4d0f-a2d4-5b8f3e1c7a11")


@dataclass(frozen=True)
class RegionEntry:
    name: str
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    def contains(self, lat: float, lon: float) -> bool:
        return self.min_lat <= lat <= self.max_lat and self.min_lon <= lon <= self.max_lon

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> RegionEntry:
        try:
            return cls(data["name"], data["minLat"], data["maxLat"], data["minLon"], data["maxLon"])
        except (KeyError, TypeError):
            raise MalformedRequest("region entry needs name, minLat, maxLat, minLon, maxLon") from None


def lookup_region(table: Sequence[RegionEntry], lat: float, lon: float) -> str | None:
    for entry in table:
        if entry.contains(lat, lon):
            return entry.name
    return None


@dataclass(frozen=True)
class PrivacyDirective:
    """``granularity`` is one of exact, grid, region, suppress; ``expose`` is
    one of all, listed, none (``exposed_names`` holds the list)."""

    match_types: tuple[str, ...]
    key_fields: tuple[str, ...] = ("entityType",)
    granularity: str = "suppress"
    cell_size: float | None = None
    expose: str = "all"
    exposed_names: tuple[str, ...] = ()
    expose_entity_ids: bool = False

    def __post_init__(self):
        object.__setattr__(self, "match_types", tuple(self.match_types))
        object.__setattr__(self, "key_fields", tuple(self.key_fields))
        object.__setattr__(self, "exposed_names", tuple(self.exposed_names))
        unknown = set(self.key_fields) - set(KEY_FIELDS)
        if unknown:
            raise MalformedRequest(f"unknown key fields {sorted(unknown)}")
        if self.granularity not in ("exact", "grid", "region", "suppress"):
            raise MalformedRequest(f"unknown location granularity {self.granularity!r}")
        if self.granularity == "grid" and not (self.cell_size and self.cell_size > 0):
            raise MalformedRequest("grid granularity needs cellSize > 0")
        if self.expose not in ("all", "listed", "none"):
            raise MalformedRequest(f"unknown exposeAttributes {self.expose!r}")
        if self.expose_entity_ids and "entityId" not in self.key_fields:
            raise MalformedRequest("exposeEntityIds requires entityId among keyFields")

    def covers(self, entity_type: str) -> bool:
        return any(glob_match(p, entity_type) for p in self.match_types)

    def allowed_scope_kinds(self) -> set[str]:
        return {
            "exact": {"exact-point", "none"},
            "grid": {"grid-cell", "none"},
            "region": {"named-region", "none"},
            "suppress": {"none"},
        }[self.granularity]

    def to_wire(self) -> dict:
        granularity: dict[str, Any] = {"kind": self.granularity}
        if self.granularity == "grid":
            granularity["cellSize"] = self.cell_size
        expose: dict[str, Any] = {"kind": self.expose}
        if self.expose == "listed":
            expose["names"] = list(self.exposed_names)
        return {"matchTypes": list(self.match_types), "keyFields": list(self.key_fields),
                "locationGranularity": granularity, "exposeAttributes": expose,
                "exposeEntityIds": self.expose_entity_ids}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> PrivacyDirective:
        if not isinstance(data, Mapping) or "matchTypes" not in data:
            raise MalformedRequest("directive needs matchTypes")
        gran = data.get("locationGranularity", "suppress")
        if isinstance(gran, str):
            gran = {"kind": gran}
        expose = data.get("exposeAttributes", "all")
        if isinstance(expose, str):
            expose = {"kind": expose}
        return cls(
            match_types=tuple(data["matchTypes"]),
            key_fields=tuple(data.get("keyFields", ["entityType"])),
            granularity=gran.get("kind", "suppress"),
            cell_size=gran.get("cellSize"),
            expose=expose.get("kind", "all"),
            exposed_names=tuple(expose.get("names", ())),
            expose_entity_ids=bool(data.get("exposeEntityIds", False)),
        )


def load_directives(path: str | Path) -> list[PrivacyDirective]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise MalformedRequest("directive file must hold a JSON array")
    return [PrivacyDirective.from_wire(d) for d in data]


def load_region_table(path: str | Path) -> list[RegionEntry]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [RegionEntry.from_wire(d) for d in data]


# -- synthesis (pure) ----------------------------------------------------------


def _location(scope: Scope) -> tuple[float, float] | None:
    if scope.kind == "exact-point":
        return scope.value
    if scope.kind == "grid-cell":
        i, j, size = scope.value
        return ((i + 0.5) * size, (j + 0.5) * size)
    return None


@dataclass
class _Group:
    directive: PrivacyDirective
    scope: Scope
    types: set[str]
    refs: set[EntityRef]
    attrs: set[str] | None  # None = all attributes


def synthesize(sources: Iterable[Registration], directives: Sequence[PrivacyDirective], *,
               endpoint: str, region_table: Sequence[RegionEntry] = (),
               ttl: float = 300) -> dict[str, Registration]:
    """Group source registrations by synthesis key and emit one coarsened
    registration per group, keyed by that synthesis key.

    Sources whose entity type no directive covers contribute nothing.  The
    result does not depend on the order of ``sources``.
    """
    groups: dict[str, _Group] = {}
    for reg in sources:
        if reg.is_tombstone:
            continue
        point = _location(reg.scope)
        for ref in reg.entities:
            for index, directive in enumerate(directives):
                if directive.covers(ref.type):
                    break
            else:
                continue
            if directive.expose == "none":
                continue
            key_parts = [f"d{index}"]
            scope = Scope()
            if "entityType" in directive.key_fields:
                key_parts.append(f"type={ref.type}")
            if "entityId" in directive.key_fields:
                key_parts.append(f"id={ref.id}")
            if directive.granularity == "grid" and point is not None:
                cell = snap_to_grid(point[0], point[1], directive.cell_size)
                if "gridCell" in directive.key_fields:
                    key_parts.append(f"cell={cell[0]},{cell[1]}@{directive.cell_size!r}")
                    scope = Scope.cell(cell[0], cell[1], directive.cell_size)
            elif directive.granularity == "region":
                name = lookup_region(region_table, *point) if point is not None else None
                if name is None and reg.scope.kind == "named-region":
                    name = reg.scope.value
                if name is not None and "namedRegion" in directive.key_fields:
                    key_parts.append(f"region={name}")
                    scope = Scope.region(name)
            elif directive.granularity == "exact" and reg.scope.kind != "none":
                key_parts.append(f"at={json.dumps(reg.scope.to_wire(), sort_keys=True)}")
                scope = reg.scope
            key = "|".join(key_parts)
            group = groups.get(key)
            if group is None:
                group = groups[key] = _Group(directive, scope, set(), set(), set())
            group.types.add(ref.type)
            if directive.expose_entity_ids:
                group.refs.add(ref)
            if group.attrs is not None:
                if not reg.attribute_names:
                    group.attrs = None
                else:
                    group.attrs.update(reg.attribute_names)

    out: dict[str, Registration] = {}
    for key in sorted(groups):
        group = groups[key]
        d = group.directive
        if d.expose == "listed":
            names = set(d.exposed_names) if group.attrs is None else group.attrs & set(d.exposed_names)
            if not names:
                continue
            attrs = tuple(sorted(names))
        else:
            attrs = () if group.attrs is None else tuple(sorted(group.attrs))
        if d.expose_entity_ids:
            entities = tuple(sorted(group.refs, key=lambda r: (r.type, r.id)))
        else:
            entities = tuple(EntityRef("*", t, True) for t in sorted(group.types))
        reg_id = str(uuid.uuid5(_SYNTH_NAMESPACE, f"{normalize_endpoint(endpoint)}|{key}"))
        out[key] = Registration(endpoint, entities, attrs, group.scope, ttl, reg_id, 1)
    return out


def privacy_violations(synthesized: Mapping[str, Registration], sources: Iterable[Registration],
                       directives: Sequence[PrivacyDirective], endpoint: str) -> list[str]:
    """Machine check of what a synthesized set may reveal."""
    source_ids = {ref.id for reg in sources for ref in reg.entities if not ref.is_pattern}
    problems = []
    for key, reg in synthesized.items():
        directive = directives[int(key.split("|", 1)[0][1:])]
        if normalize_endpoint(reg.providing_endpoint) != normalize_endpoint(endpoint):
            problems.append(f"{key}: endpoint {reg.providing_endpoint} is not the inbound broker")
        if reg.scope.kind not in directive.allowed_scope_kinds():
            problems.append(f"{key}: scope {reg.scope.kind} not allowed by directive")
        if not directive.expose_entity_ids:
            for ref in reg.entities:
                if not ref.is_pattern or ref.id in source_ids:
                    problems.append(f"{key}: exposes entity id {ref.id}")
        if directive.expose == "listed" and (
            not reg.attribute_names or not set(reg.attribute_names) <= set(directive.exposed_names)
        ):
            problems.append(f"{key}: attributes {reg.attribute_names} exceed the listed set")
    return problems


@dataclass(frozen=True)
class Action:
    verb: str  # register | update | expire
    key: str
    registration: Registration


def reconcile(old: Mapping[str, Registration], new: Mapping[str, Registration],
              floor: Mapping[str, int] | None = None) -> list[Action]:
    """Diff two synthesized sets into fedD actions.

    ``floor`` holds the last version ever sent per key, so a key that comes
    back after being expired continues its version sequence.
    """
    floor = floor or {}
    actions = []
    for key in sorted(set(old) | set(new)):
        before, after = old.get(key), new.get(key)
        base = max(before.version if before else 0, floor.get(key, 0))
        if before is None:
            actions.append(Action("register", key, replace(after, version=base + 1)))
        elif after is None:
            actions.append(Action("expire", key, replace(before, ttl=0, version=base + 1)))
        elif before.content() != after.content() or before.ttl != after.ttl:
            actions.append(Action("update", key, replace(after, version=base + 1)))
    return actions


# -- service -------------------------------------------------------------------


class IoTRegistrar(Service):
    """Keeps the federation discovery in sync with what local providers offer.

    ``fed_auth`` is the token source for calls to the federation discovery;
    ``auth`` (from the base class) covers calls to the intra-domain one.
    """

    kind = "iot-registrar"

    def __init__(self, *, in_fed_b_endpoint: str, fed_discovery: str | None = None,
                 id_discovery: str | None = None, directives: Sequence[PrivacyDirective] = (),
                 directive_path: str | Path | None = None, region_table: Sequence[RegionEntry] = (),
                 ignore_endpoints: Iterable[str] = (), ttl: float = 300, fed_auth=None,
                 exposed_endpoint: str | None = None, **kwargs):
        super().__init__(**kwargs)
        self.in_fed_b_endpoint = in_fed_b_endpoint
        self.fed_discovery = fed_discovery
        self.id_discovery = id_discovery
        self.directive_path = Path(directive_path) if directive_path else None
        self.directives = list(directives)
        if self.directive_path is not None:
            self.directives = load_directives(self.directive_path)
            self._directive_mtime = self.directive_path.stat().st_mtime
        self.region_table = list(region_table)
        self.ignore_endpoints = {normalize_endpoint(e) for e in ignore_endpoints}
        self.ttl = ttl
        self.fed_auth = fed_auth
        self.exposed_endpoint = exposed_endpoint
        self.sources: dict[str, tuple[Registration, float]] = {}
        self.synthesized: dict[str, Registration] = {}
        self.floor: dict[str, int] = {}
        self.last_sent: dict[str, float] = {}
        self.outbox: OrderedDict[str, Registration] = OrderedDict()
        self.sent: list[Registration] = []
        self.availability_sub_id: str | None = None
        self._pipeline = asyncio.Lock()
        self._flush_delay = 0.05

    def routes(self):
        return {
            "/v1/registerContext": self._h_register,
            "/v1/notifyContextAvailability": self._h_availability,
        }

    async def on_start(self) -> None:
        if self.id_discovery:
            self.spawn(self._subscribe_id_discovery())
        self.every(lambda: max(min(self.ttl / 8, 2.0), 0.05), self._tick)

    async def _subscribe_id_discovery(self) -> None:
        sub = Subscription("availability", (EntityRef("*", "*", True),),
                           (self.exposed_endpoint or self.endpoint) + "/v1/notifyContextAvailability",
                           ttl=10 * 365 * 86400)
        url = self.id_discovery.rstrip("/") + "/v1/subscribeContextAvailability"
        self.availability_sub_id = sub.subscription_id
        delay = 0.05
        while True:
            try:
                await self.transport.post_json(url, sub, token=await self.call_token())
                return
            except LiotsError as exc:
                log.info("%s: availability subscription failed (%s), retrying", self.name, exc)
                await asyncio.sleep(delay)
                delay = min(delay * 2, 2.0)

    # -- pipeline --

    async def ingest(self, reg: Registration) -> list[Action]:
        """Take one source registration; returns the fedD actions it caused."""
        async with self._pipeline:
            if normalize_endpoint(reg.providing_endpoint) in self.ignore_endpoints:
                return []
            current = self.sources.get(reg.registration_id)
            if current is not None and reg.version < current[0].version:
                return []
            if reg.is_tombstone:
                self.sources.pop(reg.registration_id, None)
            else:
                self.sources[reg.registration_id] = (reg, self.clock())
            return self._resynthesize()

    def _live_sources(self) -> list[Registration]:
        now = self.clock()
        for rid in [r for r, (reg, at) in self.sources.items() if now - at >= reg.ttl]:
            del self.sources[rid]
        return [reg for reg, _ in self.sources.values()]

    def _resynthesize(self) -> list[Action]:
        new = synthesize(self._live_sources(), self.directives, endpoint=self.in_fed_b_endpoint,
                         region_table=self.region_table, ttl=self.ttl)
        actions = reconcile(self.synthesized, new, self.floor)
        for action in actions:
            reg = action.registration
            self.floor[action.key] = reg.version
            if action.verb == "expire":
                self.synthesized.pop(action.key, None)
                self.last_sent.pop(action.key, None)
            else:
                self.synthesized[action.key] = reg
            self.outbox[action.key] = reg
            self.outbox.move_to_end(action.key)
        if actions:
            self.spawn(self.push())
        return actions

    async def push(self) -> int:
        """Push queued registrations; failures stay queued for the next try."""
        if not self.fed_discovery:
            return 0
        sent = 0
        url = self.fed_discovery.rstrip("/") + "/v1/registerContext"
        for key, reg in list(self.outbox.items()):
            try:
                reply = await self.transport.post(url, reg, token=await resolve_token(self.fed_auth))
            except LiotsError as exc:
                log.info("%s: federation discovery unreachable: %s", self.name, exc)
                self._flush_delay = min(self._flush_delay * 2, 2.0)
                break
            if self.outbox.get(key) is not reg:
                continue  # superseded while in flight
            if reply.ok:
                del self.outbox[key]
                self.sent.append(reg)
                self.last_sent[key] = self.clock()
                sent += 1
                self._flush_delay = 0.05
            elif reply.status == 409:
                # the replica already has a newer version (e.g. after a restart)
                bumped = replace(reg, version=reg.version + 1)
                self.outbox[key] = bumped
                self.floor[key] = bumped.version
                if key in self.synthesized:
                    self.synthesized[key] = bumped
            else:
                log.warning("%s: fedD rejected %s: %s", self.name, key, reply.status)
                break
        return sent

    def pending(self) -> int:
        """Queued registrations that could be pushed now."""
        return len(self.outbox) if self.fed_discovery else 0

    async def refresh(self) -> int:
        """Re-send every live synthesized registration whose last push is at
        least ttl/2 old; returns how many were queued."""
        now = self.clock()
        queued = 0
        for key, reg in self.synthesized.items():
            last = self.last_sent.get(key)
            if key not in self.outbox and last is not None and now - last >= reg.ttl / 2:
                self.outbox[key] = reg
                queued += 1
        if self.outbox:
            await self.push()
        return queued

    async def reload_directives(self, directives: Sequence[PrivacyDirective] | None = None) -> list[Action]:
        async with self._pipeline:
            if directives is None:
                directives = load_directives(self.directive_path)
            self.directives = list(directives)
            return self._resynthesize()

    async def _tick(self) -> None:
        if self.directive_path is not None:
            mtime = self.directive_path.stat().st_mtime
            if mtime != self._directive_mtime:
                self._directive_mtime = mtime
                await self.reload_directives()
        async with self._pipeline:
            before = len(self.sources)
            self._live_sources()
            if len(self.sources) != before:
                self._resynthesize()
        await self.refresh()

    # -- HTTP --

    async def _h_register(self, body, request):
        reg = Registration.from_wire(body)
        await self.ingest(reg)
        return {"registrationId": reg.registration_id, "version": reg.version}

    async def _h_availability(self, body, request):
        note = AvailabilityNotification.from_wire(body)
        if self.availability_sub_id is not None and note.subscription_id != self.availability_sub_id:
            raise UnknownSubscription(f"unknown availability subscription {note.subscription_id}")
        for reg in note.registrations:
            await self.ingest(reg)
        return {"code": 200}
