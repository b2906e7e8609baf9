"""Context data types, matching rules and the JSON wire encoding.

Every value type here is a frozen dataclass with ``to_wire``/``from_wire``
methods producing lowerCamelCase JSON objects.  List-valued fields are kept
as tuples so instances can be shared between concurrent handlers.
"""

from __future__ import annotations

import json
import math
import re
import uuid
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from decimal import ROUND_FLOOR, Decimal
from functools import lru_cache
from typing import Any
from urllib.parse import urlsplit

from .errors import AggregationTypeError, MalformedElement, MalformedRequest

VALUE_TYPES = ("number", "text", "geo-point", "structured")
SCOPE_KINDS = ("exact-point", "grid-cell", "named-region", "none")
SUBSCRIPTION_KINDS = ("context", "availability")
AGGREGATE_MODES = ("set", "average")


# -- helpers ---------------------------------------------------------------


@lru_cache(maxsize=4096)
def _glob_regex(pattern: str) -> re.Pattern[str]:
    return re.compile(".*".join(re.escape(part) for part in pattern.split("*")) + r"\Z", re.DOTALL)


def glob_match(pattern: str, text: str) -> bool:
    """Match ``text`` against a glob where ``*`` is the only wildcard."""
    if pattern == "*":
        return True
    if "*" not in pattern:
        return pattern == text
    return _glob_regex(pattern).match(text) is not None


def is_valid_url(value: object) -> bool:
    if not isinstance(value, str) or not value:
        return False
    try:
        parts = urlsplit(value)
        parts.port  # noqa: B018 - raises on a malformed port
    except ValueError:
        return False
    return parts.scheme in ("http", "https") and bool(parts.hostname)


def normalize_endpoint(url: str) -> str:
    """Lowercase scheme and host, drop a trailing slash."""
    parts = urlsplit(url)
    netloc = (parts.hostname or "").lower()
    if parts.port is not None:
        netloc = f"{netloc}:{parts.port}"
    path = parts.path.rstrip("/")
    return f"{parts.scheme.lower()}://{netloc}{path}"


def now_ms(clock) -> int:
    return int(clock() * 1000)


def _is_mapping(value: object) -> bool:
    return type(value) is dict or isinstance(value, Mapping)


def _require(data: Mapping[str, Any], key: str, kind: type | tuple[type, ...], error=MalformedRequest):
    if not _is_mapping(data) or key not in data:
        raise error(f"missing field '{key}'")
    value = data[key]
    if kind is Mapping:
        if not _is_mapping(value):
            raise error(f"field '{key}' has wrong type")
        return value
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise error(f"field '{key}' has wrong type")
    return value


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _str_list(data: Mapping[str, Any], key: str, default=()) -> tuple[str, ...]:
    raw = data.get(key, list(default))
    if not isinstance(raw, list) or not all(isinstance(x, str) for x in raw):
        raise MalformedRequest(f"field '{key}' must be a list of strings")
    return tuple(raw)


# -- entities and attributes ----------------------------------------------


@dataclass(frozen=True)
class EntityRef:
    id: str
    type: str
    is_pattern: bool = False

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise MalformedRequest("entity id must be a non-empty string")
        if not isinstance(self.type, str) or not self.type:
            raise MalformedRequest("entity type must be a non-empty string")

    def to_wire(self) -> dict:
        return {"id": self.id, "type": self.type, "isPattern": self.is_pattern}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> EntityRef:
        if type(data) is dict:
            i, t, p = data.get("id"), data.get("type"), data.get("isPattern", False)
            if type(i) is str and type(t) is str and type(p) is bool:
                return cls(i, t, p)
        is_pattern = data.get("isPattern", False) if _is_mapping(data) else False
        if not isinstance(is_pattern, bool):
            raise MalformedRequest("isPattern must be a boolean")
        return cls(_require(data, "id", str), _require(data, "type", str), is_pattern)


@dataclass(frozen=True)
class Attribute:
    """One named value.  ``value`` depends on ``value_type``:

    number -> int/float, text -> str, geo-point -> (lat, lon),
    structured -> any JSON value.
    """

    name: str
    value_type: str
    value: Any
    timestamp: int | None = None

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise MalformedElement("attribute name must be a non-empty string")
        if self.value_type not in VALUE_TYPES:
            raise MalformedElement(f"unknown value type {self.value_type!r}")
        if self.value_type == "number" and not _is_number(self.value):
            raise MalformedElement(f"attribute {self.name!r} is not a finite number")
        if self.value_type == "text" and not isinstance(self.value, str):
            raise MalformedElement(f"attribute {self.name!r} is not text")
        if self.value_type == "geo-point":
            lat, lon = _geo_pair(self.value)
            object.__setattr__(self, "value", (lat, lon))
        if self.timestamp is not None and (
            not isinstance(self.timestamp, int) or isinstance(self.timestamp, bool)
        ):
            raise MalformedElement("timestamp must be integer epoch milliseconds")

    @classmethod
    def number(cls, name: str, value: float, timestamp: int | None = None) -> Attribute:
        return cls(name, "number", value, timestamp)

    def to_wire(self) -> dict:
        value = self.value
        if self.value_type == "geo-point":
            value = {"lat": value[0], "lon": value[1]}
        out = {"name": self.name, "valueType": self.value_type, "value": value}
        if self.timestamp is not None:
            out["timestamp"] = self.timestamp
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Attribute:
        if type(data) is dict:
            n, vt, ts = data.get("name"), data.get("valueType"), data.get("timestamp")
            if type(n) is str and vt in ("number", "text", "structured") and "value" in data:
                return cls(n, vt, data["value"], ts)
        if not _is_mapping(data) or "value" not in data:
            raise MalformedElement("attribute requires name, valueType and value")
        value = data["value"]
        value_type = _require(data, "valueType", str, MalformedElement)
        if value_type == "geo-point" and _is_mapping(value):
            value = (value.get("lat"), value.get("lon"))
        return cls(_require(data, "name", str, MalformedElement), value_type, value, data.get("timestamp"))


def _geo_pair(value: Any) -> tuple[float, float]:
    try:
        lat, lon = value
    except (TypeError, ValueError):
        raise MalformedElement("geo-point must be a (lat, lon) pair") from None
    if not (_is_number(lat) and _is_number(lon)):
        raise MalformedElement("geo-point coordinates must be numbers")
    if not (-90 <= lat <= 90 and -180 <= lon <= 180):
        raise MalformedElement("geo-point out of range")
    return lat, lon


@dataclass(frozen=True)
class ContextElement:
    entity: EntityRef
    attributes: tuple[Attribute, ...] = ()
    provider_hint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.entity.is_pattern:
            raise MalformedElement("context elements need a concrete entity id")
        names = [a.name for a in self.attributes]
        if len(names) != len(set(names)):
            raise MalformedElement(f"duplicate attribute names in {self.entity.id!r}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.entity.id, self.entity.type)

    def attribute(self, name: str) -> Attribute | None:
        for attr in self.attributes:
            if attr.name == name:
                return attr
        return None

    def to_wire(self) -> dict:
        out = {
            "entity": self.entity.to_wire(),
            "attributes": [a.to_wire() for a in self.attributes],
        }
        if self.provider_hint is not None:
            out["providerHint"] = self.provider_hint
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> ContextElement:
        try:
            entity = EntityRef.from_wire(_require(data, "entity", Mapping, MalformedElement))
        except MalformedRequest as exc:
            raise MalformedElement(str(exc)) from None
        attrs = data.get("attributes", [])
        if not isinstance(attrs, list):
            raise MalformedElement("attributes must be a list")
        hint = data.get("providerHint")
        if hint is not None and not isinstance(hint, str):
            raise MalformedElement("providerHint must be a string")
        return cls(entity, tuple(Attribute.from_wire(a) for a in attrs), hint)


# -- scopes ------------------------------------------------------------------


def _decimal(x: float) -> Decimal:
    return Decimal(repr(x))


def snap_to_grid(lat: float, lon: float, cell_size: float) -> tuple[int, int]:
    """Integer cell indices ``floor(coord / cell_size)``, computed in decimal
    so that e.g. 0.3 / 0.1 lands in cell 3 rather than 2."""
    size = _decimal(cell_size)
    i = (_decimal(lat) / size).to_integral_value(rounding=ROUND_FLOOR)
    j = (_decimal(lon) / size).to_integral_value(rounding=ROUND_FLOOR)
    return int(i), int(j)


@dataclass(frozen=True)
class Scope:
    kind: str = "none"
    value: Any = None

    def __post_init__(self):
        if self.kind not in SCOPE_KINDS:
            raise MalformedRequest(f"unknown scope kind {self.kind!r}")
        if self.kind == "exact-point":
            object.__setattr__(self, "value", _geo_pair(self.value))
        elif self.kind == "grid-cell":
            try:
                i, j, size = self.value
            except (TypeError, ValueError):
                raise MalformedRequest("grid-cell scope needs (lat index, lon index, cell size)") from None
            if not (isinstance(i, int) and isinstance(j, int)) or not _is_number(size) or size <= 0:
                raise MalformedRequest("grid-cell needs integer indices and a positive size")
            object.__setattr__(self, "value", (i, j, size))
        elif self.kind == "named-region":
            if not isinstance(self.value, str) or not self.value:
                raise MalformedRequest("named-region scope needs a region name")
        elif self.value is not None:
            raise MalformedRequest("scope kind 'none' carries no value")

    @classmethod
    def point(cls, lat: float, lon: float) -> Scope:
        return cls("exact-point", (lat, lon))

    @classmethod
    def cell(cls, lat_index: int, lon_index: int, cell_size: float) -> Scope:
        return cls("grid-cell", (lat_index, lon_index, cell_size))

    @classmethod
    def region(cls, name: str) -> Scope:
        return cls("named-region", name)

    def to_wire(self) -> dict:
        if self.kind == "exact-point":
            value: Any = {"lat": self.value[0], "lon": self.value[1]}
        elif self.kind == "grid-cell":
            value = {"latIndex": self.value[0], "lonIndex": self.value[1], "cellSize": self.value[2]}
        else:
            value = self.value
        return {"kind": self.kind, "value": value}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Scope:
        kind = _require(data, "kind", str)
        value = data.get("value")
        if kind == "exact-point" and _is_mapping(value):
            value = (value.get("lat"), value.get("lon"))
        elif kind == "grid-cell" and _is_mapping(value):
            value = (value.get("latIndex"), value.get("lonIndex"), value.get("cellSize"))
        return cls(kind, value)


NO_SCOPE = Scope()


def _cell_bounds(scope: Scope) -> tuple[Decimal, Decimal, Decimal, Decimal]:
    i, j, size = scope.value
    s = _decimal(size)
    return (i * s, (i + 1) * s, j * s, (j + 1) * s)


def scopes_overlap(a: Scope | None, b: Scope | None) -> bool:
    """True unless both scopes are concrete and provably disjoint.

    Points are snapped onto the other side's grid before comparing.  Region
    names are only comparable with region names; mixing a region with
    coordinates is treated as compatible since no geocoder is available.
    """
    if a is None or b is None or a.kind == "none" or b.kind == "none":
        return True
    if a.kind == "exact-point" and b.kind == "exact-point":
        return a.value == b.value
    if a.kind == "grid-cell" and b.kind == "exact-point":
        a, b = b, a
    if a.kind == "exact-point" and b.kind == "grid-cell":
        return snap_to_grid(a.value[0], a.value[1], b.value[2]) == (b.value[0], b.value[1])
    if a.kind == "grid-cell" and b.kind == "grid-cell":
        if a.value[2] == b.value[2]:
            return a.value[:2] == b.value[:2]
        a0, a1, a2, a3 = _cell_bounds(a)
        b0, b1, b2, b3 = _cell_bounds(b)
        return a0 < b1 and b0 < a1 and a2 < b3 and b2 < a3
    if a.kind == "named-region" and b.kind == "named-region":
        return a.value == b.value
    return True


# -- registrations, queries, subscriptions ----------------------------------


def _entities_from_wire(data: Mapping[str, Any], key: str = "entities") -> tuple[EntityRef, ...]:
    raw = data.get(key, [])
    if not isinstance(raw, list):
        raise MalformedRequest(f"'{key}' must be a list")
    return tuple(EntityRef.from_wire(e) for e in raw)


@dataclass(frozen=True)
class Registration:
    providing_endpoint: str
    entities: tuple[EntityRef, ...]
    attribute_names: tuple[str, ...] = ()
    scope: Scope = NO_SCOPE
    ttl: float = 300
    registration_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        if not is_valid_url(self.providing_endpoint):
            raise MalformedRequest(f"invalid providing endpoint {self.providing_endpoint!r}")
        if not isinstance(self.version, int) or self.version < 1:
            raise MalformedRequest("version must be an integer >= 1")
        if not _is_number(self.ttl) or self.ttl < 0:
            raise MalformedRequest("ttl must be a non-negative number")
        if not self.registration_id:
            raise MalformedRequest("registrationId must be non-empty")

    @property
    def is_tombstone(self) -> bool:
        return self.ttl == 0

    def content(self) -> tuple:
        """Everything except identity, version and ttl."""
        return (
            normalize_endpoint(self.providing_endpoint),
            tuple(sorted((e.id, e.type, e.is_pattern) for e in self.entities)),
            tuple(sorted(self.attribute_names)),
            self.scope,
        )

    def to_wire(self) -> dict:
        return {
            "registrationId": self.registration_id,
            "version": self.version,
            "providingEndpoint": self.providing_endpoint,
            "entities": [e.to_wire() for e in self.entities],
            "attributeNames": list(self.attribute_names),
            "scope": self.scope.to_wire(),
            "ttl": self.ttl,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Registration:
        scope = data.get("scope") if _is_mapping(data) else None
        ttl = data.get("ttl", 300) if _is_mapping(data) else 300
        return cls(
            providing_endpoint=_require(data, "providingEndpoint", str),
            entities=_entities_from_wire(data),
            attribute_names=_str_list(data, "attributeNames"),
            scope=Scope.from_wire(scope) if scope is not None else NO_SCOPE,
            ttl=ttl,
            registration_id=_require(data, "registrationId", str),
            version=_require(data, "version", int),
        )


@dataclass(frozen=True)
class QueryRequest:
    entities: tuple[EntityRef, ...]
    attribute_names: tuple[str, ...] = ()
    scope: Scope | None = None
    aggregate: str = "set"

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        if self.aggregate not in AGGREGATE_MODES:
            raise MalformedRequest(f"unknown aggregate mode {self.aggregate!r}")

    def to_wire(self) -> dict:
        out = {
            "entities": [e.to_wire() for e in self.entities],
            "attributeNames": list(self.attribute_names),
            "aggregate": self.aggregate,
        }
        if self.scope is not None:
            out["scope"] = self.scope.to_wire()
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> QueryRequest:
        if not _is_mapping(data):
            raise MalformedRequest("query must be an object")
        scope = data.get("scope")
        aggregate = data.get("aggregate", "set")
        if not isinstance(aggregate, str):
            raise MalformedRequest("aggregate must be a string")
        return cls(
            _entities_from_wire(data),
            _str_list(data, "attributeNames"),
            Scope.from_wire(scope) if scope is not None else None,
            aggregate,
        )


@dataclass(frozen=True)
class ProviderError:
    provider: str
    code: int
    reason: str

    def to_wire(self) -> dict:
        return {"provider": self.provider, "code": self.code, "reason": self.reason}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> ProviderError:
        return cls(_require(data, "provider", str), _require(data, "code", int), _require(data, "reason", str))


@dataclass(frozen=True)
class QueryResponse:
    elements: tuple[ContextElement, ...] = ()
    errors: tuple[ProviderError, ...] = ()
    annotations: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(self, "errors", tuple(self.errors))
        object.__setattr__(self, "annotations", tuple(self.annotations))

    def to_wire(self) -> dict:
        out: dict[str, Any] = {"elements": [e.to_wire() for e in self.elements]}
        if self.errors:
            out["errors"] = [e.to_wire() for e in self.errors]
        if self.annotations:
            out["annotations"] = list(self.annotations)
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> QueryResponse:
        elements = _require(data, "elements", list)
        errors = data.get("errors", [])
        return cls(
            tuple(ContextElement.from_wire(e) for e in elements),
            tuple(ProviderError.from_wire(e) for e in errors),
            _str_list(data, "annotations"),
        )


@dataclass(frozen=True)
class Subscription:
    kind: str
    entities: tuple[EntityRef, ...]
    callback_endpoint: str
    attribute_names: tuple[str, ...] = ()
    ttl: float = 3600
    subscription_id: str = field(default_factory=lambda: str(uuid.uuid4()))

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        if self.kind not in SUBSCRIPTION_KINDS:
            raise MalformedRequest(f"unknown subscription kind {self.kind!r}")
        if not _is_number(self.ttl) or self.ttl <= 0:
            raise MalformedRequest("subscription ttl must be positive")
        if not self.subscription_id:
            raise MalformedRequest("subscriptionId must be non-empty")

    def as_query(self) -> QueryRequest:
        return QueryRequest(self.entities, self.attribute_names)

    def matches(self, element: ContextElement) -> bool:
        return any(match_entity(p, element.entity) for p in self.entities)

    def to_wire(self) -> dict:
        return {
            "subscriptionId": self.subscription_id,
            "kind": self.kind,
            "entities": [e.to_wire() for e in self.entities],
            "attributeNames": list(self.attribute_names),
            "callbackEndpoint": self.callback_endpoint,
            "ttl": self.ttl,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Subscription:
        sub_id = data.get("subscriptionId") if _is_mapping(data) else None
        extra = {"subscription_id": sub_id} if sub_id is not None else {}
        if sub_id is not None and not isinstance(sub_id, str):
            raise MalformedRequest("subscriptionId must be a string")
        return cls(
            kind=_require(data, "kind", str),
            entities=_entities_from_wire(data),
            callback_endpoint=_require(data, "callbackEndpoint", str),
            attribute_names=_str_list(data, "attributeNames"),
            ttl=data.get("ttl", 3600),
            **extra,
        )


@dataclass(frozen=True)
class Notification:
    subscription_id: str
    elements: tuple[ContextElement, ...]

    def to_wire(self) -> dict:
        return {"subscriptionId": self.subscription_id, "elements": [e.to_wire() for e in self.elements]}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Notification:
        elements = _require(data, "elements", list)
        return cls(_require(data, "subscriptionId", str), tuple(ContextElement.from_wire(e) for e in elements))


@dataclass(frozen=True)
class AvailabilityNotification:
    subscription_id: str
    registrations: tuple[Registration, ...]

    def to_wire(self) -> dict:
        return {
            "subscriptionId": self.subscription_id,
            "registrations": [r.to_wire() for r in self.registrations],
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> AvailabilityNotification:
        regs = _require(data, "registrations", list)
        return cls(_require(data, "subscriptionId", str), tuple(Registration.from_wire(r) for r in regs))


def encode(obj) -> bytes:
    return json.dumps(obj.to_wire(), separators=(",", ":")).encode()


def decode(cls, payload: bytes | str | Mapping[str, Any]):
    if isinstance(payload, (bytes, str)):
        try:
            payload = json.loads(payload)
        except ValueError:
            raise MalformedRequest("body is not valid JSON") from None
    return cls.from_wire(payload)


# -- matching ----------------------------------------------------------------


def match_entity(pattern: EntityRef, candidate: EntityRef) -> bool:
    if pattern.type != "*" and pattern.type != candidate.type:
        return False
    if pattern.is_pattern:
        return glob_match(pattern.id, candidate.id)
    return pattern.id == candidate.id


def refs_overlap(a: EntityRef, b: EntityRef) -> bool:
    """Symmetric compatibility used when either side may be a pattern."""
    if a.type != "*" and b.type != "*" and a.type != b.type:
        return False
    if not a.is_pattern and not b.is_pattern:
        return a.id == b.id
    if a.is_pattern and not b.is_pattern:
        return glob_match(a.id, b.id)
    if b.is_pattern and not a.is_pattern:
        return glob_match(b.id, a.id)
    return glob_match(a.id, b.id) or glob_match(b.id, a.id)


class _RefIndex:
    __slots__ = ("literal", "patterns")

    def __init__(self, refs: tuple[EntityRef, ...]):
        self.literal: dict[str, set[str]] = {}
        self.patterns: list[EntityRef] = []
        for ref in refs:
            if ref.is_pattern:
                self.patterns.append(ref)
            else:
                self.literal.setdefault(ref.id, set()).add(ref.type)

    def overlaps(self, ref: EntityRef) -> bool:
        if not ref.is_pattern:
            types = self.literal.get(ref.id)
            if types and (ref.type == "*" or ref.type in types or "*" in types):
                return True
        elif self.literal:
            for ident, types in self.literal.items():
                if any(refs_overlap(ref, EntityRef(ident, t)) for t in types):
                    return True
        return any(refs_overlap(p, ref) for p in self.patterns)


@lru_cache(maxsize=8192)
def _ref_index(refs: tuple[EntityRef, ...]) -> _RefIndex:
    return _RefIndex(refs)


def entities_overlap(a: Sequence[EntityRef], b: Sequence[EntityRef]) -> bool:
    if len(a) > len(b):
        a, b = b, a
    index = _ref_index(tuple(b))
    return any(index.overlaps(ref) for ref in a)


def refs_answerable(query_refs: Sequence[EntityRef], regs: Iterable[Registration]) -> tuple[EntityRef, ...]:
    """The query refs that overlap at least one of ``regs``."""
    indexes = [_ref_index(tuple(r.entities)) for r in regs]
    return tuple(ref for ref in query_refs if any(ix.overlaps(ref) for ix in indexes))


def attributes_overlap(a: Sequence[str], b: Sequence[str]) -> bool:
    return not a or not b or not set(a).isdisjoint(b)


def match_registration(query: QueryRequest, reg: Registration) -> bool:
    return (
        entities_overlap(query.entities, reg.entities)
        and attributes_overlap(query.attribute_names, reg.attribute_names)
        and scopes_overlap(query.scope, reg.scope)
    )


def filter_attributes(element: ContextElement, allowed: Iterable[str]) -> ContextElement:
    allowed = set(allowed)
    if not allowed:
        return element
    kept = tuple(a for a in element.attributes if a.name in allowed)
    if len(kept) == len(element.attributes):
        return element
    return replace(element, attributes=kept)


# -- aggregation -------------------------------------------------------------


def _attr_rank(attr: Attribute, hint: str | None) -> tuple:
    # smallest rank wins: newest timestamp, then smallest provider hint,
    # then smallest canonical value
    ts = attr.timestamp if attr.timestamp is not None else -1
    return (-ts, hint or "", json.dumps(attr.to_wire(), sort_keys=True))


def _merge_set(parts: Sequence[QueryResponse]) -> list[ContextElement]:
    merged: dict[tuple[str, str], dict[str, tuple[Attribute, str | None]]] = {}
    hints: dict[tuple[str, str], str | None] = {}
    for part in parts:
        for element in part.elements:
            key = element.key
            slot = merged.setdefault(key, {})
            hint = element.provider_hint
            if hint is not None:
                prev = hints.get(key)
                hints[key] = hint if prev is None else min(prev, hint)
            else:
                hints.setdefault(key, None)
            for attr in element.attributes:
                current = slot.get(attr.name)
                # ranks are only computed on conflict
                if current is None or _attr_rank(attr, hint) < _attr_rank(*current):
                    slot[attr.name] = (attr, hint)
    out = []
    for key in sorted(merged, key=lambda k: (k[1], k[0])):
        slot = merged[key]
        attrs = tuple(slot[name][0] for name in sorted(slot))
        out.append(ContextElement(EntityRef(key[0], key[1]), attrs, hints.get(key)))
    return out


def _average(parts: Sequence[QueryResponse]) -> tuple[list[ContextElement], list[str]]:
    groups: dict[tuple[str, str], list[Attribute]] = {}
    for part in parts:
        for element in part.elements:
            for attr in element.attributes:
                groups.setdefault((element.entity.type, attr.name), []).append(attr)
    per_type: dict[str, list[Attribute]] = {}
    notes = []
    for (etype, name) in sorted(groups):
        attrs = groups[(etype, name)]
        kinds = {a.value_type for a in attrs}
        if len(kinds) > 1:
            raise AggregationTypeError(f"mixed value types {sorted(kinds)} for {etype}/{name}")
        if kinds != {"number"}:
            notes.append(f"dropped non-numeric attribute {etype}/{name}")
            continue
        stamps = [a.timestamp for a in attrs if a.timestamp is not None]
        mean = math.fsum(a.value for a in attrs) / len(attrs)
        per_type.setdefault(etype, []).append(Attribute.number(name, mean, max(stamps) if stamps else None))
    elements = [
        ContextElement(EntityRef(f"avg:{etype}", etype), tuple(attrs))
        for etype, attrs in sorted(per_type.items())
    ]
    return elements, notes


def aggregate_responses(parts: Sequence[QueryResponse], mode: str = "set") -> QueryResponse:
    """Combine per-provider responses.

    ``set`` merges elements with the same (id, type) attribute-wise, newest
    timestamp first.  ``average`` emits one ``avg:<type>`` element per entity
    type holding the mean of every numeric attribute across all parts.
    """
    errors = sorted({e for p in parts for e in p.errors}, key=lambda e: (e.provider, e.code, e.reason))
    notes = {n for p in parts for n in p.annotations}
    if mode == "set":
        elements = _merge_set(parts)
    elif mode == "average":
        elements, dropped = _average(parts)
        notes.update(dropped)
    else:
        raise MalformedRequest(f"unknown aggregate mode {mode!r}")
    return QueryResponse(tuple(elements), tuple(errors), tuple(sorted(notes)))


def canonical_elements(elements: Iterable[ContextElement]) -> list[ContextElement]:
    """Sort elements by (type, id) and attributes by name."""
    out = []
    for e in sorted(elements, key=lambda e: (e.entity.type, e.entity.id)):
        out.append(replace(e, attributes=tuple(sorted(e.attributes, key=lambda a: a.name))))
    return out
