"""Identity manager, policy decision point and policy enforcement proxy.

One instance of each forms a security system; a domain runs one for
intra-domain traffic and joins a replicated one for federation traffic.
"""

from __future__ import annotations

import hmac
import json
import secrets
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from aiohttp import web

from .errors import BadCredentials, LiotsError, MalformedRequest, ServiceUnavailable
from .model import (
    AvailabilityNotification,
    ContextElement,
    QueryRequest,
    Registration,
    filter_attributes,
    glob_match,
    now_ms,
)
from .replication import ReplicationOp, Replicator
from .service import AUTH_HEADER, HOPS_HEADER, Service, dumps, error_response, loads

ACTIONS = ("query", "subscribe", "notify", "register", "discover", "update", "any")

# request path -> action checked at the PDP
PATH_ACTIONS = {
    "/v1/queryContext": "query",
    "/v1/subscribeContext": "subscribe",
    "/v1/unsubscribeContext": "subscribe",
    "/v1/notifyContext": "notify",
    "/v1/updateContext": "update",
    "/v1/registerContext": "register",
    "/v1/discoverContextAvailability": "discover",
    "/v1/subscribeContextAvailability": "subscribe",
    "/v1/notifyContextAvailability": "notify",
}


@dataclass(frozen=True)
class Identity:
    subject_id: str
    kind: str
    secret: str

    def __post_init__(self):
        if self.kind not in ("user", "component", "domain"):
            raise MalformedRequest(f"unknown identity kind {self.kind!r}")
        if not self.subject_id:
            raise MalformedRequest("subjectId must be non-empty")

    def to_wire(self) -> dict:
        return {"subjectId": self.subject_id, "kind": self.kind, "secret": self.secret}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Identity:
        try:
            return cls(data["subjectId"], data.get("kind", "user"), data["secret"])
        except (KeyError, TypeError):
            raise MalformedRequest("identity needs subjectId and secret") from None


@dataclass(frozen=True)
class Token:
    value: str
    subject_id: str
    issued_at: int
    ttl: float

    def expired(self, now: int) -> bool:
        return now - self.issued_at >= self.ttl * 1000

    def to_wire(self) -> dict:
        return {"value": self.value, "subjectId": self.subject_id, "issuedAt": self.issued_at, "ttl": self.ttl}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Token:
        return cls(data["value"], data["subjectId"], int(data["issuedAt"]), data["ttl"])


@dataclass(frozen=True)
class Policy:
    rule_id: str
    subject_pattern: str
    action: str
    resource_pattern: str
    effect: str
    filter: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise MalformedRequest(f"unknown action {self.action!r}")
        if self.effect not in ("permit", "deny"):
            raise MalformedRequest(f"unknown effect {self.effect!r}")
        if self.filter is not None:
            object.__setattr__(self, "filter", tuple(self.filter))

    def applies(self, subject: str, action: str) -> bool:
        return glob_match(self.subject_pattern, subject) and self.action in ("any", action)

    def to_wire(self) -> dict:
        out = {"ruleId": self.rule_id, "subjectPattern": self.subject_pattern, "action": self.action,
               "resourcePattern": self.resource_pattern, "effect": self.effect}
        if self.filter is not None:
            out["filter"] = list(self.filter)
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Policy:
        try:
            return cls(data["ruleId"], data.get("subjectPattern", "*"), data.get("action", "any"),
                       data.get("resourcePattern", "*/*"), data["effect"], data.get("filter"))
        except (KeyError, TypeError):
            raise MalformedRequest("policy needs ruleId and effect") from None


@dataclass(frozen=True)
class Decision:
    verdict: str
    filter: tuple[str, ...] | None = None
    matched_rule_id: str | None = None

    def __post_init__(self):
        if self.verdict == "deny" and self.filter is not None:
            raise ValueError("a deny decision carries no filter")

    @property
    def permitted(self) -> bool:
        return self.verdict == "permit"

    def to_wire(self) -> dict:
        out: dict[str, Any] = {"verdict": self.verdict}
        if self.filter is not None:
            out["filter"] = list(self.filter)
        if self.matched_rule_id is not None:
            out["matchedRuleId"] = self.matched_rule_id
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> Decision:
        filt = data.get("filter")
        return cls(data["verdict"], tuple(filt) if filt is not None else None, data.get("matchedRuleId"))


DENY = Decision("deny")


def first_match(policies: Sequence[Policy], subject: str, action: str, resource: str | None) -> Policy | None:
    for rule in policies:
        if rule.applies(subject, action) and (resource is None or glob_match(rule.resource_pattern, resource)):
            return rule
    return None


def decide(policies: Sequence[Policy], subject: str, action: str, resources: Sequence[str]) -> Decision:
    """Evaluate every ``type/attribute`` resource by first match, default deny.

    Denied resources naming a concrete attribute are filtered out of the
    permit; a denied wildcard resource denies the whole request.  The
    resulting filter is the union of per-resource filters.
    """
    if not resources:
        rule = first_match(policies, subject, action, None)
        if rule is None or rule.effect == "deny":
            return DENY
        return Decision("permit", rule.filter, rule.rule_id)
    allowed: set[str] | None = set()
    restricted = False
    denied_attr = False
    first_rule = None
    for resource in resources:
        attr = resource.split("/", 1)[1] if "/" in resource else "*"
        rule = first_match(policies, subject, action, resource)
        if rule is None or rule.effect == "deny":
            if attr == "*":
                return DENY
            restricted = denied_attr = True
            continue
        first_rule = first_rule or rule
        if rule.filter is not None:
            restricted = True
            contrib: set[str] | None = set(rule.filter) if attr == "*" else set(rule.filter) & {attr}
        else:
            contrib = None if attr == "*" else {attr}
        allowed = None if allowed is None or contrib is None else allowed | contrib
    if first_rule is None:
        return DENY
    if not restricted:
        return Decision("permit", None, first_rule.rule_id)
    if allowed is None:
        # an unrestricted wildcard cannot be narrowed around a denied attribute
        return DENY if denied_attr else Decision("permit", None, first_rule.rule_id)
    if not allowed:
        return DENY
    return Decision("permit", tuple(sorted(allowed)), first_rule.rule_id)


def load_json_list(path: str | Path) -> list:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise MalformedRequest(f"{path}: expected a JSON array")
    return data


class IdentityManager(Service):
    """Issues opaque random tokens and validates them by lookup."""

    kind = "idm"

    def __init__(self, *, identities: Iterable[Identity] = (), token_ttl: float = 3600,
                 peers: Iterable[str] = (), domain: str = "", **kwargs):
        super().__init__(**kwargs)
        self.token_ttl = token_ttl
        self.identities: dict[str, Identity] = {}
        self.tokens: dict[str, Token] = {}
        self.replicator = Replicator(self.transport, domain, self._apply_op, peers)
        for ident in identities:
            self._put_identity(ident)

    def routes(self):
        return {"/v1/token": self._h_token, "/v1/validate": self._h_validate,
                "/v1/replicate": self._h_replicate}

    async def stop(self) -> None:
        await self.replicator.stop()
        await super().stop()

    def _put_identity(self, ident: Identity) -> None:
        if ident.subject_id in self.identities and self.identities[ident.subject_id] != ident:
            raise MalformedRequest(f"duplicate subjectId {ident.subject_id!r}")
        self.identities[ident.subject_id] = ident

    async def add_identity(self, ident: Identity) -> None:
        """Administrative add; replicated to peers when configured."""
        await self.replicator.originate("identity", ident.to_wire(), 1)

    def _apply_op(self, op: ReplicationOp) -> None:
        if op.kind == "identity":
            self._put_identity(Identity.from_wire(op.payload))
        elif op.kind == "token":
            token = Token.from_wire(op.payload)
            self.tokens.setdefault(token.value, token)
        else:
            raise MalformedRequest(f"idm cannot apply {op.kind} ops")

    async def issue_token(self, subject_id: str, secret: str) -> Token:
        ident = self.identities.get(subject_id)
        if ident is None or not hmac.compare_digest(ident.secret.encode(), str(secret).encode()):
            raise BadCredentials("bad credentials")
        token = Token(secrets.token_hex(16), subject_id, now_ms(self.clock), self.token_ttl)
        await self.replicator.originate("token", token.to_wire(), 1)
        return token

    def validate_token(self, value: str) -> str | None:
        token = self.tokens.get(value) if isinstance(value, str) else None
        if token is None:
            return None
        if token.expired(now_ms(self.clock)):
            return None
        return token.subject_id

    async def _h_token(self, body, request):
        if not isinstance(body, dict):
            raise MalformedRequest("object expected")
        token = await self.issue_token(str(body.get("subjectId", "")), str(body.get("secret", "")))
        return {"value": token.value, "ttl": token.ttl}

    async def _h_validate(self, body, request):
        subject = self.validate_token(body.get("value") if isinstance(body, dict) else None)
        if subject is None:
            return 401, {"code": 401, "reason": "invalid token"}
        return {"subjectId": subject}

    async def _h_replicate(self, body, request):
        return await self.replicator.handle(body)


class PolicyDecisionPoint(Service):
    kind = "pdp"

    def __init__(self, *, policies: Iterable[Policy] = (), peers: Iterable[str] = (),
                 domain: str = "", **kwargs):
        super().__init__(**kwargs)
        self.policies: list[Policy] = list(policies)
        self.policy_version = 0
        self.replicator = Replicator(self.transport, domain, self._apply_op, peers)

    def routes(self):
        return {"/v1/authorize": self._h_authorize, "/v1/replicate": self._h_replicate}

    async def stop(self) -> None:
        await self.replicator.stop()
        await super().stop()

    async def set_policies(self, policies: Sequence[Policy]) -> None:
        """Replace the ordered list; replicas keep the highest version."""
        payload = [p.to_wire() for p in policies]
        await self.replicator.originate("policy", payload, self.policy_version + 1)

    def _apply_op(self, op: ReplicationOp) -> None:
        if op.kind != "policy":
            raise MalformedRequest(f"pdp cannot apply {op.kind} ops")
        if op.version > self.policy_version:
            self.policies = [Policy.from_wire(p) for p in op.payload]
            self.policy_version = op.version

    def decide(self, subject_id: str, action: str, resources: Sequence[str]) -> Decision:
        return decide(self.policies, subject_id, action, resources)

    async def _h_authorize(self, body, request):
        if not isinstance(body, dict) or not isinstance(body.get("subjectId"), str):
            raise MalformedRequest("subjectId required")
        resources = body.get("resources", [])
        if not isinstance(resources, list):
            raise MalformedRequest("resources must be a list")
        return self.decide(body["subjectId"], str(body.get("action", "")), resources).to_wire()

    async def _h_replicate(self, body, request):
        return await self.replicator.handle(body)


# -- enforcement ---------------------------------------------------------------


def _entity_resources(entities, attribute_names) -> list[str]:
    types = sorted({e["type"] if isinstance(e, dict) else e.type for e in entities}) or ["*"]
    attrs = list(attribute_names) or ["*"]
    return [f"{t}/{a}" for t in types for a in attrs]


def _element_resources(elements: Iterable[ContextElement]) -> list[str]:
    out = set()
    for e in elements:
        if not e.attributes:
            out.add(f"{e.entity.type}/*")
        for a in e.attributes:
            out.add(f"{e.entity.type}/{a.name}")
    return sorted(out)


def resources_for(path: str, body: Any) -> list[str]:
    """Expand a request body into ``entityType/attributeName`` resources."""
    if path in ("/v1/queryContext", "/v1/discoverContextAvailability",
                "/v1/subscribeContext", "/v1/subscribeContextAvailability"):
        q = QueryRequest.from_wire(body)
        return _entity_resources(q.entities, q.attribute_names)
    if path in ("/v1/notifyContext", "/v1/updateContext"):
        raw = body.get("elements", []) if isinstance(body, dict) else []
        return _element_resources(ContextElement.from_wire(e) for e in raw)
    if path == "/v1/registerContext":
        reg = Registration.from_wire(body)
        return _entity_resources(reg.entities, reg.attribute_names)
    if path == "/v1/notifyContextAvailability":
        note = AvailabilityNotification.from_wire(body)
        out = set()
        for reg in note.registrations:
            out.update(_entity_resources(reg.entities, reg.attribute_names))
        return sorted(out)
    return []


def _filter_elements(raw: list, allowed: Sequence[str]) -> list:
    return [filter_attributes(ContextElement.from_wire(e), allowed).to_wire() for e in raw]


class PolicyEnforcementPoint(Service):
    """Authenticating, authorizing reverse proxy in front of one component.

    Fails closed: no upstream request is made unless the token validates and
    the decision permits.  A filtered permit narrows subscriptions, refines
    notification payloads and refines query response bodies.
    """

    kind = "pep"

    def __init__(self, *, upstream: str, idm: str, pdp: str,
                 allowed_paths: Iterable[str] | None = None, upstream_timeout: float = 30.0, **kwargs):
        super().__init__(**kwargs)
        self.upstream = upstream.rstrip("/")
        self.idm = idm.rstrip("/")
        self.pdp = pdp.rstrip("/")
        self.allowed_paths = set(allowed_paths) if allowed_paths is not None else None
        self.upstream_timeout = upstream_timeout
        self.forwarded = 0
        self.rejected = 0

    def build_app(self) -> web.Application:
        app = web.Application(client_max_size=64 * 1024 * 1024)
        app.router.add_get("/v1/health", self._health)
        app.router.add_post("/{path:.*}", self._proxy)
        return app

    def _reject(self, status: int, reason: str) -> web.Response:
        self.rejected += 1
        return error_response(status, reason)

    async def _proxy(self, request: web.Request) -> web.Response:
        path = "/" + request.match_info["path"]
        action = PATH_ACTIONS.get(path)
        if action is None:
            return self._reject(404, f"unknown path {path}")
        if self.allowed_paths is not None and path not in self.allowed_paths:
            return self._reject(403, f"{path} is not exposed here")
        token = request.headers.get(AUTH_HEADER)
        if not token:
            return self._reject(401, "missing token")
        raw = await request.read()
        try:
            body = loads(raw) if raw else {}
            resources = resources_for(path, body)
        except (ValueError, LiotsError):
            return self._reject(400, "malformed body")
        try:
            subject = await self._validate(token)
            if subject is None:
                return self._reject(401, "invalid token")
            decision = await self._authorize(subject, action or "any", resources)
        except ServiceUnavailable as exc:
            return self._reject(503, exc.reason)
        if not decision.permitted:
            return self._reject(403, "access denied")

        filt = decision.filter
        if filt is not None:
            if path in ("/v1/subscribeContext",):
                wanted = body.get("attributeNames") or []
                body["attributeNames"] = [a for a in wanted if a in filt] if wanted else list(filt)
                raw = dumps(body)
            elif path == "/v1/notifyContext":
                body["elements"] = [e for e in _filter_elements(body.get("elements", []), filt) if e["attributes"]]
                if not body["elements"]:
                    return web.json_response({"code": 200})
                raw = dumps(body)

        headers = {AUTH_HEADER: token}
        if HOPS_HEADER in request.headers:
            headers[HOPS_HEADER] = request.headers[HOPS_HEADER]
        try:
            reply = await self.transport.post(self.upstream + path, raw, headers=headers,
                                              timeout=self.upstream_timeout)
        except LiotsError as exc:
            return error_response(502, f"upstream unreachable: {exc.reason}")
        self.forwarded += 1
        body_out = reply.body
        if filt is not None and reply.ok and path == "/v1/queryContext":
            data = reply.json()
            if isinstance(data, dict) and isinstance(data.get("elements"), list):
                data["elements"] = _filter_elements(data["elements"], filt)
                body_out = dumps(data)
        return web.Response(body=body_out, status=reply.status, content_type="application/json")

    async def _validate(self, token: str) -> str | None:
        try:
            reply = await self.transport.post(self.idm + "/v1/validate", {"value": token})
        except LiotsError as exc:
            raise ServiceUnavailable(f"idm unreachable: {exc.reason}") from None
        if reply.status == 401:
            return None
        if not reply.ok:
            raise ServiceUnavailable(f"idm answered {reply.status}")
        return reply.json().get("subjectId")

    async def _authorize(self, subject: str, action: str, resources: list[str]) -> Decision:
        try:
            reply = await self.transport.post(
                self.pdp + "/v1/authorize",
                {"subjectId": subject, "action": action, "resources": resources},
            )
        except LiotsError as exc:
            raise ServiceUnavailable(f"pdp unreachable: {exc.reason}") from None
        if not reply.ok:
            raise ServiceUnavailable(f"pdp answered {reply.status}")
        try:
            return Decision.from_wire(reply.json())
        except (KeyError, TypeError, ValueError):
            raise ServiceUnavailable("pdp answered garbage") from None
