"""Context broker: discovers providers and fans queries and subscriptions out
to them.  One class covers the intra-domain, inbound-federation and
outbound-federation roles; they differ only in configuration."""

from __future__ import annotations

import asyncio
import json
import logging
import uuid
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import (
    DiscoveryUnreachable,
    LiotsError,
    MalformedRequest,
    UnknownSubscription,
)
from .model import (
    AvailabilityNotification,
    Notification,
    ProviderError,
    QueryRequest,
    QueryResponse,
    Registration,
    Subscription,
    aggregate_responses,
    filter_attributes,
    normalize_endpoint,
    refs_answerable,
)
from .service import AUTH_HEADER, HOPS_HEADER, Service, StaticToken, deliver, hops_of, resolve_token

log = logging.getLogger(__name__)

ROLES = ("intra", "in-fed", "out-fed")


@dataclass
class BrokerConfig:
    discovery_endpoint: str | None
    self_endpoint: str | None = None
    fanout_timeout: float = 5000  # ms
    outbound_token: str | None = None
    role: str = "intra"
    availability_endpoint: str | None = None
    exclude_endpoints: list[str] = field(default_factory=list)
    max_concurrency: int = 32
    max_hops: int = 8

    def __post_init__(self):
        if self.fanout_timeout <= 0:
            raise ValueError("fanoutTimeout must be > 0")
        if self.role not in ROLES:
            raise ValueError(f"unknown broker role {self.role!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BrokerConfig:
        return cls(
            discovery_endpoint=data.get("discoveryEndpoint"),
            self_endpoint=data.get("selfEndpoint"),
            fanout_timeout=data.get("fanoutTimeout", 5000),
            outbound_token=data.get("outboundToken"),
            role=data.get("role", "intra"),
            availability_endpoint=data.get("availabilityEndpoint"),
            exclude_endpoints=list(data.get("excludeEndpoints", [])),
            max_concurrency=data.get("maxConcurrency", 32),
        )

    @classmethod
    def load(cls, path: str | Path) -> BrokerConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class BrokeredSubscriptionState:
    inbound: Subscription
    availability_sub_id: str
    provider_sub_ids: dict[str, str] = field(default_factory=dict)
    token: str | None = None
    hops: int = 0
    created: float = 0.0
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)

    def expired(self, now: float) -> bool:
        return now - self.created > self.inbound.ttl


class Broker(Service):
    """Token handling per direction:

    * ``discovery_auth`` for calls to the configured discovery;
    * ``upstream_auth`` for queries/subscriptions sent to providers, or the
      caller's own token passed through when unset;
    * ``downstream_auth`` for notifications forwarded to subscribers.
    """

    kind = "broker"

    def __init__(self, config: BrokerConfig, *, discovery_auth=None, upstream_auth=None,
                 downstream_auth=None, **kwargs):
        super().__init__(**kwargs)
        self.config = config
        self.discovery_auth = discovery_auth
        self.upstream_auth = upstream_auth or (StaticToken(config.outbound_token) if config.outbound_token else None)
        self.downstream_auth = downstream_auth
        self.states: dict[str, BrokeredSubscriptionState] = {}
        self._by_availability: dict[str, str] = {}
        self._by_provider_sub: dict[str, str] = {}
        self._reg_cache: dict[tuple, Registration] = {}
        self.forwarded_notifications = 0

    def routes(self):
        return {
            "/v1/queryContext": self._h_query,
            "/v1/subscribeContext": self._h_subscribe,
            "/v1/unsubscribeContext": self._h_unsubscribe,
            "/v1/notifyContext": self._h_notify,
            "/v1/notifyContextAvailability": self._h_availability,
        }

    @property
    def callback_base(self) -> str:
        return (self.config.self_endpoint or self.endpoint).rstrip("/")

    @property
    def availability_base(self) -> str:
        return (self.config.availability_endpoint or self.callback_base).rstrip("/")

    def _excluded(self) -> set[str]:
        out = {normalize_endpoint(e) for e in self.config.exclude_endpoints}
        out.add(normalize_endpoint(self.callback_base))
        out.add(normalize_endpoint(self.endpoint))
        return out

    def _provider_groups(self, regs: Iterable[Registration]) -> dict[str, list[Registration]]:
        excluded = self._excluded()
        groups: dict[str, list[Registration]] = {}
        for reg in regs:
            ep = normalize_endpoint(reg.providing_endpoint)
            if ep not in excluded:
                groups.setdefault(ep, []).append(reg)
        return groups

    def _providers(self, regs: Iterable[Registration]) -> list[str]:
        return list(self._provider_groups(regs))

    # -- discovery --

    async def _discover(self, q: QueryRequest) -> list[Registration]:
        if not self.config.discovery_endpoint:
            return []
        url = self.config.discovery_endpoint.rstrip("/") + "/v1/discoverContextAvailability"
        try:
            token = await resolve_token(self.discovery_auth)
            body = await self.transport.post_json(url, q, token=token)
            return [self._parse_registration(r) for r in body.get("registrations", [])]
        except LiotsError as exc:
            raise DiscoveryUnreachable(f"discovery failed: {exc.reason}") from None

    def _parse_registration(self, raw: Any) -> Registration:
        # a (registrationId, version) pair always names the same content,
        # so parsed registrations can be reused across discover calls
        key = (raw.get("registrationId"), raw.get("version"), raw.get("ttl")) if isinstance(raw, dict) else None
        reg = self._reg_cache.get(key) if key else None
        if reg is None:
            reg = Registration.from_wire(raw)
            if len(self._reg_cache) > 10_000:
                self._reg_cache.clear()
            self._reg_cache[(reg.registration_id, reg.version, reg.ttl)] = reg
        return reg

    async def _upstream_token(self, inbound: str | None) -> str | None:
        if self.upstream_auth is not None:
            return await self.upstream_auth.token()
        return inbound

    # -- queries --

    async def brokered_query(self, q: QueryRequest, token: str | None = None, hops: int = 0) -> QueryResponse:
        if hops >= self.config.max_hops:
            return QueryResponse(annotations=("hop limit reached",))
        groups = self._provider_groups(await self._discover(q))
        if not groups:
            return aggregate_responses([], q.aggregate)
        outbound = await self._upstream_token(token)
        headers = {HOPS_HEADER: str(hops + 1)}
        # the cap bounds one fan-out; a shared one would let calls queued at a
        # busy provider starve idle ones under load
        cap = asyncio.Semaphore(self.config.max_concurrency)
        # each provider is asked only about the entities it registered
        asks = [self._ask(ep, replace(q, entities=refs_answerable(q.entities, regs), aggregate="set"),
                          outbound, headers, cap)
                for ep, regs in groups.items()]
        parts = await asyncio.gather(*asks)
        return aggregate_responses(parts, q.aggregate)

    async def _ask(self, provider: str, q: QueryRequest, token: str | None, headers: dict,
                   cap: asyncio.Semaphore) -> QueryResponse:
        timeout = self.config.fanout_timeout / 1000

        async def call():
            async with cap:
                # the outer wait_for owns the deadline so a slow provider reads as 504
                return await self.transport.post(provider + "/v1/queryContext", q, token=token,
                                                 headers=headers, timeout=timeout + 1)

        try:
            reply = await asyncio.wait_for(call(), timeout)
            if not reply.ok:
                return QueryResponse(errors=(ProviderError(provider, reply.status, reply.error_reason()),))
            return QueryResponse.from_wire(reply.json())
        except asyncio.TimeoutError:
            return QueryResponse(errors=(ProviderError(provider, 504, "timeout"),))
        except LiotsError as exc:
            return QueryResponse(errors=(ProviderError(provider, exc.status, exc.reason),))

    # -- subscriptions --

    async def brokered_subscribe(self, sub: Subscription, token: str | None = None, hops: int = 0) -> str:
        if sub.kind != "context":
            raise MalformedRequest("brokers accept context subscriptions")
        if sub.subscription_id in self.states:
            raise MalformedRequest("subscriptionId already in use")
        avail_id = str(uuid.uuid4())
        state = BrokeredSubscriptionState(sub, avail_id, token=token, hops=hops, created=self.clock())
        self.states[sub.subscription_id] = state
        self._by_availability[avail_id] = sub.subscription_id
        if hops >= self.config.max_hops or not self.config.discovery_endpoint:
            return sub.subscription_id
        avail = Subscription("availability", sub.entities,
                             self.availability_base + "/v1/notifyContextAvailability",
                             sub.attribute_names, sub.ttl, avail_id)
        url = self.config.discovery_endpoint.rstrip("/") + "/v1/subscribeContextAvailability"
        try:
            await self.transport.post_json(url, avail, token=await resolve_token(self.discovery_auth))
        except LiotsError as exc:
            self._drop_state(sub.subscription_id)
            raise DiscoveryUnreachable(f"availability subscription failed: {exc.reason}") from None
        return sub.subscription_id

    async def handle_availability(self, avail_id: str, regs: list[Registration]) -> BrokeredSubscriptionState:
        inbound_id = self._by_availability.get(avail_id)
        state = self.states.get(inbound_id) if inbound_id else None
        if state is None or state.expired(self.clock()):
            raise UnknownSubscription(f"unknown availability subscription {avail_id}")
        async with state.lock:
            fresh = [ep for ep in self._providers(regs) if ep not in state.provider_sub_ids]
            for ep in fresh:
                provider_sub_id = str(uuid.uuid4())
                state.provider_sub_ids[ep] = provider_sub_id
                self._by_provider_sub[provider_sub_id] = inbound_id
            results = await asyncio.gather(
                *(self._subscribe_provider(state, ep, state.provider_sub_ids[ep]) for ep in fresh)
            )
            for ep, ok in zip(fresh, results):
                if not ok:
                    # forgotten so the next availability notification retries it
                    self._by_provider_sub.pop(state.provider_sub_ids.pop(ep), None)
        return state

    async def _subscribe_provider(self, state: BrokeredSubscriptionState, endpoint: str, sub_id: str) -> bool:
        inbound = state.inbound
        remaining = max(inbound.ttl - (self.clock() - state.created), 0.001)
        sub = Subscription("context", inbound.entities, self.callback_base + "/v1/notifyContext",
                           inbound.attribute_names, remaining, sub_id)
        headers = {HOPS_HEADER: str(state.hops + 1)}
        delay = 0.1
        for attempt in range(3):
            try:
                token = await self._upstream_token(state.token)
                reply = await self.transport.post(endpoint + "/v1/subscribeContext", sub,
                                                  token=token, headers=headers)
                if reply.ok:
                    return True
                if 400 <= reply.status < 500 and reply.status != 401:
                    break
            except LiotsError as exc:
                log.debug("subscribe at %s failed: %s", endpoint, exc)
            if attempt < 2:
                await asyncio.sleep(delay)
                delay *= 2
        log.warning("%s could not subscribe at %s", self.name, endpoint)
        return False

    async def handle_provider_notification(self, note: Notification) -> bool:
        """Filter and forward; returns False when nothing was left to send."""
        inbound_id = self._by_provider_sub.get(note.subscription_id)
        state = self.states.get(inbound_id) if inbound_id else None
        if state is None:
            raise UnknownSubscription(f"unknown subscription {note.subscription_id}")
        if state.expired(self.clock()):
            self._drop_state(inbound_id)
            raise UnknownSubscription(f"subscription {inbound_id} expired")
        inbound = state.inbound
        elements = []
        for element in note.elements:
            if inbound.matches(element):
                element = filter_attributes(element, inbound.attribute_names)
                if element.attributes:
                    elements.append(element)
        if not elements:
            return False
        out = Notification(inbound.subscription_id, tuple(elements))
        self.forwarded_notifications += 1
        self.spawn(deliver(self.transport, inbound.callback_endpoint, out, token_source=self.downstream_auth))
        return True

    async def brokered_unsubscribe(self, subscription_id: str, token: str | None = None) -> None:
        state = self.states.get(subscription_id)
        if state is None:
            raise UnknownSubscription(f"unknown subscription {subscription_id}")
        self._drop_state(subscription_id)
        calls = []
        if self.config.discovery_endpoint:
            calls.append(self._cancel(self.config.discovery_endpoint.rstrip("/"), state.availability_sub_id,
                                      await resolve_token(self.discovery_auth)))
        upstream = await self._upstream_token(token or state.token)
        for ep, sid in state.provider_sub_ids.items():
            calls.append(self._cancel(ep, sid, upstream))
        await asyncio.gather(*calls)

    async def _cancel(self, endpoint: str, sub_id: str, token: str | None) -> None:
        try:
            await self.transport.post(endpoint + "/v1/unsubscribeContext", {"subscriptionId": sub_id}, token=token)
        except LiotsError as exc:
            log.info("unsubscribe at %s failed: %s", endpoint, exc)

    def _drop_state(self, inbound_id: str) -> None:
        state = self.states.pop(inbound_id, None)
        if state is None:
            return
        self._by_availability.pop(state.availability_sub_id, None)
        for sid in state.provider_sub_ids.values():
            self._by_provider_sub.pop(sid, None)

    # -- HTTP --

    async def _h_query(self, body, request):
        q = QueryRequest.from_wire(body)
        resp = await self.brokered_query(q, request.headers.get(AUTH_HEADER), hops_of(request))
        return resp.to_wire()

    async def _h_subscribe(self, body, request):
        sub = Subscription.from_wire(body)
        sid = await self.brokered_subscribe(sub, request.headers.get(AUTH_HEADER), hops_of(request))
        return {"subscriptionId": sid}

    async def _h_unsubscribe(self, body, request):
        sid = body.get("subscriptionId") if isinstance(body, dict) else None
        if not isinstance(sid, str):
            raise MalformedRequest("subscriptionId required")
        await self.brokered_unsubscribe(sid, request.headers.get(AUTH_HEADER))
        return {"subscriptionId": sid}

    async def _h_notify(self, body, request):
        await self.handle_provider_notification(Notification.from_wire(body))
        return {"code": 200}

    async def _h_availability(self, body, request):
        note = AvailabilityNotification.from_wire(body)
        # provider subscriptions happen off the request path so the
        # discovery's delivery is not held up by slow providers
        inbound_id = self._by_availability.get(note.subscription_id)
        if inbound_id is None or inbound_id not in self.states:
            raise UnknownSubscription(f"unknown availability subscription {note.subscription_id}")
        self.spawn(self.handle_availability(note.subscription_id, list(note.registrations)))
        return {"code": 200}
