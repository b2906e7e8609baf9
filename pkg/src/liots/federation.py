"""Assembly of domains, federations and stacked super-domains.

A domain owns its context managers, intra-domain discovery (idD) and broker
(idB), the IoT registrar, the two federation brokers and, when secured, an
IdM/PDP pair with a PEP in front of every exposed component.  Federation
services (discovery, IdM, PDP) are replicated: every top-level domain runs one
replica of each and replicas are linked full-mesh.  A super-domain is an
ordinary domain whose intra-domain services play the federation role for the
domains attached below it.
"""

from __future__ import annotations

import asyncio
import json
import logging
import secrets
from collections.abc import Awaitable, Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from urllib.parse import urlsplit

from .broker import Broker, BrokerConfig
from .context_manager import ContextManager
from .discovery import Discovery
from .errors import MalformedRequest, SpecViolation
from .model import NO_SCOPE, ContextElement, EntityRef, Registration
from .registrar import IoTRegistrar, PrivacyDirective, RegionEntry
from .security import Identity, IdentityManager, Policy, PolicyDecisionPoint, PolicyEnforcementPoint
from .service import CredentialToken, Service, Transport, WireTap

log = logging.getLogger(__name__)

# Which security scope guards each federation broker operation, which
# discovery each broker uses, where the boundary brokers are registered and
# where the registrar subscribes.  Every assembled domain must match.
BOUNDARY_WIRING: dict[str, dict[str, Any]] = {
    "security": {
        "outFedB": {"query": "intra", "subscribe": "intra", "notify": "federation"},
        "inFedB": {"query": "federation", "subscribe": "federation", "notify": "intra"},
    },
    "discovery": {"idB": "idD", "inFedB": "idD", "outFedB": "fedD"},
    "registration": {"outFedB": "idD", "inFedB": "fedD"},
    "subscription": {"iotr": "idD"},
}

_ROW_NAMES = {"security": "Security", "discovery": "Discovery",
              "registration": "Registration", "subscription": "Subscription"}

# request paths each PEP lets through
CM_PATHS = ("/v1/updateContext", "/v1/queryContext", "/v1/subscribeContext", "/v1/unsubscribeContext")
BROKER_PATHS = ("/v1/queryContext", "/v1/subscribeContext", "/v1/unsubscribeContext",
                "/v1/notifyContext", "/v1/notifyContextAvailability")
DISCOVERY_PATHS = ("/v1/registerContext", "/v1/discoverContextAvailability",
                   "/v1/subscribeContextAvailability", "/v1/unsubscribeContext")
REGISTRAR_PATHS = ("/v1/registerContext", "/v1/notifyContextAvailability")
REQUEST_PATHS = ("/v1/queryContext", "/v1/subscribeContext", "/v1/unsubscribeContext")
NOTIFY_PATHS = ("/v1/notifyContext", "/v1/notifyContextAvailability")

FOREVER = 10 * 365 * 86400.0
_NOWHERE = "http://127.0.0.1:1"  # PEPs not yet attached fail closed


def default_directives() -> list[PrivacyDirective]:
    """Expose every type, without ids or location."""
    return [PrivacyDirective(match_types=("*",), key_fields=("entityType",), granularity="suppress")]


@dataclass
class ProviderSpec:
    name: str
    announce: str = "type"
    service_delay: float = 0.0
    workers: int | None = None
    registration_ttl: float = 300
    elements: list[ContextElement] = field(default_factory=list)
    snapshot_path: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ProviderSpec:
        if not isinstance(data, Mapping) or not isinstance(data.get("name"), str):
            raise MalformedRequest("provider spec needs a name")
        return cls(
            name=data["name"],
            announce=data.get("announce", "type"),
            service_delay=data.get("serviceDelay", 0.0),
            workers=data.get("workers"),
            registration_ttl=data.get("registrationTtl", 300),
            elements=[ContextElement.from_wire(e) for e in data.get("elements", [])],
            snapshot_path=data.get("snapshotPath"),
        )


@dataclass
class DomainSpec:
    domain_id: str
    providers: list[ProviderSpec] = field(default_factory=list)
    secured: bool = True
    users: list[Identity] = field(default_factory=list)
    policies: list[Policy] | None = None
    directives: list[PrivacyDirective] = field(default_factory=default_directives)
    region_table: list[RegionEntry] = field(default_factory=list)
    wiring: dict[str, Any] = field(default_factory=lambda: json.loads(json.dumps(BOUNDARY_WIRING)))
    fanout_timeout: float = 5000
    registration_ttl: float = 300
    host: str = "127.0.0.1"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> DomainSpec:
        if not isinstance(data, Mapping) or not isinstance(data.get("domainId"), str):
            raise MalformedRequest("domain spec needs a domainId")
        wiring = json.loads(json.dumps(BOUNDARY_WIRING))
        for row, values in (data.get("wiring") or {}).items():
            if isinstance(values, Mapping) and isinstance(wiring.get(row), dict):
                for key, value in values.items():
                    if isinstance(value, Mapping) and isinstance(wiring[row].get(key), dict):
                        wiring[row][key].update(value)
                    else:
                        wiring[row][key] = value
            else:
                wiring[row] = values
        policies = data.get("policies")
        return cls(
            domain_id=data["domainId"],
            providers=[ProviderSpec.from_dict(p) for p in data.get("providers", [])],
            secured=bool(data.get("secured", True)),
            users=[Identity.from_wire(u) for u in data.get("users", [])],
            policies=[Policy.from_wire(p) for p in policies] if policies is not None else None,
            directives=([PrivacyDirective.from_wire(d) for d in data["directives"]]
                        if "directives" in data else default_directives()),
            region_table=[RegionEntry.from_wire(r) for r in data.get("regionTable", [])],
            wiring=wiring,
            fanout_timeout=data.get("fanoutTimeout", 5000),
            registration_ttl=data.get("registrationTtl", 300),
            host=data.get("host", "127.0.0.1"),
        )

    @classmethod
    def load(cls, path: str | Path) -> DomainSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def table_violations(spec: DomainSpec) -> list[str]:
    """Every place where a domain's wiring departs from BOUNDARY_WIRING."""
    problems = []
    wiring = spec.wiring or {}
    for row, expected in BOUNDARY_WIRING.items():
        got_row = wiring.get(row) or {}
        for component, want in expected.items():
            got = got_row.get(component) if isinstance(got_row, Mapping) else None
            if row == "security":
                if not spec.secured:
                    continue
                got = got if isinstance(got, Mapping) else {}
                for op, scope in want.items():
                    if got.get(op) != scope:
                        problems.append(f"Security row: {component} must use {scope} security for "
                                        f"{op} (got {got.get(op)})")
            elif got != want:
                verb = {"discovery": "discover via", "registration": "be registered in",
                        "subscription": "subscribe for provider availability at"}[row]
                problems.append(f"{_ROW_NAMES[row]} row: {component} must {verb} {want} (got {got})")
    return problems


def validate_spec(spec: DomainSpec) -> None:
    problems = table_violations(spec)
    if not spec.domain_id:
        problems.append("domainId must be non-empty")
    names = [p.name for p in spec.providers]
    if len(set(names)) != len(names):
        problems.append("provider names must be unique")
    for p in spec.providers:
        if p.announce not in ("type", "entity"):
            problems.append(f"provider {p.name}: announce must be 'type' or 'entity'")
    if problems:
        raise SpecViolation(problems)


@dataclass
class FederationContext:
    """What a domain needs to join the next level up."""

    discovery: str
    idm: str | None = None
    pdp: str | None = None
    enroll: Callable[[Identity], Awaitable[None]] | None = None
    owner: str = ""


def _component_identity(domain: str, component: str) -> Identity:
    return Identity(f"{domain}/{component}", "component", secrets.token_hex(16))


def _endpoint_key(url: str) -> str:
    parts = urlsplit(url)
    return f"{parts.hostname}:{parts.port}"


class Domain:
    """Handle on one running domain; build it with :func:`assemble_domain`."""

    def __init__(self, spec: DomainSpec, tap: WireTap | None = None):
        self.spec = spec
        self.id = spec.domain_id
        self.tap = tap
        self.services: dict[str, Service] = {}
        self.identities: dict[str, Identity] = {}
        self.fed_identity = Identity(f"domain-{self.id}", "domain", secrets.token_hex(16))
        self.providers: dict[str, ContextManager] = {}
        self.idm: IdentityManager | None = None
        self.pdp: PolicyDecisionPoint | None = None
        self.children: list[Domain] = []
        self.context: FederationContext | None = None
        self._fed_credentials: list[CredentialToken] = []

    # -- lookups --

    def __getitem__(self, key: str) -> Service:
        return self.services[key]

    @property
    def secured(self) -> bool:
        return self.spec.secured

    def exposed(self, key: str, scope: str = "intra") -> str:
        """Endpoint other components use to reach ``key``."""
        if not self.secured:
            return self.services[key].endpoint
        if key in ("outFedB", "inFedB"):
            return self.services[f"pep:{key}:{scope}"].endpoint
        return self.services[f"pep:{key}"].endpoint

    @property
    def idd(self) -> Discovery:
        return self.services["idD"]

    @property
    def idb(self) -> Broker:
        return self.services["idB"]

    @property
    def iotr(self) -> IoTRegistrar:
        return self.services["iotr"]

    @property
    def out_fed_b(self) -> Broker:
        return self.services["outFedB"]

    @property
    def in_fed_b(self) -> Broker:
        return self.services["inFedB"]

    @property
    def broker_endpoint(self) -> str:
        """Where applications of this domain send requests."""
        return self.exposed("idB")

    def provider_endpoint(self, name: str) -> str:
        return self.exposed(f"cm:{name}")

    def endpoint_domains(self) -> dict[str, str]:
        out = {_endpoint_key(s.endpoint): self.id for s in self.services.values()}
        for child in self.children:
            out.update(child.endpoint_domains())
        return out

    def all_services(self) -> list[Service]:
        out = list(self.services.values())
        for child in self.children:
            out.extend(child.all_services())
        return out

    def credentials(self, subject_id: str, transport: Transport | None = None) -> CredentialToken | None:
        """Token source for an identity held by this domain's IdM."""
        if not self.secured:
            return None
        ident = self.identities.get(subject_id) or self.idm.identities[subject_id]
        transport = transport or Transport(f"{self.id}:client", self.tap)
        return CredentialToken(transport, self.idm.endpoint, ident.subject_id, ident.secret)

    def intra_tokens(self) -> set[str]:
        return set(self.idm.tokens) if self.idm is not None else set()

    def intra_subjects(self) -> set[str]:
        return set(self.idm.identities) if self.idm is not None else set()

    def as_federation_context(self) -> FederationContext:
        """Expose this domain's intra services as the federation level for
        domains stacked beneath it."""
        return FederationContext(
            discovery=self.exposed("idD"),
            idm=self.idm.endpoint if self.idm else None,
            pdp=self.pdp.endpoint if self.pdp else None,
            enroll=self.idm.add_identity if self.idm else None,
            owner=self.id,
        )

    # -- lifecycle --

    def _transport(self, key: str) -> Transport:
        return Transport(f"{self.id}:{key}", self.tap)

    async def _add(self, key: str, service: Service) -> Service:
        self.services[key] = service
        await service.start()
        return service

    async def _pep(self, key: str, allowed: Iterable[str], idm: str | None = None,
                   pdp: str | None = None) -> PolicyEnforcementPoint:
        pep = PolicyEnforcementPoint(
            upstream=_NOWHERE, idm=idm or self.idm.endpoint, pdp=pdp or self.pdp.endpoint,
            allowed_paths=allowed, host=self.spec.host, name=f"{self.id}:{key}",
            transport=self._transport(key),
        )
        return await self._add(key, pep)

    def _intra_auth(self, component: str, transport: Transport) -> CredentialToken | None:
        if not self.secured:
            return None
        ident = _component_identity(self.id, component)
        self.identities[ident.subject_id] = ident
        self.idm._put_identity(ident)
        return CredentialToken(transport, self.idm.endpoint, ident.subject_id, ident.secret)

    async def _fronted(self, key: str, allowed: Iterable[str], build: Callable[..., Service]) -> Service:
        """Start a PEP then the component behind it, so the component knows
        its exposed address before it starts announcing."""
        transport = self._transport(key)
        auth = self._intra_auth(key, transport)
        if not self.secured:
            return await self._add(key, build(transport=transport, auth=auth, exposed=None))
        pep = await self._pep(f"pep:{key}", allowed)
        service = await self._add(key, build(transport=transport, auth=auth, exposed=pep.endpoint))
        pep.upstream = service.endpoint
        return service

    async def start(self) -> None:
        spec = self.spec
        host = spec.host
        if spec.secured:
            component_rule = Policy(f"{self.id}-components", f"{self.id}/*", "any", "*", "permit")
            user_rules = spec.policies if spec.policies is not None else [
                Policy(f"{self.id}-default", "*", "any", "*", "permit")
            ]
            self.idm = await self._add("idIdM", IdentityManager(
                identities=spec.users, host=host, name=f"{self.id}:idIdM",
                transport=self._transport("idIdM"), domain=self.id))
            self.pdp = await self._add("idPDP", PolicyDecisionPoint(
                policies=[component_rule, *user_rules], host=host, name=f"{self.id}:idPDP",
                transport=self._transport("idPDP"), domain=self.id))

        await self._fronted("idD", DISCOVERY_PATHS, lambda transport, auth, exposed: Discovery(
            host=host, name=f"{self.id}:idD", transport=transport, auth=auth, domain=self.id))
        idd_exposed = self.exposed("idD")

        # federation brokers: one PEP per security scope
        out_t, in_t = self._transport("outFedB"), self._transport("inFedB")
        out_auth, in_auth = self._intra_auth("outFedB", out_t), self._intra_auth("inFedB", in_t)
        if spec.secured:
            out_intra = await self._pep("pep:outFedB:intra", REQUEST_PATHS)
            out_fed = await self._pep("pep:outFedB:federation", NOTIFY_PATHS, _NOWHERE, _NOWHERE)
            in_intra = await self._pep("pep:inFedB:intra", NOTIFY_PATHS)
            in_fed = await self._pep("pep:inFedB:federation", REQUEST_PATHS, _NOWHERE, _NOWHERE)
        timeout = spec.fanout_timeout
        out_b = Broker(BrokerConfig(None, fanout_timeout=timeout, role="out-fed"),
                       downstream_auth=out_auth, host=host, name=f"{self.id}:outFedB", transport=out_t)
        in_b = Broker(BrokerConfig(idd_exposed, fanout_timeout=timeout, role="in-fed"),
                      discovery_auth=in_auth, upstream_auth=in_auth, host=host,
                      name=f"{self.id}:inFedB", transport=in_t)
        await self._add("outFedB", out_b)
        await self._add("inFedB", in_b)
        if spec.secured:
            out_intra.upstream = out_fed.upstream = out_b.endpoint
            in_intra.upstream = in_fed.upstream = in_b.endpoint
        out_b.config.self_endpoint = self.exposed("outFedB", "federation")
        in_b.config.self_endpoint = self.exposed("inFedB", "intra")
        own_out = [out_b.endpoint, self.exposed("outFedB", "intra"), self.exposed("outFedB", "federation")]
        own_in = [in_b.endpoint, self.exposed("inFedB", "intra"), self.exposed("inFedB", "federation")]
        in_b.config.exclude_endpoints = own_out + own_in
        out_b.config.exclude_endpoints = own_in + own_out

        await self._fronted("idB", BROKER_PATHS, lambda transport, auth, exposed: Broker(
            BrokerConfig(idd_exposed, self_endpoint=exposed, fanout_timeout=timeout),
            discovery_auth=auth, downstream_auth=auth, host=host, name=f"{self.id}:idB",
            transport=transport))

        await self._fronted("iotr", REGISTRAR_PATHS, lambda transport, auth, exposed: IoTRegistrar(
            in_fed_b_endpoint=self.exposed("inFedB", "federation"), id_discovery=idd_exposed,
            directives=spec.directives, region_table=spec.region_table,
            ignore_endpoints=own_out, ttl=spec.registration_ttl, exposed_endpoint=exposed,
            host=host, name=f"{self.id}:iotr", transport=transport, auth=auth))

        # outFedB answers for everything not held locally
        await self.idd.register(Registration(
            self.exposed("outFedB", "intra"), (EntityRef("*", "*", True),), (), NO_SCOPE, FOREVER,
            f"{self.id}-outFedB-catch-all"))

        for p in spec.providers:
            await self.add_provider(p)

    async def add_provider(self, p: ProviderSpec) -> ContextManager:
        key = f"cm:{p.name}"
        cm = await self._fronted(key, CM_PATHS, lambda transport, auth, exposed: ContextManager(
            announce_to=[self.exposed("idD")], announce=p.announce,
            registration_ttl=p.registration_ttl, service_delay=p.service_delay, workers=p.workers,
            exposed_endpoint=exposed, snapshot_path=p.snapshot_path, host=self.spec.host,
            name=f"{self.id}:{key}", transport=transport, auth=auth))
        self.providers[p.name] = cm
        if p.elements:
            await cm.publish(p.elements)
        return cm

    async def attach(self, ctx: FederationContext) -> None:
        """Join the federation level described by ``ctx``."""
        self.context = ctx
        out_b, in_b, iotr = self.out_fed_b, self.in_fed_b, self.iotr
        out_b.config.discovery_endpoint = ctx.discovery
        iotr.fed_discovery = ctx.discovery
        if self.secured:
            if ctx.enroll is None or ctx.idm is None:
                raise SpecViolation(["a secured domain needs a secured federation level"])
            await ctx.enroll(self.fed_identity)
            fed = self.fed_identity

            def creds(svc: Service) -> CredentialToken:
                token = CredentialToken(svc.transport, ctx.idm, fed.subject_id, fed.secret)
                self._fed_credentials.append(token)
                return token

            out_b.discovery_auth = out_b.upstream_auth = creds(out_b)
            in_b.downstream_auth = creds(in_b)
            iotr.fed_auth = creds(iotr)
            for key in ("pep:outFedB:federation", "pep:inFedB:federation"):
                pep = self.services[key]
                pep.idm, pep.pdp = ctx.idm.rstrip("/"), ctx.pdp.rstrip("/")
        await iotr.push()

    async def warm_up(self) -> None:
        """Fetch federation tokens now so first use does not race replication."""
        for token in self._fed_credentials:
            await token.token()

    async def stop(self) -> None:
        for svc in reversed(list(self.services.values())):
            try:
                await svc.stop()
            except Exception:  # pragma: no cover - best effort shutdown
                log.exception("stopping %s", svc.name)


class Federation:
    """Top-level federation: replicated federation services plus members."""

    def __init__(self, domains: list[Domain], tap: WireTap | None = None):
        self.domains = domains
        self.tap = tap
        self.replicas: dict[str, dict[str, Service]] = {}

    def fed_discovery(self, domain_id: str) -> Discovery:
        return self.replicas[domain_id]["fedD"]

    def fed_idm(self, domain_id: str) -> IdentityManager | None:
        return self.replicas[domain_id].get("fedIdM")

    def all_services(self) -> list[Service]:
        out = []
        for d in self.domains:
            out.extend(d.all_services())
        return out

    def endpoint_domains(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for d in self.domains:
            out.update(d.endpoint_domains())
        return out

    def domain(self, domain_id: str) -> Domain:
        stack = list(self.domains)
        while stack:
            d = stack.pop()
            if d.id == domain_id:
                return d
            stack.extend(d.children)
        raise KeyError(domain_id)

    async def settle(self, timeout: float = 10.0) -> None:
        await settle(self.all_services(), timeout)

    async def stop(self) -> None:
        async def down(d: Domain) -> None:
            for child in d.children:
                await down(child)
            await d.stop()

        for d in self.domains:
            await down(d)


async def settle(services: Iterable[Service], timeout: float = 10.0) -> None:
    """Wait until no service has background work or queued replication."""
    services = list(services)
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    quiet = 0
    while quiet < 3:
        if loop.time() > deadline:
            raise TimeoutError("federation did not settle")
        busy = False
        for svc in services:
            replicator = getattr(svc, "replicator", None)
            queued = svc.pending() if isinstance(svc, IoTRegistrar) else 0
            if svc._tasks or (replicator and replicator.pending()) or queued:
                busy = True
            if replicator and replicator.pending():
                replicator.resume()
            if queued:
                await svc.push()
        if busy:
            quiet = 0
            await asyncio.gather(*(s.flush(timeout) for s in services), return_exceptions=True)
        else:
            quiet += 1
        await asyncio.sleep(0.02)


async def assemble_domain(spec: DomainSpec, tap: WireTap | None = None) -> Domain:
    """Validate ``spec`` and start all of the domain's services."""
    validate_spec(spec)
    domain = Domain(spec, tap)
    try:
        await domain.start()
    except BaseException:
        await domain.stop()
        raise
    return domain


async def _start_replicas(domain: Domain, tap: WireTap | None) -> dict[str, Service]:
    host = domain.spec.host
    out: dict[str, Service] = {}

    def transport(key: str) -> Transport:
        return Transport(f"{domain.id}:{key}", tap)

    async def add(key: str, svc: Service) -> Service:
        domain.services[key] = svc
        out[key] = svc
        await svc.start()
        return svc

    if domain.secured:
        idm = await add("fedIdM", IdentityManager(host=host, name=f"{domain.id}:fedIdM",
                                                   transport=transport("fedIdM"), domain=domain.id))
        pdp = await add("fedPDP", PolicyDecisionPoint(host=host, name=f"{domain.id}:fedPDP",
                                                      transport=transport("fedPDP"), domain=domain.id))
        fed_t = transport("fedD")
        auth = CredentialToken(fed_t, idm.endpoint, domain.fed_identity.subject_id, domain.fed_identity.secret)
        pep = PolicyEnforcementPoint(upstream=_NOWHERE, idm=idm.endpoint, pdp=pdp.endpoint,
                                     allowed_paths=DISCOVERY_PATHS, host=host,
                                     name=f"{domain.id}:pep:fedD", transport=transport("pep:fedD"))
        await add("pep:fedD", pep)
        fedd = await add("fedD", Discovery(host=host, name=f"{domain.id}:fedD", transport=fed_t,
                                            auth=auth, domain=domain.id))
        pep.upstream = fedd.endpoint
    else:
        await add("fedD", Discovery(host=host, name=f"{domain.id}:fedD",
                                    transport=transport("fedD"), domain=domain.id))
    return out


async def assemble_federation(domains: list[Domain], *, policies: list[Policy] | None = None,
                              tap: WireTap | None = None) -> Federation:
    """Give every domain a replica of the federation services, link the
    replicas and attach the domains."""
    if not domains:
        raise SpecViolation(["a federation needs at least one domain"])
    secured = {d.secured for d in domains}
    if len(secured) != 1:
        raise SpecViolation(["federated domains must agree on being secured"])
    tap = tap if tap is not None else domains[0].tap
    fed = Federation(domains, tap)
    for d in domains:
        fed.replicas[d.id] = await _start_replicas(d, tap)
    for kind in ("fedD", "fedIdM", "fedPDP"):
        members = [r[kind] for r in fed.replicas.values() if kind in r]
        for svc in members:
            for other in members:
                if other is not svc:
                    svc.replicator.add_peer(other.endpoint)
    first = fed.replicas[domains[0].id]
    if "fedPDP" in first:
        await first["fedPDP"].set_policies(
            policies if policies is not None else [Policy("federation-default", "domain-*", "any", "*", "permit")]
        )
    for d in domains:
        r = fed.replicas[d.id]
        if d.secured:
            ctx = FederationContext(r["pep:fedD"].endpoint, r["fedIdM"].endpoint, r["fedPDP"].endpoint,
                                    r["fedIdM"].add_identity, d.id)
        else:
            ctx = FederationContext(r["fedD"].endpoint, owner=d.id)
        await d.attach(ctx)
    await fed.settle()
    for d in domains:
        await d.warm_up()
    await fed.settle()
    return fed


async def stack_super_domain(children: list[Domain], super_spec: DomainSpec,
                             tap: WireTap | None = None) -> Domain:
    """Start a super-domain and attach ``children`` beneath it.

    Each child's boundary (its inFedB, reached through the registrations its
    registrar synthesizes) acts as one provider inside the super-domain.  The
    super-domain still has to join a federation level of its own.
    """
    if any(c.secured != super_spec.secured for c in children):
        raise SpecViolation(["stacked domains must agree on being secured"])
    sup = await assemble_domain(super_spec, tap if tap is not None else (children[0].tap if children else None))
    ctx = sup.as_federation_context()
    for child in children:
        await child.attach(ctx)
    sup.children = list(children)
    await settle(sup.all_services())
    for child in children:
        await child.warm_up()
    return sup


# -- federation documents -----------------------------------------------------


async def assemble_from_document(doc: Mapping[str, Any], tap: WireTap | None = None) -> Federation:
    """Bring up a federation described as JSON.

    ``domains`` lists domain specs; ``superDomains`` lists
    ``{"spec": {...}, "members": [domainId, ...]}`` entries; domains that are
    members of no super-domain join the top level directly.
    """
    domains = {d.domain_id: d for d in (DomainSpec.from_dict(x) for x in doc.get("domains", []))}
    running: dict[str, Domain] = {}
    for domain_id, spec in domains.items():
        running[domain_id] = await assemble_domain(spec, tap)
    top: list[Domain] = []
    nested: set[str] = set()
    for entry in doc.get("superDomains", []):
        members = [running[m] for m in entry.get("members", [])]
        nested.update(m.id for m in members)
        sup = await stack_super_domain(members, DomainSpec.from_dict(entry["spec"]), tap)
        running[sup.id] = sup
        top.append(sup)
    top = [d for d in running.values() if d.id not in nested and d not in top] + top
    policies = doc.get("policies")
    return await assemble_federation(
        top, policies=[Policy.from_wire(p) for p in policies] if policies is not None else None, tap=tap)


def cross_domain_leaks(tap: WireTap, endpoint_domains: Mapping[str, str],
                       secrets_by_domain: Mapping[str, set[str]]) -> list[str]:
    """Captured messages that carry one domain's intra-domain secrets (subject
    ids, token values) to an endpoint owned by another domain."""
    leaks = []
    for msg in tap.messages:
        origin = msg.origin.split(":", 1)[0]
        target = endpoint_domains.get(_endpoint_key(msg.url))
        if target is None or target == origin:
            continue
        text = msg.text()
        for owner, values in secrets_by_domain.items():
            if owner == target:
                continue
            for value in values:
                if value and value in text:
                    leaks.append(f"{msg.origin} -> {msg.url}: carries {owner} secret {value[:12]}")
    return leaks
