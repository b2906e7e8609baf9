"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import asyncio
import json
import random
import statistics
import time
from fractions import Fraction

import pytest
from conftest import LoopThread, Sink, http_post
from hypothesis import given, settings
from hypothesis import strategies as st

from liots.bench import (
    RunMetrics,
    WorkloadSpec,
    build_topology,
    check_response,
    execute,
    latency_ratio_series,
    non_increasing,
    seed,
    timed_query,
)
from liots.context_manager import ContextStore
from liots.discovery import Discovery
from liots.federation import (
    DomainSpec,
    ProviderSpec,
    assemble_domain,
    assemble_federation,
    cross_domain_leaks,
    settle,
    stack_super_domain,
)
from liots.model import (
    Attribute,
    ContextElement,
    EntityRef,
    QueryRequest,
    QueryResponse,
    Registration,
    Scope,
    Subscription,
    filter_attributes,
)
from liots.registrar import IoTRegistrar, PrivacyDirective, privacy_violations
from liots.security import Identity, IdentityManager, Policy, PolicyDecisionPoint, PolicyEnforcementPoint
from liots.service import AUTH_HEADER, Transport, WireTap

TS = 1_700_000_000_000


def verdict(capsys, number: int, title: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}")
    assert ok, detail


def element_set(elements) -> set:
    return {(e.entity, frozenset(e.attributes)) for e in elements}


# -- 1 ---------------------------------------------------------------------------


def test_c01_normalization_identity(capsys):
    rate, per_response, seconds = 20, 100, 60
    n = rate * seconds
    m = RunMetrics.from_samples([25.0] * n, [per_response] * n, 0, float(seconds))
    oracle = Fraction(n * per_response, seconds)
    ok = m.raw_throughput == rate and m.normalized_throughput == 2000 and Fraction(m.normalized_throughput) == oracle
    verdict(capsys, 1, "normalization identity", ok,
            f"raw={m.raw_throughput} req/s, normalized={m.normalized_throughput} entities/s (oracle {oracle})")


# -- 2 ---------------------------------------------------------------------------

TYPES = ("Car", "Room", "Sensor")
ATTRS = ("a0", "a1", "a2", "a3", "a4", "a5")


def _random_elements(rng: random.Random, total: int) -> list[ContextElement]:
    out = []
    for i in range(total):
        names = rng.sample(ATTRS, rng.randint(1, len(ATTRS)))
        attrs = tuple(Attribute.number(a, rng.randint(-1000, 1000), TS + rng.randint(0, 10_000)) for a in names)
        out.append(ContextElement(EntityRef(f"e{i:03d}", rng.choice(TYPES)), attrs))
    return out


def _random_query(rng: random.Random, elements: list[ContextElement]) -> QueryRequest:
    refs = []
    for _ in range(rng.randint(1, 3)):
        kind = rng.randrange(4)
        if kind == 0:
            e = rng.choice(elements).entity
            refs.append(EntityRef(e.id, e.type))
        elif kind == 1:
            refs.append(EntityRef("*", rng.choice(TYPES), True))
        elif kind == 2:
            refs.append(EntityRef(f"e{rng.randint(0, 19):02d}*", rng.choice((*TYPES, "*")), True))
        else:
            refs.append(EntityRef(f"e{rng.randint(0, 250):03d}", rng.choice(TYPES)))
    attrs = tuple(rng.sample(ATTRS, rng.randint(0, 3)))
    return QueryRequest(tuple(refs), attrs)


async def test_c02_transparency_oracle(capsys):
    rng = random.Random(2024)
    transport = Transport("oracle-client")
    topologies, queries, mismatches = 100, 0, []
    try:
        for trial in range(topologies):
            cms = rng.randint(2, 5)
            elements = _random_elements(rng, rng.randint(cms, 200))
            parts = [[] for _ in range(cms)]
            for e in elements:
                parts[rng.randrange(cms)].append(e)
            providers = [ProviderSpec(f"cm{k}", announce=rng.choice(("type", "entity")), elements=part)
                         for k, part in enumerate(parts)]
            union = ContextStore()
            union.upsert(elements, TS)
            d = await assemble_domain(DomainSpec(f"T{trial}", providers, secured=False))
            try:
                await settle(d.all_services())
                for _ in range(3):
                    q = _random_query(rng, elements)
                    got = QueryResponse.from_wire(await transport.post_json(d.broker_endpoint + "/v1/queryContext", q))
                    queries += 1
                    if element_set(got.elements) != element_set(union.query(q)):
                        mismatches.append((trial, q.to_wire()))
            finally:
                await d.stop()
    finally:
        await transport.close()
    verdict(capsys, 2, "transparency oracle", not mismatches,
            f"{topologies} topologies, {queries} queries, {len(mismatches)} mismatches {mismatches[:2]}")


# -- 3 and 6 ---------------------------------------------------------------------

PUBLISHER = Identity("publisher-a-5d1e", "user", "pub-secret-a")
SUBSCRIBER = Identity("subscriber-b-9c0b", "user", "sub-secret-b")
RUNS = 20


def car(eid: str, speed: float, ts: int) -> ContextElement:
    return ContextElement(EntityRef(eid, "Car"), (
        Attribute.number("speed", speed, ts),
        Attribute("owner", "text", "fleet-7", ts),
        Attribute("location", "geo-point", (44.1, 9.8), ts),
    ))


async def _flow_once(run: int) -> dict:
    tap = WireTap()
    sink = await Sink().start()
    a = await assemble_domain(DomainSpec("A", [ProviderSpec("cm1", elements=[car("a-1", 1, TS)])],
                                         users=[PUBLISHER]), tap)
    b = await assemble_domain(DomainSpec("B", [ProviderSpec("cm1", elements=[car("b-1", 2, TS)])],
                                         users=[SUBSCRIBER]), tap)
    fed = await assemble_federation([a, b], tap=tap)
    out = {"run": run, "ok": False, "latency": None, "detail": ""}
    try:
        sub_token = b.credentials(SUBSCRIBER.subject_id)
        pub_token = a.credentials(PUBLISHER.subject_id)
        sub = Subscription("context", (EntityRef("a-*", "Car", True),), sink.endpoint + "/notify", ("speed",),
                           ttl=600)
        await sub_token.transport.post_json(b.broker_endpoint + "/v1/subscribeContext", sub,
                                            token=await sub_token.token())
        await sink.wait_for(1)  # the initial notification proves the chain is in place
        await fed.settle()
        before = len(sink.bodies())
        published = car("a-1", 100 + run, TS + 1000 + run)
        t0 = time.perf_counter()
        await pub_token.transport.post_json(a.provider_endpoint("cm1") + "/v1/updateContext",
                                            {"elements": [published.to_wire()]}, token=await pub_token.token())
        expected = [filter_attributes(published, ("speed",)).to_wire()]
        deadline = t0 + 5.0
        while time.perf_counter() < deadline:
            fresh = [n for n in sink.bodies()[before:] if n.get("elements") == expected]
            if fresh:
                out.update(ok=True, latency=time.perf_counter() - t0)
                break
            await asyncio.sleep(0.01)
        else:
            out["detail"] = f"run {run}: no matching notification, got {sink.bodies()[before:]}"
        await fed.settle()
        secrets = {d.id: d.intra_tokens() | d.intra_subjects() for d in (a, b)}
        out["secrets"] = sum(len(v) for v in secrets.values())
        out["messages"] = len(tap.messages)
        out["cross"] = sum(1 for m in tap.messages
                           if fed.endpoint_domains().get(_key(m.url)) not in (None, m.origin.split(":", 1)[0]))
        out["leaks"] = cross_domain_leaks(tap, fed.endpoint_domains(), secrets)
        for t in (sub_token, pub_token):
            await t.transport.close()
    finally:
        await fed.stop()
        await sink.stop()
    return out


def _key(url: str) -> str:
    from urllib.parse import urlsplit

    parts = urlsplit(url)
    return f"{parts.hostname}:{parts.port}"


@pytest.fixture(scope="module")
def flow_runs():
    async def all_runs():
        return [await _flow_once(k) for k in range(RUNS)]

    return asyncio.run(all_runs())


def test_c03_cross_domain_publish_notify(flow_runs, capsys):
    good = [r for r in flow_runs if r["ok"]]
    worst = max((r["latency"] for r in good), default=float("nan"))
    failures = [r["detail"] for r in flow_runs if not r["ok"]]
    verdict(capsys, 3, "cross-domain publish/notify", len(good) == RUNS,
            f"{len(good)}/{RUNS} runs delivered the filtered payload, slowest {worst * 1000:.0f} ms {failures[:1]}")


def test_c06_boundary_containment(flow_runs, capsys):
    leaks = [leak for r in flow_runs for leak in r["leaks"]]
    cross = sum(r["cross"] for r in flow_runs)
    ok = not leaks and cross > 0 and all(r["secrets"] for r in flow_runs)
    verdict(capsys, 6, "boundary containment", ok,
            f"{sum(r['messages'] for r in flow_runs)} captured messages, {cross} cross-domain, "
            f"{len(leaks)} carrying intra-domain secrets {leaks[:2]}")


# -- 4 ---------------------------------------------------------------------------

GRID = PrivacyDirective(("Temperature",), ("entityType", "gridCell"), "grid", 0.1)
BY_TYPE = PrivacyDirective(("*",), ("entityType",), "suppress")


def thermo(eid: str, lat: float, lon: float) -> ContextElement:
    return ContextElement(EntityRef(eid, "Temperature"), (
        Attribute.number("temperature", 20.5, TS),
        Attribute("location", "geo-point", (lat, lon), TS),
    ))


async def _wait(predicate, timeout: float = 5.0) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        await asyncio.sleep(0.02)
    return predicate()


async def test_c04a_same_cell_sensor_causes_no_fed_operations(capsys):
    tap = WireTap()
    users = [PUBLISHER]
    a = await assemble_domain(DomainSpec("A", [ProviderSpec("cm1", announce="entity",
                                                            elements=[thermo("t-1", 44.101, 9.823)])],
                                         users=users, directives=[GRID]), tap)
    b = await assemble_domain(DomainSpec("B", [], users=users), tap)
    fed = await assemble_federation([a, b], tap=tap)
    fedd_hosts = {_key(fed.replicas["A"][k].endpoint) for k in ("fedD", "pep:fedD")}

    def fed_ops() -> int:
        return sum(1 for m in tap.messages
                   if m.origin.startswith("A:iotr") and _key(m.url) in fedd_hosts
                   and m.url.endswith("/v1/registerContext"))

    try:
        cm, iotr = a.providers["cm1"], a.iotr
        await fed.settle()
        baseline, sources = fed_ops(), len(iotr.sources)
        await cm.publish([thermo("t-2", 44.15, 9.81)])  # same 0.1 degree cell
        reached = await _wait(lambda: len(iotr.sources) > sources)
        await fed.settle()
        await asyncio.sleep(0.3)
        same_cell = fed_ops() - baseline
        sources = len(iotr.sources)
        await cm.publish([thermo("t-3", 44.25, 9.823)])  # neighbouring cell
        await _wait(lambda: len(iotr.sources) > sources)
        await fed.settle()
        await asyncio.sleep(0.3)
        new_cell = fed_ops() - baseline - same_cell
        cells = sorted(r.scope.value[:2] for r in fed.fed_discovery("B").discover(
            QueryRequest((EntityRef("*", "Temperature", True),))))
    finally:
        await fed.stop()
    ok = reached and baseline >= 1 and same_cell == 0 and new_cell == 1 and cells == [(441, 98), (442, 98)]
    verdict(capsys, 4, "privacy synthesis, same cell", ok,
            f"second sensor reached the registrar={reached}; fedD registerContext ops: same cell {same_cell}, "
            f"new cell {new_cell}; fedD cells {cells}")


def _wire_leaks(regs: list[Registration], sources: list[Registration]) -> list[str]:
    text = json.dumps([r.to_wire() for r in regs])
    found = [key for key in ('"lat"', '"lon"') if key in text]
    for s in sources:
        lat, lon = s.scope.value
        found += [tok for tok in (s.entities[0].id, repr(lat), repr(lon)) if tok in text]
    return found


async def test_c04b_randomized_placements_never_leak(capsys):
    rng = random.Random(404)
    endpoint = "http://127.0.0.1:9100"
    iotr = IoTRegistrar(in_fed_b_endpoint=endpoint, directives=[GRID, BY_TYPE])
    sources, emitted, problems = [], 0, []
    for i in range(1000):
        if rng.random() < 0.6:  # dense district: many sensors share a cell
            lat, lon = rng.uniform(44.0, 44.5), rng.uniform(9.0, 9.5)
        else:
            lat, lon = rng.uniform(-80, 80), rng.uniform(-179, 179)
        etype = "Temperature" if rng.random() < 0.8 else "Humidity"
        reg = Registration(f"http://127.0.0.1:{7000 + i % 50}/cm", (EntityRef(f"dev-{i:04d}-{rng.getrandbits(24):06x}",
                                                                            etype),),
                           ("temperature",), Scope.point(lat, lon), 300)
        sources.append(reg)
        actions = await iotr.ingest(reg)
        emitted += len(actions)
        problems += _wire_leaks([act.registration for act in actions], sources)
    problems += privacy_violations(iotr.synthesized, sources, iotr.directives, endpoint)
    problems += _wire_leaks(list(iotr.synthesized.values()), sources)
    kinds = {r.scope.kind for r in iotr.synthesized.values()}
    verdict(capsys, 4, "privacy synthesis, randomized placements", not problems and kinds <= {"grid-cell", "none"},
            f"1000 placements, {emitted} fedD actions, {len(iotr.synthesized)} synthesized registrations, "
            f"scope kinds {sorted(kinds)}, {len(problems)} leaks {problems[:3]}")


# -- 5 ---------------------------------------------------------------------------

ALLOWED = Identity("alice-7b21", "user", "pw-alice")
DENIED = Identity("mallory-3e88", "user", "pw-mallory")


@pytest.fixture(scope="module")
def pep_stack():
    lt = LoopThread()
    upstream = Sink()

    async def up():
        await upstream.start()
        idm = IdentityManager(identities=[ALLOWED, DENIED], domain="A")
        pdp = PolicyDecisionPoint(policies=[Policy("apps", ALLOWED.subject_id, "any", "*", "permit")])
        await idm.start()
        await pdp.start()
        pep = PolicyEnforcementPoint(upstream=upstream.endpoint, idm=idm.endpoint, pdp=pdp.endpoint)
        await pep.start()
        tokens = {s.subject_id: (await idm.issue_token(s.subject_id, s.secret)).value for s in (ALLOWED, DENIED)}
        return (idm, pdp, pep), tokens

    services, tokens = lt.run(up())
    yield lt, upstream, services[2], tokens

    async def down():
        for svc in (*reversed(services), upstream):
            await svc.stop()

    lt.run(down())
    lt.close()


def _bodies():
    ref = st.builds(EntityRef, st.sampled_from(["*", "c-1", "r-9"]), st.sampled_from(["Car", "Room"]), st.booleans())
    attrs = st.lists(st.sampled_from(["speed", "temp", "owner"]), max_size=2, unique=True)
    query = st.builds(lambda r, a: ("/v1/queryContext", QueryRequest((r,), tuple(a)).to_wire()), ref, attrs)
    subscribe = st.builds(lambda r, a: ("/v1/subscribeContext",
                                        Subscription("context", (r,), "http://127.0.0.1:9/cb", tuple(a)).to_wire()),
                          ref, attrs)
    update = st.builds(lambda v: ("/v1/updateContext",
                                  {"elements": [ContextElement(EntityRef("c-1", "Car"),
                                                               (Attribute.number("speed", v),)).to_wire()]}),
                       st.integers(0, 300))
    return st.one_of(query, subscribe, update)


@pytest.fixture(scope="module")
def isolated_federation():
    lt = LoopThread()

    async def up():
        a = await assemble_domain(DomainSpec("A", [ProviderSpec("cm1")], users=[ALLOWED]))
        b = await assemble_domain(DomainSpec("B", [ProviderSpec("cm1")], users=[ALLOWED]))
        return await assemble_federation([a, b])

    fed = lt.run(up())
    yield lt, fed
    lt.run(fed.stop())
    lt.close()


def test_c05_fail_closed_and_scope_isolation(pep_stack, isolated_federation, capsys):
    _, upstream, pep, tokens = pep_stack
    statuses: dict[str, set[int]] = {"missing": set(), "unknown": set(), "deny": set()}

    @settings(max_examples=150)
    @given(st.sampled_from(sorted(statuses)), _bodies(), st.text("0123456789abcdef", min_size=1, max_size=40))
    def fail_closed(case, request, garbage):
        path, body = request
        headers = {"missing": {}, "unknown": {AUTH_HEADER: garbage},
                   "deny": {AUTH_HEADER: tokens[DENIED.subject_id]}}[case]
        status = http_post(pep.endpoint + path, json.dumps(body).encode(), headers)
        statuses[case].add(status)
        assert status == {"missing": 401, "deny": 403}.get(case, status)
        assert status in (401, 403)
        assert len(upstream.received) == 0

    fail_closed()
    forwarded_on_reject = len(upstream.received)
    control = http_post(pep.endpoint + "/v1/queryContext", json.dumps(QueryRequest((EntityRef("c-1", "Car"),)).to_wire())
                        .encode(), {AUTH_HEADER: tokens[ALLOWED.subject_id]})
    counter_works = control == 200 and len(upstream.received) == 1

    flt, fed = isolated_federation
    a, b = fed.domain("A"), fed.domain("B")
    checked = {"n": 0}

    @settings(max_examples=60)
    @given(st.text("abcdefghijklmnop-", min_size=3, max_size=12), st.text(min_size=1, max_size=16))
    def isolation(name, secret):
        ident = Identity(f"u-{name}-{checked['n']}", "user", secret)
        flt.run(a.idm.add_identity(ident))
        flt.run(b.idm.add_identity(ident))  # same subject and secret on the other side
        token = flt.run(a.idm.issue_token(ident.subject_id, ident.secret)).value
        body = json.dumps({"value": token}).encode()
        assert http_post(a.idm.endpoint + "/v1/validate", body, {}) == 200
        for other in (b.idm, fed.fed_idm("A"), fed.fed_idm("B")):
            assert http_post(other.endpoint + "/v1/validate", body, {}) == 401
        checked["n"] += 1

    isolation()
    ok = forwarded_on_reject == 0 and counter_works and statuses["missing"] == {401} and statuses["deny"] == {403}
    verdict(capsys, 5, "security fail-closed", ok,
            f"statuses {({k: sorted(v) for k, v in statuses.items()})}, upstream requests on rejection "
            f"{forwarded_on_reject}, permitted control reached upstream={counter_works}; "
            f"{checked['n']} random identities isolated from domain B and both fedIdM replicas")


# -- 7 ---------------------------------------------------------------------------


async def test_c07_overhead_trend(capsys):
    base = WorkloadSpec(total_entities=1000)
    fed = await build_topology(base.with_(topology="federated-secured"))
    central = await build_topology(base.with_(topology="centralized"))
    try:
        await seed(fed)
        await seed(central)
        await fed.settle()
        reps = [await latency_ratio_series(fed, central, [1, 10, 100], seed=7 + r) for r in range(3)]
    finally:
        await fed.stop()
        await central.stop()
    ratios = [[round(p["ratio"], 2) for p in rep] for rep in reps]
    ok = all(non_increasing([p["ratio"] for p in rep], band=0.1) for rep in reps)
    verdict(capsys, 7, "overhead trend", ok, f"federated-secured/centralized p50 ratio at 1, 10, 100 entities: {ratios}")


# -- 8 ---------------------------------------------------------------------------


async def test_c08_multi_provider_benefit(capsys):
    delay = 0.05
    spec = WorkloadSpec(topology="multi-provider", providers=10, entities_each=100, service_delay=delay,
                        workers=1, clients=50, duration_seconds=30, warmup_seconds=5)
    topo = await build_topology(spec)
    transport = Transport("fanout-probe")
    try:
        await seed(topo)
        await topo.settle()
        spanning = list(range(0, 1000, 10))  # ten entities from every CM
        attrs = list(range(20))
        await timed_query(topo, spanning, attrs)
        fanout = []
        for _ in range(5):
            latency, body = await timed_query(topo, spanning, attrs)
            assert check_response(body, spanning, attrs)
            fanout.append(latency)
        direct = []
        for k, endpoint in enumerate(topo.provider_endpoints):
            q = QueryRequest((EntityRef(f"e-{k * 100}", "Sensor"),))
            t0 = time.perf_counter()
            await transport.post_json(endpoint + "/v1/queryContext", q)
            direct.append((time.perf_counter() - t0) * 1000)
        serial_bound = sum(direct)
    finally:
        await transport.close()
        await topo.stop()
    multi = await execute(spec, label="multi-provider")
    central = await execute(spec.with_(topology="centralized", providers=1, entities_each=None, total_entities=1000),
                            label="centralized")
    ok = (max(fanout) < 250 and serial_bound >= 500 and not multi.excluded and not central.excluded
          and multi.normalized_throughput >= central.normalized_throughput)
    verdict(capsys, 8, "multi-provider benefit", ok,
            f"10-CM query {statistics.median(fanout):.0f} ms median / {max(fanout):.0f} ms max vs serial bound "
            f"{serial_bound:.0f} ms; throughput at 50 clients {multi.normalized_throughput:.0f} vs "
            f"{central.normalized_throughput:.0f} entities/s ({multi.raw_throughput:.1f} vs "
            f"{central.raw_throughput:.1f} req/s; errors {multi.error_count} and {central.error_count})")


# -- 9 ---------------------------------------------------------------------------


async def test_c09_replication_convergence(capsys):
    rng = random.Random(99)
    replicas = [Discovery(domain=f"r{i}") for i in range(3)]
    for r in replicas:
        await r.start()
    for r in replicas:
        for other in replicas:
            if other is not r:
                r.replicator.add_peer(other.endpoint)
    latest: dict[str, Registration] = {}
    counts = {"register": 0, "update": 0, "tombstone": 0}
    try:
        for _ in range(100):
            live = [k for k, v in latest.items() if not v.is_tombstone]
            roll = rng.random()
            if not live or roll < 0.5:
                rid = f"reg-{len(latest):03d}"
                version, verb = 1, "register"
            else:
                rid = rng.choice(live)
                version, verb = latest[rid].version + 1, "update" if roll < 0.75 else "tombstone"
            etype = rng.choice(TYPES)
            reg = Registration(f"http://127.0.0.1:{8000 + rng.randrange(20)}", (EntityRef("*", etype, True),),
                               tuple(rng.sample(ATTRS, rng.randint(0, 2))), Scope(),
                               0 if verb == "tombstone" else 600, rid, version)
            latest[rid] = reg
            counts[verb] += 1
            await rng.choice(replicas).register(reg)
        for _ in range(3):
            for r in replicas:
                await r.replicator.drain()
        everything = QueryRequest((EntityRef("*", "*", True),))
        expected = {r.registration_id: r.version for r in latest.values() if not r.is_tombstone}
        oracle_ok = all({x.registration_id: x.version for x in r.discover(everything)} == expected for r in replicas)
        disagreements = 0
        for _ in range(50):
            q = QueryRequest((EntityRef(rng.choice(["*", "x-1"]), rng.choice((*TYPES, "*")), True),),
                             tuple(rng.sample(ATTRS, rng.randint(0, 2))))
            answers = [sorted(json.dumps(x.to_wire(), sort_keys=True) for x in r.discover(q)) for r in replicas]
            disagreements += any(ans != answers[0] for ans in answers)
    finally:
        for r in replicas:
            await r.stop()
    verdict(capsys, 9, "replication convergence", oracle_ok and disagreements == 0,
            f"{counts} across 3 replicas; 50 random queries, {disagreements} disagreements; "
            f"live set matches last-writer oracle={oracle_ok}")


# -- 10 --------------------------------------------------------------------------


async def test_c10_three_level_federation(capsys):
    users = [ALLOWED]

    def leaf(domain_id, *elements):
        return DomainSpec(domain_id, [ProviderSpec("cm1", elements=list(elements))], users=users)

    a1 = await assemble_domain(leaf("A1", car("a1-1", 11, TS)))
    a2 = await assemble_domain(leaf("A2", car("a2-1", 12, TS)))
    b1 = await assemble_domain(leaf("B1", car("b1-1", 21, TS), car("b1-2", 22, TS)))
    s1 = await stack_super_domain([a1, a2], DomainSpec("S1", [], users=users))
    s2 = await stack_super_domain([b1], DomainSpec("S2", [], users=users))
    fed = await assemble_federation([s1, s2])
    transport = Transport("leaf-app")
    try:
        token = await a1.credentials(ALLOWED.subject_id, transport).token()
        owner = b1.providers["cm1"]
        results = []
        for q in (QueryRequest((EntityRef("b1-1", "Car"),)),
                  QueryRequest((EntityRef("b1-*", "Car", True),), ("speed",))):
            via_levels = QueryResponse.from_wire(
                await transport.post_json(a1.broker_endpoint + "/v1/queryContext", q, token=token))
            direct = QueryResponse.from_wire(await transport.post_json(owner.endpoint + "/v1/queryContext", q))
            results.append((bool(direct.elements) and element_set(via_levels.elements) == element_set(direct.elements),
                            [e.entity.id for e in via_levels.elements]))
    finally:
        await transport.close()
        await fed.stop()
    verdict(capsys, 10, "three-level federation", all(ok for ok, _ in results),
            f"leaf A1 under S1 resolving entities owned by leaf B1 under S2: {results}")
