from __future__ import annotations

import asyncio
import random
import time

import pytest
from conftest import Sink, running

from liots.broker import Broker, BrokerConfig
from liots.context_manager import ContextManager
from liots.discovery import Discovery
from liots.errors import UnknownSubscription
from liots.model import (
    Attribute,
    ContextElement,
    EntityRef,
    Notification,
    QueryRequest,
    QueryResponse,
    Registration,
    Subscription,
    aggregate_responses,
    canonical_elements,
)


def el(eid, etype="Car", ts=None, **values):
    return ContextElement(EntityRef(eid, etype), tuple(Attribute.number(k, v, ts) for k, v in values.items()))


ALL_CARS = QueryRequest((EntityRef("*", "Car", True),))


async def _domain(n_cms: int, **cm_kwargs):
    disc = Discovery()
    await disc.start()
    cms = [ContextManager(announce_to=[disc.endpoint], **cm_kwargs) for _ in range(n_cms)]
    for cm in cms:
        await cm.start()
    broker = Broker(BrokerConfig(disc.endpoint))
    await broker.start()
    return disc, cms, broker


async def _stop(*services):
    for s in services:
        await s.stop()


async def _settle(*services):
    for _ in range(3):
        for s in services:
            await s.flush()
        await asyncio.sleep(0.01)


def test_config_validation():
    with pytest.raises(ValueError):
        BrokerConfig("http://h:1", fanout_timeout=0)
    with pytest.raises(ValueError):
        BrokerConfig("http://h:1", role="hub")
    cfg = BrokerConfig.from_dict({"discoveryEndpoint": "http://h:1", "role": "out-fed", "fanoutTimeout": 100})
    assert cfg.role == "out-fed" and cfg.fanout_timeout == 100 and cfg.max_concurrency == 32


async def test_union_of_two_providers_equals_direct_queries(client):
    disc, cms, broker = await _domain(2)
    try:
        await cms[0].publish([el("c1", speed=1), el("c2", speed=2)])
        await cms[1].publish([el("c3", speed=3)])
        await _settle(*cms)
        body = await client.post_json(broker.endpoint + "/v1/queryContext", ALL_CARS)
        direct = [QueryResponse.from_wire(await client.post_json(cm.endpoint + "/v1/queryContext", ALL_CARS))
                  for cm in cms]
        assert QueryResponse.from_wire(body) == aggregate_responses(direct)
        assert [e["entity"]["id"] for e in body["elements"]] == ["c1", "c2", "c3"]
    finally:
        await _stop(broker, *cms, disc)


async def test_down_provider_yields_partial_result_and_one_annotation():
    disc, cms, broker = await _domain(2)
    try:
        await cms[0].publish([el("c1", speed=1)])
        await cms[1].publish([el("c2", speed=2)])
        await _settle(*cms)
        await cms[1].stop()
        out = await broker.brokered_query(ALL_CARS)
        assert [e.entity.id for e in out.elements] == ["c1"]
        assert len(out.errors) == 1 and out.errors[0].provider.endswith(str(cms[1].port))
    finally:
        await _stop(broker, cms[0], disc)


async def test_zero_providers_is_empty_and_unreachable_discovery_is_502(client):
    async with running(Discovery()) as (disc,), running(Broker(BrokerConfig(disc.endpoint))) as (b,):
        assert (await b.brokered_query(ALL_CARS)).elements == ()
    async with running(Broker(BrokerConfig("http://127.0.0.1:1"))) as (b,):
        reply = await client.post(b.endpoint + "/v1/queryContext", ALL_CARS)
        assert reply.status == 502


async def test_fan_out_is_parallel():
    k, delay = 6, 0.1
    disc, cms, broker = await _domain(k, service_delay=delay)
    try:
        for i, cm in enumerate(cms):
            await cm.publish([el(f"c{i}", speed=i)])
        await _settle(*cms)
        t0 = time.monotonic()
        out = await broker.brokered_query(ALL_CARS)
        elapsed = time.monotonic() - t0
        assert len(out.elements) == k
        assert elapsed < k * delay / 2
    finally:
        await _stop(broker, *cms, disc)


async def test_slow_provider_times_out_without_hiding_others():
    disc = Discovery()
    fast, slow = ContextManager(announce_to=[]), ContextManager(service_delay=1.0)
    broker = Broker(BrokerConfig("", fanout_timeout=200))
    async with running(disc, fast, slow, broker):
        broker.config.discovery_endpoint = disc.endpoint
        await fast.publish([el("c1", speed=1)])
        await slow.publish([el("c2", speed=2)])
        for cm in (fast, slow):
            await disc.register(Registration(cm.endpoint, (EntityRef("*", "Car", True),)))
        out = await broker.brokered_query(ALL_CARS)
        assert [e.entity.id for e in out.elements] == ["c1"]
        assert [e.code for e in out.errors] == [504]


async def test_providers_deduplicated_by_normalized_endpoint():
    async with running(Discovery(), ContextManager()) as (disc, cm):
        await cm.publish([el("c1", speed=1)])
        for ep in (cm.endpoint, cm.endpoint + "/", cm.endpoint.upper().replace("HTTP", "http")):
            await disc.register(Registration(ep, (EntityRef("*", "Car", True),)))
        broker = Broker(BrokerConfig(disc.endpoint))
        async with running(broker):
            regs = await broker._discover(ALL_CARS)
            assert len(regs) == 3 and len(broker._providers(regs)) == 1


async def test_subscription_flow_end_to_end(sink):
    disc, cms, broker = await _domain(2)
    try:
        sub = Subscription("context", (EntityRef("*", "Car", True),), sink.endpoint + "/cb", ("speed",))
        await broker.brokered_subscribe(sub)
        await cms[0].publish([el("c1", speed=1, fuel=9)])
        await cms[1].publish([el("c2", speed=2)])
        notes = await sink.wait_for(2)
        await _settle(broker, disc, *cms)
        assert all(n["subscriptionId"] == sub.subscription_id for n in notes)
        got = sorted((e["entity"]["id"], tuple(a["name"] for a in e["attributes"])) for n in notes for e in n["elements"])
        assert ("c1", ("speed",)) in got and ("c2", ("speed",)) in got
        state = broker.states[sub.subscription_id]
        assert len(state.provider_sub_ids) == 2

        # each publish is forwarded exactly once per provider
        sink.received.clear()
        await cms[0].publish([el("c1", speed=5)])
        await cms[1].publish([el("c2", speed=6)])
        await sink.wait_for(2)
        await _settle(broker, *cms)
        assert len(sink.bodies()) == 2

        await broker.brokered_unsubscribe(sub.subscription_id)
        assert disc.store.avail_subs == {}
        assert all(cm.store.subscriptions == {} for cm in cms)
        sink.received.clear()
        await cms[0].publish([el("c1", speed=7)])
        await _settle(*cms)
        assert sink.bodies() == []
    finally:
        await _stop(broker, *cms, disc)


async def test_availability_handling_is_idempotent(sink):
    async with running(Discovery(), ContextManager(), ContextManager(), Broker(BrokerConfig(""))) as (d, a, b, broker):
        broker.config.discovery_endpoint = d.endpoint
        sub = Subscription("context", (EntityRef("*", "Car", True),), sink.endpoint + "/cb")
        await broker.brokered_subscribe(sub)
        state = broker.states[sub.subscription_id]
        reg_a = Registration(a.endpoint, (EntityRef("*", "Car", True),))
        reg_b = Registration(b.endpoint, (EntityRef("*", "Car", True),))
        await broker.handle_availability(state.availability_sub_id, [])
        assert state.provider_sub_ids == {}
        await broker.handle_availability(state.availability_sub_id, [reg_a, reg_b])
        assert len(state.provider_sub_ids) == 2
        before = dict(state.provider_sub_ids)
        await broker.handle_availability(state.availability_sub_id, [reg_a])
        assert state.provider_sub_ids == before
        assert len(a.store.subscriptions) == 1 and len(b.store.subscriptions) == 1


async def test_provider_notification_filtering_and_expiry():
    sink = await Sink().start()
    clock_now = [1000.0]
    broker = Broker(BrokerConfig(None), clock=lambda: clock_now[0])
    try:
        await broker.start()
        wanted = tuple(f"a{i}" for i in range(20))
        sub = Subscription("context", (EntityRef("*", "Car", True),), sink.endpoint + "/cb", wanted, ttl=10)
        await broker.brokered_subscribe(sub)
        state = broker.states[sub.subscription_id]
        state.provider_sub_ids["http://p:1"] = "psub"
        broker._by_provider_sub["psub"] = sub.subscription_id

        wide = ContextElement(EntityRef("c1", "Car"), tuple(Attribute.number(f"a{i}", i) for i in range(100)))
        assert await broker.handle_provider_notification(Notification("psub", (wide,)))
        (note,) = await sink.wait_for(1)
        assert {a["name"] for a in note["elements"][0]["attributes"]} == set(wanted)

        other = ContextElement(EntityRef("c1", "Car"), (Attribute.number("zzz", 1),))
        assert not await broker.handle_provider_notification(Notification("psub", (other,)))
        await broker.flush()
        assert len(sink.bodies()) == 1

        clock_now[0] += 11
        with pytest.raises(UnknownSubscription):
            await broker.handle_provider_notification(Notification("psub", (wide,)))
        with pytest.raises(UnknownSubscription):
            await broker.handle_provider_notification(Notification("nope", (wide,)))
    finally:
        await broker.stop()
        await sink.stop()


async def test_unknown_provider_notification_is_404(client):
    async with running(Broker(BrokerConfig(None))) as (b,):
        reply = await client.post(b.endpoint + "/v1/notifyContext", Notification("missing", ()))
        assert reply.status == 404


async def test_transparency_over_random_partitions():
    rng = random.Random(11)
    for _ in range(8):
        k = rng.randint(2, 4)
        disc, cms, broker = await _domain(k, announce="entity")
        try:
            elements = [el(f"c{i}", ts=1000 + i, speed=rng.randint(0, 9), fuel=rng.randint(0, 9)) for i in range(rng.randint(5, 40))]
            union = ContextManager()
            await union.publish(elements)
            for i, e in enumerate(elements):
                await cms[i % k].publish([e])
            await _settle(*cms)
            for _ in range(5):
                ids = rng.sample(range(len(elements)), rng.randint(1, len(elements)))
                query = QueryRequest(tuple(EntityRef(f"c{i}", "Car") for i in ids), tuple(rng.sample(["speed", "fuel"], 1)))
                got = await broker.brokered_query(query)
                assert canonical_elements(got.elements) == canonical_elements(union.query(query).elements)
        finally:
            await _stop(broker, *cms, disc)
