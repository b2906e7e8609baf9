from __future__ import annotations

import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liots.bench import (
    RunMetrics,
    WorkloadSpec,
    build_topology,
    check_response,
    compare_runs,
    entity_id,
    non_increasing,
    oracle_matches,
    partition,
    plot_runs,
    query_plan,
    read_runs,
    run_workload,
    seed,
    seed_element,
    sweep_specs,
    timed_query,
    trend_series,
    write_results,
)
from liots.errors import ExcludedRun, MalformedRequest
from liots.model import EntityRef, QueryRequest


def test_workload_spec_defaults_and_validation():
    spec = WorkloadSpec()
    assert (spec.attributes_per_entity, spec.attributes_per_query) == (100, 20)
    assert (spec.warmup_seconds, spec.duration_seconds) == (10.0, 60.0)
    assert WorkloadSpec(total_entities=30).query_size_bound == 30
    with pytest.raises(MalformedRequest):
        WorkloadSpec(attributes_per_query=101)
    with pytest.raises(MalformedRequest):
        WorkloadSpec(topology="mesh")
    with pytest.raises(MalformedRequest):
        WorkloadSpec.from_dict({"entityCount": 5})
    multi = WorkloadSpec.from_dict({"topology": "multi-provider", "providers": 10, "entitiesEach": 1000})
    assert multi.total_entities == 10_000
    assert WorkloadSpec.from_dict(multi.to_dict()) == multi


def test_seed_is_deterministic():
    assert seed_element(1, 42, 100) == seed_element(1, 42, 100)
    assert seed_element(1, 42, 100).to_wire() != seed_element(2, 42, 100).to_wire()
    assert len(seed_element(1, 0, 100).attributes) == 100


@given(st.integers(1, 5000), st.integers(1, 20))
def test_partition_is_disjoint_and_covering(total, parts):
    slices = partition(total, parts)
    flat = [i for s in slices for i in s]
    assert flat == list(range(total))
    assert max(len(s) for s in slices) - min(len(s) for s in slices) <= 1


def test_query_plan_is_deterministic_per_client():
    spec = WorkloadSpec(total_entities=500, seed=9)
    first = list(itertools.islice(query_plan(spec, 3), 20))
    assert first == list(itertools.islice(query_plan(spec, 3), 20))
    assert first != list(itertools.islice(query_plan(spec, 4), 20))
    for ids, attrs in first:
        assert 1 <= len(ids) <= 100 and len(set(ids)) == len(ids) and len(attrs) == 20


@settings(max_examples=200)
@given(st.lists(st.floats(0.1, 5000), max_size=50), st.integers(0, 5), st.floats(0.5, 120))
def test_metrics_arithmetic(latencies, errors, elapsed):
    entities = [int(x) % 100 + 1 for x in latencies]
    m = RunMetrics.from_samples(latencies, entities, errors, elapsed)
    assert m.request_count == len(latencies) + errors
    assert m.entities_returned_total == sum(entities)
    assert m.normalized_throughput * elapsed == pytest.approx(m.entities_returned_total, rel=1e-12)
    assert m.excluded == (errors > 0 or not latencies)
    if latencies:
        assert min(latencies) <= m.p50 <= m.p90 <= m.p99 <= max(latencies)


def test_metrics_round_trip_and_zero_success():
    m = RunMetrics.from_samples([], [], 0, 1.0)
    assert m.excluded and math.isnan(m.p50)
    ok = RunMetrics.from_samples([10, 20, 30], [5, 5, 5], 0, 3.0, label="x")
    assert RunMetrics.from_dict(ok.to_dict()) == ok
    with pytest.raises(ValueError):
        RunMetrics.from_samples([1], [1], 0, 0)
    ranks = RunMetrics.from_samples([float(x) for x in range(1, 102)], [1] * 101, 0, 1.0)
    assert (ranks.p50, ranks.p90, ranks.p99, ranks.mean) == (51.0, 91.0, 100.0, 51.0)


def test_compare_identical_and_excluded_runs():
    a = RunMetrics.from_samples([10, 20, 30], [5, 5, 5], 0, 3.0, label="a")
    report = compare_runs(a, a)
    assert set(report["latencyRatio"].values()) == {1.0}
    assert set(report["throughputRatio"].values()) == {1.0}
    assert all(v["better"] == "equal" for v in report["verdicts"])
    bad = RunMetrics.from_samples([10], [5], 1, 3.0, label="bad")
    with pytest.raises(ExcludedRun):
        compare_runs(a, bad)
    slow = RunMetrics.from_samples([20, 40, 60], [5, 5, 5], 0, 3.0)
    series = trend_series([(10, slow, a), (1, a, a)])
    assert [p["x"] for p in series] == [1, 10] and series[1]["ratio"] == pytest.approx(2.0)


def test_non_increasing_band():
    assert non_increasing([3.0, 2.0, 2.1, 1.0])
    assert not non_increasing([2.0, 2.3])
    assert non_increasing([2.0, 2.19]) and non_increasing([])


def test_response_checks():
    spec = WorkloadSpec(total_entities=5, attributes_per_entity=4, attributes_per_query=2)
    el = seed_element(spec.seed, 3, 4)
    body = {"elements": [{"entity": {"id": entity_id(3), "type": "Sensor"},
                          "attributes": [a.to_wire() for a in el.attributes[:2]]}]}
    assert check_response(body, [3], [0, 1]) and oracle_matches(spec, body, [3], [0, 1])
    assert not oracle_matches(spec, body, [3], [1, 2])
    assert not check_response({"elements": [], "errors": [{"code": 502}]}, [], [0, 1])
    assert not check_response(body, [3, 4], [0, 1])


def test_sweep_and_output_files(tmp_path):
    base = WorkloadSpec(duration_seconds=1, warmup_seconds=0)
    specs = sweep_specs(base, [100, 1000], ["centralized", "federated-secured"], [20, 100])
    assert len(specs) == 8 and {s.clients for s in specs} == {20, 100}
    runs = [(s, RunMetrics.from_samples([5.0 + i], [10], 0, 1.0, label=f"r{i}")) for i, s in enumerate(specs)]
    jsonl, csv_path = write_results(tmp_path, runs)
    assert read_runs(jsonl) == runs
    assert csv_path.read_text().count("\n") == 9
    svg = plot_runs(runs, tmp_path / "runs.svg")
    assert svg.read_text().lstrip().startswith("<?xml")


async def test_centralized_seed_and_short_run():
    spec = WorkloadSpec(total_entities=100, clients=2, duration_seconds=0.5, warmup_seconds=0.1,
                        oracle_sample=1.0)
    topo = await build_topology(spec)
    try:
        await seed(topo)
        cm = topo.services[0]
        (e42,) = cm.query(QueryRequest((EntityRef("e-42", "Sensor"),))).elements
        assert len(e42.attributes) == 100
        latency, body = await timed_query(topo, [1, 2], [0, 5])
        assert latency > 0 and check_response(body, [1, 2], [0, 5])
        m = await run_workload(topo)
        assert m.request_count > 0 and not m.excluded
        assert m.oracle_checked == m.request_count and m.oracle_mismatches == 0
    finally:
        await topo.stop()


async def test_multi_provider_seed_partitions_disjointly():
    spec = WorkloadSpec(topology="multi-provider", providers=4, entities_each=25)
    topo = await build_topology(spec)
    try:
        await seed(topo)
        cms = list(topo.domains[0].providers.values())
        held = [{e.entity.id for e in cm.store.query(QueryRequest((EntityRef("*", "Sensor", True),)))}
                for cm in cms]
        assert [len(h) for h in held] == [25] * 4
        assert len(set().union(*held)) == 100
        _, body = await timed_query(topo, [0, 30, 99], [1])
        assert check_response(body, [0, 30, 99], [1])
    finally:
        await topo.stop()
