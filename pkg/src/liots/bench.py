"""Load generator and metrics for comparing deployment topologies.

Topologies:

* ``centralized``: one context manager holding every entity, queried directly;
* ``federated-unsecured`` / ``federated-secured``: two federated domains, the
  data in domain A and the client querying domain B's broker;
* ``multi-provider``: one domain whose broker fans out to ``providers`` context
  managers holding disjoint slices of the entities.
"""

from __future__ import annotations

import asyncio
import csv
import itertools
import json
import math
import random
import statistics
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, ClassVar

from .context_manager import ContextManager
from .errors import ExcludedRun, LiotsError, MalformedRequest
from .federation import (
    Domain,
    DomainSpec,
    Federation,
    ProviderSpec,
    assemble_domain,
    assemble_federation,
    settle,
)
from .model import Attribute, ContextElement, EntityRef, QueryRequest
from .security import Identity
from .service import CredentialToken, Transport

TOPOLOGIES = ("centralized", "federated-unsecured", "federated-secured", "multi-provider")
ENTITY_TYPE = "Sensor"
BENCH_USER = Identity("bench-client", "user", "bench-secret")


@dataclass
class WorkloadSpec:
    total_entities: int = 1000
    attributes_per_entity: int = 100
    attributes_per_query: int = 20
    max_entities_per_query: int | None = None
    entities_per_query: int | None = None  # fixed size instead of uniform draw
    clients: int = 20
    duration_seconds: float = 60.0
    warmup_seconds: float = 10.0
    topology: str = "centralized"
    providers: int = 1
    entities_each: int | None = None
    service_delay: float = 0.0
    workers: int | None = None
    seed: int = 1
    oracle_sample: float = 0.01

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise MalformedRequest(f"unknown topology {self.topology!r}")
        if self.attributes_per_query > self.attributes_per_entity:
            raise MalformedRequest("attributesPerQuery must not exceed attributesPerEntity")
        if self.topology == "multi-provider":
            if self.entities_each is None:
                self.entities_each = math.ceil(self.total_entities / self.providers)
            self.total_entities = self.providers * self.entities_each
        if self.total_entities < 1 or self.clients < 1:
            raise MalformedRequest("totalEntities and clients must be positive")

    @property
    def query_size_bound(self) -> int:
        return self.max_entities_per_query or min(100, self.total_entities)

    _WIRE: ClassVar[dict[str, str]] = {
        "totalEntities": "total_entities", "attributesPerEntity": "attributes_per_entity",
        "attributesPerQuery": "attributes_per_query", "maxEntitiesPerQuery": "max_entities_per_query",
        "entitiesPerQuery": "entities_per_query", "clients": "clients",
        "durationSeconds": "duration_seconds", "warmupSeconds": "warmup_seconds",
        "topology": "topology", "providers": "providers", "entitiesEach": "entities_each",
        "serviceDelay": "service_delay", "workers": "workers", "seed": "seed",
        "oracleSample": "oracle_sample",
    }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> WorkloadSpec:
        unknown = set(data) - set(cls._WIRE)
        if unknown:
            raise MalformedRequest(f"unknown workload fields {sorted(unknown)}")
        return cls(**{cls._WIRE[k]: v for k, v in data.items()})

    def to_dict(self) -> dict:
        return {wire: getattr(self, attr) for wire, attr in self._WIRE.items()}

    def with_(self, **changes) -> WorkloadSpec:
        data = asdict(self)
        data.update(changes)
        if "total_entities" in changes and self.topology == "multi-provider" and "entities_each" not in changes:
            data["entities_each"] = None
        return WorkloadSpec(**data)


# -- seed data -----------------------------------------------------------------


def entity_id(i: int) -> str:
    return f"e-{i}"


def attribute_name(j: int) -> str:
    return f"a-{j}"


def seed_values(seed: int, i: int, attributes: int) -> list[float]:
    rng = random.Random(f"{seed}:{i}")
    return [round(rng.uniform(0, 100), 6) for _ in range(attributes)]


def seed_element(seed: int, i: int, attributes: int) -> ContextElement:
    values = seed_values(seed, i, attributes)
    return ContextElement(
        EntityRef(entity_id(i), ENTITY_TYPE),
        tuple(Attribute.number(attribute_name(j), v, 0) for j, v in enumerate(values)),
    )


def partition(total: int, parts: int) -> list[range]:
    """Contiguous disjoint slices covering ``range(total)``."""
    each, extra = divmod(total, parts)
    out, start = [], 0
    for p in range(parts):
        size = each + (p < extra)
        out.append(range(start, start + size))
        start += size
    return out


# -- topologies ------------------------------------------------------------------


@dataclass
class Topology:
    spec: WorkloadSpec
    query_endpoint: str
    provider_endpoints: list[str]
    publish_token: Any = None
    client_token: Any = None
    services: list = field(default_factory=list)
    domains: list[Domain] = field(default_factory=list)
    federation: Federation | None = None

    async def settle(self) -> None:
        if self.federation is not None:
            await self.federation.settle(30)
        elif self.domains:
            await settle(self.domains[0].all_services(), 30)

    async def stop(self) -> None:
        for tok in (self.publish_token, self.client_token):
            if isinstance(tok, CredentialToken):
                await tok.transport.close()
        if self.federation is not None:
            await self.federation.stop()
        for d in self.domains if self.federation is None else ():
            await d.stop()
        for svc in self.services:
            await svc.stop()


async def build_topology(spec: WorkloadSpec) -> Topology:
    provider = {"service_delay": spec.service_delay, "workers": spec.workers}
    if spec.topology == "centralized":
        cm = ContextManager(name="central-cm", **provider)
        await cm.start()
        return Topology(spec, cm.endpoint, [cm.endpoint], services=[cm])
    if spec.topology == "multi-provider":
        providers = [ProviderSpec(f"cm{k}", announce="entity", **provider) for k in range(spec.providers)]
        d = await assemble_domain(DomainSpec("M", providers, secured=False))
        return Topology(spec, d.broker_endpoint, [d.provider_endpoint(p.name) for p in providers], domains=[d])
    secured = spec.topology == "federated-secured"
    users = [BENCH_USER] if secured else []
    a = await assemble_domain(DomainSpec("A", [ProviderSpec("cm", **provider)], secured=secured, users=users))
    b = await assemble_domain(DomainSpec("B", [], secured=secured, users=users))
    fed = await assemble_federation([a, b])
    topo = Topology(spec, b.broker_endpoint, [a.provider_endpoint("cm")], domains=[a, b], federation=fed)
    if secured:
        topo.publish_token = a.credentials(BENCH_USER.subject_id)
        topo.client_token = b.credentials(BENCH_USER.subject_id)
    return topo


async def seed(topo: Topology, batch: int = 100) -> None:
    """Publish the deterministic data set; any failed publish raises."""
    spec = topo.spec
    slices = partition(spec.total_entities, len(topo.provider_endpoints))
    transport = Transport("bench-seed")
    try:
        token = await topo.publish_token.token() if topo.publish_token else None
        for endpoint, rows in zip(topo.provider_endpoints, slices):
            for start in range(rows.start, rows.stop, batch):
                elements = [seed_element(spec.seed, i, spec.attributes_per_entity).to_wire()
                            for i in range(start, min(start + batch, rows.stop))]
                await transport.post_json(endpoint + "/v1/updateContext", {"elements": elements}, token=token)
    finally:
        await transport.close()
    await topo.settle()


# -- measurement ---------------------------------------------------------------


def _percentile(ordered: Sequence[float], p: int) -> float:
    """Linear interpolation between closest ranks, clamped to the bracketing
    samples so float rounding cannot break p50 <= p90 <= p99."""
    pos = (len(ordered) - 1) * p / 100
    j = math.floor(pos)
    if j + 1 >= len(ordered):
        return ordered[-1]
    lo, hi = ordered[j], ordered[j + 1]
    return min(max(lo + (hi - lo) * (pos - j), lo), hi)


@dataclass
class RunMetrics:
    request_count: int
    error_count: int
    p50: float
    p90: float
    p99: float
    mean: float
    raw_throughput: float
    normalized_throughput: float
    entities_returned_total: int
    elapsed_seconds: float
    excluded: bool
    seed: int | None = None
    label: str = ""
    oracle_checked: int = 0
    oracle_mismatches: int = 0

    @classmethod
    def from_samples(cls, latencies_ms: Sequence[float], entities_returned: Sequence[int],
                     error_count: int, elapsed_seconds: float, *, seed: int | None = None,
                     label: str = "") -> RunMetrics:
        """``latencies_ms`` and ``entities_returned`` describe successful
        requests only; ``error_count`` counts the failed ones."""
        if elapsed_seconds <= 0:
            raise ValueError("elapsed time must be positive")
        ok = len(latencies_ms)
        total = int(sum(entities_returned))
        if ok:
            lat = sorted(latencies_ms)
            p50, p90, p99 = (_percentile(lat, p) for p in (50, 90, 99))
            mean = math.fsum(lat) / ok
        else:
            p50 = p90 = p99 = mean = float("nan")
        return cls(
            request_count=ok + error_count, error_count=error_count, p50=p50, p90=p90, p99=p99,
            mean=mean, raw_throughput=(ok + error_count) / elapsed_seconds,
            normalized_throughput=total / elapsed_seconds, entities_returned_total=total,
            elapsed_seconds=elapsed_seconds, excluded=error_count > 0 or ok == 0, seed=seed, label=label,
        )

    def to_dict(self) -> dict:
        return {
            "label": self.label, "requestCount": self.request_count, "errorCount": self.error_count,
            "latencyMs": {"p50": self.p50, "p90": self.p90, "p99": self.p99, "mean": self.mean},
            "rawThroughput": self.raw_throughput, "normalizedThroughput": self.normalized_throughput,
            "entitiesReturnedTotal": self.entities_returned_total, "elapsedSeconds": self.elapsed_seconds,
            "excluded": self.excluded, "seed": self.seed,
            "oracleChecked": self.oracle_checked, "oracleMismatches": self.oracle_mismatches,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunMetrics:
        lat = data["latencyMs"]
        return cls(data["requestCount"], data["errorCount"], lat["p50"], lat["p90"], lat["p99"], lat["mean"],
                   data["rawThroughput"], data["normalizedThroughput"], data["entitiesReturnedTotal"],
                   data["elapsedSeconds"], data["excluded"], data.get("seed"), data.get("label", ""),
                   data.get("oracleChecked", 0), data.get("oracleMismatches", 0))


@dataclass
class _ClientTally:
    latencies: list[float] = field(default_factory=list)
    entities: list[int] = field(default_factory=list)
    errors: int = 0
    checked: int = 0
    mismatches: int = 0


def query_plan(spec: WorkloadSpec, client: int) -> Iterable[tuple[list[int], list[int]]]:
    """Endless deterministic sequence of (entity indices, attribute indices)."""
    rng = random.Random(f"{spec.seed}:{client}")
    while True:
        n = spec.entities_per_query or rng.randint(1, spec.query_size_bound)
        ids = rng.sample(range(spec.total_entities), min(n, spec.total_entities))
        attrs = rng.sample(range(spec.attributes_per_entity), spec.attributes_per_query)
        yield ids, attrs


def make_query(ids: Sequence[int], attrs: Sequence[int]) -> QueryRequest:
    return QueryRequest(tuple(EntityRef(entity_id(i), ENTITY_TYPE) for i in ids),
                        tuple(attribute_name(j) for j in attrs))


def check_response(body: Any, ids: Sequence[int], attrs: Sequence[int]) -> bool:
    """Shape check applied to every response."""
    if not isinstance(body, dict) or body.get("errors"):
        return False
    elements = body.get("elements")
    if not isinstance(elements, list) or len(elements) != len(ids):
        return False
    return all(len(e.get("attributes", ())) == len(attrs) for e in elements)


def oracle_matches(spec: WorkloadSpec, body: dict, ids: Sequence[int], attrs: Sequence[int]) -> bool:
    """Compare values against the ones regenerated from the seed."""
    expected = {}
    for i in ids:
        values = seed_values(spec.seed, i, spec.attributes_per_entity)
        expected[entity_id(i)] = {attribute_name(j): values[j] for j in attrs}
    got = {e["entity"]["id"]: {a["name"]: a["value"] for a in e["attributes"]} for e in body["elements"]}
    return got == expected


async def run_workload(topo: Topology, spec: WorkloadSpec | None = None, label: str = "") -> RunMetrics:
    """Drive ``clients`` concurrent query loops and summarize the measured window."""
    spec = spec or topo.spec
    loop = asyncio.get_running_loop()
    transport = Transport("bench-client", limit=max(spec.clients * 2, 16), timeout=60)
    token = await topo.client_token.token() if topo.client_token else None
    start = loop.time()
    measure_from = start + spec.warmup_seconds
    stop_at = measure_from + spec.duration_seconds
    url = topo.query_endpoint + "/v1/queryContext"

    async def client(index: int) -> _ClientTally:
        tally = _ClientTally()
        check_rng = random.Random(f"{spec.seed}:oracle:{index}")
        for ids, attrs in query_plan(spec, index):
            t0 = loop.time()
            if t0 >= stop_at:
                break
            try:
                reply = await transport.post(url, make_query(ids, attrs), token=token)
                body = reply.json() if reply.ok else None
                ok = reply.ok and check_response(body, ids, attrs)
            except (LiotsError, ValueError, KeyError, TypeError):
                ok, body = False, None
            t1 = loop.time()
            # a request counts when it completes inside the measured window
            if not measure_from <= t1 <= stop_at:
                continue
            if not ok:
                tally.errors += 1
                continue
            tally.latencies.append((t1 - t0) * 1000)
            tally.entities.append(len(ids))
            if check_rng.random() < spec.oracle_sample:
                tally.checked += 1
                tally.mismatches += not oracle_matches(spec, body, ids, attrs)
        return tally

    try:
        tallies = await asyncio.gather(*(client(c) for c in range(spec.clients)))
    finally:
        await transport.close()
    # merged only after every client finished
    latencies = [x for t in tallies for x in t.latencies]
    entities = [x for t in tallies for x in t.entities]
    errors = sum(t.errors for t in tallies)
    metrics = RunMetrics.from_samples(latencies, entities, errors, spec.duration_seconds,
                                      seed=spec.seed, label=label or spec.topology)
    metrics.oracle_checked = sum(t.checked for t in tallies)
    metrics.oracle_mismatches = sum(t.mismatches for t in tallies)
    if metrics.oracle_mismatches:
        metrics.excluded = True
    return metrics


async def timed_query(topo: Topology, ids: Sequence[int], attrs: Sequence[int]) -> tuple[float, Any]:
    """One query; returns (latency ms, decoded body)."""
    transport = Transport("bench-probe")
    try:
        token = await topo.client_token.token() if topo.client_token else None
        t0 = time.perf_counter()
        body = await transport.post_json(topo.query_endpoint + "/v1/queryContext", make_query(ids, attrs),
                                         token=token)
        return (time.perf_counter() - t0) * 1000, body
    finally:
        await transport.close()


async def latency_ratio_series(a: Topology, b: Topology, sizes: Sequence[int], *, samples: int = 40,
                               seed: int = 7, warmup: int = 5) -> list[dict]:
    """Median single-client latency of ``a`` over ``b`` per query size.

    Both topologies must hold the same seeded data.  Probes alternate
    between them so slow drift affects both sides alike.
    """
    rng = random.Random(seed)
    spec = a.spec
    transports = {id(a): Transport("probe-a"), id(b): Transport("probe-b")}
    tokens = {id(t): (await t.client_token.token() if t.client_token else None) for t in (a, b)}

    async def once(topo: Topology, ids, attrs) -> float:
        t0 = time.perf_counter()
        body = await transports[id(topo)].post_json(topo.query_endpoint + "/v1/queryContext",
                                                   make_query(ids, attrs), token=tokens[id(topo)])
        elapsed = (time.perf_counter() - t0) * 1000
        if not check_response(body, ids, attrs):
            raise AssertionError(f"malformed response from {topo.spec.topology}")
        return elapsed

    out = []
    try:
        for n in sizes:
            lat_a, lat_b = [], []
            for k in range(warmup + samples):
                ids = rng.sample(range(spec.total_entities), n)
                attrs = rng.sample(range(spec.attributes_per_entity), spec.attributes_per_query)
                first, second = (a, b) if k % 2 == 0 else (b, a)
                x = await once(first, ids, attrs)
                y = await once(second, ids, attrs)
                if k >= warmup:
                    (lat_a if first is a else lat_b).append(x)
                    (lat_b if first is a else lat_a).append(y)
            ma, mb = statistics.median(lat_a), statistics.median(lat_b)
            out.append({"x": n, "a": ma, "b": mb, "ratio": ma / mb})
    finally:
        for t in transports.values():
            await t.close()
    return out


async def execute(spec: WorkloadSpec, label: str = "") -> RunMetrics:
    """Build, seed, measure and tear down one topology."""
    topo = await build_topology(spec)
    try:
        await seed(topo)
        return await run_workload(topo, label=label)
    finally:
        await topo.stop()


# -- comparison ----------------------------------------------------------------

_LATENCY_KEYS = ("p50", "p90", "p99", "mean")


def _ratio(a: float, b: float) -> float:
    if a == b:
        return 1.0
    return a / b if b else float("inf")


def compare_runs(a: RunMetrics, b: RunMetrics) -> dict:
    """Overhead of ``a`` relative to ``b`` plus a verdict per metric."""
    for run in (a, b):
        if run.excluded:
            raise ExcludedRun(f"run {run.label or '?'} is excluded (errors or no successes)")
    latency = {k: _ratio(getattr(a, k), getattr(b, k)) for k in _LATENCY_KEYS}
    throughput = {"raw": _ratio(a.raw_throughput, b.raw_throughput),
                  "normalized": _ratio(a.normalized_throughput, b.normalized_throughput)}
    verdicts = []
    for k in _LATENCY_KEYS:
        va, vb = getattr(a, k), getattr(b, k)
        verdicts.append({"metric": f"latency.{k}", "a": va, "b": vb, "ratio": latency[k],
                         "better": "equal" if va == vb else ("a" if va < vb else "b")})
    for k, attr in (("raw", "raw_throughput"), ("normalized", "normalized_throughput")):
        va, vb = getattr(a, attr), getattr(b, attr)
        verdicts.append({"metric": f"throughput.{k}", "a": va, "b": vb, "ratio": throughput[k],
                         "better": "equal" if va == vb else ("a" if va > vb else "b")})
    return {"a": a.label, "b": b.label, "latencyRatio": latency, "throughputRatio": throughput,
            "verdicts": verdicts}


def trend_series(points: Iterable[tuple[float, RunMetrics, RunMetrics]], metric: str = "p50") -> list[dict]:
    """Latency ratio a/b at each x (e.g. entities per query)."""
    return [{"x": x, "ratio": compare_runs(a, b)["latencyRatio"][metric]} for x, a, b in sorted(points, key=lambda p: p[0])]


def non_increasing(values: Sequence[float], band: float = 0.1) -> bool:
    """Each value at most ``band`` (relative) above its predecessor."""
    return all(later <= earlier * (1 + band) for earlier, later in itertools.pairwise(values))


# -- sweeps and output ---------------------------------------------------------


def sweep_specs(base: WorkloadSpec, entity_counts: Sequence[int], topologies: Sequence[str],
                client_counts: Sequence[int]) -> list[WorkloadSpec]:
    out = []
    for topology in topologies:
        for n in entity_counts:
            for c in client_counts:
                out.append(base.with_(topology=topology, total_entities=n, clients=c))
    return out


async def sweep(base: WorkloadSpec, entity_counts: Sequence[int], topologies: Sequence[str],
                client_counts: Sequence[int]) -> list[tuple[WorkloadSpec, RunMetrics]]:
    results = []
    for spec in sweep_specs(base, entity_counts, topologies, client_counts):
        label = f"{spec.topology}/n={spec.total_entities}/c={spec.clients}"
        results.append((spec, await execute(spec, label)))
    return results


CSV_FIELDS = ("label", "topology", "totalEntities", "clients", "requestCount", "errorCount", "p50", "p90",
              "p99", "mean", "rawThroughput", "normalizedThroughput", "entitiesReturnedTotal",
              "elapsedSeconds", "excluded", "seed")


def write_results(out_dir: str | Path, results: Sequence[tuple[WorkloadSpec, RunMetrics]]) -> tuple[Path, Path]:
    """Append one JSON line per run and rewrite the CSV summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonl, csv_path = out / "runs.jsonl", out / "summary.csv"
    with jsonl.open("a", encoding="utf-8") as fh:
        for spec, m in results:
            fh.write(json.dumps({"workload": spec.to_dict(), "metrics": m.to_dict()}, sort_keys=True) + "\n")
    rows = []
    for line in jsonl.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        w, m = rec["workload"], rec["metrics"]
        rows.append({
            "label": m["label"], "topology": w["topology"], "totalEntities": w["totalEntities"],
            "clients": w["clients"], "requestCount": m["requestCount"], "errorCount": m["errorCount"],
            **m["latencyMs"], "rawThroughput": m["rawThroughput"],
            "normalizedThroughput": m["normalizedThroughput"],
            "entitiesReturnedTotal": m["entitiesReturnedTotal"], "elapsedSeconds": m["elapsedSeconds"],
            "excluded": m["excluded"], "seed": m["seed"],
        })
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return jsonl, csv_path


def read_runs(path: str | Path) -> list[tuple[WorkloadSpec, RunMetrics]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append((WorkloadSpec.from_dict(rec["workload"]), RunMetrics.from_dict(rec["metrics"])))
    return out


def plot_runs(runs: Sequence[tuple[WorkloadSpec, RunMetrics]], out_path: str | Path) -> Path:
    """SVG of p50 latency and normalized throughput against entity count,
    one line per topology and client count; excluded runs are omitted."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - optional extra
        raise RuntimeError("plotting needs matplotlib (pip install artifact[plot])") from exc
    series: dict[str, list[tuple[int, RunMetrics]]] = {}
    for spec, m in runs:
        if not m.excluded:
            series.setdefault(f"{spec.topology} c={spec.clients}", []).append((spec.total_entities, m))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for name, pts in sorted(series.items()):
        pts.sort(key=lambda p: p[0])
        xs = [p[0] for p in pts]
        ax1.plot(xs, [p[1].p50 for p in pts], marker="o", label=name)
        ax2.plot(xs, [p[1].normalized_throughput for p in pts], marker="o", label=name)
    for ax, title in ((ax1, "p50 latency (ms)"), (ax2, "entities / s")):
        ax.set_xscale("log")
        ax.set_xlabel("total entities")
        ax.set_title(title)
    ax1.legend(fontsize="small")
    out = Path(out_path)
    fig.tight_layout()
    fig.savefig(out, format="svg")
    plt.close(fig)
    return out
