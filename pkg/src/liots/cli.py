"""``liots`` command line: run services, domains, federations and benchmarks."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import subprocess
import sys
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import bench
from .broker import Broker, BrokerConfig
from .context_manager import ContextManager
from .discovery import Discovery
from .errors import LiotsError
from .federation import DomainSpec, assemble_domain, assemble_from_document
from .registrar import IoTRegistrar, load_region_table
from .security import Identity, IdentityManager, Policy, PolicyDecisionPoint, PolicyEnforcementPoint
from .service import Transport

log = logging.getLogger("liots")

SERVICE_KINDS = ("context-manager", "discovery", "broker", "iot-registrar", "idm", "pdp", "pep")


def _read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def build_service(kind: str, cfg: dict, host: str, port: int):
    """One service from a camelCase JSON config."""
    common = {"host": host, "port": port, "name": cfg.get("name", kind)}
    peers = cfg.get("peers", [])
    if kind == "context-manager":
        return ContextManager(announce_to=cfg.get("announceTo", []), announce=cfg.get("announce", "type"),
                              registration_ttl=cfg.get("registrationTtl", 300),
                              service_delay=cfg.get("serviceDelay", 0.0), workers=cfg.get("workers"),
                              exposed_endpoint=cfg.get("exposedEndpoint"), snapshot_path=cfg.get("snapshotPath"),
                              **common)
    if kind == "discovery":
        return Discovery(peers=peers, domain=cfg.get("domain", ""), **common)
    if kind == "broker":
        return Broker(BrokerConfig.from_dict(cfg), **common)
    if kind == "iot-registrar":
        return IoTRegistrar(in_fed_b_endpoint=cfg["inFedBEndpoint"], fed_discovery=cfg.get("fedDiscovery"),
                            id_discovery=cfg.get("idDiscovery"), directive_path=cfg.get("directivePath"),
                            region_table=load_region_table(cfg["regionTablePath"]) if cfg.get("regionTablePath")
                            else (), ttl=cfg.get("ttl", 300), exposed_endpoint=cfg.get("exposedEndpoint"),
                            **common)
    if kind == "idm":
        return IdentityManager(identities=[Identity.from_wire(i) for i in cfg.get("identities", [])],
                               token_ttl=cfg.get("tokenTtl", 3600), peers=peers, domain=cfg.get("domain", ""),
                               **common)
    if kind == "pdp":
        return PolicyDecisionPoint(policies=[Policy.from_wire(p) for p in cfg.get("policies", [])], peers=peers,
                                   domain=cfg.get("domain", ""), **common)
    if kind == "pep":
        return PolicyEnforcementPoint(upstream=cfg["upstream"], idm=cfg["idm"], pdp=cfg["pdp"],
                                      allowed_paths=cfg.get("allowedPaths"), **common)
    raise SystemExit(f"unknown service kind {kind!r}")


async def _run_until_signalled(on_ready, cleanup) -> None:
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    try:
        await on_ready()
        await stop.wait()
    finally:
        await cleanup()


def _write_status(path: str | None, status: dict) -> None:
    text = json.dumps(status, indent=2, sort_keys=True)
    if path:
        tmp = Path(path).with_suffix(".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)
    print(text, flush=True)


def domain_status(domain) -> dict:
    out = {"domainId": domain.id, "services": {k: s.endpoint for k, s in domain.services.items()},
           "brokerEndpoint": domain.broker_endpoint}
    if domain.children:
        out["children"] = [domain_status(c) for c in domain.children]
    return out


def _detach(argv: Sequence[str], status_file: str, timeout: float = 60.0) -> int:
    """Re-run this command in the background and wait for its status file."""
    Path(status_file).unlink(missing_ok=True)
    args = [sys.executable, "-m", "liots", *[a for a in argv if a != "--detached"]]
    if "--status-file" not in argv:
        args += ["--status-file", status_file]
    log_path = Path(status_file).with_suffix(".log")
    with open(log_path, "ab") as fh:
        proc = subprocess.Popen(args, stdout=fh, stderr=subprocess.STDOUT, start_new_session=True)
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if Path(status_file).exists():
            print(Path(status_file).read_text(encoding="utf-8"))
            return 0
        if proc.poll() is not None:
            print(f"background process exited with {proc.returncode}; see {log_path}", file=sys.stderr)
            return 1
        time.sleep(0.1)
    proc.terminate()
    print("timed out waiting for the background process", file=sys.stderr)
    return 1


# -- subcommands ----------------------------------------------------------------


def cmd_serve(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    svc = build_service(args.kind, cfg, args.host, args.port)

    async def ready():
        await svc.start()
        _write_status(args.status_file, {"kind": args.kind, "endpoint": svc.endpoint, "pid": os.getpid()})

    asyncio.run(_run_until_signalled(ready, svc.stop))
    return 0


def cmd_domain_up(args, argv) -> int:
    if args.detached:
        return _detach(argv, args.status_file or "domain-status.json")
    spec = DomainSpec.load(args.spec)
    handle: dict = {}

    async def ready():
        handle["d"] = await assemble_domain(spec)
        _write_status(args.status_file, {**domain_status(handle["d"]), "pid": os.getpid()})

    async def cleanup():
        if "d" in handle:
            await handle["d"].stop()

    asyncio.run(_run_until_signalled(ready, cleanup))
    return 0


def cmd_federation_up(args, argv) -> int:
    if args.detached:
        return _detach(argv, args.status_file or "federation-status.json")
    doc = _read_json(args.spec)
    handle: dict = {}

    async def ready():
        fed = handle["f"] = await assemble_from_document(doc)
        _write_status(args.status_file, {"domains": [domain_status(d) for d in fed.domains], "pid": os.getpid()})

    async def cleanup():
        if "f" in handle:
            await handle["f"].stop()

    asyncio.run(_run_until_signalled(ready, cleanup))
    return 0


def _endpoints(status: Any, prefix: str = "") -> list[tuple[str, str]]:
    out = []
    if isinstance(status, dict):
        if "endpoint" in status:
            out.append((prefix or status.get("kind", "service"), status["endpoint"]))
        for key, svc_ep in (status.get("services") or {}).items():
            out.append((f"{status.get('domainId', '')}:{key}", svc_ep))
        for child in status.get("children", []) + status.get("domains", []):
            out.extend(_endpoints(child))
    return out


def cmd_status(args) -> int:
    status = _read_json(args.status_file)

    async def probe():
        transport = Transport("status")
        rows = []
        try:
            for name, ep in _endpoints(status):
                try:
                    reply = await transport.get(ep + "/v1/health", timeout=2)
                    rows.append((name, ep, "up" if reply.ok else f"http {reply.status}"))
                except LiotsError:
                    rows.append((name, ep, "down"))
        finally:
            await transport.close()
        return rows

    rows = asyncio.run(probe())
    width = max((len(r[0]) for r in rows), default=10)
    for name, ep, state in rows:
        print(f"{name:<{width}}  {ep:<28}  {state}")
    return 0 if all(r[2] == "up" for r in rows) else 1


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.action == "plot":
        runs = bench.read_runs(args.runs or out / "runs.jsonl")
        print(bench.plot_runs(runs, out / "runs.svg"))
        return 0
    doc = _read_json(args.spec)
    if args.action == "seed":
        spec = bench.WorkloadSpec.from_dict(doc)

        async def go():
            topo = await bench.build_topology(spec)
            try:
                await bench.seed(topo)
                _, body = await bench.timed_query(topo, [min(42, spec.total_entities - 1)], [0])
                return {"workload": spec.to_dict(), "providers": topo.provider_endpoints,
                        "sample": body["elements"][:1]}
            finally:
                await topo.stop()

        report = asyncio.run(go())
        (out / "seed.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        print(json.dumps(report["workload"]))
        return 0
    if args.action == "run":
        spec = bench.WorkloadSpec.from_dict(doc)
        metrics = asyncio.run(bench.execute(spec))
        bench.write_results(out, [(spec, metrics)])
        print(json.dumps(metrics.to_dict(), indent=2))
        return 0
    if args.action == "compare":
        a, b = bench.WorkloadSpec.from_dict(doc["a"]), bench.WorkloadSpec.from_dict(doc["b"])

        async def go():
            return await bench.execute(a, "a:" + a.topology), await bench.execute(b, "b:" + b.topology)

        ma, mb = asyncio.run(go())
        bench.write_results(out, [(a, ma), (b, mb)])
        report = bench.compare_runs(ma, mb)
        (out / "compare.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        print(json.dumps(report, indent=2))
        return 0
    if args.action == "sweep":
        base = bench.WorkloadSpec.from_dict(doc.get("base", {}))
        results = asyncio.run(bench.sweep(base, doc.get("entityCounts", [100, 1000, 10000]),
                                          doc.get("topologies", list(bench.TOPOLOGIES)),
                                          doc.get("clients", [20, 100])))
        jsonl, csv_path = bench.write_results(out, results)
        print(jsonl)
        print(csv_path)
        return 0
    raise SystemExit(f"unknown bench action {args.action}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liots", description="Federated IoT context exchange")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run one service")
    s.add_argument("kind", choices=SERVICE_KINDS)
    s.add_argument("--config")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--status-file")

    for name in ("domain", "federation"):
        g = sub.add_parser(name, help=f"run a {name}")
        g.add_argument("action", choices=["up"])
        g.add_argument("spec")
        g.add_argument("--status-file")
        g.add_argument("--detached", action="store_true", help="run in the background")

    st = sub.add_parser("status", help="health of every endpoint in a status file")
    st.add_argument("status_file")

    b = sub.add_parser("bench", help="benchmarks")
    b.add_argument("action", choices=["seed", "run", "compare", "sweep", "plot"])
    b.add_argument("--spec")
    b.add_argument("--out", default="bench-out")
    b.add_argument("--runs", help="runs.jsonl to plot")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        return cmd_serve(args)
    if args.command == "domain":
        return cmd_domain_up(args, argv)
    if args.command == "federation":
        return cmd_federation_up(args, argv)
    if args.command == "status":
        return cmd_status(args)
    if args.command == "bench":
        if args.action != "plot" and not args.spec:
            raise SystemExit("--spec is required")
        return cmd_bench(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
