from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import threading
import urllib.error
import urllib.request

import pytest
from aiohttp import web
from hypothesis import HealthCheck, settings

from liots.service import Transport

# one CPU and real sockets: timing-based health checks only add noise
settings.register_profile("liots", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("liots")


class Sink:
    """Loopback HTTP endpoint that records every POST body by path."""

    def __init__(self, status: int = 200):
        self.status = status
        self.received: list[tuple[str, dict, dict]] = []
        self._runner: web.AppRunner | None = None
        self._arrived = asyncio.Event()
        self.endpoint = ""

    async def start(self) -> Sink:
        app = web.Application()
        app.router.add_post("/{path:.*}", self._handle)
        self._runner = web.AppRunner(app, access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, "127.0.0.1", 0)
        await site.start()
        self.endpoint = f"http://127.0.0.1:{site._server.sockets[0].getsockname()[1]}"
        return self

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()

    async def _handle(self, request: web.Request) -> web.Response:
        raw = await request.read()
        body = json.loads(raw) if raw else {}
        self.received.append(("/" + request.match_info["path"], body, dict(request.headers)))
        self._arrived.set()
        return web.json_response({"code": self.status}, status=self.status)

    def bodies(self, path: str | None = None) -> list[dict]:
        return [b for p, b, _ in self.received if path is None or p == path]

    async def wait_for(self, count: int, timeout: float = 5.0, path: str | None = None) -> list[dict]:
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while len(self.bodies(path)) < count:
            remaining = deadline - loop.time()
            if remaining <= 0:
                break
            self._arrived.clear()
            with contextlib.suppress(asyncio.TimeoutError):
                await asyncio.wait_for(self._arrived.wait(), min(remaining, 0.05))
        return self.bodies(path)


class FakeClock:
    def __init__(self, start: float = 1_700_000_000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


class LoopThread:
    """Runs services on a private event loop so sync hypothesis tests can
    drive them over plain HTTP."""

    def __init__(self):
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.thread.start()

    def run(self, coro):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(30)

    def close(self):
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(5)
        self.loop.close()


def http_post(url: str, body: bytes, headers: dict) -> int:
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json", **headers})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status
    except urllib.error.HTTPError as err:
        return err.code


@contextlib.asynccontextmanager
async def running(*services):
    started = []
    try:
        for svc in services:
            await svc.start()
            started.append(svc)
        yield services
    finally:
        for svc in reversed(started):
            await svc.stop()


@pytest.fixture
async def sink():
    s = await Sink().start()
    yield s
    await s.stop()


@pytest.fixture
async def client():
    t = Transport("test-client")
    yield t
    await t.close()


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("liots").setLevel(logging.ERROR)
    yield
