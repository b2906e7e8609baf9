"""HTTP plumbing shared by every component: an aiohttp server base class,
an outbound transport with optional wire capture, and token sources."""

from __future__ import annotations

import asyncio
import json
import logging
import time
from collections.abc import Awaitable, Callable, Mapping
from dataclasses import dataclass, field
from typing import Any

import aiohttp
import orjson
from aiohttp import web

from .errors import LiotsError, MalformedRequest, TransportError

log = logging.getLogger(__name__)

AUTH_HEADER = "X-Auth-Token"
HOPS_HEADER = "X-LIoTS-Hops"

Handler = Callable[[Any, web.Request], Awaitable[Any]]


def dumps(obj: Any) -> bytes:
    """Compact wire encoding; falls back to the stdlib for values orjson
    refuses (integers wider than 64 bits)."""
    try:
        return orjson.dumps(obj)
    except TypeError:
        return json.dumps(obj, separators=(",", ":")).encode()


def loads(raw: bytes | str) -> Any:
    return orjson.loads(raw)


def error_response(status: int, reason: str) -> web.Response:
    return web.json_response({"code": status, "reason": reason}, status=status)


@dataclass
class Message:
    """One captured HTTP exchange."""

    origin: str
    url: str
    request_headers: dict[str, str]
    request_body: bytes
    status: int | None = None
    response_body: bytes = b""

    def text(self) -> str:
        headers = json.dumps(self.request_headers, sort_keys=True)
        return "\n".join(
            [self.url, headers, self.request_body.decode(errors="replace"),
             self.response_body.decode(errors="replace")]
        )


@dataclass
class WireTap:
    """Collects every message sent through transports attached to it."""

    messages: list[Message] = field(default_factory=list)

    def record(self, message: Message) -> None:
        self.messages.append(message)

    def clear(self) -> None:
        self.messages.clear()


@dataclass
class Reply:
    status: int
    body: bytes
    content_type: str = "application/json"

    def json(self) -> Any:
        if not self.body:
            return None
        try:
            return loads(self.body)
        except ValueError:
            raise MalformedRequest("peer returned invalid JSON") from None

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def error_reason(self) -> str:
        try:
            body = self.json()
            if isinstance(body, dict) and "reason" in body:
                return str(body["reason"])
        except MalformedRequest:
            pass
        return self.body.decode(errors="replace")[:200]


class Transport:
    """Outbound HTTP client.  ``origin`` labels captured messages."""

    def __init__(self, origin: str = "", tap: WireTap | None = None, limit: int = 1024,
                 timeout: float = 10.0):
        self.origin = origin
        self.tap = tap
        self.limit = limit
        self.timeout = timeout
        self._session: aiohttp.ClientSession | None = None

    def _get_session(self) -> aiohttp.ClientSession:
        if self._session is None or self._session.closed:
            self._session = aiohttp.ClientSession(
                connector=aiohttp.TCPConnector(limit=self.limit),
                timeout=aiohttp.ClientTimeout(total=None),
            )
        return self._session

    async def post(self, url: str, body: Any = None, *, token: str | None = None,
                   headers: Mapping[str, str] | None = None, timeout: float | None = None) -> Reply:
        if isinstance(body, (bytes, bytearray)):
            data = bytes(body)
        elif hasattr(body, "to_wire"):
            data = dumps(body.to_wire())
        else:
            data = dumps(body if body is not None else {})
        hdrs = {"Content-Type": "application/json"}
        if headers:
            hdrs.update(headers)
        if token is not None:
            hdrs[AUTH_HEADER] = token
        message = Message(self.origin, url, dict(hdrs), data) if self.tap is not None else None
        try:
            async with self._get_session().post(
                url, data=data, headers=hdrs,
                timeout=aiohttp.ClientTimeout(total=timeout or self.timeout),
            ) as resp:
                payload = await resp.read()
                reply = Reply(resp.status, payload, resp.content_type or "application/json")
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError) as exc:
            if message is not None:
                self.tap.record(message)
            raise TransportError(f"{url}: {exc.__class__.__name__} {exc}") from None
        if message is not None:
            message.status = reply.status
            message.response_body = reply.body
            self.tap.record(message)
        return reply

    async def post_json(self, url: str, body: Any = None, **kwargs) -> Any:
        """POST and decode; non-2xx replies raise LiotsError with the peer's status."""
        reply = await self.post(url, body, **kwargs)
        if not reply.ok:
            raise LiotsError(reply.error_reason(), status=reply.status)
        return reply.json()

    async def get(self, url: str, timeout: float | None = None) -> Reply:
        try:
            async with self._get_session().get(
                url, timeout=aiohttp.ClientTimeout(total=timeout or self.timeout)
            ) as resp:
                return Reply(resp.status, await resp.read())
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError) as exc:
            raise TransportError(f"{url}: {exc}") from None

    async def close(self) -> None:
        if self._session is not None and not self._session.closed:
            await self._session.close()
        self._session = None


class StaticToken:
    def __init__(self, value: str):
        self.value = value

    async def token(self) -> str:
        return self.value


class CredentialToken:
    """Fetches a token from an IdM with a subject's credentials and caches it
    until shortly before expiry."""

    def __init__(self, transport: Transport, idm_endpoint: str, subject_id: str, secret: str,
                 clock: Callable[[], float] = time.time):
        self.transport = transport
        self.idm_endpoint = idm_endpoint
        self.subject_id = subject_id
        self.secret = secret
        self.clock = clock
        self._value: str | None = None
        self._expires = 0.0
        self._lock = asyncio.Lock()

    async def token(self) -> str:
        async with self._lock:
            if self._value is None or self.clock() >= self._expires:
                body = await self.transport.post_json(
                    self.idm_endpoint.rstrip("/") + "/v1/token",
                    {"subjectId": self.subject_id, "secret": self.secret},
                )
                self._value = body["value"]
                self._expires = self.clock() + 0.8 * float(body["ttl"])
            return self._value

    def invalidate(self) -> None:
        self._value = None


async def resolve_token(source) -> str | None:
    if source is None:
        return None
    return await source.token()


class Service:
    """Base class for one HTTP component.

    Subclasses return ``{path: handler}`` from :meth:`routes`.  Handlers get
    the decoded JSON body and the request; they return a JSON-able value, or
    ``(status, value)``.  Raised :class:`LiotsError` become error bodies.
    """

    kind = "service"

    def __init__(self, *, host: str = "127.0.0.1", port: int = 0, name: str | None = None,
                 transport: Transport | None = None, clock: Callable[[], float] = time.time,
                 auth=None):
        self.host = host
        self.port = port
        self.name = name or self.kind
        self.transport = transport or Transport(self.name)
        self.clock = clock
        self.auth = auth
        self._runner: web.AppRunner | None = None
        self._tasks: set[asyncio.Task] = set()
        self._loops: list[asyncio.Task] = []

    # -- lifecycle --

    @property
    def endpoint(self) -> str:
        return f"http://{self.host}:{self.port}"

    def routes(self) -> dict[str, Handler]:
        return {}

    def build_app(self) -> web.Application:
        app = web.Application(client_max_size=64 * 1024 * 1024)
        app.router.add_get("/v1/health", self._health)
        for path, handler in self.routes().items():
            app.router.add_post(path, self._wrap(handler))
        return app

    async def start(self) -> None:
        self._runner = web.AppRunner(self.build_app(), access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.host, self.port, reuse_address=True)
        await site.start()
        if self.port == 0:
            self.port = site._server.sockets[0].getsockname()[1]
        await self.on_start()

    async def on_start(self) -> None:
        pass

    async def stop(self) -> None:
        for task in self._loops:
            task.cancel()
        for task in list(self._tasks):
            task.cancel()
        await asyncio.gather(*self._loops, *self._tasks, return_exceptions=True)
        self._loops.clear()
        self._tasks.clear()
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None
        await self.transport.close()

    async def __aenter__(self):
        await self.start()
        return self

    async def __aexit__(self, *exc):
        await self.stop()

    # -- background work --

    def spawn(self, coro) -> asyncio.Task:
        """Run ``coro`` off the request path; :meth:`flush` waits for it."""
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._task_done)
        return task

    def _task_done(self, task: asyncio.Task) -> None:
        self._tasks.discard(task)
        if not task.cancelled() and task.exception() is not None:
            log.warning("%s background task failed: %r", self.name, task.exception())

    def every(self, interval: Callable[[], float] | float, fn: Callable[[], Awaitable[None]]) -> None:
        async def loop():
            while True:
                delay = interval() if callable(interval) else interval
                await asyncio.sleep(delay)
                try:
                    await fn()
                except asyncio.CancelledError:
                    raise
                except Exception:
                    log.exception("%s periodic task failed", self.name)

        self._loops.append(asyncio.ensure_future(loop()))

    async def flush(self, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while self._tasks:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"{self.name}: background tasks still pending")
            await asyncio.wait(list(self._tasks), timeout=remaining)

    # -- request handling --

    async def _health(self, request: web.Request) -> web.Response:
        return web.json_response({"status": "ok", "kind": self.kind, "name": self.name})

    def _wrap(self, handler: Handler):
        async def wrapped(request: web.Request) -> web.Response:
            try:
                raw = await request.read()
                try:
                    body = loads(raw) if raw else {}
                except ValueError:
                    raise MalformedRequest("body is not valid JSON") from None
                result = await handler(body, request)
            except LiotsError as exc:
                return error_response(exc.status, exc.reason)
            except Exception as exc:  # pragma: no cover - defensive
                log.exception("%s handler error", self.name)
                return error_response(500, f"internal error: {exc.__class__.__name__}")
            if isinstance(result, web.StreamResponse):
                return result
            status = 200
            if isinstance(result, tuple):
                status, result = result
            if result is None:
                result = {"code": status}
            return web.Response(
                body=dumps(result),
                status=status, content_type="application/json",
            )

        return wrapped

    async def call_token(self) -> str | None:
        return await resolve_token(self.auth)


def hops_of(request: web.Request | None) -> int:
    if request is None:
        return 0
    try:
        return int(request.headers.get(HOPS_HEADER, "0"))
    except ValueError:
        return 0


async def deliver(transport: Transport, url: str, body: Any, *, token_source=None,
                  attempts: int = 3, base_delay: float = 0.1) -> bool:
    """POST with exponential backoff; True once a 2xx reply arrives.

    4xx replies other than 401 are final (the receiver rejected the content).
    """
    delay = base_delay
    for attempt in range(attempts):
        try:
            token = await resolve_token(token_source)
            reply = await transport.post(url, body, token=token)
            if reply.ok:
                return True
            if reply.status == 401 and isinstance(token_source, CredentialToken):
                token_source.invalidate()
            elif 400 <= reply.status < 500:
                log.info("delivery to %s rejected: %s", url, reply.status)
                return False
        except LiotsError as exc:
            log.debug("delivery to %s failed: %s", url, exc)
        if attempt < attempts - 1:
            await asyncio.sleep(delay)
            delay *= 2
    return False
