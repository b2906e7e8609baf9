from __future__ import annotations


class LiotsError(Exception):
    """Base error. ``status`` is the HTTP code used on the wire."""

    status = 500

    def __init__(self, reason: str = "", status: int | None = None):
        super().__init__(reason or self.__class__.__name__)
        if status is not None:
            self.status = status

    @property
    def reason(self) -> str:
        return str(self)

    def to_wire(self) -> dict:
        return {"code": self.status, "reason": self.reason}


class MalformedRequest(LiotsError, ValueError):
    status = 400


class MalformedElement(MalformedRequest):
    pass


class InvalidCallback(MalformedRequest):
    pass


class AggregationTypeError(LiotsError, TypeError):
    status = 422


class BadCredentials(LiotsError):
    status = 401


class Unauthorized(LiotsError):
    status = 401


class Forbidden(LiotsError):
    status = 403


class UnknownSubscription(LiotsError, KeyError):
    status = 404

    def __str__(self) -> str:
        return self.args[0] if self.args else "unknown subscription"


class StaleVersion(LiotsError):
    status = 409


class DiscoveryUnreachable(LiotsError):
    status = 502


class ServiceUnavailable(LiotsError):
    status = 503


class TransportError(LiotsError):
    """A peer could not be reached or did not answer in time."""

    status = 502


class SpecViolation(LiotsError):
    """A domain spec breaks one or more infrastructure-settings rules."""

    status = 400

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ExcludedRun(LiotsError):
    status = 400
