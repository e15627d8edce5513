"""Scriptable mock archives: public and private endpoints with configured
holdings, latency, failure modes, and a lossless request log.

Every aggregation, precedence, privacy, and flow claim in the test suite
is observed through these archives, especially their request logs, which
record that an archive was (or was not) contacted.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field, replace as dc_replace
from typing import Mapping, Sequence

import httpx

from .codec import FORMATS
from .exceptions import ConfigError, ValidationError
from .gateway import build_auth_challenge, token_digest
from .model import (
    AccessAttrs,
    ContentAttrs,
    MementoDatetime,
    MementoRecord,
    OriginalUri,
    TimeMap,
    Visibility,
    canonical_uri,
)
from .httpd import HttpService, Request, Response

logger = logging.getLogger(__name__)

# Header values that must never appear in a request log.
_REDACTED_HEADERS = frozenset({"authorization", "x-archive-token"})

_CONTROL_PREFIXES = ("/_log", "/_reset")

TIMEOUT_HOLD_S = 10.0


@dataclass(frozen=True)
class Holding:
    """One capture an archive claims to hold."""

    datetime: MementoDatetime
    status_code: int = 200
    content_type: str = "text/html"
    damage: float | None = None
    location: str | None = None

    def __post_init__(self):
        if self.damage is not None and not 0.0 <= self.damage <= 1.0:
            raise ValidationError(f"damage {self.damage!r} outside [0, 1]")


@dataclass(frozen=True)
class SimArchiveSpec:
    """Configuration for one simulated archive.

    ``failure`` is None (healthy), "timeout" (hold the request past any
    client budget), or an int HTTP status to return unconditionally.
    ``auth`` binds a private archive to its authentication mementity:
    {"uri_p": token endpoint to advertise, "introspect": validation endpoint}.
    """

    id: str
    visibility: Visibility = Visibility.PUBLIC
    latency_ms: int = 0
    failure: str | int | None = None
    holdings: Mapping[str, tuple[Holding, ...]] = field(default_factory=dict)
    auth: Mapping[str, str] | None = None
    enrich_records: bool = True
    emit_access_attrs: bool = False

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValidationError("latency_ms must be >= 0")
        if self.failure is not None and self.failure != "timeout":
            if not isinstance(self.failure, int) or not 400 <= self.failure <= 599:
                raise ValidationError(f"failure must be 'timeout' or a 4xx/5xx status, got {self.failure!r}")
        if self.visibility is Visibility.PRIVATE:
            if not self.auth or "uri_p" not in self.auth or "introspect" not in self.auth:
                raise ValidationError(
                    f"private archive {self.id!r} needs an auth binding with uri_p and introspect"
                )
        normalized = {canonical_uri(uri): tuple(hs) for uri, hs in self.holdings.items()}
        object.__setattr__(self, "holdings", normalized)

    @property
    def is_private(self) -> bool:
        return self.visibility is Visibility.PRIVATE


def parse_holding(entry: object) -> Holding:
    """Accept a bare 14-digit string or a {datetime, status_code,
    content_type, damage, location} object."""
    if isinstance(entry, str):
        return Holding(datetime=MementoDatetime.from_key(entry))
    if isinstance(entry, dict):
        return Holding(
            datetime=MementoDatetime.from_key(str(entry["datetime"])),
            status_code=int(entry.get("status_code", 200)),
            content_type=str(entry.get("content_type", "text/html")),
            damage=float(entry["damage"]) if "damage" in entry else None,
            location=entry.get("location"),
        )
    raise ConfigError(f"malformed holding entry: {entry!r}")


class ArchiveService:
    """One running simulated archive."""

    def __init__(self, spec: SimArchiveSpec, *, host: str = "127.0.0.1", port: int = 0):
        self.spec = spec
        self._log: list[dict] = []
        self._log_lock = threading.Lock()
        self.http = HttpService(self._handle, name=f"archive-{spec.id}", host=host, port=port)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "ArchiveService":
        self.http.start()
        return self

    def stop(self) -> None:
        self.http.stop()

    @property
    def base_url(self) -> str:
        return self.http.base_url

    def timemap_endpoint(self, fmt: str = "cdxj") -> str:
        return f"{self.base_url}/timemap/{fmt}/{{uri_r}}"

    # -- request log -------------------------------------------------------

    def request_log(self) -> list[dict]:
        with self._log_lock:
            return list(self._log)

    def reset_log(self) -> None:
        with self._log_lock:
            self._log.clear()

    def _record(self, request: Request) -> None:
        headers = {
            name: ("REDACTED" if name in _REDACTED_HEADERS else value)
            for name, value in request.headers.items()
        }
        with self._log_lock:
            self._log.append(
                {
                    "ts": time.time(),
                    "method": request.method,
                    "path": request.path,
                    "headers": headers,
                }
            )

    # -- request handling ----------------------------------------------------

    def _handle(self, request: Request) -> Response:
        if request.path.startswith(_CONTROL_PREFIXES):
            return self._control(request)
        self._record(request)

        if self.spec.latency_ms:
            time.sleep(self.spec.latency_ms / 1000)

        if self.spec.failure == "timeout":
            time.sleep(TIMEOUT_HOLD_S)
            return Response.text(504, "simulated timeout")
        if isinstance(self.spec.failure, int):
            return Response.text(self.spec.failure, f"simulated failure {self.spec.failure}")

        if self.spec.is_private:
            subject = self._authenticated_subject(request)
            if subject is None:
                return Response(
                    status=401,
                    headers=build_auth_challenge(self.spec.id, self.spec.auth["uri_p"])
                    + [("Content-Type", "text/plain; charset=utf-8")],
                    body=b"authentication required",
                )

        if request.path.startswith("/timemap/"):
            return self._timemap(request)
        return self._replay(request)

    def _control(self, request: Request) -> Response:
        if request.method == "GET" and request.path.startswith("/_log/"):
            asked = request.path[len("/_log/"):]
            if asked != self.spec.id:
                return Response.text(404, f"no archive {asked!r} here")
            return Response(
                status=200,
                headers=[("Content-Type", "application/json")],
                body=json.dumps(self.request_log()).encode("utf-8"),
            )
        if request.method == "POST" and request.path == "/_reset":
            self.reset_log()
            return Response.text(200, "log cleared")
        return Response.text(404, "unknown control path")

    def _authenticated_subject(self, request: Request) -> str | None:
        auth = request.header("authorization", "")
        if not auth.startswith("Bearer "):
            return None
        token = auth[len("Bearer "):].strip()
        if not token:
            return None
        try:
            answer = httpx.post(
                self.spec.auth["introspect"],
                json={"token": token, "source_id": self.spec.id},
                timeout=5.0,
            )
        except httpx.HTTPError:
            logger.warning("archive %s could not reach its authentication mementity", self.spec.id)
            return None
        if answer.status_code != 200:
            return None
        body = answer.json()
        if not body.get("active"):
            return None
        return body.get("subject")

    def _timemap(self, request: Request) -> Response:
        remainder = request.path[len("/timemap/"):]
        fmt, sep, raw_uri = remainder.partition("/")
        if not sep or fmt not in FORMATS:
            return Response.text(404, f"unknown timemap format {fmt!r}")
        try:
            uri_r = OriginalUri(raw_uri)
        except Exception:
            return Response.text(400, f"bad URI-R {raw_uri!r}")

        token = None
        auth = request.header("authorization", "")
        if auth.startswith("Bearer "):
            token = auth[len("Bearer "):].strip()

        records = [
            self._record_for(holding, uri_r, token)
            for holding in self.spec.holdings.get(uri_r.canonical, ())
        ]
        timemap = TimeMap.assemble(
            uri_r,
            records,
            self_uris={fmt: f"{self.base_url}/timemap/{fmt}/{raw_uri}"},
        )
        media_type, serializer, _parser = FORMATS[fmt]
        return Response(
            status=200,
            headers=[("Content-Type", media_type)],
            body=serializer(timemap).encode("utf-8"),
        )

    def _record_for(self, holding: Holding, uri_r: OriginalUri, token: str | None) -> MementoRecord:
        content = None
        if self.spec.enrich_records:
            content = ContentAttrs(
                status_code=holding.status_code,
                content_type=holding.content_type,
                last_modified=holding.datetime,
            )
        derived = {"damage": holding.damage} if holding.damage is not None else None
        access = None
        if self.spec.emit_access_attrs and self.spec.is_private and token:
            access = AccessAttrs(type="Blake2b", token=token_digest(token))
        return MementoRecord(
            uri_m=f"{self.base_url}/{holding.datetime.key}/{uri_r.value}",
            datetime=holding.datetime,
            content=content,
            derived=derived,
            access=access,
        )

    def _replay(self, request: Request) -> Response:
        path = request.path.lstrip("/")
        key, sep, raw_uri = path.partition("/")
        if not sep or len(key) != 14 or not key.isdigit():
            return Response.text(404, "not found")
        try:
            canonical = canonical_uri(raw_uri)
        except Exception:
            return Response.text(400, f"bad URI-R {raw_uri!r}")
        holding = next(
            (h for h in self.spec.holdings.get(canonical, ()) if h.datetime.key == key),
            None,
        )
        if holding is None:
            return Response.text(404, "no capture at this datetime")
        headers = [
            ("Content-Type", holding.content_type),
            ("Last-Modified", holding.datetime.http),
            ("Memento-Datetime", holding.datetime.http),
        ]
        if 300 <= holding.status_code < 400:
            headers.append(("Location", holding.location or raw_uri))
        body = f"<html><body>capture of {raw_uri} at {key}</body></html>".encode("utf-8")
        return Response(status=holding.status_code, headers=headers, body=body)


def build_spec(config: Mapping, *, gateways: Mapping[str, str] | None = None) -> SimArchiveSpec:
    """Build a SimArchiveSpec from its JSON configuration object.

    ``gateways`` maps gateway ids to base URLs so an archive's "auth" can
    be either a gateway id reference or explicit {"uri_p", "introspect"}.
    """
    if "id" not in config:
        raise ConfigError("archive config needs an id")
    holdings = {
        uri: tuple(parse_holding(e) for e in entries)
        for uri, entries in config.get("holdings", {}).items()
    }
    auth = config.get("auth")
    if isinstance(auth, str):
        base = (gateways or {}).get(auth)
        if base is None:
            raise ConfigError(f"archive {config['id']!r} references unknown gateway {auth!r}")
        auth = {"uri_p": f"{base}/token", "introspect": f"{base}/introspect"}
    try:
        return SimArchiveSpec(
            id=str(config["id"]),
            visibility=Visibility(config.get("visibility", "public")),
            latency_ms=int(config.get("latency_ms", 0)),
            failure=config.get("failure"),
            holdings=holdings,
            auth=auth,
            enrich_records=bool(config.get("enrich_records", True)),
            emit_access_attrs=bool(config.get("emit_access_attrs", False)),
        )
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"bad archive config {config.get('id')!r}: {exc}") from exc


def with_holdings(spec: SimArchiveSpec, holdings: Mapping[str, Sequence[Holding]]) -> SimArchiveSpec:
    """Copy a spec with different holdings (tests mutate scenarios this way)."""
    return dc_replace(spec, holdings={u: tuple(h) for u, h in holdings.items()})


__all__ = [
    "ArchiveService",
    "Holding",
    "SimArchiveSpec",
    "build_spec",
    "parse_holding",
    "with_holdings",
]
