"""The meta-aggregator HTTP service: TimeMap and TimeGate endpoints with
profile negotiation, runtime archive supplementation, cycle guarding, and
relayed authentication challenges."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

from .aggregation import (
    DEFAULT_DEPTH_LIMIT,
    DEFAULT_TIMEOUT_MS,
    VIA_HEADER,
    AggregateReport,
    AggregationEngine,
    guard_cycles,
)
from .codec import FORMATS
from .exceptions import ConfigError, UriParseError, ValidationError
from .gateway import build_auth_challenge
from .httpd import HttpService, Request, Response
from .model import (
    MementoDatetime,
    OriginalUri,
    SourceDescriptor,
    SourceKind,
    TimeMap,
    Visibility,
)
from .precedence import FilterRule, Profile, compile_plan

logger = logging.getLogger(__name__)

# Profiles are named on the wire by these URIs in rel="profile" links.
PROFILE_URI_PREFIX = "urn:mementity:profile:"

MORE_ARCHIVES_HEADER = "X-More-Archives"
TOKEN_HEADER = "X-Archive-Token"
WARNINGS_HEADER = "X-MMA-Warnings"


@dataclass(frozen=True)
class ServiceConfig:
    self_id: str
    sources: tuple[SourceDescriptor, ...]
    rules: tuple[FilterRule, ...] = ()
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    depth_limit: int = DEFAULT_DEPTH_LIMIT
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self):
        if not self.self_id:
            raise ConfigError("service id must be non-empty")
        ids = [s.id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ConfigError("source ids must be distinct")
        if self.self_id in ids:
            raise ConfigError(f"service id {self.self_id!r} collides with a source id")
        if self.depth_limit < 1:
            raise ConfigError("depth_limit must be >= 1")


def load_service_config(config: dict, *, host: str | None = None, port: int | None = None) -> ServiceConfig:
    """Build a ServiceConfig from its JSON object form."""
    try:
        sources = tuple(
            SourceDescriptor(
                id=str(s["id"]),
                timemap_endpoint=str(s["endpoint"]),
                kind=SourceKind(s.get("kind", "archive")),
                visibility=Visibility(s.get("visibility", "public")),
                auth_pointer=s.get("auth_pointer"),
            )
            for s in config.get("sources", ())
        )
        rules = tuple(
            FilterRule(matcher=str(r["match"]), source_ids=tuple(r["sources"]))
            for r in config.get("rules", ())
        )
        return ServiceConfig(
            self_id=str(config["id"]),
            sources=sources,
            rules=rules,
            timeout_ms=int(config.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
            depth_limit=int(config.get("depth_limit", DEFAULT_DEPTH_LIMIT)),
            host=host if host is not None else str(config.get("host", "127.0.0.1")),
            port=port if port is not None else int(config.get("port", 0)),
        )
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise ConfigError(f"bad service config: {exc}") from exc


def parse_prefer_profile(header_value: str | None) -> str | None:
    """Extract the profile preference from a Prefer header value.

    Accepts ``profile="name"``, ``profile=name``, and the package's
    profile URIs; returns the bare profile name, or None when the header
    carries no profile preference.
    """
    if not header_value:
        return None
    for part in header_value.split(","):
        name, sep, value = part.strip().partition("=")
        if not sep or name.strip().lower() != "profile":
            continue
        value = value.strip().strip('"').strip()
        if value.startswith(PROFILE_URI_PREFIX):
            value = value[len(PROFILE_URI_PREFIX):]
        return value
    return None


def parse_token_header(values: str | None) -> dict[str, str]:
    """Parse ``X-Archive-Token: source:token[, source:token]*`` bindings."""
    tokens: dict[str, str] = {}
    if not values:
        return tokens
    for entry in values.split(","):
        entry = entry.strip()
        if not entry:
            continue
        source_id, sep, token = entry.partition(":")
        if sep and source_id.strip() and token.strip():
            tokens[source_id.strip()] = token.strip()
    return tokens


def parse_more_archives(values: str | None, existing_ids: set[str]) -> tuple[list[SourceDescriptor], int]:
    """Turn an X-More-Archives header into ad-hoc public descriptors.

    Entries are comma-separated absolute endpoint templates; "*" stands
    for the TimeMap format segment and is pinned to cdxj. Malformed
    entries are dropped and counted, never fatal.
    """
    descriptors: list[SourceDescriptor] = []
    warnings = 0
    if not values:
        return descriptors, warnings
    for n, entry in enumerate(values.split(","), start=1):
        entry = entry.strip()
        if not entry:
            continue
        if not entry.startswith(("http://", "https://")):
            warnings += 1
            continue
        endpoint = entry.replace("*", "cdxj")
        source_id = f"extra{n}"
        if source_id in existing_ids:
            warnings += 1
            continue
        descriptors.append(
            SourceDescriptor(
                id=source_id,
                timemap_endpoint=endpoint,
                kind=SourceKind.ARCHIVE,
                visibility=Visibility.PUBLIC,
            )
        )
    return descriptors, warnings


def select_nearest(timemap: TimeMap, wanted: MementoDatetime | None):
    """TimeGate selection: minimize |wanted - memento datetime|, ties to
    the earlier memento; no datetime means the most recent memento."""
    if not timemap.mementos:
        return None
    if wanted is None:
        return max(timemap.mementos, key=lambda m: m.datetime)
    return min(
        timemap.mementos,
        key=lambda m: (abs((m.datetime.instant - wanted.instant).total_seconds()), m.datetime),
    )


class MMAService:
    """One running meta-aggregator."""

    def __init__(self, config: ServiceConfig, engine: AggregationEngine | None = None):
        self.config = config
        self.engine = engine or AggregationEngine(timeout_ms=config.timeout_ms)
        self.http = HttpService(
            self._handle, name=f"mma-{config.self_id}", host=config.host, port=config.port
        )

    def start(self) -> "MMAService":
        self.http.start()
        return self

    def stop(self) -> None:
        self.http.stop()

    def reconfigure(self, config: ServiceConfig) -> None:
        """Swap in a new config on a live service.

        Topology startup binds every port before source endpoints exist,
        then resolves them through here; requests in flight finish under
        whichever config they started with.
        """
        self.config = config
        self.engine = AggregationEngine(timeout_ms=config.timeout_ms)

    @property
    def base_url(self) -> str:
        return self.http.base_url

    def timemap_endpoint(self, fmt: str = "cdxj") -> str:
        return f"{self.base_url}/timemap/{fmt}/{{uri_r}}"

    # -- routing -------------------------------------------------------------

    def _handle(self, request: Request) -> Response:
        if request.method not in ("GET", "HEAD"):
            return Response.text(405, "only GET is supported")
        if request.path == "/.well-known/mma":
            return self._well_known()
        if request.path.startswith("/timemap/"):
            return self._timemap(request)
        if request.path.startswith("/timegate/"):
            return self._timegate(request)
        return Response.text(404, "unknown path")

    def _well_known(self) -> Response:
        # Profile advertisement is an extension to the aggregation
        # contract, marked as such so clients do not rely on it blindly.
        doc = {
            "id": self.config.self_id,
            "kind": "meta_aggregator",
            "formats": sorted(FORMATS),
            "profiles": [p.value for p in Profile],
            "profile_uri_prefix": PROFILE_URI_PREFIX,
            "extension": True,
        }
        return Response(
            status=200,
            headers=[("Content-Type", "application/json")],
            body=(json.dumps(doc, indent=2) + "\n").encode("utf-8"),
        )

    # -- shared pipeline -------------------------------------------------------

    def _aggregate(self, request: Request, raw_uri: str) -> tuple[AggregateReport, dict] | Response:
        """Run cycle guarding, planning, and plan execution for a request.

        Returns either the report plus response decorations, or an error
        Response ready to send.
        """
        incoming_via = [
            v.strip() for v in (request.header(VIA_HEADER) or "").split(",") if v.strip()
        ]
        decision = guard_cycles(incoming_via, self.config.self_id, self.config.depth_limit)
        if not decision.proceed:
            logger.warning("%s refusing request: %s", self.config.self_id, decision.reason)
            return Response.text(508, f"aggregation loop refused: {decision.reason}")

        try:
            uri_r = OriginalUri(raw_uri)
        except UriParseError as exc:
            return Response.text(400, f"bad URI-R: {exc}")

        profile_name = parse_prefer_profile(request.header("prefer"))
        profile: Profile | None = None
        profile_applied = False
        if profile_name is not None:
            try:
                profile = Profile.parse(profile_name)
                profile_applied = True
            except ValidationError:
                logger.info("ignoring unknown profile %r", profile_name)

        extras, extra_warnings = parse_more_archives(
            request.header(MORE_ARCHIVES_HEADER), {s.id for s in self.config.sources}
        )

        tokens = parse_token_header(request.header(TOKEN_HEADER))
        bearer = (request.header("authorization") or "").removeprefix("Bearer ").strip()
        if bearer:
            unbound = [
                s for s in self.config.sources if s.is_private and s.id not in tokens
            ]
            # A bare bearer token has no source binding; honoring it for
            # several private sources would relay one source's credential
            # to another, so it only applies when unambiguous.
            if len(unbound) == 1:
                tokens[unbound[0].id] = bearer

        try:
            plan = compile_plan(profile, self.config.rules, self.config.sources, uri_r, extras)
        except ValidationError as exc:
            return Response.text(500, f"planning failed: {exc}")

        report = self.engine.execute_plan(
            plan, uri_r, tokens=tokens, via=decision.via, timeout_ms=self.config.timeout_ms
        )
        decorations = {
            "profile": profile if profile_applied else None,
            "warnings": extra_warnings,
            "advisory": plan.advisory,
        }
        return report, decorations

    def _decorate(self, response: Response, decorations: dict) -> Response:
        profile = decorations.get("profile")
        if profile is not None:
            response.headers.append(("Preference-Applied", f'profile="{profile.value}"'))
            response.headers.append(
                ("Link", f'<{PROFILE_URI_PREFIX}{profile.value}>; rel="profile"')
            )
        if decorations.get("warnings"):
            response.headers.append((WARNINGS_HEADER, str(decorations["warnings"])))
        if decorations.get("advisory"):
            response.headers.append(("X-MMA-Advisory", decorations["advisory"]))
        response.headers.append(("Vary", f"Prefer, {MORE_ARCHIVES_HEADER}"))
        return response

    def _self_uris(self, raw_uri: str) -> dict[str, str]:
        return {fmt: f"{self.base_url}/timemap/{fmt}/{raw_uri}" for fmt in FORMATS}

    def _challenge_response(self, report: AggregateReport, fmt: str, raw_uri: str) -> Response:
        challenges = report.auth_challenges
        headers: list[tuple[str, str]] = []
        for challenge in challenges:
            headers.extend(build_auth_challenge(challenge.source_id, challenge.uri_p))
        media_type, serializer, _ = FORMATS[fmt]
        partial = replace(
            report.timemap,
            self_uris=self._self_uris(raw_uri),
            timegate_uri=f"{self.base_url}/timegate/{raw_uri}",
        )
        headers.append(("Content-Type", media_type))
        return Response(status=401, headers=headers, body=serializer(partial).encode("utf-8"))

    # -- endpoints -----------------------------------------------------------

    def _timemap(self, request: Request) -> Response:
        remainder = request.path[len("/timemap/"):]
        fmt, sep, raw_uri = remainder.partition("/")
        if not sep or fmt not in FORMATS:
            return Response.text(404, f"unknown timemap format {fmt!r}")

        outcome = self._aggregate(request, raw_uri)
        if isinstance(outcome, Response):
            return outcome
        report, decorations = outcome

        if report.auth_challenges:
            return self._decorate(self._challenge_response(report, fmt, raw_uri), decorations)

        timemap = replace(
            report.timemap,
            self_uris=self._self_uris(raw_uri),
            timegate_uri=f"{self.base_url}/timegate/{raw_uri}",
        )
        media_type, serializer, _ = FORMATS[fmt]
        response = Response(
            status=200,
            headers=[("Content-Type", media_type)],
            body=serializer(timemap).encode("utf-8"),
        )
        return self._decorate(response, decorations)

    def _timegate(self, request: Request) -> Response:
        raw_uri = request.path[len("/timegate/"):]

        wanted: MementoDatetime | None = None
        accept_datetime = request.header("accept-datetime")
        if accept_datetime:
            try:
                wanted = MementoDatetime.from_http(accept_datetime)
            except Exception:
                return Response.text(400, f"unparseable Accept-Datetime: {accept_datetime!r}")

        outcome = self._aggregate(request, raw_uri)
        if isinstance(outcome, Response):
            return outcome
        report, decorations = outcome

        if report.auth_challenges:
            return self._decorate(self._challenge_response(report, "cdxj", raw_uri), decorations)

        chosen = select_nearest(report.timemap, wanted)
        if chosen is None:
            return self._decorate(Response.text(404, "no mementos for this resource"), decorations)

        links = [
            f'<{raw_uri}>; rel="original"',
            f'<{self.base_url}/timemap/link/{raw_uri}>; rel="timemap"; type="application/link-format"',
        ]
        response = Response(
            status=302,
            headers=[
                ("Location", chosen.uri_m),
                ("Vary", "accept-datetime"),
                ("Link", ", ".join(links)),
                ("Memento-Datetime", chosen.datetime.http),
            ],
            body=b"",
        )
        return self._decorate(response, decorations)


__all__ = [
    "MMAService",
    "MORE_ARCHIVES_HEADER",
    "PROFILE_URI_PREFIX",
    "ServiceConfig",
    "TOKEN_HEADER",
    "WARNINGS_HEADER",
    "load_service_config",
    "parse_more_archives",
    "parse_prefer_profile",
    "parse_token_header",
    "select_nearest",
]
