"""Negotiation over enrichment dimensions beyond datetime, and the
enrichment pipeline that fills in content-based and derived attributes.

A plain TimeGate picks a memento by datetime alone. The service here
additionally honors ``Prefer: memento-filter="attr OP value"`` preferences,
filtering the aggregated candidate set on enriched attributes before the
datetime selection runs. Attributes arrive from three places: the source
archives themselves, HEAD probes of the mementos, and community-submitted
derived values accepted through a consensus rule.
"""

from __future__ import annotations

import json
import logging
import pathlib
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from statistics import median

import httpx

from .aggregation import AggregationEngine
from .codec.jsonformat import MEDIA_TYPE as JSON_MEDIA_TYPE
from .codec.jsonformat import serialize_json
from .exceptions import ConfigError, EnrichmentError, UriParseError, ValidationError
from .gateway import build_auth_challenge
from .httpd import HttpService, Request, Response
from .model import (
    ContentAttrs,
    MementoDatetime,
    MementoRecord,
    OriginalUri,
    SourceDescriptor,
    SourceKind,
    TimeMap,
    Visibility,
    canonical_uri,
)
from .precedence import FilterRule, compile_plan
from .service import select_nearest

logger = logging.getLogger(__name__)

FILTER_PREFERENCE = "memento-filter"
ORDERING_OPS = frozenset({"lt", "le", "gt", "ge"})
ALL_OPS = frozenset({"eq", "ne"}) | ORDERING_OPS

# Accepted spellings on the wire; stored ops are always the word forms.
OP_ALIASES = {
    "=": "eq", "==": "eq", "!=": "ne", "<>": "ne",
    "<": "lt", "<=": "le", ">": "gt", ">=": "ge",
}

# Content-based attributes every record may carry.
_CONTENT_ATTRIBUTES = frozenset({"status_code", "content_type", "last_modified"})

_FILTER_RE = re.compile(r'memento-filter\s*=\s*"([^"]*)"')


@dataclass(frozen=True)
class AttributeSpec:
    """Registration of one derived attribute: value type plus range."""

    name: str
    numeric: bool = True
    low: float | None = None
    high: float | None = None

    def validate(self, value: object) -> float | str:
        if self.numeric:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValidationError(f"{self.name} must be numeric, got {value!r}")
            value = float(value)
            if self.low is not None and value < self.low:
                raise ValidationError(f"{self.name}={value} below {self.low}")
            if self.high is not None and value > self.high:
                raise ValidationError(f"{self.name}={value} above {self.high}")
            return value
        if not isinstance(value, str):
            raise ValidationError(f"{self.name} must be a string, got {value!r}")
        return value


DEFAULT_REGISTRY: tuple[AttributeSpec, ...] = (
    AttributeSpec(name="damage", numeric=True, low=0.0, high=1.0),
)


@dataclass(frozen=True)
class DimensionFilter:
    """One ``attr OP value`` constraint on the candidate set."""

    attribute: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in ALL_OPS:
            raise ValidationError(f"unknown filter op {self.op!r}")

    def matches(self, observed: object) -> bool:
        """Evaluate against an observed value; the caller has already
        excluded records where the attribute is absent."""
        if self.op == "eq":
            return self._eq(observed)
        if self.op == "ne":
            return not self._eq(observed)
        try:
            if self.op == "lt":
                return observed < self.value  # type: ignore[operator]
            if self.op == "le":
                return observed <= self.value  # type: ignore[operator]
            if self.op == "gt":
                return observed > self.value  # type: ignore[operator]
            return observed >= self.value  # type: ignore[operator]
        except TypeError:
            return False

    def _eq(self, observed: object) -> bool:
        if isinstance(observed, str) and isinstance(self.value, str):
            if self.attribute == "content_type":
                return _media_type(observed) == _media_type(self.value)
            return observed == self.value
        if isinstance(observed, (int, float)) and isinstance(self.value, (int, float)):
            return float(observed) == float(self.value)
        return observed == self.value


def _media_type(value: str) -> str:
    # "text/html; charset=utf-8" and "TEXT/HTML" name the same type.
    return value.partition(";")[0].strip().lower()


def parse_filters(prefer_header: str | None, registry: dict[str, AttributeSpec]) -> list[DimensionFilter]:
    """Extract every memento-filter preference from a Prefer header value.

    Raises ValidationError for unknown attributes, unknown ops, ordering
    ops on non-numeric attributes, and untypeable values.
    """
    filters: list[DimensionFilter] = []
    if not prefer_header:
        return filters
    for raw in _FILTER_RE.findall(prefer_header):
        parts = raw.split(None, 2)
        if len(parts) != 3:
            raise ValidationError(f"malformed filter {raw!r}, want 'attr OP value'")
        attribute, op, literal = parts
        op = OP_ALIASES.get(op, op.lower())
        if op not in ALL_OPS:
            raise ValidationError(f"unknown filter op {op!r}")
        value, numeric = _type_filter_value(attribute, literal, registry)
        if op in ORDERING_OPS and not numeric:
            raise ValidationError(f"ordering op {op!r} needs a numeric attribute, not {attribute!r}")
        filters.append(DimensionFilter(attribute=attribute, op=op, value=value))
    return filters


def _type_filter_value(
    attribute: str, literal: str, registry: dict[str, AttributeSpec]
) -> tuple[object, bool]:
    """Coerce a filter's value literal per its attribute; returns the typed
    value and whether the attribute is numeric (orderable)."""
    if attribute == "status_code":
        try:
            return int(literal), True
        except ValueError:
            raise ValidationError(f"status_code needs an integer, got {literal!r}") from None
    if attribute == "content_type" or attribute == "access.type":
        return literal, False
    if attribute == "last_modified":
        try:
            return MementoDatetime.from_key(literal), False
        except Exception:
            try:
                return MementoDatetime.from_http(literal), False
            except Exception:
                raise ValidationError(
                    f"last_modified needs a 14-digit key or an HTTP date, got {literal!r}"
                ) from None
    spec = registry.get(attribute)
    if spec is None:
        raise ValidationError(f"unknown filter attribute {attribute!r}")
    if spec.numeric:
        try:
            return float(literal), True
        except ValueError:
            raise ValidationError(f"{attribute} needs a number, got {literal!r}") from None
    return literal, False


@dataclass
class CacheEntry:
    """Everything the enrichment store knows about one URI-M."""

    content: ContentAttrs | None = None
    derived: dict[str, object] = field(default_factory=dict)
    fetched_at: float | None = None


class EnrichmentCache:
    """Shared store of enriched attributes keyed by canonical URI-M.

    Content attributes land directly; derived submissions sit pending
    until at least ``k`` distinct submitters agree, numerically within
    ``epsilon`` or exactly for strings, at which point the median of the
    agreeing cluster is promoted. A resubmission replaces the submitter's
    earlier value. Accepted promotions append to a JSONL log replayed on
    construction.
    """

    def __init__(
        self,
        *,
        k: int = 3,
        epsilon: float = 0.01,
        registry: tuple[AttributeSpec, ...] = DEFAULT_REGISTRY,
        persist_path: str | pathlib.Path | None = None,
        time_fn=time.time,
    ):
        if k < 1:
            raise ConfigError("consensus threshold k must be >= 1")
        if epsilon < 0:
            raise ConfigError("consensus tolerance epsilon must be >= 0")
        self.k = k
        self.epsilon = epsilon
        self.registry = {spec.name: spec for spec in registry}
        self.persist_path = pathlib.Path(persist_path) if persist_path else None
        self._time = time_fn
        self._lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}
        self._pending: dict[tuple[str, str], dict[str, object]] = {}
        if self.persist_path is not None and self.persist_path.exists():
            self._replay()

    # -- lookups -------------------------------------------------------------

    def entry(self, uri_m: str) -> CacheEntry | None:
        key = canonical_uri(uri_m)
        with self._lock:
            found = self._entries.get(key)
            if found is None:
                return None
            return CacheEntry(
                content=found.content, derived=dict(found.derived), fetched_at=found.fetched_at
            )

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def pending_count(self, uri_m: str, attribute: str) -> int:
        key = (canonical_uri(uri_m), attribute)
        with self._lock:
            return len(self._pending.get(key, {}))

    # -- content enrichment ----------------------------------------------------

    def store_content(self, uri_m: str, attrs: ContentAttrs) -> CacheEntry:
        key = canonical_uri(uri_m)
        now = self._time()
        with self._lock:
            entry = self._entries.setdefault(key, CacheEntry())
            entry.content = attrs
            entry.fetched_at = now
        self._append_log(
            {
                "kind": "content",
                "uri_m": key,
                "status_code": attrs.status_code,
                "content_type": attrs.content_type,
                "last_modified": attrs.last_modified.key if attrs.last_modified else None,
                "fetched_at": now,
            }
        )
        return self.entry(uri_m)  # type: ignore[return-value]

    # -- derived consensus -------------------------------------------------------

    def submit(self, uri_m: str, attribute: str, value: object, submitter: str) -> dict:
        """Record one derived-value submission; returns its acceptance state."""
        spec = self.registry.get(attribute)
        if spec is None:
            raise ValidationError(f"attribute {attribute!r} is not registered")
        if not submitter:
            raise ValidationError("submitter id must be non-empty")
        try:
            typed = spec.validate(value)
        except ValidationError as exc:
            return {"state": "rejected", "reason": str(exc)}

        key = (canonical_uri(uri_m), attribute)
        with self._lock:
            waiting = self._pending.setdefault(key, {})
            waiting[submitter] = typed
            cluster = self._agreeing_cluster(list(waiting.values()), spec)
            if cluster is None:
                return {"state": "pending", "have": len(waiting), "need": self.k}
            accepted = median(cluster) if spec.numeric else cluster[0]
            entry = self._entries.setdefault(key[0], CacheEntry())
            entry.derived[attribute] = accepted
            del self._pending[key]
        self._append_log(
            {
                "kind": "derived",
                "uri_m": key[0],
                "attribute": attribute,
                "value": accepted,
                "ts": self._time(),
            }
        )
        return {"state": "accepted", "value": accepted}

    def _agreeing_cluster(self, values: list, spec: AttributeSpec) -> list | None:
        """The largest group of at least k values that agree: within epsilon
        end to end for numerics, exact equality for strings."""
        if len(values) < self.k:
            return None
        if not spec.numeric:
            groups: dict[str, int] = {}
            for v in values:
                groups[v] = groups.get(v, 0) + 1
            name, count = max(groups.items(), key=lambda kv: kv[1])
            return [name] * count if count >= self.k else None
        ordered = sorted(values)
        best: list | None = None
        for i in range(len(ordered)):
            j = i
            while j + 1 < len(ordered) and ordered[j + 1] - ordered[i] <= self.epsilon:
                j += 1
            window = ordered[i : j + 1]
            if len(window) >= self.k and (best is None or len(window) > len(best)):
                best = window
        return best

    # -- persistence ---------------------------------------------------------------

    def _append_log(self, row: dict) -> None:
        if self.persist_path is None:
            return
        with self._lock:
            with self.persist_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    def _replay(self) -> None:
        assert self.persist_path is not None
        for line in self.persist_path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                entry = self._entries.setdefault(row["uri_m"], CacheEntry())
                if row["kind"] == "content":
                    entry.content = ContentAttrs(
                        status_code=row.get("status_code"),
                        content_type=row.get("content_type"),
                        last_modified=(
                            MementoDatetime.from_key(row["last_modified"])
                            if row.get("last_modified")
                            else None
                        ),
                    )
                    entry.fetched_at = row.get("fetched_at")
                elif row["kind"] == "derived":
                    entry.derived[row["attribute"]] = row["value"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                logger.warning("skipping bad enrichment log line: %s", exc)


def observed_value(record: MementoRecord, attribute: str, entry: CacheEntry | None) -> object | None:
    """The effective value of one attribute for one record.

    The record's own enrichment wins; the cache fills gaps. Returns None
    when neither knows the attribute.
    """
    if attribute == "status_code":
        own = record.content.status_code if record.content else None
        if own is None and entry is not None and entry.content:
            own = entry.content.status_code
        return own
    if attribute == "content_type":
        own = record.content.content_type if record.content else None
        if own is None and entry is not None and entry.content:
            own = entry.content.content_type
        return own
    if attribute == "last_modified":
        own = record.content.last_modified if record.content else None
        if own is None and entry is not None and entry.content:
            own = entry.content.last_modified
        return own
    if attribute == "access.type":
        return record.access.type if record.access else None
    derived = entry.derived.get(attribute) if entry is not None else None
    if derived is not None:
        return derived
    if attribute == "damage":
        return record.damage
    value = record.extensions.get(attribute)
    return value


def enrich_content(uri_m: str, *, client: httpx.Client | None = None, timeout_s: float = 5.0) -> ContentAttrs:
    """Probe a URI-M for content-based attributes without following
    redirects: HEAD first, GET when the host rejects HEAD with 405.

    Raises EnrichmentError for non-HTTP schemes and network failures so
    the caller leaves no cache entry (a later probe may succeed).
    """
    if not uri_m.startswith(("http://", "https://")):
        raise EnrichmentError(f"cannot probe non-HTTP URI {uri_m!r}")
    own_client = client is None
    client = client or httpx.Client(timeout=timeout_s, follow_redirects=False)
    try:
        response = client.head(uri_m)
        if response.status_code == 405:
            response = client.get(uri_m)
    except httpx.HTTPError as exc:
        raise EnrichmentError(f"probe of {uri_m} failed: {exc}") from exc
    finally:
        if own_client:
            client.close()

    last_modified = None
    if "last-modified" in response.headers:
        try:
            last_modified = MementoDatetime.from_http(response.headers["last-modified"])
        except Exception:
            logger.debug("unparseable Last-Modified from %s", uri_m)
    return ContentAttrs(
        status_code=response.status_code,
        content_type=response.headers.get("content-type"),
        last_modified=last_modified,
    )


@dataclass(frozen=True)
class StarGateConfig:
    self_id: str
    sources: tuple[SourceDescriptor, ...]
    rules: tuple[FilterRule, ...] = ()
    k: int = 3
    epsilon: float = 0.01
    registry: tuple[AttributeSpec, ...] = DEFAULT_REGISTRY
    timeout_ms: int = 5000
    enrich_concurrency: int = 4
    persist_path: str | None = None
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self):
        if not self.self_id:
            raise ConfigError("stargate id must be non-empty")
        if self.enrich_concurrency < 1:
            raise ConfigError("enrich_concurrency must be >= 1")


def load_stargate_config(config: dict, *, host: str | None = None, port: int | None = None) -> StarGateConfig:
    """Build a StarGateConfig from its JSON object form."""
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
        registry = list(DEFAULT_REGISTRY)
        for extra in config.get("attributes", ()):
            registry.append(
                AttributeSpec(
                    name=str(extra["name"]),
                    numeric=bool(extra.get("numeric", True)),
                    low=extra.get("low"),
                    high=extra.get("high"),
                )
            )
        return StarGateConfig(
            self_id=str(config["id"]),
            sources=sources,
            rules=tuple(
                FilterRule(matcher=str(r["match"]), source_ids=tuple(r["sources"]))
                for r in config.get("rules", ())
            ),
            k=int(config.get("k", 3)),
            epsilon=float(config.get("epsilon", 0.01)),
            registry=tuple(registry),
            timeout_ms=int(config.get("timeout_ms", 5000)),
            enrich_concurrency=int(config.get("enrich_concurrency", 4)),
            persist_path=config.get("persist_path"),
            host=host if host is not None else str(config.get("host", "127.0.0.1")),
            port=port if port is not None else int(config.get("port", 0)),
        )
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise ConfigError(f"bad stargate config: {exc}") from exc


class StarGateService:
    """One running StarGate.

    - GET /stargate/{URI-R}: datetime negotiation plus memento-filter
      preferences over the aggregated candidates.
    - GET /calculate/{URI-M}: redirect to a known memento, scheduling a
      content probe of it in the background.
    - POST /enrich/{URI-M}: submit a derived attribute value.
    """

    def __init__(self, config: StarGateConfig, engine: AggregationEngine | None = None):
        self.config = config
        self.engine = engine or AggregationEngine(timeout_ms=config.timeout_ms)
        self.cache = EnrichmentCache(
            k=config.k,
            epsilon=config.epsilon,
            registry=config.registry,
            persist_path=config.persist_path,
        )
        self.http = HttpService(
            self._handle, name=f"stargate-{config.self_id}", host=config.host, port=config.port
        )
        self._executor = ThreadPoolExecutor(
            max_workers=config.enrich_concurrency, thread_name_prefix=f"enrich-{config.self_id}"
        )
        self._known_uri_ms: set[str] = set()
        self._probing: set[str] = set()
        self._known_lock = threading.Lock()

    def start(self) -> "StarGateService":
        self.http.start()
        return self

    def stop(self) -> None:
        self._executor.shutdown(wait=False, cancel_futures=True)
        self.http.stop()

    def reconfigure(self, config: StarGateConfig) -> None:
        """Swap in a new config on a live service (see MMAService.reconfigure)."""
        self.config = config
        self.engine = AggregationEngine(timeout_ms=config.timeout_ms)
        self.cache = EnrichmentCache(
            k=config.k,
            epsilon=config.epsilon,
            registry=config.registry,
            persist_path=config.persist_path,
        )
        self._executor.shutdown(wait=False, cancel_futures=True)
        self._executor = ThreadPoolExecutor(
            max_workers=config.enrich_concurrency, thread_name_prefix=f"enrich-{config.self_id}"
        )

    @property
    def base_url(self) -> str:
        return self.http.base_url

    # -- registration ----------------------------------------------------------

    def register_memento(self, uri_m: str) -> None:
        with self._known_lock:
            self._known_uri_ms.add(canonical_uri(uri_m))

    def _is_known(self, uri_m: str) -> bool:
        try:
            key = canonical_uri(uri_m)
        except UriParseError:
            return False
        with self._known_lock:
            return key in self._known_uri_ms

    # -- routing ------------------------------------------------------------------

    def _handle(self, request: Request) -> Response:
        if request.path.startswith("/stargate/"):
            if request.method not in ("GET", "HEAD"):
                return Response.text(405, "only GET is supported here")
            return self._negotiate(request)
        if request.path.startswith("/calculate/"):
            if request.method not in ("GET", "HEAD"):
                return Response.text(405, "only GET is supported here")
            return self._calculate(request)
        if request.path.startswith("/enrich/"):
            if request.method != "POST":
                return Response.text(405, "enrichment submissions are POSTed")
            return self._enrich(request)
        return Response.text(404, "unknown path")

    # -- negotiation -----------------------------------------------------------------

    def _negotiate(self, request: Request) -> Response:
        raw_uri = request.path[len("/stargate/"):]
        try:
            uri_r = OriginalUri(raw_uri)
        except UriParseError as exc:
            return Response.text(400, f"bad URI-R: {exc}")

        wanted: MementoDatetime | None = None
        accept_datetime = request.header("accept-datetime")
        if accept_datetime:
            try:
                wanted = MementoDatetime.from_http(accept_datetime)
            except Exception:
                return Response.text(400, f"unparseable Accept-Datetime: {accept_datetime!r}")

        try:
            filters = parse_filters(request.header("prefer"), self.cache.registry)
        except ValidationError as exc:
            return Response.text(400, str(exc))

        plan = compile_plan(None, self.config.rules, self.config.sources, uri_r)
        report = self.engine.execute_plan(plan, uri_r, timeout_ms=self.config.timeout_ms)

        if report.auth_challenges:
            headers: list[tuple[str, str]] = []
            for challenge in report.auth_challenges:
                headers.extend(build_auth_challenge(challenge.source_id, challenge.uri_p))
            return Response(status=401, headers=headers, body=b"")

        timemap = report.timemap
        for record in timemap.mementos:
            self.register_memento(record.uri_m)
        if not timemap.mementos:
            return Response.text(404, "no mementos for this resource")

        survivors = [
            record
            for record in timemap.mementos
            if self._passes(record, filters)
        ]
        if filters and not survivors:
            variants = replace(timemap, self_uris={}, timegate_uri=None)
            return Response(
                status=406,
                headers=[("Content-Type", JSON_MEDIA_TYPE), ("Vary", "Prefer, Accept-Datetime")],
                body=serialize_json(variants).encode("utf-8"),
            )

        filtered_map = TimeMap.assemble(timemap.original, survivors)
        chosen = select_nearest(filtered_map, wanted)
        assert chosen is not None
        headers = [
            ("Location", chosen.uri_m),
            ("Vary", "accept-datetime, prefer"),
            ("Memento-Datetime", chosen.datetime.http),
            ("Link", f'<{raw_uri}>; rel="original"'),
        ]
        if filters:
            honored = ", ".join(
                f'{FILTER_PREFERENCE}="{f.attribute} {f.op} {_literal(f.value)}"' for f in filters
            )
            headers.append(("Preference-Applied", honored))
        return Response(status=302, headers=headers, body=b"")

    def _passes(self, record: MementoRecord, filters: list[DimensionFilter]) -> bool:
        if not filters:
            return True
        entry = self.cache.entry(record.uri_m)
        for f in filters:
            observed = observed_value(record, f.attribute, entry)
            if observed is None or not f.matches(observed):
                return False
        return True

    # -- enrichment endpoints ------------------------------------------------------------

    def _calculate(self, request: Request) -> Response:
        uri_m = request.path[len("/calculate/"):]
        if not self._is_known(uri_m):
            return Response.text(404, f"unknown memento {uri_m!r}")
        self._schedule_probe(uri_m)
        return Response(status=302, headers=[("Location", uri_m)], body=b"")

    def _schedule_probe(self, uri_m: str) -> None:
        key = canonical_uri(uri_m)
        with self._known_lock:
            entry = self.cache.entry(uri_m)
            if (entry is not None and entry.content) or key in self._probing:
                return
            self._probing.add(key)
        self._executor.submit(self._probe, uri_m, key)

    def _probe(self, uri_m: str, key: str) -> None:
        try:
            attrs = enrich_content(uri_m, timeout_s=self.config.timeout_ms / 1000)
            self.cache.store_content(uri_m, attrs)
        except EnrichmentError as exc:
            logger.warning("enrichment probe failed: %s", exc)
        finally:
            with self._known_lock:
                self._probing.discard(key)

    def _enrich(self, request: Request) -> Response:
        uri_m = request.path[len("/enrich/"):]
        if not self._is_known(uri_m):
            return Response.text(404, f"unknown memento {uri_m!r}")
        try:
            body = json.loads(request.body.decode("utf-8"))
            attribute = body["attribute"]
            value = body["value"]
            submitter = body["submitter"]
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError):
            return Response.text(400, "body must be JSON with attribute, value, submitter")
        try:
            outcome = self.cache.submit(uri_m, attribute, value, submitter)
        except ValidationError as exc:
            return Response.text(400, str(exc))
        return Response(
            status=200,
            headers=[("Content-Type", "application/json")],
            body=(json.dumps(outcome, ensure_ascii=False) + "\n").encode("utf-8"),
        )


def _literal(value: object) -> str:
    if isinstance(value, MementoDatetime):
        return value.key
    return str(value)


__all__ = [
    "AttributeSpec",
    "CacheEntry",
    "DEFAULT_REGISTRY",
    "DimensionFilter",
    "EnrichmentCache",
    "StarGateConfig",
    "StarGateService",
    "enrich_content",
    "load_stargate_config",
    "observed_value",
    "parse_filters",
]
