"""Plan execution: tiered fan-out to sources, duplicate-collapsing merge,
and cycle guarding for hierarchical aggregation graphs."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .codec import parser_for_media_type
from .codec.linkformat import parse_header_links
from .exceptions import MergeError, ValidationError
from .model import (
    MementoRecord,
    OriginalUri,
    SourceDescriptor,
    TimeMap,
    canonical_uri,
)
from .precedence import QueryPlan, evaluate_short_circuit

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 5000
DEFAULT_DEPTH_LIMIT = 8

# Cycle-guard chain header: comma-separated mementity ids, outermost first.
VIA_HEADER = "X-MMA-Via"


class Outcome(str, Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    HTTP_ERROR = "http_error"
    AUTH_REQUIRED = "auth_required"
    UNREACHABLE = "unreachable"


@dataclass(frozen=True)
class SourceResult:
    """What one source returned for one request."""

    source_id: str
    outcome: Outcome
    timemap: TimeMap | None = None
    status: int | None = None
    uri_p: str | None = None
    elapsed_ms: float = 0.0
    detail: str | None = None

    def __post_init__(self):
        if (self.outcome is Outcome.OK) != (self.timemap is not None):
            raise ValidationError("timemap present iff outcome is ok")
        if self.outcome is Outcome.AUTH_REQUIRED and not self.uri_p:
            raise ValidationError("auth_required result must carry a URI-P")


@dataclass(frozen=True)
class AggregateReport:
    """The merged TimeMap plus everything observed while building it."""

    timemap: TimeMap
    per_source: tuple[SourceResult, ...]
    tiers_executed: int
    short_circuited: bool

    @property
    def auth_challenges(self) -> tuple[SourceResult, ...]:
        return tuple(r for r in self.per_source if r.outcome is Outcome.AUTH_REQUIRED)


@dataclass(frozen=True)
class CycleDecision:
    proceed: bool
    via: tuple[str, ...]
    reason: str | None = None


def guard_cycles(
    incoming_via: Sequence[str], self_id: str, depth_limit: int = DEFAULT_DEPTH_LIMIT
) -> CycleDecision:
    """Decide whether this mementity may handle a request that already
    traversed ``incoming_via``.

    Refusal (a loop, or the chain at the depth limit) is a decision for the
    caller to surface, not an exception.
    """
    via = tuple(incoming_via)
    if self_id in via:
        return CycleDecision(False, via, f"cycle: {self_id!r} already in via chain {list(via)}")
    if len(via) >= depth_limit:
        return CycleDecision(False, via, f"depth limit {depth_limit} reached at {self_id!r}")
    return CycleDecision(True, via + (self_id,))


def _merge_duplicate(kept: MementoRecord, dup: MementoRecord) -> MementoRecord:
    """Fold a later duplicate into the kept record: the kept record's own
    attributes win, gaps are filled."""
    if kept.content is None:
        content = dup.content
    elif dup.content is None:
        content = kept.content
    else:
        content = kept.content.merged_with(dup.content)
    derived = dict(dup.derived or {})
    derived.update(kept.derived or {})
    extensions = {k: v for k, v in dup.extensions.items() if k != "via"}
    extensions.update(kept.extensions)
    return replace(
        kept,
        content=content,
        derived=derived or None,
        access=kept.access if kept.access is not None else dup.access,
        extensions=extensions,
    )


def merge_timemaps(parts: Sequence[tuple[str, TimeMap]]) -> TimeMap:
    """Consolidate per-source TimeMaps into one.

    Records are deduplicated by canonical URI-M: the earliest part's record
    is kept, later duplicates fill in attributes it lacks. Each record is
    tagged with the part it came from (extension "via"; re-merging at a
    higher aggregation layer re-tags with the nearer source). Output order
    is (datetime, part index, URI-M); rel markers are recomputed.

    All parts must describe the same original resource.
    """
    if not parts:
        raise MergeError("nothing to merge")
    first_original = parts[0][1].original
    for source_id, timemap in parts:
        if timemap.original.canonical != first_original.canonical:
            raise MergeError(
                f"part {source_id!r} is for {timemap.original.value!r}, "
                f"expected {first_original.value!r}"
            )

    combined: dict[str, tuple[int, MementoRecord]] = {}
    for index, (source_id, timemap) in enumerate(parts):
        for record in timemap.mementos:
            key = record.canonical_uri_m
            tagged = replace(record, extensions={**record.extensions, "via": source_id})
            if key in combined:
                kept_index, kept = combined[key]
                combined[key] = (kept_index, _merge_duplicate(kept, tagged))
            else:
                combined[key] = (index, tagged)

    ordered = sorted(
        combined.values(), key=lambda pair: (pair[1].datetime, pair[0], pair[1].uri_m)
    )
    warnings = tuple(w for _, tm in parts for w in tm.warnings)
    return TimeMap.assemble(
        first_original, [record for _, record in ordered], warnings=warnings
    )


FetchFn = Callable[[SourceDescriptor, str, "FetchOptions"], SourceResult]


@dataclass(frozen=True)
class FetchOptions:
    token: str | None = None
    via: tuple[str, ...] = ()
    timeout_ms: int = DEFAULT_TIMEOUT_MS


def _uri_p_from_401(response: httpx.Response, source: SourceDescriptor) -> str | None:
    link_value = response.headers.get("Link")
    if link_value:
        try:
            for target, params in parse_header_links(link_value):
                if "authenticate" in params.get("rel", "").split():
                    return target
        except Exception:  # noqa: BLE001 - malformed header falls back
            logger.debug("unparseable Link header from %s", source.id, exc_info=True)
    return source.auth_pointer


_pool: httpx.Client | None = None
_pool_lock = threading.Lock()


def _pooled_client() -> httpx.Client:
    # One process-lifetime client: per-fetch client construction costs more
    # than the request itself in layered aggregation graphs.
    global _pool
    with _pool_lock:
        if _pool is None:
            _pool = httpx.Client(follow_redirects=False)
        return _pool


def http_fetch(source: SourceDescriptor, uri_r: str, options: FetchOptions) -> SourceResult:
    """Fetch one source's TimeMap over HTTP.

    401 responses become auth_required results carrying the URI-P from the
    challenge's ``Link rel="authenticate"`` (or the descriptor's configured
    pointer). Transport failures and non-200s never raise.
    """
    url = source.timemap_url(uri_r)
    headers: dict[str, str] = {}
    if options.via:
        headers[VIA_HEADER] = ",".join(options.via)
    if options.token:
        headers["Authorization"] = f"Bearer {options.token}"
    started = time.perf_counter()

    def elapsed() -> float:
        return (time.perf_counter() - started) * 1000

    try:
        response = _pooled_client().get(
            url, headers=headers, timeout=options.timeout_ms / 1000
        )
    except httpx.TimeoutException:
        return SourceResult(source.id, Outcome.TIMEOUT, elapsed_ms=elapsed(), detail=url)
    except httpx.HTTPError as exc:
        return SourceResult(
            source.id, Outcome.UNREACHABLE, elapsed_ms=elapsed(), detail=f"{url}: {exc}"
        )

    if response.status_code == 401:
        uri_p = _uri_p_from_401(response, source)
        if uri_p:
            return SourceResult(
                source.id, Outcome.AUTH_REQUIRED, status=401, uri_p=uri_p, elapsed_ms=elapsed()
            )
        return SourceResult(
            source.id,
            Outcome.HTTP_ERROR,
            status=401,
            elapsed_ms=elapsed(),
            detail="401 without an authentication pointer",
        )
    if response.status_code != 200:
        return SourceResult(
            source.id, Outcome.HTTP_ERROR, status=response.status_code, elapsed_ms=elapsed()
        )

    parser = parser_for_media_type(response.headers.get("Content-Type", ""))
    try:
        timemap = parser(response.text)
    except Exception as exc:  # noqa: BLE001 - any parse failure is a source defect
        return SourceResult(
            source.id,
            Outcome.HTTP_ERROR,
            status=200,
            elapsed_ms=elapsed(),
            detail=f"unparseable body: {exc}",
        )
    return SourceResult(source.id, Outcome.OK, timemap=timemap, elapsed_ms=elapsed())


@dataclass
class AggregationEngine:
    """Executes QueryPlans: concurrent fan-out within a tier, sequential
    tiers, merge in plan order.

    Stateless between requests; one engine may serve concurrent requests.
    ``fetch`` is injectable for tests and alternative transports.
    """

    fetch: FetchFn = http_fetch
    timeout_ms: int = DEFAULT_TIMEOUT_MS

    def execute_plan(
        self,
        plan: QueryPlan,
        uri_r: OriginalUri,
        tokens: Mapping[str, str] | None = None,
        via: Iterable[str] = (),
        timeout_ms: int | None = None,
    ) -> AggregateReport:
        tokens = tokens or {}
        via = tuple(via)
        budget = timeout_ms if timeout_ms is not None else self.timeout_ms

        per_source: list[SourceResult] = []
        parts: list[tuple[str, TimeMap]] = []
        tiers_executed = 0
        short_circuited = False

        for tier_index, tier in enumerate(plan.tiers):
            tier_results = self._run_tier(tier, uri_r, tokens, via, budget)
            per_source.extend(tier_results)
            tiers_executed += 1
            tier_count = sum(
                len(r.timemap) for r in tier_results if r.outcome is Outcome.OK
            )
            parts.extend(
                (r.source_id, r.timemap) for r in tier_results if r.outcome is Outcome.OK
            )
            if not evaluate_short_circuit(plan, tier_index, tier_count):
                short_circuited = tier_index + 1 < len(plan.tiers)
                break

        if parts:
            merged = merge_timemaps(parts)
            timemap = replace(merged, original=uri_r)
        else:
            timemap = TimeMap.assemble(uri_r, [])
        return AggregateReport(
            timemap=timemap,
            per_source=tuple(per_source),
            tiers_executed=tiers_executed,
            short_circuited=short_circuited,
        )

    def _run_tier(
        self,
        tier: Sequence[SourceDescriptor],
        uri_r: OriginalUri,
        tokens: Mapping[str, str],
        via: tuple[str, ...],
        budget: int,
    ) -> list[SourceResult]:
        if not tier:
            return []

        def query(source: SourceDescriptor) -> SourceResult:
            # Tokens are requester credentials for private sources; they
            # are never forwarded to public endpoints.
            token = tokens.get(source.id) if source.is_private else None
            options = FetchOptions(token=token, via=via, timeout_ms=budget)
            try:
                return self.fetch(source, uri_r.value, options)
            except Exception as exc:  # noqa: BLE001 - a fetch bug must not kill the tier
                logger.exception("fetcher raised for source %s", source.id)
                return SourceResult(
                    source.id, Outcome.UNREACHABLE, elapsed_ms=0.0, detail=str(exc)
                )

        with ThreadPoolExecutor(max_workers=len(tier)) as pool:
            return list(pool.map(query, tier))


__all__ = [
    "AggregateReport",
    "AggregationEngine",
    "CycleDecision",
    "FetchOptions",
    "Outcome",
    "SourceResult",
    "VIA_HEADER",
    "guard_cycles",
    "http_fetch",
    "merge_timemaps",
]
