"""Core domain types: original URIs, memento datetimes, records, TimeMaps,
source descriptors, and access grants.

All types are immutable values; they can be shared freely between threads.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from email.utils import format_datetime, parsedate_to_datetime
from enum import Enum
from typing import Iterable, Mapping
from urllib.parse import urlsplit

from .exceptions import DatetimeError, UriParseError, ValidationError

# Relation strings a memento record may carry inside a TimeMap.
REL_MEMENTO = "memento"
REL_FIRST = "first memento"
REL_LAST = "last memento"
REL_FIRST_LAST = "first last memento"
MEMENTO_RELS = (REL_MEMENTO, REL_FIRST, REL_LAST, REL_FIRST_LAST)

# Context URIs announced in enriched TimeMaps. The base memento context is
# always present; the damage/access contexts are added when any record
# carries the corresponding attribute class.
CONTEXT_MEMENTO = "https://oduwsdl.github.io/contexts/memento"
CONTEXT_DAMAGE = "https://oduwsdl.github.io/contexts/damage"
CONTEXT_ACCESS = "https://oduwsdl.github.io/contexts/access"

_DEFAULT_PORTS = {"http": 80, "https": 443}


def _first_bad_byte(raw: str) -> int | None:
    for i, ch in enumerate(raw):
        if ch.isspace() or ord(ch) < 0x20:
            return i
    return None


@functools.lru_cache(maxsize=8192)
def canonical_uri(raw: str) -> str:
    """Return the canonical comparison form of an absolute HTTP(S) URI.

    Lowercases the scheme and host, strips default ports, and ensures a
    root path of "/". Queries, fragments, and "www." prefixes are kept as
    given. Idempotent.
    """
    if not raw:
        raise UriParseError("empty URI", 0)
    bad = _first_bad_byte(raw)
    if bad is not None:
        raise UriParseError(f"illegal character {raw[bad]!r}", bad)
    try:
        parts = urlsplit(raw)
    except ValueError as exc:
        raise UriParseError(str(exc), 0) from exc
    scheme = parts.scheme.lower()
    if scheme not in ("http", "https"):
        raise UriParseError(f"unsupported scheme {parts.scheme!r}", 0)
    if not parts.netloc:
        raise UriParseError("missing authority", raw.find(":") + 3)
    host = parts.hostname or ""
    if not host:
        raise UriParseError("missing host", raw.find("://") + 3)
    try:
        port = parts.port
    except ValueError as exc:
        offset = raw.find("://") + 3 + parts.netloc.rfind(":")
        raise UriParseError("invalid port", offset) from exc
    if ":" in host:  # bare IPv6 address: restore brackets
        host = f"[{host}]"
    netloc = host
    if parts.username is not None:
        cred = parts.username if parts.password is None else f"{parts.username}:{parts.password}"
        netloc = f"{cred}@{host}"
    if port is not None and port != _DEFAULT_PORTS[scheme]:
        netloc = f"{netloc}:{port}"
    path = parts.path or "/"
    out = f"{scheme}://{netloc}{path}"
    if parts.query:
        out += f"?{parts.query}"
    if parts.fragment:
        out += f"#{parts.fragment}"
    return out


@dataclass(frozen=True)
class OriginalUri:
    """An original (live-web) resource identifier, kept as supplied.

    Equality is textual; use :attr:`canonical` when comparing resources.
    """

    value: str

    def __post_init__(self):
        canonical_uri(self.value)  # raises UriParseError on malformed input

    @property
    def canonical(self) -> str:
        return canonical_uri(self.value)

    def same_resource(self, other: "OriginalUri | str") -> bool:
        other_value = other.value if isinstance(other, OriginalUri) else other
        return self.canonical == canonical_uri(other_value)


def canonicalize(raw: str) -> OriginalUri:
    """Parse and normalize a raw URI string into its canonical form."""
    return OriginalUri(canonical_uri(raw))


@dataclass(frozen=True, order=True)
class MementoDatetime:
    """A capture instant: UTC, second precision.

    Round-trips losslessly between the 14-digit sort-key form
    (``YYYYMMDDhhmmss``) and the RFC-1123 form used in TimeMap bodies
    (``Sat, 12 Dec 1998 01:39:21 GMT``). Ordering is chronological and
    identical under both representations.
    """

    instant: datetime

    def __post_init__(self):
        if self.instant.tzinfo is None or self.instant.utcoffset().total_seconds() != 0:
            raise DatetimeError(f"instant must be UTC: {self.instant!r}")
        if self.instant.microsecond:
            raise DatetimeError("sub-second precision is not representable in a 14-digit key")

    @classmethod
    def from_key(cls, key: str) -> "MementoDatetime":
        """Parse the 14-digit ``YYYYMMDDhhmmss`` form."""
        if len(key) != 14 or not key.isascii() or not key.isdigit():
            raise DatetimeError(f"expected 14 digits, got {key!r}")
        try:
            instant = datetime(
                int(key[0:4]), int(key[4:6]), int(key[6:8]),
                int(key[8:10]), int(key[10:12]), int(key[12:14]),
                tzinfo=timezone.utc,
            )
        except ValueError as exc:
            raise DatetimeError(f"impossible instant {key!r}: {exc}") from exc
        return cls(instant)

    @classmethod
    def from_http(cls, text: str) -> "MementoDatetime":
        """Parse the RFC-1123 form."""
        try:
            parsed = parsedate_to_datetime(text.strip())
        except (TypeError, ValueError) as exc:
            raise DatetimeError(f"unparseable HTTP datetime {text!r}") from exc
        if parsed.tzinfo is None:
            parsed = parsed.replace(tzinfo=timezone.utc)
        if parsed.utcoffset().total_seconds() != 0:
            raise DatetimeError(f"HTTP datetime must be GMT: {text!r}")
        return cls(parsed.replace(microsecond=0))

    @property
    def key(self) -> str:
        return self.instant.strftime("%Y%m%d%H%M%S")

    @property
    def http(self) -> str:
        return format_datetime(self.instant, usegmt=True)

    def __str__(self) -> str:
        return self.key


@dataclass(frozen=True)
class ContentAttrs:
    """Attributes observed by dereferencing a URI-M."""

    status_code: int | None = None
    content_type: str | None = None
    last_modified: MementoDatetime | None = None

    def __bool__(self) -> bool:
        return (self.status_code, self.content_type, self.last_modified) != (None, None, None)

    def merged_with(self, other: "ContentAttrs") -> "ContentAttrs":
        """Fill in fields this instance lacks from ``other``."""
        return ContentAttrs(
            status_code=self.status_code if self.status_code is not None else other.status_code,
            content_type=self.content_type if self.content_type is not None else other.content_type,
            last_modified=self.last_modified if self.last_modified is not None else other.last_modified,
        )


@dataclass(frozen=True)
class AccessAttrs:
    """Attributes guiding dereference of restricted captures.

    ``type`` is an opaque label naming the token encoding or procedure;
    it is passed through verbatim.
    """

    type: str | None = None
    token: str | None = None

    def __bool__(self) -> bool:
        return (self.type, self.token) != (None, None)


@dataclass(frozen=True)
class MementoRecord:
    """One archived capture inside a TimeMap."""

    uri_m: str
    datetime: MementoDatetime
    rel: str = REL_MEMENTO
    content: ContentAttrs | None = None
    derived: Mapping[str, float] | None = None
    access: AccessAttrs | None = None
    extensions: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.uri_m:
            raise ValidationError("uri_m must be non-empty")
        canonical_uri(self.uri_m)  # must be absolute http(s)
        if self.rel not in MEMENTO_RELS:
            raise ValidationError(f"unknown rel {self.rel!r}")
        if self.derived is not None:
            damage = self.derived.get("damage")
            if damage is not None and not 0.0 <= float(damage) <= 1.0:
                raise ValidationError(f"damage {damage!r} outside [0, 1]")

    @property
    def damage(self) -> float | None:
        if self.derived is None:
            return None
        value = self.derived.get("damage")
        return None if value is None else float(value)

    @property
    def canonical_uri_m(self) -> str:
        return canonical_uri(self.uri_m)

    def with_rel(self, rel: str) -> "MementoRecord":
        return self if rel == self.rel else replace(self, rel=rel)


def _assign_rels(records: tuple[MementoRecord, ...]) -> tuple[MementoRecord, ...]:
    if not records:
        return records
    if len(records) == 1:
        return (records[0].with_rel(REL_FIRST_LAST),)
    middle = tuple(r.with_rel(REL_MEMENTO) for r in records[1:-1])
    return (records[0].with_rel(REL_FIRST),) + middle + (records[-1].with_rel(REL_LAST),)


def _normalized_contexts(stored: Iterable[str], mementos: Iterable[MementoRecord]) -> tuple[str, ...]:
    stored = tuple(stored)
    need_damage = any(m.derived and "damage" in m.derived for m in mementos)
    need_access = any(m.access for m in mementos)
    out = [CONTEXT_MEMENTO]
    if need_damage or CONTEXT_DAMAGE in stored:
        out.append(CONTEXT_DAMAGE)
    if need_access or CONTEXT_ACCESS in stored:
        out.append(CONTEXT_ACCESS)
    out.extend(u for u in stored if u not in (CONTEXT_MEMENTO, CONTEXT_DAMAGE, CONTEXT_ACCESS))
    return tuple(out)


@dataclass(frozen=True)
class TimeMap:
    """An ordered listing of the known captures of one original resource.

    ``self_uris`` maps a serialization name ("link", "json", "cdxj") to the
    URI at which this TimeMap is served in that format. ``warnings`` carries
    parser diagnostics and is excluded from equality.

    Parsers construct TimeMaps that mirror their input documents; use
    :meth:`assemble` to build one that is sorted and carries recomputed
    rel markers.
    """

    original: OriginalUri
    timegate_uri: str | None = None
    self_uris: Mapping[str, str] = field(default_factory=dict)
    context_uris: tuple[str, ...] = ()
    mementos: tuple[MementoRecord, ...] = ()
    meta_extensions: Mapping[str, object] = field(default_factory=dict)
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "context_uris", _normalized_contexts(self.context_uris, self.mementos)
        )

    @classmethod
    def assemble(
        cls,
        original: OriginalUri,
        records: Iterable[MementoRecord],
        *,
        timegate_uri: str | None = None,
        self_uris: Mapping[str, str] | None = None,
        meta_extensions: Mapping[str, object] | None = None,
        warnings: Iterable[str] = (),
    ) -> "TimeMap":
        """Build a TimeMap from an unordered collection of records.

        Records are stably sorted by datetime (ties keep input order) and
        rel markers are recomputed: the extremes carry "first memento" and
        "last memento", a singleton carries "first last memento".
        """
        ordered = tuple(sorted(records, key=lambda r: r.datetime))
        seen: set[str] = set()
        for r in ordered:
            if r.uri_m in seen:
                raise ValidationError(f"duplicate uri_m {r.uri_m!r}")
            seen.add(r.uri_m)
        return cls(
            original=original,
            timegate_uri=timegate_uri,
            self_uris=dict(self_uris or {}),
            mementos=_assign_rels(ordered),
            meta_extensions=dict(meta_extensions or {}),
            warnings=tuple(warnings),
        )

    def __len__(self) -> int:
        return len(self.mementos)


class SourceKind(str, Enum):
    ARCHIVE = "archive"
    AGGREGATOR = "aggregator"
    META_AGGREGATOR = "meta_aggregator"


class Visibility(str, Enum):
    PUBLIC = "public"
    PRIVATE = "private"


@dataclass(frozen=True)
class SourceDescriptor:
    """One queryable mementity endpoint.

    ``timemap_endpoint`` is a URI template: a ``{uri_r}`` placeholder is
    substituted with the requested original URI; without a placeholder the
    URI is appended. Private sources either carry ``auth_pointer`` (a URI-P)
    or supply one in their 401 challenge.
    """

    id: str
    timemap_endpoint: str
    kind: SourceKind = SourceKind.ARCHIVE
    visibility: Visibility = Visibility.PUBLIC
    auth_pointer: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("source id must be non-empty")

    @property
    def is_private(self) -> bool:
        return self.visibility is Visibility.PRIVATE

    def timemap_url(self, uri_r: str) -> str:
        if "{uri_r}" in self.timemap_endpoint:
            return self.timemap_endpoint.replace("{uri_r}", uri_r)
        return self.timemap_endpoint + uri_r


@dataclass(frozen=True)
class TokenGrant:
    """An opaque access token bound to one source and one requester.

    The raw token is excluded from ``repr`` so grants can be logged safely.
    ``expires_at`` is a Unix timestamp (UTC seconds).
    """

    token: str = field(repr=False)
    source_id: str
    subject: str
    expires_at: float

    def __post_init__(self):
        if len(self.token) < 32:
            raise ValidationError("token must be at least 32 characters")
