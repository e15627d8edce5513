"""Query planning: profiles, selective-aggregation rules, and tiered plans.

A requester's precedence profile says which visibility classes of sources
to contact and in what order; an operator's filter rules restrict which
sources are candidates for a given original URI. Compilation is pure, so
plans can be built per-request without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence
from urllib.parse import urlsplit

from .exceptions import UriParseError, ValidationError
from .model import OriginalUri, SourceDescriptor, canonical_uri


class Profile(str, Enum):
    """The five requestable precedence profiles.

    Absence of a profile is not a sixth member: an unprofiled request gets
    conventional aggregation (every candidate in one tier, no
    short-circuiting), which is a planner default rather than something a
    requester can name.
    """

    NO_ARCHIVES = "noArchives"
    PUBLIC_ONLY = "publicOnly"
    PRIVATE_ONLY = "privateOnly"
    PRIVATE_FIRST = "privateFirst"
    PUBLIC_FIRST = "publicFirst"

    @classmethod
    def parse(cls, name: str) -> "Profile":
        for member in cls:
            if member.value == name:
                return member
        raise ValidationError(f"unknown profile {name!r}")


class ShortCircuit(str, Enum):
    NEVER = "never"
    STOP_WHEN_NONEMPTY = "stop_when_nonempty"


def _host_and_path(uri: str) -> tuple[str, str]:
    parts = urlsplit(uri)
    return (parts.hostname or "").lower(), parts.path or "/"


def _host_matches(host: str, suffix: str) -> bool:
    suffix = suffix.lower()
    return host == suffix or host.endswith("." + suffix)


@dataclass(frozen=True)
class FilterRule:
    """One selective-aggregation rule: when ``matcher`` covers the
    requested URI, only ``source_ids`` are candidates.

    Matcher forms, no regex:
      - full URI ("http://a.com/x"): exact match on canonical forms;
      - host and path ("a.com/x.html"): host-suffix plus exact path;
      - bare host ("a.com"): host-suffix ("www.a.com" matches).
    """

    matcher: str
    source_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.matcher:
            raise ValidationError("rule matcher must be non-empty")
        object.__setattr__(self, "source_ids", tuple(self.source_ids))

    def covers(self, uri_r: OriginalUri) -> bool:
        if "://" in self.matcher:
            try:
                return canonical_uri(self.matcher) == uri_r.canonical
            except UriParseError:
                return False
        host, path = _host_and_path(uri_r.canonical)
        if "/" in self.matcher:
            m_host, _, m_path = self.matcher.partition("/")
            return _host_matches(host, m_host) and path == "/" + m_path
        return _host_matches(host, self.matcher)


@dataclass(frozen=True)
class QueryPlan:
    """Ordered tiers of sources to contact for one request.

    ``advisory`` is set when the requested profile named a partition with
    no members (e.g. privateOnly with no private sources configured); the
    plan is still valid, it just cannot return anything from that side.
    """

    tiers: tuple[tuple[SourceDescriptor, ...], ...]
    short_circuit: ShortCircuit = ShortCircuit.NEVER
    advisory: str | None = None
    profile: Profile | None = None

    def __post_init__(self):
        seen: set[str] = set()
        for tier in self.tiers:
            for source in tier:
                if source.id in seen:
                    raise ValidationError(f"source {source.id!r} appears in two tiers")
                seen.add(source.id)

    @property
    def tier_ids(self) -> tuple[tuple[str, ...], ...]:
        return tuple(tuple(s.id for s in tier) for tier in self.tiers)

    @property
    def source_count(self) -> int:
        return sum(len(tier) for tier in self.tiers)


def select_candidates(
    rules: Sequence[FilterRule],
    sources: Sequence[SourceDescriptor],
    uri_r: OriginalUri,
) -> list[SourceDescriptor]:
    """Apply first-match-wins rules to the configured sources.

    The matching rule's source_ids order is honored; ids that reference no
    configured source are a configuration defect and raise. With no
    matching rule every configured source is a candidate, in configured
    order.
    """
    by_id = {s.id: s for s in sources}
    if len(by_id) != len(sources):
        raise ValidationError("source ids must be distinct")
    for rule in rules:
        if rule.covers(uri_r):
            missing = [sid for sid in rule.source_ids if sid not in by_id]
            if missing:
                raise ValidationError(
                    f"rule {rule.matcher!r} references unknown sources {missing}"
                )
            return [by_id[sid] for sid in rule.source_ids]
    return list(sources)


def compile_plan(
    profile: Profile | None,
    rules: Sequence[FilterRule],
    sources: Sequence[SourceDescriptor],
    uri_r: OriginalUri,
    extra_sources: Iterable[SourceDescriptor] = (),
) -> QueryPlan:
    """Compile a profile, the rule table, and the source roster into a plan.

    ``extra_sources`` are requester-supplied ad-hoc endpoints. They join
    after rule filtering (rules constrain only configured sources) and sit
    at the end of the final tier their visibility allows.
    """
    candidates = select_candidates(rules, sources, uri_r)
    extras = list(extra_sources)
    known = {s.id for s in candidates}
    for extra in extras:
        if extra.id in known:
            raise ValidationError(f"extra source {extra.id!r} shadows a candidate")
        known.add(extra.id)
    candidates = candidates + extras

    private = tuple(s for s in candidates if s.is_private)
    public = tuple(s for s in candidates if not s.is_private)

    if profile is None:
        tiers = (tuple(candidates),) if candidates else ()
        return QueryPlan(tiers=tiers, short_circuit=ShortCircuit.NEVER, profile=None)

    if profile is Profile.NO_ARCHIVES:
        return QueryPlan(tiers=(), short_circuit=ShortCircuit.NEVER, profile=profile)

    if profile is Profile.PUBLIC_ONLY or profile is Profile.PRIVATE_ONLY:
        wanted = public if profile is Profile.PUBLIC_ONLY else private
        side = "public" if profile is Profile.PUBLIC_ONLY else "private"
        if not wanted:
            return QueryPlan(
                tiers=(),
                short_circuit=ShortCircuit.NEVER,
                advisory=f"profile {profile.value} selected but no {side} sources are candidates",
                profile=profile,
            )
        return QueryPlan(tiers=(wanted,), short_circuit=ShortCircuit.NEVER, profile=profile)

    # privateFirst / publicFirst: always two tiers, in profile order, even
    # when one side is empty; an empty side is advised, not an error.
    first, second = (private, public) if profile is Profile.PRIVATE_FIRST else (public, private)
    advisory = None
    if not private:
        advisory = f"profile {profile.value} selected but no private sources are candidates"
    elif not public:
        advisory = f"profile {profile.value} selected but no public sources are candidates"
    return QueryPlan(
        tiers=(first, second),
        short_circuit=ShortCircuit.STOP_WHEN_NONEMPTY,
        advisory=advisory,
        profile=profile,
    )


def evaluate_short_circuit(plan: QueryPlan, tier_index: int, tier_result_count: int) -> bool:
    """Return True to continue to the next tier, False to halt.

    Pure: depends only on the plan's short-circuit mode and whether the
    tier just completed produced any mementos.
    """
    if tier_index >= len(plan.tiers):
        raise ValidationError(f"tier index {tier_index} out of range")
    if plan.short_circuit is ShortCircuit.STOP_WHEN_NONEMPTY and tier_result_count > 0:
        return False
    return True


__all__ = [
    "FilterRule",
    "Profile",
    "QueryPlan",
    "ShortCircuit",
    "compile_plan",
    "evaluate_short_circuit",
    "select_candidates",
]
