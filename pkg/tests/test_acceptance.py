"""Acceptance gate: one test per numbered guarantee the package makes.

Each test is self-contained (it builds whatever live topology it needs and
tears it down) and ends by printing a single ``ACCEPTANCE n: PASS`` line
with its evidence. Run with ``pytest tests/test_acceptance.py -s`` to see
the per-criterion lines; a silent run still enforces everything.
"""

from __future__ import annotations

import itertools
import pathlib
import random
import time
from contextlib import ExitStack
from dataclasses import replace

import httpx
import pytest

from mementity.aggregation import AggregationEngine, Outcome, VIA_HEADER
from mementity.codec import parse_cdxj, parse_json, serialize_cdxj
from mementity.gateway import CredentialStore, GatewayService
from mementity.model import (
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
from mementity.precedence import Profile, ShortCircuit, compile_plan
from mementity.service import MMAService, ServiceConfig
from mementity.simulator import ArchiveService, Holding, SimArchiveSpec, with_holdings
from mementity.stargate import StarGateConfig, StarGateService
from mementity.topology import load_topology

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
URI_R = "http://r.example/page"


def holdings_for(*keys: str, uri: str = URI_R) -> dict:
    return {uri: tuple(Holding(datetime=MementoDatetime.from_key(k)) for k in keys)}


def source_of(service: ArchiveService, **overrides) -> SourceDescriptor:
    fields = {
        "id": service.spec.id,
        "timemap_endpoint": service.timemap_endpoint("cdxj"),
        "kind": SourceKind.ARCHIVE,
        "visibility": service.spec.visibility,
    }
    fields.update(overrides)
    return SourceDescriptor(**fields)


def aggregator_source(service: MMAService) -> SourceDescriptor:
    return SourceDescriptor(
        id=service.config.self_id,
        timemap_endpoint=service.timemap_endpoint("cdxj"),
        kind=SourceKind.META_AGGREGATOR,
        visibility=Visibility.PUBLIC,
    )


def started(stack: ExitStack, service):
    service.start()
    stack.callback(service.stop)
    return service


# ---------------------------------------------------------------------------
# 1. Codec fidelity
# ---------------------------------------------------------------------------


def test_criterion_1_codec_fidelity():
    t0 = time.perf_counter()

    timemap_text = (FIXTURES / "enriched_timemap.cdxj").read_text(encoding="utf-8")
    timemap = parse_cdxj(timemap_text, strict=True)
    assert serialize_cdxj(timemap) == timemap_text
    twins = [m for m in timemap.mementos if m.datetime.key == "19981212013921"]
    assert len(twins) == 2 and twins[0].uri_m != twins[1].uri_m

    record_text = (FIXTURES / "enriched_record.cdxj").read_text(encoding="utf-8")
    once = parse_cdxj(record_text, strict=True)
    again = parse_cdxj(serialize_cdxj(once), strict=True)
    assert again.mementos == once.mementos
    record = again.mementos[0]
    assert record.damage == pytest.approx(0.24)
    assert record.content is not None and record.content.status_code == 200
    assert record.access is not None
    assert record.access.type == "Blake2b" and record.access.token

    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    print(
        f"\nACCEPTANCE 1: PASS (timemap fixture byte-identical with equal-datetime "
        f"twins kept, record fixture round-trips with damage=0.24 and access intact, "
        f"{elapsed * 1000:.0f} ms)"
    )


# ---------------------------------------------------------------------------
# 2. Multi-archive ordering table, all response arrival orders
# ---------------------------------------------------------------------------

# Capture names in global temporal order; the Nth name gets day N of
# 2005-03, so the datetime keys encode the published ordering exactly.
GLOBAL_ORDER = [
    "a4m1", "a1m1", "a6m1", "a2m1", "a7m1", "a2m2", "a3m1", "a4m2", "a1m2",
    "a8m1", "a2m3", "a5m1", "a8m2", "a6m2", "a3m2", "a5m2", "a7m2",
]
CAPTURE_KEY = {name: f"200503{day:02d}120000" for day, name in enumerate(GLOBAL_ORDER, start=1)}
NAME_BY_KEY = {key: name for name, key in CAPTURE_KEY.items()}

ALPHA_ROW = [
    "a4m1", "a1m1", "a6m1", "a2m1", "a2m2", "a3m1", "a4m2",
    "a1m2", "a2m3", "a5m1", "a6m2", "a3m2", "a5m2",
]
BETA_ROW = ["a7m1", "a8m1", "a8m2", "a7m2"]
GAMMA_ROW = [
    "a1m1", "a2m1", "a7m1", "a2m2", "a3m1", "a1m2", "a8m1",
    "a2m3", "a5m1", "a8m2", "a3m2", "a5m2", "a7m2",
]


def test_criterion_2_ordering_table_under_all_arrival_orders():
    t0 = time.perf_counter()
    with ExitStack() as stack, httpx.Client(timeout=10.0) as client:
        archives: dict[str, ArchiveService] = {}
        for n in range(1, 9):
            aid = f"a{n}"
            keys = sorted(CAPTURE_KEY[c] for c in GLOBAL_ORDER if c.startswith(aid + "m"))
            archives[aid] = started(
                stack, ArchiveService(SimArchiveSpec(id=aid, holdings=holdings_for(*keys)))
            )

        def mma(self_id: str, *sources: SourceDescriptor) -> MMAService:
            return started(stack, MMAService(ServiceConfig(self_id=self_id, sources=sources)))

        ma1 = mma("ma1", *(source_of(archives[a]) for a in ("a1", "a2", "a3")))
        ma2 = mma("ma2", *(source_of(archives[a]) for a in ("a4", "a5")))
        beta = mma("beta", source_of(archives["a7"]), source_of(archives["a8"]))
        alpha = mma(
            "alpha", aggregator_source(ma1), aggregator_source(ma2), source_of(archives["a6"])
        )
        gamma = mma(
            "gamma", aggregator_source(ma1), source_of(archives["a5"]), aggregator_source(beta)
        )

        def set_latency(archive_ids: tuple[str, ...], ms: int) -> None:
            for aid in archive_ids:
                svc = archives[aid]
                svc.spec = replace(svc.spec, latency_ms=ms)

        def fetch_names(service: MMAService) -> list[str]:
            response = client.get(f"{service.base_url}/timemap/cdxj/{URI_R}")
            assert response.status_code == 200
            return [NAME_BY_KEY[m.datetime.key] for m in parse_cdxj(response.text).mementos]

        # Each target's immediate sources, as the archive groups whose
        # latency controls when that source's response arrives.
        targets = [
            (alpha, ALPHA_ROW, [("a1", "a2", "a3"), ("a4", "a5"), ("a6",)]),
            (beta, BETA_ROW, [("a7",), ("a8",)]),
            (gamma, GAMMA_ROW, [("a1", "a2", "a3"), ("a5",), ("a7", "a8")]),
        ]
        permutations = 0
        for service, expected, groups in targets:
            for order in itertools.permutations(range(len(groups))):
                for rank, group_index in enumerate(order):
                    set_latency(groups[group_index], rank * 35)
                names = fetch_names(service)
                assert names == expected, (
                    f"{service.config.self_id} with arrival order {order} "
                    f"produced {names}"
                )
                permutations += 1
            set_latency(tuple(archives), 0)

        counts = (len(ALPHA_ROW), len(BETA_ROW), len(GAMMA_ROW))
        assert counts == (13, 4, 13)
        elapsed = time.perf_counter() - t0

    assert elapsed < 5.0
    print(
        f"\nACCEPTANCE 2: PASS (13/4/13-row orderings reproduced across "
        f"{permutations} arrival-order permutations, {elapsed:.2f} s)"
    )


# ---------------------------------------------------------------------------
# 3. Precedence grammar over a 2-private / 3-public topology
# ---------------------------------------------------------------------------


def test_criterion_3_precedence_grammar():
    with ExitStack() as stack:
        store = CredentialStore()
        store.register("alice", "wonderland", ["priv-x", "priv-y"])
        gw = started(stack, GatewayService(store))
        auth = {"uri_p": gw.token_url, "introspect": f"{gw.base_url}/introspect"}

        publics = [
            started(
                stack,
                ArchiveService(
                    SimArchiveSpec(id=f"pub-{c}", holdings=holdings_for(f"200{n}0101120000"))
                ),
            )
            for n, c in ((5, "a"), (6, "b"), (7, "c"))
        ]
        privates = [
            started(
                stack,
                ArchiveService(
                    SimArchiveSpec(
                        id=f"priv-{c}",
                        visibility=Visibility.PRIVATE,
                        auth=auth,
                        holdings=holdings_for(f"200{n}0601120000"),
                    )
                ),
            )
            for n, c in ((5, "x"), (6, "y"))
        ]
        everyone = publics + privates
        sources = tuple(source_of(s) for s in everyone)
        tokens = {
            p.spec.id: store.issue_token("alice", "wonderland", p.spec.id).token
            for p in privates
        }

        public_ids = ["pub-a", "pub-b", "pub-c"]
        private_ids = ["priv-x", "priv-y"]
        expectations = [
            (Profile.NO_ARCHIVES, [], set()),
            (Profile.PUBLIC_ONLY, [public_ids], set(public_ids)),
            (Profile.PRIVATE_ONLY, [private_ids], set(private_ids)),
            (Profile.PRIVATE_FIRST, [private_ids, public_ids], set(private_ids)),
            (Profile.PUBLIC_FIRST, [public_ids, private_ids], set(public_ids)),
        ]

        engine = AggregationEngine()
        uri_r = OriginalUri(URI_R)
        for profile, tiers, contacted in expectations:
            plan = compile_plan(profile, (), sources, uri_r)
            assert [[s.id for s in tier] for tier in plan.tiers] == tiers
            if len(tiers) > 1:
                assert plan.short_circuit is ShortCircuit.STOP_WHEN_NONEMPTY

            for svc in everyone:
                svc.reset_log()
            report = engine.execute_plan(plan, uri_r, tokens)
            hit = {
                svc.spec.id
                for svc in everyone
                if any(e["path"].startswith("/timemap/") for e in svc.request_log())
            }
            assert hit == contacted, f"{profile.value}: contacted {hit}, expected {contacted}"
            if contacted:
                assert len(report.timemap) == len(contacted)

        # The two boundary cases called out explicitly: an empty plan
        # touches nothing, a private-only plan touches no public archive.
        assert compile_plan(Profile.NO_ARCHIVES, (), sources, uri_r).tiers == ()

    print(
        "\nACCEPTANCE 3: PASS (all five profiles: tier partitions exact, "
        "request logs match the contacted sets, noArchives=0 contacts, "
        "privateOnly=0 public contacts)"
    )


# ---------------------------------------------------------------------------
# 4. Short-circuit privacy guarantee
# ---------------------------------------------------------------------------


def test_criterion_4_short_circuit_privacy():
    key_pool = [f"201001{day:02d}120000" for day in range(1, 29)]

    def random_holdings(rng: random.Random, low: int, high: int) -> dict:
        return holdings_for(*rng.sample(key_pool, rng.randint(low, high)))

    with ExitStack() as stack:
        store = CredentialStore()
        store.register("alice", "wonderland", ["priv"])
        gw = started(stack, GatewayService(store))
        auth = {"uri_p": gw.token_url, "introspect": f"{gw.base_url}/introspect"}

        publics = [
            started(stack, ArchiveService(SimArchiveSpec(id=f"pub{i}")))
            for i in range(3)
        ]
        private = started(
            stack,
            ArchiveService(
                SimArchiveSpec(id="priv", visibility=Visibility.PRIVATE, auth=auth)
            ),
        )
        sources = tuple(source_of(s) for s in publics + [private])
        tokens = {"priv": store.issue_token("alice", "wonderland", "priv").token}
        engine = AggregationEngine()
        uri_r = OriginalUri(URI_R)
        plan = compile_plan(Profile.PRIVATE_FIRST, (), sources, uri_r)

        rng = random.Random(0xA11CE)
        for run in range(100):
            for svc in publics:
                svc.spec = with_holdings(svc.spec, random_holdings(rng, 0, 5))
                svc.reset_log()
            private.spec = with_holdings(private.spec, random_holdings(rng, 1, 5))
            private.reset_log()

            report = engine.execute_plan(plan, uri_r, tokens)
            assert len(report.timemap) >= 1
            assert report.short_circuited
            leaked = [s.spec.id for s in publics if s.request_log()]
            assert not leaked, f"run {run}: public archives contacted: {leaked}"

        # With nothing private to return, the fallback tier runs and each
        # public archive is asked exactly once.
        for run in range(10):
            private.spec = with_holdings(private.spec, {})
            for svc in publics + [private]:
                svc.spec = (
                    with_holdings(svc.spec, random_holdings(rng, 0, 5))
                    if svc is not private
                    else svc.spec
                )
                svc.reset_log()
            engine.execute_plan(plan, uri_r, tokens)
            per_public = [
                sum(1 for e in svc.request_log() if e["path"].startswith("/timemap/"))
                for svc in publics
            ]
            assert per_public == [1, 1, 1], f"run {run}: {per_public}"

    print(
        "\nACCEPTANCE 4: PASS (100 randomized privateFirst runs with zero public "
        "contacts; empty private holding triggers exactly one request per public)"
    )


# ---------------------------------------------------------------------------
# 5. Private-archive authentication walkthrough with TTL expiry
# ---------------------------------------------------------------------------


def oracle_merge(parts: list[tuple[str, TimeMap]]) -> tuple[MementoRecord, ...]:
    """Independent reference merge: concatenate, collapse duplicates by
    canonical URI-M (earliest part wins), stable-sort by (datetime, part
    index, URI-M), re-mark the extremes."""
    combined: dict[str, tuple[int, MementoRecord]] = {}
    for index, (label, timemap) in enumerate(parts):
        for record in timemap.mementos:
            key = canonical_uri(record.uri_m)
            tagged = replace(record, extensions={**record.extensions, "via": label})
            if key not in combined:
                combined[key] = (index, tagged)
                continue
            kept_index, kept = combined[key]
            if kept.content is None:
                content = tagged.content
            elif tagged.content is None:
                content = kept.content
            else:
                content = kept.content.merged_with(tagged.content)
            derived = dict(tagged.derived or {})
            derived.update(kept.derived or {})
            extensions = {k: v for k, v in tagged.extensions.items() if k != "via"}
            extensions.update(kept.extensions)
            combined[key] = (
                kept_index,
                replace(
                    kept,
                    content=content,
                    derived=derived or None,
                    access=kept.access if kept.access is not None else tagged.access,
                    extensions=extensions,
                ),
            )
    ordered = sorted(combined.values(), key=lambda p: (p[1].datetime, p[0], p[1].uri_m))
    records = [record for _, record in ordered]
    if len(records) == 1:
        records[0] = replace(records[0], rel="first last memento")
    elif records:
        records[0] = replace(records[0], rel="first memento")
        records[-1] = replace(records[-1], rel="last memento")
        records[1:-1] = [replace(r, rel="memento") for r in records[1:-1]]
    return tuple(records)


def test_criterion_5_authentication_walkthrough():
    pub_keys = {"open1": ("20050301120000", "20051001120000"), "open2": ("20060101120000",)}
    priv_keys = ("20050601120000", "20070101120000")

    with ExitStack() as stack, httpx.Client(timeout=10.0) as client:
        store = CredentialStore(ttl_s=0.6)
        store.register("alice", "wonderland", ["vault"])
        gw = started(stack, GatewayService(store))
        auth = {"uri_p": gw.token_url, "introspect": f"{gw.base_url}/introspect"}

        archives = [
            started(
                stack,
                ArchiveService(SimArchiveSpec(id=aid, holdings=holdings_for(*keys))),
            )
            for aid, keys in pub_keys.items()
        ]
        vault = started(
            stack,
            ArchiveService(
                SimArchiveSpec(
                    id="vault",
                    visibility=Visibility.PRIVATE,
                    auth=auth,
                    holdings=holdings_for(*priv_keys),
                )
            ),
        )
        mma = started(
            stack,
            MMAService(
                ServiceConfig(
                    self_id="front",
                    sources=tuple(source_of(s) for s in archives)
                    + (source_of(vault, auth_pointer=auth["uri_p"]),),
                )
            ),
        )
        endpoint = f"{mma.base_url}/timemap/cdxj/{URI_R}"

        # Steps 1-3: plain request comes back 401 carrying the token
        # endpoint, because the private archive challenged the aggregator.
        first = client.get(endpoint)
        assert first.status_code == 401
        assert 'realm="vault"' in first.headers["www-authenticate"]
        links = ", ".join(first.headers.get_list("link"))
        assert gw.token_url in links and 'rel="authenticate"' in links
        partial = parse_cdxj(first.text)
        assert {m.datetime.key for m in partial.mementos} == {
            k for keys in pub_keys.values() for k in keys
        }

        # Steps 4-5: the client trades credentials for a token at the URI-P.
        grant = client.post(
            gw.token_url,
            json={
                "subject": "alice",
                "credential": "wonderland",
                "source_id": "vault",
                "uri_r": URI_R,
            },
        )
        assert grant.status_code == 200
        token = grant.json()["token"]

        # Steps 6-9: the re-request with the token aggregates public and
        # private holdings into one TimeMap.
        second = client.get(endpoint, headers={"X-Archive-Token": f"vault:{token}"})
        assert second.status_code == 200
        got = parse_cdxj(second.text, strict=True)

        def expected_part(archive: ArchiveService) -> TimeMap:
            records = [
                MementoRecord(
                    uri_m=f"{archive.base_url}/{h.datetime.key}/{URI_R}",
                    datetime=h.datetime,
                )
                for h in archive.spec.holdings[canonical_uri(URI_R)]
            ]
            return TimeMap.assemble(OriginalUri(URI_R), records)

        oracle = oracle_merge(
            [(svc.spec.id, expected_part(svc)) for svc in archives + [vault]]
        )
        assert [(m.uri_m, m.datetime.key, m.rel) for m in got.mementos] == [
            (m.uri_m, m.datetime.key, m.rel) for m in oracle
        ]
        assert len(got) == 5
        authed = [
            e for e in vault.request_log() if e["headers"].get("authorization")
        ]
        assert authed, "private archive never saw the relayed token"

        # TTL expiry: the same token now fails introspection, so the flow
        # reverts to the challenge.
        time.sleep(0.75)
        third = client.get(endpoint, headers={"X-Archive-Token": f"vault:{token}"})
        assert third.status_code == 401
        assert 'realm="vault"' in third.headers["www-authenticate"]

    print(
        "\nACCEPTANCE 5: PASS (401 with URI-P, token issued, merged TimeMap equals "
        "the oracle over public+private holdings, expiry re-challenges)"
    )


# ---------------------------------------------------------------------------
# 6. Merge oracle equivalence over random instances
# ---------------------------------------------------------------------------


def test_criterion_6_merge_oracle_equivalence():
    from mementity.aggregation import merge_timemaps

    uri_pool = [f"http://pool.example/{i:03d}/http://r.example/page" for i in range(60)]
    original = OriginalUri(URI_R)
    rng = random.Random(1234)
    instances = 1000
    largest = 0

    for i in range(instances):
        n_parts = rng.randint(1, 6)
        # Mostly small instances with a heavy tail up to the 500-record cap.
        budget = rng.randint(100, 500) if i % 10 == 0 else rng.randint(0, 40)
        largest = max(largest, budget)
        parts = []
        for p in range(n_parts):
            count = min(rng.randint(0, max(budget // n_parts, 1)), len(uri_pool))
            records = []
            for uri in rng.sample(uri_pool, count):
                day = rng.randint(1, 28)
                content = (
                    ContentAttrs(status_code=rng.choice([200, 301, 404]))
                    if rng.random() < 0.5
                    else None
                )
                derived = {"damage": round(rng.random(), 3)} if rng.random() < 0.3 else None
                records.append(
                    MementoRecord(
                        uri_m=uri,
                        datetime=MementoDatetime.from_key(f"201001{day:02d}000000"),
                        content=content,
                        derived=derived,
                    )
                )
            parts.append((f"part{p}", TimeMap.assemble(original, records)))
        assert merge_timemaps(parts).mementos == oracle_merge(parts), f"instance {i}"

    # Duplicate-capture collapse: the same upstream capture reached through
    # two different aggregation paths appears once in the merge.
    shared = "http://ia.example/20100101000000/http://r.example/page"
    left = TimeMap.assemble(
        original,
        [
            MementoRecord(uri_m=shared, datetime=MementoDatetime.from_key("20100101000000")),
            MementoRecord(
                uri_m="http://private.example/20110101000000/http://r.example/page",
                datetime=MementoDatetime.from_key("20110101000000"),
            ),
        ],
    )
    right = TimeMap.assemble(
        original,
        [MementoRecord(uri_m=shared, datetime=MementoDatetime.from_key("20100101000000"))],
    )
    merged = merge_timemaps([("personal_mma", left), ("public_ma", right)])
    assert merged.mementos == oracle_merge([("personal_mma", left), ("public_ma", right)])
    assert len(merged) == 2
    assert len({m.uri_m for m in merged.mementos}) == 2
    assert merged.mementos[0].extensions["via"] == "personal_mma"

    print(
        f"\nACCEPTANCE 6: PASS ({instances} random instances match the oracle, "
        f"largest instance {largest} records; duplicate capture collapses to one URI-M)"
    )


# ---------------------------------------------------------------------------
# 7. Concurrent fan-out within a tier, sequential across tiers
# ---------------------------------------------------------------------------


def test_criterion_7_concurrent_fanout():
    with ExitStack() as stack:
        keyed = [
            ("slow0", "20050101120000"), ("slow1", "20060101120000"),
            ("slow2", "20070101120000"),
        ]
        publics = [
            started(
                stack,
                ArchiveService(
                    SimArchiveSpec(id=aid, latency_ms=200, holdings=holdings_for(key))
                ),
            )
            for aid, key in keyed
        ]
        # Descriptor-side privacy only: the simulator endpoints accept
        # anonymous requests, so the tier timing is pure latency.
        quiet = [
            started(stack, ArchiveService(SimArchiveSpec(id=f"quiet{i}", latency_ms=200)))
            for i in range(2)
        ]
        sources = tuple(source_of(s) for s in publics) + tuple(
            source_of(s, visibility=Visibility.PRIVATE) for s in quiet
        )
        engine = AggregationEngine()
        uri_r = OriginalUri(URI_R)

        flat = compile_plan(None, (), sources, uri_r)
        assert [len(tier) for tier in flat.tiers] == [5]
        t0 = time.perf_counter()
        report = engine.execute_plan(flat, uri_r)
        flat_wall = time.perf_counter() - t0
        assert all(r.outcome is Outcome.OK for r in report.per_source)
        assert len(report.per_source) == 5
        assert len(report.timemap) == 3
        assert flat_wall < 0.6, f"flat fan-out took {flat_wall:.3f} s"

        tiered = compile_plan(Profile.PRIVATE_FIRST, (), sources, uri_r)
        assert [len(tier) for tier in tiered.tiers] == [2, 3]
        t0 = time.perf_counter()
        report = engine.execute_plan(tiered, uri_r)
        tiered_wall = time.perf_counter() - t0
        assert report.tiers_executed == 2
        assert len(report.timemap) == 3
        assert tiered_wall >= 0.4, f"two 200 ms tiers finished in {tiered_wall:.3f} s"
        assert tiered_wall < 1.0, f"tier members ran serially: {tiered_wall:.3f} s"

    print(
        f"\nACCEPTANCE 7: PASS (5 sources at 200 ms: flat {flat_wall * 1000:.0f} ms < 600 ms; "
        f"privateFirst two-tier {tiered_wall * 1000:.0f} ms >= 400 ms)"
    )


# ---------------------------------------------------------------------------
# 8. Dimension negotiation equals plain datetime negotiation, plus filtering
# ---------------------------------------------------------------------------


def test_criterion_8_stargate_equivalence_and_filtering():
    # 20 captures, 85% redirects: three 200s sprinkled through seventeen 302s.
    ok_days = (3, 11, 19)
    fixture = [
        Holding(
            datetime=MementoDatetime.from_key(f"200603{day:02d}120000"),
            status_code=200 if day in ok_days else 302,
            location=None if day in ok_days else URI_R,
        )
        for day in range(1, 21)
    ]
    small = [
        Holding(datetime=MementoDatetime.from_key(k), status_code=code, location=loc)
        for k, code, loc in (
            ("20050301120000", 200, None),
            ("20050601120000", 302, URI_R),
            ("20051001120000", 302, URI_R),
            ("20060101120000", 200, None),
        )
    ]

    with ExitStack() as stack, httpx.Client(timeout=10.0, follow_redirects=False) as client:
        fixtures = {}
        for aid, holdings in (("redirecty", fixture), ("smallarch", small)):
            archive = started(
                stack,
                ArchiveService(SimArchiveSpec(id=aid, holdings={URI_R: tuple(holdings)})),
            )
            timegate = started(
                stack,
                MMAService(ServiceConfig(self_id=f"tg-{aid}", sources=(source_of(archive),))),
            )
            stargate = started(
                stack,
                StarGateService(
                    StarGateConfig(self_id=f"sg-{aid}", sources=(source_of(archive),))
                ),
            )
            fixtures[aid] = (archive, timegate, stargate, holdings)

        # Equivalence sweep: exact keys, midpoints, off-by-a-second probes,
        # far past, far future, and no Accept-Datetime at all.
        checked = 0
        for archive, timegate, stargate, holdings in fixtures.values():
            probes: list[str | None] = [None, "19960101000000", "20300101000000"]
            keys = [h.datetime.key for h in holdings]
            probes += keys
            for a, b in zip(keys, keys[1:]):
                lo = MementoDatetime.from_key(a).instant
                hi = MementoDatetime.from_key(b).instant
                mid = (lo + (hi - lo) / 2).replace(microsecond=0)
                probes.append(MementoDatetime(mid).key)
            probes += [f"{k[:12]}01" for k in keys]
            for probe in probes:
                headers = (
                    {"Accept-Datetime": MementoDatetime.from_key(probe).http}
                    if probe
                    else {}
                )
                via_timegate = client.get(
                    f"{timegate.base_url}/timegate/{URI_R}", headers=headers
                )
                via_stargate = client.get(
                    f"{stargate.base_url}/stargate/{URI_R}", headers=headers
                )
                assert via_timegate.status_code == via_stargate.status_code == 302
                assert via_timegate.headers["location"] == via_stargate.headers["location"]
                checked += 1

        # Status filtering over the redirect-heavy fixture: only the three
        # 200-status captures are ever eligible.
        archive, _, stargate, holdings = fixtures["redirecty"]
        ok_keys = [h.datetime.key for h in holdings if h.status_code == 200]
        for probe in [h.datetime.key for h in holdings] + [None]:
            headers = {"Prefer": 'memento-filter="status_code = 200"'}
            if probe:
                headers["Accept-Datetime"] = MementoDatetime.from_key(probe).http
            response = client.get(f"{stargate.base_url}/stargate/{URI_R}", headers=headers)
            assert response.status_code == 302
            chosen = response.headers["location"]
            assert any(key in chosen for key in ok_keys), chosen
            if probe:
                wanted = MementoDatetime.from_key(probe).instant
                best = min(
                    ok_keys,
                    key=lambda k: (
                        abs((MementoDatetime.from_key(k).instant - wanted).total_seconds()),
                        MementoDatetime.from_key(k).instant,
                    ),
                )
                assert best in chosen

        # A filter no capture satisfies: 406 carrying every variant.
        starved = client.get(
            f"{stargate.base_url}/stargate/{URI_R}",
            headers={"Prefer": 'memento-filter="status_code = 418"'},
        )
        assert starved.status_code == 406
        variants = parse_json(starved.text, strict=True)
        assert len(variants.mementos) == 20

    print(
        f"\nACCEPTANCE 8: PASS (no-filter parity with the timegate on {checked} probes "
        f"across both fixtures; status filter admits only the three 200s of twenty; "
        f"zero survivors yields 406 with all 20 variants)"
    )


# ---------------------------------------------------------------------------
# 9. Cycle safety
# ---------------------------------------------------------------------------


def test_criterion_9_cycle_safety():
    cyclic = {
        "archives": [
            {"id": "arch-a", "holdings": {URI_R: ["20050301120000"]}},
            {"id": "arch-b", "holdings": {URI_R: ["20060101120000"]}},
        ],
        "aggregators": [
            {"id": "loop-a", "sources": [{"ref": "arch-a"}, {"ref": "loop-b"}]},
            {"id": "loop-b", "sources": [{"ref": "arch-b"}, {"ref": "loop-a"}]},
        ],
    }
    with load_topology(cyclic) as topo, httpx.Client(timeout=10.0) as client:
        # One organic traversal terminates: every archive answers exactly
        # once, the loop edge is refused rather than re-entered.
        response = client.get(f"{topo.base_url('loop-a')}/timemap/cdxj/{URI_R}")
        assert response.status_code == 200
        assert len(parse_cdxj(response.text)) == 2
        hits_a = len(topo.request_log("arch-a"))
        hits_b = len(topo.request_log("arch-b"))
        assert (hits_a, hits_b) == (1, 1)

        # Closing the loop explicitly is refused outright, with no further
        # archive traffic.
        refused = client.get(
            f"{topo.base_url('loop-a')}/timemap/cdxj/{URI_R}",
            headers={VIA_HEADER: "loop-a"},
        )
        assert refused.status_code == 508
        assert len(topo.request_log("arch-a")) == hits_a
        assert len(topo.request_log("arch-b")) == hits_b

    chain = {
        "archives": [{"id": "leaf", "holdings": {URI_R: ["20050301120000"]}}],
        "aggregators": [
            {
                "id": f"hop{n}",
                "depth_limit": 8,
                "sources": [{"ref": f"hop{n + 1}" if n < 9 else "leaf"}],
            }
            for n in range(1, 10)
        ],
    }
    with load_topology(chain) as topo, httpx.Client(timeout=10.0) as client:
        deep = client.get(f"{topo.base_url('hop1')}/timemap/cdxj/{URI_R}")
        assert deep.status_code == 200
        assert len(parse_cdxj(deep.text)) == 0
        assert topo.request_log("leaf") == []

        # One hop shorter fits inside the limit and reaches the leaf.
        shallow = client.get(f"{topo.base_url('hop2')}/timemap/cdxj/{URI_R}")
        assert shallow.status_code == 200
        assert len(parse_cdxj(shallow.text)) == 1
        assert len(topo.request_log("leaf")) == 1

    print(
        "\nACCEPTANCE 9: PASS (cyclic pair terminates in one traversal and refuses "
        "the closed loop with 508; nine-hop chain at depth limit 8 refuses hop 9, "
        "eight hops reach the leaf)"
    )
