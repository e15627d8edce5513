"""StarGate tests: filter parsing, the consensus cache, content probes,
and datetime-plus-dimension negotiation over a live simulated archive."""

from __future__ import annotations

import json
import time

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mementity.codec.jsonformat import parse_json
from mementity.exceptions import EnrichmentError, ValidationError
from mementity.model import ContentAttrs, MementoDatetime, SourceDescriptor
from mementity.simulator import ArchiveService, Holding, SimArchiveSpec
from mementity.stargate import (
    AttributeSpec,
    DimensionFilter,
    EnrichmentCache,
    StarGateConfig,
    StarGateService,
    enrich_content,
    parse_filters,
)

URI_R = "http://r.example/page"

M1 = "20050301120000"  # 200, damage 0.24
M2 = "20050601120000"  # 302
M3 = "20051001120000"  # 302, no damage
M4 = "20060101120000"  # 200

REGISTRY = {spec.name: spec for spec in (AttributeSpec("damage", numeric=True, low=0.0, high=1.0),)}


# -- filter parsing ------------------------------------------------------------


def test_parse_single_filter():
    filters = parse_filters('memento-filter="status_code eq 200"', REGISTRY)
    assert filters == [DimensionFilter(attribute="status_code", op="eq", value=200)]


def test_parse_multiple_filters_one_header():
    filters = parse_filters(
        'memento-filter="status_code eq 200", memento-filter="damage le 0.3"', REGISTRY
    )
    assert [f.attribute for f in filters] == ["status_code", "damage"]
    assert filters[1].value == pytest.approx(0.3)


@pytest.mark.parametrize(
    ("symbol", "word"),
    [("=", "eq"), ("==", "eq"), ("!=", "ne"), ("<>", "ne"),
     ("<", "lt"), ("<=", "le"), (">", "gt"), (">=", "ge")],
)
def test_parse_symbolic_op_aliases(symbol, word):
    filters = parse_filters(f'memento-filter="status_code {symbol} 200"', REGISTRY)
    assert filters == [DimensionFilter(attribute="status_code", op=word, value=200)]


def test_parse_filter_access_type_and_content_type():
    filters = parse_filters(
        'memento-filter="access.type eq Blake2b", memento-filter="content_type ne text/html"',
        REGISTRY,
    )
    assert [(f.attribute, f.op) for f in filters] == [("access.type", "eq"), ("content_type", "ne")]


@pytest.mark.parametrize(
    "header",
    [
        'memento-filter="popularity gt 5"',        # unregistered attribute
        'memento-filter="content_type lt text/a"', # ordering on a string
        'memento-filter="status_code eq abc"',     # untypeable value
        'memento-filter="damage similar 0.2"',     # unknown op
        'memento-filter="damage le"',              # missing value
    ],
)
def test_bad_filters_raise(header):
    with pytest.raises(ValidationError):
        parse_filters(header, REGISTRY)


def test_content_type_eq_ignores_parameters_and_case():
    f = DimensionFilter(attribute="content_type", op="eq", value="text/html")
    assert f.matches("TEXT/HTML; charset=utf-8")
    assert not f.matches("application/pdf")


# -- consensus cache ------------------------------------------------------------


def damage_cache(**kwargs) -> EnrichmentCache:
    return EnrichmentCache(**kwargs)


def test_single_submission_is_pending():
    cache = damage_cache()
    outcome = cache.submit("http://a/1", "damage", 0.24, "s1")
    assert outcome == {"state": "pending", "have": 1, "need": 3}
    assert cache.entry("http://a/1") is None


def test_three_agreeing_submissions_promote_median():
    cache = damage_cache()
    cache.submit("http://a/1", "damage", 0.24, "s1")
    cache.submit("http://a/1", "damage", 0.245, "s2")
    outcome = cache.submit("http://a/1", "damage", 0.24, "s3")
    assert outcome["state"] == "accepted"
    assert outcome["value"] == pytest.approx(0.24)
    assert cache.entry("http://a/1").derived["damage"] == pytest.approx(0.24)
    # Pending pool is drained on promotion.
    assert cache.pending_count("http://a/1", "damage") == 0


def test_out_of_range_rejected():
    cache = damage_cache()
    outcome = cache.submit("http://a/1", "damage", 1.5, "s1")
    assert outcome["state"] == "rejected"
    assert cache.pending_count("http://a/1", "damage") == 0


def test_unregistered_attribute_raises():
    cache = damage_cache()
    with pytest.raises(ValidationError):
        cache.submit("http://a/1", "popularity", 3, "s1")


def test_outlier_never_shifts_accepted_value():
    cache = damage_cache()
    cache.submit("http://a/1", "damage", 0.24, "honest1")
    cache.submit("http://a/1", "damage", 0.9, "adversary")
    cache.submit("http://a/1", "damage", 0.24, "honest2")
    outcome = cache.submit("http://a/1", "damage", 0.245, "honest3")
    assert outcome["state"] == "accepted"
    assert 0.24 <= outcome["value"] <= 0.245


def test_wide_spread_stays_pending():
    cache = damage_cache()
    cache.submit("http://a/1", "damage", 0.1, "s1")
    cache.submit("http://a/1", "damage", 0.2, "s2")
    outcome = cache.submit("http://a/1", "damage", 0.3, "s3")
    assert outcome["state"] == "pending"


def test_resubmission_replaces_previous_value():
    cache = damage_cache()
    cache.submit("http://a/1", "damage", 0.9, "s1")
    cache.submit("http://a/1", "damage", 0.24, "s1")
    cache.submit("http://a/1", "damage", 0.24, "s2")
    outcome = cache.submit("http://a/1", "damage", 0.245, "s3")
    assert outcome["state"] == "accepted"
    assert 0.24 <= outcome["value"] <= 0.245


def test_same_submitter_repeating_never_promotes():
    cache = damage_cache()
    for _ in range(5):
        outcome = cache.submit("http://a/1", "damage", 0.5, "s1")
    assert outcome["state"] == "pending"
    assert outcome["have"] == 1


def test_string_attribute_needs_exact_agreement():
    registry = (AttributeSpec("language", numeric=False),)
    cache = EnrichmentCache(registry=registry)
    cache.submit("http://a/1", "language", "en", "s1")
    cache.submit("http://a/1", "language", "en", "s2")
    assert cache.submit("http://a/1", "language", "fr", "s3")["state"] == "pending"
    outcome = cache.submit("http://a/1", "language", "en", "s4")
    assert outcome == {"state": "accepted", "value": "en"}


def test_promotions_replay_from_log(tmp_path):
    path = tmp_path / "enrichments.jsonl"
    cache = damage_cache(persist_path=path)
    for n, value in enumerate((0.24, 0.24, 0.245)):
        cache.submit("http://a/1", "damage", value, f"s{n}")
    cache.store_content(
        "http://a/2",
        ContentAttrs(status_code=302, content_type=None, last_modified=MementoDatetime.from_key(M1)),
    )

    reborn = damage_cache(persist_path=path)
    assert reborn.entry("http://a/1").derived["damage"] == pytest.approx(0.24)
    replayed = reborn.entry("http://a/2")
    assert replayed.content.status_code == 302
    assert replayed.content.last_modified == MementoDatetime.from_key(M1)
    assert replayed.fetched_at is not None


def test_fetched_at_moves_when_content_refreshed():
    ticks = iter((100.0, 200.0))
    cache = EnrichmentCache(time_fn=lambda: next(ticks))
    first = cache.store_content("http://a/1", ContentAttrs(status_code=200))
    second = cache.store_content("http://a/1", ContentAttrs(status_code=404))
    assert (first.fetched_at, second.fetched_at) == (100.0, 200.0)
    assert cache.entry("http://a/1").content.status_code == 404


@settings(max_examples=150, deadline=None)
@given(
    submissions=st.lists(
        st.tuples(
            st.sampled_from(["s1", "s2", "s3", "s4", "s5", "adversary"]),
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        ),
        min_size=1,
        max_size=12,
    )
)
def test_consensus_never_fires_without_k_agreeing(submissions):
    cache = damage_cache()
    live: dict[str, float] = {}
    for submitter, value in submissions:
        outcome = cache.submit("http://a/1", "damage", value, submitter)
        if outcome["state"] != "accepted":
            live[submitter] = value
            continue
        live[submitter] = value
        values = sorted(live.values())
        window = [
            values[i : j + 1]
            for i in range(len(values))
            for j in range(i, len(values))
            if values[j] - values[i] <= cache.epsilon + 1e-12
        ]
        qualifying = [w for w in window if len(w) >= cache.k]
        assert qualifying, "accepted without any k-strong agreeing cluster"
        assert any(w[0] <= outcome["value"] <= w[-1] for w in qualifying)
        live.clear()


# -- live fixture -----------------------------------------------------------------


def fixture_holdings() -> dict:
    return {
        URI_R: (
            Holding(datetime=MementoDatetime.from_key(M1), status_code=200, damage=0.24),
            Holding(
                datetime=MementoDatetime.from_key(M2),
                status_code=302,
                location="http://elsewhere.example/",
            ),
            Holding(datetime=MementoDatetime.from_key(M3), status_code=302, location="http://x.example/"),
            Holding(datetime=MementoDatetime.from_key(M4), status_code=200),
        )
    }


@pytest.fixture(scope="module")
def archive():
    service = ArchiveService(SimArchiveSpec(id="wa1", holdings=fixture_holdings())).start()
    yield service
    service.stop()


@pytest.fixture(scope="module")
def stargate(archive):
    config = StarGateConfig(
        self_id="sg1",
        sources=(
            SourceDescriptor(id="wa1", timemap_endpoint=archive.timemap_endpoint("cdxj")),
        ),
    )
    service = StarGateService(config).start()
    yield service
    service.stop()


@pytest.fixture(scope="module")
def client():
    with httpx.Client(timeout=10.0, follow_redirects=False) as c:
        yield c


def uri_m(archive: ArchiveService, key: str) -> str:
    return f"{archive.base_url}/{key}/{URI_R}"


def negotiate(client, stargate, *, accept: str | None = None, prefer: str | None = None,
              uri_r: str = URI_R) -> httpx.Response:
    headers = {}
    if accept is not None:
        headers["Accept-Datetime"] = MementoDatetime.from_key(accept).http
    if prefer is not None:
        headers["Prefer"] = prefer
    return client.get(f"{stargate.base_url}/stargate/{uri_r}", headers=headers)


# -- negotiation ---------------------------------------------------------------------


@pytest.mark.parametrize(
    ("accept", "expected"),
    [
        (M2, M2),                 # exact hit
        ("20050415120000", M1),   # 46 days to M1 vs 47 to M2
        ("20051116120000", M3),   # exact midpoint of M3 and M4, earlier wins
        (None, M4),               # no preference, most recent
    ],
)
def test_no_filters_behaves_like_timegate(client, stargate, archive, accept, expected):
    response = negotiate(client, stargate, accept=accept)
    assert response.status_code == 302
    assert response.headers["location"] == uri_m(archive, expected)
    assert "preference-applied" not in response.headers
    assert response.headers["memento-datetime"] == MementoDatetime.from_key(expected).http


def test_status_filter_excludes_redirects(client, stargate, archive):
    response = negotiate(
        client, stargate, accept=M2, prefer='memento-filter="status_code eq 200"'
    )
    assert response.status_code == 302
    # M2 itself is a redirect; nearest 200 is M1.
    assert response.headers["location"] == uri_m(archive, M1)
    assert response.headers["preference-applied"] == 'memento-filter="status_code eq 200"'


def test_status_filter_symbolic_spelling(client, stargate, archive):
    response = negotiate(
        client, stargate, accept=M2, prefer='memento-filter="status_code = 200"'
    )
    assert response.status_code == 302
    assert response.headers["location"] == uri_m(archive, M1)


def test_status_filter_ne_selects_redirect(client, stargate, archive):
    response = negotiate(
        client, stargate, accept=M1, prefer='memento-filter="status_code ne 200"'
    )
    assert response.status_code == 302
    assert response.headers["location"] == uri_m(archive, M2)


def test_damage_filter_requires_attribute_presence(client, stargate, archive):
    # Only M1 carries a damage value at all; the rest are excluded even
    # though a missing value could be read as "no damage".
    response = negotiate(
        client, stargate, accept=M4, prefer='memento-filter="damage le 0.3"'
    )
    assert response.status_code == 302
    assert response.headers["location"] == uri_m(archive, M1)


def test_conjunction_of_filters(client, stargate, archive):
    response = negotiate(
        client,
        stargate,
        accept=M4,
        prefer='memento-filter="status_code eq 200", memento-filter="damage le 0.3"',
    )
    assert response.status_code == 302
    assert response.headers["location"] == uri_m(archive, M1)
    applied = response.headers["preference-applied"]
    assert "status_code eq 200" in applied and "damage le 0.3" in applied


def test_zero_survivors_is_406_with_variant_listing(client, stargate):
    response = negotiate(client, stargate, prefer='memento-filter="status_code eq 418"')
    assert response.status_code == 406
    variants = parse_json(response.text, strict=True)
    assert len(variants.mementos) == 4
    assert variants.original.value == URI_R


def test_unknown_attribute_is_400(client, stargate):
    response = negotiate(client, stargate, prefer='memento-filter="sparkle eq 5"')
    assert response.status_code == 400


def test_ordering_on_string_attribute_is_400(client, stargate):
    response = negotiate(client, stargate, prefer='memento-filter="content_type gt text/html"')
    assert response.status_code == 400


def test_unknown_resource_is_404(client, stargate):
    response = negotiate(client, stargate, uri_r="http://nowhere.example/x")
    assert response.status_code == 404


def test_bad_uri_r_is_400(client, stargate):
    response = negotiate(client, stargate, uri_r="notaurl")
    assert response.status_code == 400


def test_bad_accept_datetime_is_400(client, stargate):
    response = client.get(
        f"{stargate.base_url}/stargate/{URI_R}", headers={"Accept-Datetime": "whenever"}
    )
    assert response.status_code == 400


@settings(max_examples=30, deadline=None)
@given(
    key=st.sampled_from([M1, M2, M3, M4, "20000101000000", "20250101000000", "20050531120000"])
)
def test_filtered_choice_always_satisfies_filter(client, stargate, archive, key):
    response = negotiate(client, stargate, accept=key, prefer='memento-filter="status_code eq 302"')
    assert response.status_code == 302
    assert response.headers["location"] in {uri_m(archive, M2), uri_m(archive, M3)}


# -- enrichment endpoints ----------------------------------------------------------


def wait_for(predicate, timeout_s: float = 3.0):
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return False


def test_calculate_unknown_memento_is_404(client, stargate, archive):
    response = client.get(f"{stargate.base_url}/calculate/http://never.example/seen")
    assert response.status_code == 404


def test_calculate_redirects_and_probes_once(client, stargate, archive):
    negotiate(client, stargate)  # registers the aggregated URI-Ms
    target = uri_m(archive, M1)
    archive.reset_log()

    first = client.get(f"{stargate.base_url}/calculate/{target}")
    assert first.status_code == 302
    assert first.headers["location"] == target
    assert wait_for(lambda: (e := stargate.cache.entry(target)) is not None and e.content)
    entry = stargate.cache.entry(target)
    assert entry.content.status_code == 200
    assert entry.content.content_type.startswith("text/html")
    assert entry.content.last_modified == MementoDatetime.from_key(M1)

    second = client.get(f"{stargate.base_url}/calculate/{target}")
    assert second.status_code == 302
    time.sleep(0.2)
    probes = [e for e in archive.request_log() if e["method"] == "HEAD"]
    assert len(probes) == 1
    assert stargate.cache.entry(target).fetched_at == entry.fetched_at


def test_probe_of_redirect_memento_keeps_status(client, stargate, archive):
    negotiate(client, stargate)
    target = uri_m(archive, M2)
    client.get(f"{stargate.base_url}/calculate/{target}")
    assert wait_for(lambda: (e := stargate.cache.entry(target)) is not None and e.content)
    assert stargate.cache.entry(target).content.status_code == 302


def test_submissions_flow_into_negotiation(client, stargate, archive):
    negotiate(client, stargate)
    target = uri_m(archive, M3)
    for n, value in enumerate((0.5, 0.5, 0.505)):
        response = client.post(
            f"{stargate.base_url}/enrich/{target}",
            json={"attribute": "damage", "value": value, "submitter": f"s{n}"},
        )
        assert response.status_code == 200
    assert response.json()["state"] == "accepted"

    # M3 now carries damage 0.5 from the cache overlay; an exact-datetime
    # request filtered to high damage must pick it.
    chosen = negotiate(client, stargate, accept=M3, prefer='memento-filter="damage ge 0.4"')
    assert chosen.status_code == 302
    assert chosen.headers["location"] == target


def test_enrich_validation_errors(client, stargate, archive):
    negotiate(client, stargate)
    target = uri_m(archive, M4)
    assert client.post(f"{stargate.base_url}/enrich/{target}", content=b"junk").status_code == 400
    assert (
        client.post(
            f"{stargate.base_url}/enrich/{target}",
            json={"attribute": "sparkle", "value": 1, "submitter": "s"},
        ).status_code
        == 400
    )
    rejected = client.post(
        f"{stargate.base_url}/enrich/{target}",
        json={"attribute": "damage", "value": 1.5, "submitter": "s"},
    )
    assert rejected.status_code == 200
    assert rejected.json()["state"] == "rejected"
    assert (
        client.post(
            f"{stargate.base_url}/enrich/http://never.example/x",
            json={"attribute": "damage", "value": 0.5, "submitter": "s"},
        ).status_code
        == 404
    )


# -- direct probes ------------------------------------------------------------------


def test_enrich_content_rejects_non_http():
    with pytest.raises(EnrichmentError):
        enrich_content("ftp://archive.example/thing")


def test_enrich_content_unreachable_raises():
    with pytest.raises(EnrichmentError):
        enrich_content("http://127.0.0.1:1/never", timeout_s=0.3)


def test_enrich_content_451(client):
    blocked = ArchiveService(SimArchiveSpec(id="blocked", failure=451)).start()
    try:
        attrs = enrich_content(f"{blocked.base_url}/20050301120000/{URI_R}")
        assert attrs.status_code == 451
    finally:
        blocked.stop()
