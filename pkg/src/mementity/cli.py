"""Operator entry points: run any mementity role, aggregate from the
command line, or render an aggregation report to files.

Exit codes, kept stable for scripting:
  0  success
  1  network failure reaching the endpoint
  2  usage or configuration error
  3  other HTTP error (400, 404, 5xx)
  4  authentication required (the URI-P is printed on stderr)
  6  no memento satisfied the requested filters
  8  aggregation loop refused
"""

from __future__ import annotations

import argparse
import json
import os
import pathlib
import signal
import sys
import threading

import httpx

from .codec import FORMATS
from .codec.linkformat import parse_header_links
from .exceptions import ConfigError, MementityError
from .gateway import CredentialStore, GatewayService
from .model import OriginalUri
from .precedence import Profile, compile_plan
from .service import MMAService, load_service_config
from .simulator import ArchiveService, build_spec
from .stargate import StarGateService, load_stargate_config

EXIT_OK = 0
EXIT_NETWORK = 1
EXIT_USAGE = 2
EXIT_HTTP = 3
EXIT_AUTH = 4
EXIT_NOT_ACCEPTABLE = 6
EXIT_LOOP = 8

ENDPOINT_ENV = "MEMENTITY_ENDPOINT"


def _say(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _parse_listen(value: str | None) -> tuple[str | None, int | None]:
    if not value:
        return None, None
    host, sep, port = value.rpartition(":")
    if not sep:
        host, port = "", value
    try:
        return (host or None), int(port)
    except ValueError:
        raise ConfigError(f"bad --listen value {value!r}, want HOST:PORT") from None


def _read_json(path: str | pathlib.Path) -> dict:
    try:
        return json.loads(pathlib.Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _parse_tokens(entries: list[str]) -> dict[str, str]:
    tokens: dict[str, str] = {}
    for entry in entries:
        source_id, sep, token = entry.partition(":")
        if not sep or not source_id or not token:
            raise ConfigError(f"bad --token value {entry!r}, want SOURCE:TOKEN")
        tokens[source_id] = token
    return tokens


# -- serve ---------------------------------------------------------------------


def _arm_shutdown_signals() -> threading.Event:
    """Install SIGINT/SIGTERM handlers before anything is announced, so a
    supervisor reacting to the banner cannot outrace them."""
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    return stop


def _serve_one(service, banner: str, stop: threading.Event) -> int:
    _say(banner)
    try:
        stop.wait()
    finally:
        service.stop()
    _say("shut down cleanly")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    host, port = _parse_listen(args.listen)
    stop = _arm_shutdown_signals()

    if args.role == "simulator" and args.topology:
        from .topology import load_topology_file

        topo = load_topology_file(args.topology)
        count = sum(
            len(pool)
            for pool in (topo.gateways, topo.archives, topo.aggregators, topo.stargates)
        )
        _say(f"{count} mementities running")
        for pool in (topo.gateways, topo.archives, topo.aggregators, topo.stargates):
            for node_id, service in pool.items():
                _say(f"  {node_id}: {service.base_url}")
        try:
            stop.wait()
        finally:
            topo.stop_all()
        _say("shut down cleanly")
        return EXIT_OK

    if not args.config:
        raise ConfigError(f"serve {args.role} needs --config")
    config = _read_json(args.config)

    if args.role == "mma":
        service = MMAService(load_service_config(config, host=host, port=port)).start()
        return _serve_one(
            service,
            f"mma {service.config.self_id} listening on {service.base_url} "
            f"({len(service.config.sources)} sources)",
            stop,
        )
    if args.role == "stargate":
        service = StarGateService(load_stargate_config(config, host=host, port=port)).start()
        return _serve_one(
            service,
            f"stargate {service.config.self_id} listening on {service.base_url} "
            f"({len(service.config.sources)} sources)",
            stop,
        )
    if args.role == "gateway":
        store = CredentialStore(
            ttl_s=float(config.get("ttl_s", 3600)),
            persist_path=config.get("persist_path"),
        )
        for user in config.get("users", ()):
            try:
                store.register(user["subject"], user["credential"], user["sources"])
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"bad user entry {user!r}: {exc}") from exc
        service = GatewayService(
            store,
            name=f"gateway-{config.get('id', 'gw')}",
            host=host or "127.0.0.1",
            port=port or 0,
        ).start()
        return _serve_one(
            service,
            f"gateway {config.get('id', 'gw')} listening on {service.base_url} "
            f"({len(config.get('users', ()))} subjects)",
            stop,
        )
    # simulator with a single-archive config
    spec = build_spec(config, gateways=config.get("gateway_urls", {}))
    service = ArchiveService(spec, host=host or "127.0.0.1", port=port or 0).start()
    return _serve_one(
        service,
        f"archive {spec.id} listening on {service.base_url} "
        f"({sum(len(h) for h in spec.holdings.values())} holdings)",
        stop,
    )


# -- aggregate ------------------------------------------------------------------


def _request_headers(args: argparse.Namespace) -> dict[str, str]:
    headers: dict[str, str] = {}
    if args.profile:
        headers["Prefer"] = f'profile="{args.profile}"'
    if args.more_archives:
        headers["X-More-Archives"] = ", ".join(args.more_archives)
    tokens = _parse_tokens(args.token)
    if tokens:
        headers["X-Archive-Token"] = ", ".join(f"{s}:{t}" for s, t in tokens.items())
    return headers


def cmd_aggregate(args: argparse.Namespace) -> int:
    endpoint = (args.endpoint or os.environ.get(ENDPOINT_ENV, "")).rstrip("/")
    if not endpoint:
        raise ConfigError(f"no MMA endpoint: pass --endpoint or set {ENDPOINT_ENV}")
    OriginalUri(args.uri_r)  # fail early with a usage error, not an HTTP 400

    url = f"{endpoint}/timemap/{args.format}/{args.uri_r}"
    try:
        response = httpx.get(url, headers=_request_headers(args), timeout=args.timeout)
    except httpx.HTTPError as exc:
        _say(f"request failed: {exc}")
        return EXIT_NETWORK

    if response.status_code == 200:
        sys.stdout.write(response.text)
        sys.stdout.flush()
        return EXIT_OK
    if response.status_code == 401:
        _say("authentication required:")
        for value in response.headers.get_list("www-authenticate"):
            _say(f"  challenge: {value}")
        for target, params in parse_header_links(", ".join(response.headers.get_list("link"))):
            if params.get("rel") == "authenticate":
                _say(f"  obtain a token at: {target}")
        return EXIT_AUTH
    if response.status_code == 406:
        _say("no memento satisfies the requested preferences")
        return EXIT_NOT_ACCEPTABLE
    if response.status_code == 508:
        _say(f"aggregation loop refused: {response.text.strip()}")
        return EXIT_LOOP
    _say(f"endpoint returned {response.status_code}: {response.text.strip()}")
    return EXIT_HTTP


# -- report ----------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    from .aggregation import AggregationEngine
    from .reporting import write_report

    service_config = load_service_config(_read_json(args.config))
    uri_r = OriginalUri(args.uri_r)
    profile = Profile.parse(args.profile) if args.profile else None
    plan = compile_plan(profile, service_config.rules, service_config.sources, uri_r)
    engine = AggregationEngine(timeout_ms=service_config.timeout_ms)
    report = engine.execute_plan(plan, uri_r, tokens=_parse_tokens(args.token))

    for result in report.per_source:
        status = f" {result.status}" if result.status is not None else ""
        _say(f"  {result.source_id}: {result.outcome.value}{status} ({result.elapsed_ms:.0f} ms)")
    _say(f"aggregated {len(report.timemap.mementos)} mementos from {len(report.per_source)} sources")

    paths = write_report(report, args.out)
    for name in ("mementos", "sources", "timeline"):
        _say(f"wrote {paths[name]}")
    return EXIT_OK


# -- entry ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mementity",
        description="Aggregate private, personal, and public web archives.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run one mementity role, or a whole topology")
    serve.add_argument("role", choices=["mma", "stargate", "gateway", "simulator"])
    serve.add_argument("--config", help="JSON config for the role")
    serve.add_argument("--topology", help="simulator only: JSON topology of many mementities")
    serve.add_argument("--listen", help="HOST:PORT to bind (default 127.0.0.1, ephemeral port)")
    serve.set_defaults(func=cmd_serve)

    aggregate = sub.add_parser("aggregate", help="fetch an aggregated TimeMap to stdout")
    aggregate.add_argument("uri_r", help="original resource URI")
    aggregate.add_argument("--endpoint", help=f"MMA base URL (default ${ENDPOINT_ENV})")
    aggregate.add_argument("--format", choices=sorted(FORMATS), default="cdxj")
    aggregate.add_argument("--profile", help="precedence profile name")
    aggregate.add_argument(
        "--more-archives", action="append", default=[], metavar="TEMPLATE",
        help="extra TimeMap endpoint template, repeatable",
    )
    aggregate.add_argument(
        "--token", action="append", default=[], metavar="SOURCE:TOKEN",
        help="access token for a private source, repeatable",
    )
    aggregate.add_argument("--timeout", type=float, default=30.0, help="seconds")
    aggregate.set_defaults(func=cmd_aggregate)

    report = sub.add_parser("report", help="run an aggregation and write CSVs plus a timeline figure")
    report.add_argument("uri_r", help="original resource URI")
    report.add_argument("--config", required=True, help="MMA-style JSON config naming the sources")
    report.add_argument("--out", required=True, help="output directory")
    report.add_argument("--profile", help="precedence profile name")
    report.add_argument(
        "--token", action="append", default=[], metavar="SOURCE:TOKEN",
        help="access token for a private source, repeatable",
    )
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MementityError as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
