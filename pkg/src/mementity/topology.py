"""Build and run a whole mementity constellation from one config object:
credential gateways, simulated archives, aggregators, and stargates.

Aggregators may reference each other in cycles, so startup is two-phase:
every HTTP server binds its port first, then source references are
resolved into concrete endpoint URLs and the services are reconfigured
in place.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, field

from .exceptions import ConfigError
from .gateway import CredentialStore, GatewayService
from .model import SourceDescriptor, SourceKind, Visibility
from .precedence import FilterRule
from .service import MMAService, ServiceConfig
from .simulator import ArchiveService, build_spec
from .stargate import StarGateConfig, StarGateService, load_stargate_config


def load_topology_file(path: str | pathlib.Path) -> "Topology":
    try:
        config = json.loads(pathlib.Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read topology {path}: {exc}") from exc
    return load_topology(config)


@dataclass
class Topology:
    """A running constellation; stop it with ``stop_all`` or a with-block."""

    gateways: dict[str, GatewayService] = field(default_factory=dict)
    archives: dict[str, ArchiveService] = field(default_factory=dict)
    aggregators: dict[str, MMAService] = field(default_factory=dict)
    stargates: dict[str, StarGateService] = field(default_factory=dict)

    def base_url(self, node_id: str) -> str:
        for pool in (self.gateways, self.archives, self.aggregators, self.stargates):
            if node_id in pool:
                return pool[node_id].base_url
        raise ConfigError(f"no node {node_id!r} in this topology")

    def request_log(self, archive_id: str) -> list[dict]:
        if archive_id not in self.archives:
            raise ConfigError(f"no archive {archive_id!r} in this topology")
        return self.archives[archive_id].request_log()

    def reset_logs(self) -> None:
        for archive in self.archives.values():
            archive.reset_log()

    def stop_all(self) -> None:
        for pool in (self.stargates, self.aggregators, self.archives, self.gateways):
            for service in pool.values():
                service.stop()

    def __enter__(self) -> "Topology":
        return self

    def __exit__(self, *exc_info) -> None:
        self.stop_all()


def _check_unique_ids(config: dict) -> None:
    seen: set[str] = set()
    for section in ("gateways", "archives", "aggregators", "stargates"):
        for node in config.get(section, ()):
            node_id = node.get("id")
            if not node_id:
                raise ConfigError(f"every node needs an id; missing in section {section!r}")
            if node_id in seen:
                raise ConfigError(f"duplicate node id {node_id!r}")
            seen.add(node_id)


def _resolve_source(entry: dict, topo: Topology) -> dict:
    """Turn one aggregator/stargate source entry into the literal form.

    ``{"ref": "wa1"}`` points at another node in this topology; the
    endpoint, kind, visibility, and auth pointer are derived from it.
    Entries with an explicit "endpoint" pass through untouched.
    """
    if "endpoint" in entry:
        return entry
    ref = entry.get("ref")
    if not ref:
        raise ConfigError(f"source entry needs 'endpoint' or 'ref': {entry!r}")
    fmt = entry.get("format", "cdxj")
    if ref in topo.archives:
        archive = topo.archives[ref]
        resolved = {
            "id": entry.get("id", ref),
            "endpoint": archive.timemap_endpoint(fmt),
            "kind": SourceKind.ARCHIVE.value,
            "visibility": archive.spec.visibility.value,
        }
        if archive.spec.is_private and archive.spec.auth:
            resolved["auth_pointer"] = archive.spec.auth["uri_p"]
        return resolved
    if ref in topo.aggregators:
        aggregator = topo.aggregators[ref]
        return {
            "id": entry.get("id", ref),
            "endpoint": aggregator.timemap_endpoint(fmt),
            "kind": SourceKind.META_AGGREGATOR.value,
            "visibility": Visibility.PUBLIC.value,
        }
    raise ConfigError(f"source ref {ref!r} names no archive or aggregator in this topology")


def _literal_descriptor(entry: dict) -> SourceDescriptor:
    try:
        return SourceDescriptor(
            id=str(entry["id"]),
            timemap_endpoint=str(entry["endpoint"]),
            kind=SourceKind(entry.get("kind", "archive")),
            visibility=Visibility(entry.get("visibility", "public")),
            auth_pointer=entry.get("auth_pointer"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad source entry {entry!r}: {exc}") from exc


def _rules(config: dict) -> tuple[FilterRule, ...]:
    return tuple(
        FilterRule(matcher=str(r["match"]), source_ids=tuple(r["sources"]))
        for r in config.get("rules", ())
    )


def load_topology(config: dict) -> Topology:
    """Start every node described by ``config``; returns the live set.

    On any failure everything already started is stopped again before the
    error propagates.
    """
    _check_unique_ids(config)
    topo = Topology()
    try:
        def listen_on(entry: dict) -> dict:
            return {
                "host": str(entry.get("host", "127.0.0.1")),
                "port": int(entry.get("port", 0)),
            }

        for gw_config in config.get("gateways", ()):
            store = CredentialStore(ttl_s=float(gw_config.get("ttl_s", 3600)))
            for user in gw_config.get("users", ()):
                store.register(user["subject"], user["credential"], user["sources"])
            topo.gateways[gw_config["id"]] = GatewayService(
                store, name=f"gateway-{gw_config['id']}", **listen_on(gw_config)
            ).start()

        gateway_urls = {gw_id: service.base_url for gw_id, service in topo.gateways.items()}
        for archive_config in config.get("archives", ()):
            spec = build_spec(archive_config, gateways=gateway_urls)
            topo.archives[spec.id] = ArchiveService(
                spec, **listen_on(archive_config)
            ).start()

        # Aggregators and stargates may reference one another, so they all
        # bind ports with placeholder configs before any source resolves.
        for agg_config in config.get("aggregators", ()):
            placeholder = ServiceConfig(
                self_id=agg_config["id"], sources=(), **listen_on(agg_config)
            )
            topo.aggregators[agg_config["id"]] = MMAService(placeholder).start()
        for sg_config in config.get("stargates", ()):
            placeholder = StarGateConfig(
                self_id=sg_config["id"], sources=(), **listen_on(sg_config)
            )
            topo.stargates[sg_config["id"]] = StarGateService(placeholder).start()

        for agg_config in config.get("aggregators", ()):
            sources = tuple(
                _literal_descriptor(_resolve_source(entry, topo))
                for entry in agg_config.get("sources", ())
            )
            service = topo.aggregators[agg_config["id"]]
            service.reconfigure(
                ServiceConfig(
                    self_id=agg_config["id"],
                    sources=sources,
                    rules=_rules(agg_config),
                    timeout_ms=int(agg_config.get("timeout_ms", 5000)),
                    depth_limit=int(agg_config.get("depth_limit", 8)),
                    **listen_on(agg_config),
                )
            )
        for sg_config in config.get("stargates", ()):
            resolved = dict(sg_config)
            resolved["sources"] = [
                _resolve_source(entry, topo) for entry in sg_config.get("sources", ())
            ]
            topo.stargates[sg_config["id"]].reconfigure(load_stargate_config(resolved))
    except Exception:
        topo.stop_all()
        raise
    return topo


__all__ = ["Topology", "load_topology", "load_topology_file"]
