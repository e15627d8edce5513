"""mementity: aggregate private, personal, and public web archives.

The package provides an enriched TimeMap model with CDXJ, link-format, and
JSON codecs, precedence-aware query planning, a hierarchical aggregation
engine, and HTTP services: a meta-aggregator, a multi-dimensional timegate,
a token gateway, and an archive simulator for end-to-end topologies.
"""

from __future__ import annotations

from .model import (
    AccessAttrs,
    ContentAttrs,
    MementoDatetime,
    MementoRecord,
    OriginalUri,
    SourceDescriptor,
    SourceKind,
    TimeMap,
    TokenGrant,
    Visibility,
    canonical_uri,
    canonicalize,
)

__version__ = "0.1.0"

__all__ = [
    "AccessAttrs",
    "ContentAttrs",
    "MementoDatetime",
    "MementoRecord",
    "OriginalUri",
    "SourceDescriptor",
    "SourceKind",
    "TimeMap",
    "TokenGrant",
    "Visibility",
    "canonical_uri",
    "canonicalize",
    "__version__",
]
