"""TimeMap codecs: CDXJ, link format, and JSON.

``FORMATS`` maps the short format names used in URL routes ("link",
"json", "cdxj") to (media type, serializer, parser) triples.
"""

from __future__ import annotations

from typing import Callable

from ..model import TimeMap
from .cdxj import MEDIA_TYPE as CDXJ_MEDIA_TYPE
from .cdxj import parse_cdxj, serialize_cdxj
from .jsonformat import MEDIA_TYPE as JSON_MEDIA_TYPE
from .jsonformat import parse_json, serialize_json
from .linkformat import MEDIA_TYPE as LINK_MEDIA_TYPE
from .linkformat import parse_link, serialize_link

Serializer = Callable[[TimeMap], str]
Parser = Callable[..., TimeMap]

FORMATS: dict[str, tuple[str, Serializer, Parser]] = {
    "link": (LINK_MEDIA_TYPE, serialize_link, parse_link),
    "json": (JSON_MEDIA_TYPE, serialize_json, parse_json),
    "cdxj": (CDXJ_MEDIA_TYPE, serialize_cdxj, parse_cdxj),
}

MEDIA_TYPES: dict[str, str] = {name: triple[0] for name, triple in FORMATS.items()}


def parser_for_media_type(media_type: str) -> Parser:
    """Pick a parser from a Content-Type value; defaults to CDXJ."""
    bare = media_type.split(";", 1)[0].strip().lower()
    for name, (mtype, _serializer, parser) in FORMATS.items():
        if bare == mtype:
            return parser
    return parse_cdxj


__all__ = [
    "FORMATS",
    "MEDIA_TYPES",
    "parse_cdxj",
    "parse_json",
    "parse_link",
    "parser_for_media_type",
    "serialize_cdxj",
    "serialize_json",
    "serialize_link",
]
