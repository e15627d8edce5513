"""Link-format TimeMap serialization (application/link-format).

The document is a comma-joined list of link-values::

    <http://a.example/>; rel="original",
    <http://a.example/tg>; rel="timegate",
    <http://m.example/1>; rel="first memento"; datetime="Sat, 12 Dec 1998 01:39:21 GMT"

Enrichment attributes ride along as extension parameters on memento
link-values. Access attributes are deliberately never emitted in this
format: its parameter values are flat strings read by generic clients,
and leaking tokens into them would defeat the point of gating.
"""

from __future__ import annotations

import json
import logging

from ..exceptions import DatetimeError, LinkParseError, UriParseError, ValidationError
from ..model import (
    MEMENTO_RELS,
    REL_MEMENTO,
    ContentAttrs,
    MementoDatetime,
    MementoRecord,
    OriginalUri,
    TimeMap,
)

logger = logging.getLogger(__name__)

MEDIA_TYPE = "application/link-format"

_FORMAT_TYPES = {
    "link": "application/link-format",
    "json": "application/json",
    "cdxj": "text/x-cdxj",
}
_TYPES_FORMAT = {v: k for k, v in _FORMAT_TYPES.items()}

# Typed memento parameters; remaining extension parameters are decoded as
# int, then float, then string.
_INT_PARAMS = ("status_code",)
_FLOAT_PARAMS = ("damage",)
_DATETIME_PARAMS = ("last_modified",)


def _quote(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _param_text(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (dict, list)):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


def _memento_link(record: MementoRecord) -> str:
    parts = [f"<{record.uri_m}>", f'rel="{record.rel}"', f'datetime="{record.datetime.http}"']
    extras: dict[str, object] = {}
    if record.content is not None:
        if record.content.status_code is not None:
            extras["status_code"] = record.content.status_code
        if record.content.content_type is not None:
            extras["content_type"] = record.content.content_type
        if record.content.last_modified is not None:
            extras["last_modified"] = record.content.last_modified.http
    if record.derived:
        extras.update(record.derived)
    extras.update(record.extensions)
    for key in sorted(extras):
        parts.append(f"{key}={_quote(_param_text(extras[key]))}")
    return "; ".join(parts)


def serialize_link(timemap: TimeMap) -> str:
    """Render a TimeMap as an application/link-format document."""
    links: list[str] = [f'<{timemap.original.value}>; rel="original"']
    if timemap.timegate_uri:
        links.append(f'<{timemap.timegate_uri}>; rel="timegate"')
    link_self = timemap.self_uris.get("link")
    if link_self:
        links.append(f'<{link_self}>; rel="self"; type="application/link-format"')
    for fmt in ("json", "cdxj"):
        uri = timemap.self_uris.get(fmt)
        if uri:
            links.append(f'<{uri}>; rel="timemap"; type="{_FORMAT_TYPES[fmt]}"')
    links.extend(_memento_link(record) for record in timemap.mementos)
    return ",\n".join(links) + "\n"


class _Scanner:
    """Character scanner over a link-format document."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def skip_ws(self) -> None:
        while not self.eof() and self.text[self.pos] in " \t\r\n":
            self.pos += 1

    def expect(self, ch: str) -> None:
        if self.eof() or self.text[self.pos] != ch:
            found = "end of input" if self.eof() else repr(self.text[self.pos])
            raise LinkParseError(f"expected {ch!r} at position {self.pos}, found {found}")
        self.pos += 1

    def take_until(self, ch: str) -> str:
        start = self.pos
        idx = self.text.find(ch, start)
        if idx < 0:
            raise LinkParseError(f"unterminated token from position {start}: missing {ch!r}")
        self.pos = idx
        return self.text[start:idx]

    def take_token(self) -> str:
        start = self.pos
        while not self.eof() and self.text[self.pos] not in '=;," \t\r\n':
            self.pos += 1
        if self.pos == start:
            raise LinkParseError(f"expected token at position {start}")
        return self.text[start:self.pos]

    def take_quoted(self) -> str:
        self.expect('"')
        out: list[str] = []
        while True:
            if self.eof():
                raise LinkParseError("unterminated quoted string")
            ch = self.text[self.pos]
            self.pos += 1
            if ch == "\\":
                if self.eof():
                    raise LinkParseError("dangling escape in quoted string")
                out.append(self.text[self.pos])
                self.pos += 1
            elif ch == '"':
                return "".join(out)
            else:
                out.append(ch)


def _scan_link_value(scanner: _Scanner) -> tuple[str, dict[str, str]]:
    scanner.skip_ws()
    scanner.expect("<")
    target = scanner.take_until(">")
    scanner.expect(">")
    params: dict[str, str] = {}
    while True:
        scanner.skip_ws()
        if scanner.eof() or scanner.text[scanner.pos] == ",":
            return target, params
        scanner.expect(";")
        scanner.skip_ws()
        name = scanner.take_token().lower()
        scanner.skip_ws()
        if not scanner.eof() and scanner.text[scanner.pos] == "=":
            scanner.pos += 1
            scanner.skip_ws()
            if not scanner.eof() and scanner.text[scanner.pos] == '"':
                value = scanner.take_quoted()
            else:
                value = scanner.take_token()
        else:
            value = ""
        params.setdefault(name, value)


def _decode_extension(value: str) -> object:
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _record_from_link(target: str, params: dict[str, str]) -> MementoRecord:
    dt_text = params.get("datetime")
    if dt_text is None:
        raise LinkParseError(f"memento link <{target}> missing datetime parameter")
    dt = MementoDatetime.from_http(dt_text)
    status = None
    ctype = params.get("content_type")
    lastmod = None
    derived: dict[str, float] = {}
    extensions: dict[str, object] = {}
    for name, value in params.items():
        if name in ("rel", "datetime", "content_type", "type", "anchor"):
            continue
        if name in _INT_PARAMS:
            status = int(value)
        elif name in _FLOAT_PARAMS:
            derived[name] = float(value)
        elif name in _DATETIME_PARAMS:
            lastmod = MementoDatetime.from_http(value)
        else:
            extensions[name] = _decode_extension(value)
    content = None
    if status is not None or ctype is not None or lastmod is not None:
        content = ContentAttrs(status_code=status, content_type=ctype, last_modified=lastmod)
    return MementoRecord(
        uri_m=target,
        datetime=dt,
        rel=REL_MEMENTO,
        content=content,
        derived=derived or None,
        extensions=extensions,
    )


def parse_link(text: str, *, strict: bool = False) -> TimeMap:
    """Parse an application/link-format TimeMap.

    Mementos are stable-sorted by datetime and rel markers recomputed from
    the sorted sequence, so a round trip through this format reorders an
    unsorted document rather than failing. In lenient mode a link-value
    that cannot be parsed is dropped with a warning; strict mode raises
    LinkParseError.
    """
    scanner = _Scanner(text)
    original: OriginalUri | None = None
    timegate_uri: str | None = None
    self_uris: dict[str, str] = {}
    raw_records: list[MementoRecord] = []
    warnings: list[str] = []

    while True:
        scanner.skip_ws()
        if scanner.eof():
            break
        start = scanner.pos
        try:
            target, params = _scan_link_value(scanner)
        except LinkParseError as exc:
            if strict:
                raise
            warnings.append(str(exc))
            # Resynchronize at the next link-value boundary.
            idx = scanner.text.find(",", max(scanner.pos, start + 1))
            if idx < 0:
                break
            scanner.pos = idx + 1
            continue
        scanner.skip_ws()
        if not scanner.eof():
            scanner.expect(",")

        rels = params.get("rel", "").split()
        try:
            if "original" in rels:
                original = OriginalUri(target)
            elif "timegate" in rels:
                timegate_uri = target
            elif "self" in rels or "timemap" in rels:
                fmt = _TYPES_FORMAT.get(params.get("type", ""))
                if fmt:
                    self_uris.setdefault(fmt, target)
                else:
                    warnings.append(f"timemap link <{target}> has unknown type; ignored")
            elif params.get("rel") in MEMENTO_RELS:
                raw_records.append(_record_from_link(target, params))
            else:
                warnings.append(f"link <{target}> with rel {params.get('rel')!r} ignored")
        except (LinkParseError, DatetimeError, UriParseError, ValidationError) as exc:
            if strict:
                if isinstance(exc, LinkParseError):
                    raise
                raise LinkParseError(str(exc)) from exc
            warnings.append(str(exc))

    if original is None:
        raise LinkParseError('document has no rel="original" link')

    seen: set[str] = set()
    unique: list[MementoRecord] = []
    for record in raw_records:
        if record.uri_m in seen:
            message = f"duplicate memento link <{record.uri_m}> dropped"
            if strict:
                raise LinkParseError(message)
            warnings.append(message)
            continue
        seen.add(record.uri_m)
        unique.append(record)

    return TimeMap.assemble(
        original,
        unique,
        timegate_uri=timegate_uri,
        self_uris=self_uris,
        warnings=warnings,
    )


def parse_header_links(value: str) -> list[tuple[str, dict[str, str]]]:
    """Parse an HTTP ``Link`` header into (target, params) pairs.

    Same grammar as the document parser; raises LinkParseError on
    malformed input.
    """
    scanner = _Scanner(value)
    links: list[tuple[str, dict[str, str]]] = []
    while True:
        scanner.skip_ws()
        if scanner.eof():
            return links
        links.append(_scan_link_value(scanner))
        scanner.skip_ws()
        if not scanner.eof():
            scanner.expect(",")


def format_header_link(target: str, **params: str) -> str:
    """Render one Link header value, e.g. ``<u>; rel="authenticate"``."""
    rendered = [f"<{target}>"]
    rendered.extend(f'{name}="{value}"' for name, value in params.items())
    return "; ".join(rendered)


__all__ = [
    "MEDIA_TYPE",
    "format_header_link",
    "parse_header_links",
    "parse_link",
    "serialize_link",
]
