"""Conversion between MementoRecord and the JSON payload shape shared by
the CDXJ and JSON serializations."""

from __future__ import annotations

from typing import Any

from ..exceptions import ValidationError
from ..model import AccessAttrs, ContentAttrs, MementoDatetime, MementoRecord

# Payload keys with reserved meaning. Everything else round-trips through
# MementoRecord.extensions with its JSON type preserved.
_CORE_KEYS = ("uri", "rel", "datetime")
_CONTENT_KEYS = ("status_code", "content_type", "last_modified")
RESERVED_KEYS = frozenset(_CORE_KEYS) | frozenset(_CONTENT_KEYS) | {"damage", "access"}


def record_to_payload(record: MementoRecord) -> dict[str, Any]:
    """Flatten a record into its JSON payload, enrichment keys sorted."""
    payload: dict[str, Any] = {
        "uri": record.uri_m,
        "rel": record.rel,
        "datetime": record.datetime.http,
    }
    extras: dict[str, Any] = {}
    if record.content is not None:
        if record.content.status_code is not None:
            extras["status_code"] = record.content.status_code
        if record.content.content_type is not None:
            extras["content_type"] = record.content.content_type
        if record.content.last_modified is not None:
            extras["last_modified"] = record.content.last_modified.http
    if record.derived:
        extras.update(record.derived)
    if record.access is not None and record.access:
        access: dict[str, str] = {}
        if record.access.type is not None:
            access["type"] = record.access.type
        if record.access.token is not None:
            access["token"] = record.access.token
        extras["access"] = access
    extras.update(record.extensions)
    for key in sorted(extras):
        payload[key] = extras[key]
    return payload


def record_from_payload(payload: dict[str, Any], *, sort_key: str | None = None) -> tuple[MementoRecord, list[str]]:
    """Build a record from a JSON payload.

    ``sort_key`` is the 14-digit key the payload was filed under, if any.
    The payload datetime wins when the two disagree; the mismatch is
    reported as a warning. A payload with no datetime falls back to the
    sort key.
    """
    warnings: list[str] = []
    uri = payload.get("uri")
    if not isinstance(uri, str) or not uri:
        raise ValidationError("record payload missing 'uri'")

    dt: MementoDatetime | None = None
    dt_text = payload.get("datetime")
    if dt_text is not None:
        if not isinstance(dt_text, str):
            raise ValidationError(f"record datetime must be a string, got {dt_text!r}")
        dt = MementoDatetime.from_http(dt_text)
    if sort_key is not None:
        keyed = MementoDatetime.from_key(sort_key)
        if dt is None:
            dt = keyed
        elif dt != keyed:
            warnings.append(
                f"sort key {sort_key} disagrees with payload datetime "
                f"{dt.key}; payload wins"
            )
    if dt is None:
        raise ValidationError(f"record for {uri!r} has no datetime")

    rel = payload.get("rel", "memento")
    if not isinstance(rel, str):
        raise ValidationError(f"record rel must be a string, got {rel!r}")

    content: ContentAttrs | None = None
    if any(k in payload for k in _CONTENT_KEYS):
        status = payload.get("status_code")
        if status is not None and not isinstance(status, int):
            raise ValidationError(f"status_code must be an integer, got {status!r}")
        ctype = payload.get("content_type")
        if ctype is not None and not isinstance(ctype, str):
            raise ValidationError(f"content_type must be a string, got {ctype!r}")
        lastmod = payload.get("last_modified")
        lm = MementoDatetime.from_http(lastmod) if isinstance(lastmod, str) else None
        if lastmod is not None and lm is None:
            raise ValidationError(f"last_modified must be a string, got {lastmod!r}")
        content = ContentAttrs(status_code=status, content_type=ctype, last_modified=lm)

    derived: dict[str, float] | None = None
    if "damage" in payload:
        damage = payload["damage"]
        if not isinstance(damage, (int, float)) or isinstance(damage, bool):
            raise ValidationError(f"damage must be a number, got {damage!r}")
        derived = {"damage": float(damage)}

    access: AccessAttrs | None = None
    if "access" in payload:
        raw_access = payload["access"]
        if not isinstance(raw_access, dict):
            raise ValidationError(f"access must be an object, got {raw_access!r}")
        a_type = raw_access.get("type")
        a_token = raw_access.get("token")
        if a_type is not None and not isinstance(a_type, str):
            raise ValidationError(f"access type must be a string, got {a_type!r}")
        if a_token is not None and not isinstance(a_token, str):
            raise ValidationError(f"access token must be a string, got {a_token!r}")
        access = AccessAttrs(type=a_type, token=a_token)

    extensions = {k: v for k, v in payload.items() if k not in RESERVED_KEYS}

    record = MementoRecord(
        uri_m=uri,
        datetime=dt,
        rel=rel,
        content=content,
        derived=derived,
        access=access,
        extensions=extensions,
    )
    return record, warnings


__all__ = [
    "RESERVED_KEYS",
    "record_to_payload",
    "record_from_payload",
]
