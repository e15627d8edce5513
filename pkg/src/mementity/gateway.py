"""Authentication mementity (URI-P): issues and validates access tokens
for private archives.

This is a reference implementation, not a hardened identity provider:
credentials are verified against salted digests, tokens are 256-bit
random values stored only as digests, and grants live in memory with an
optional append-only spill file. Log lines never contain a credential or
a raw token.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import pathlib
import secrets
import threading
import time
from typing import Callable, Iterable

from .exceptions import AuthenticationError, ConfigError, UnknownSourceError
from .httpd import HttpService, Request, Response
from .model import TokenGrant

logger = logging.getLogger(__name__)

DEFAULT_TTL_S = 3600.0
_DIGEST_SIZE = 32


def _digest(salt: bytes, secret: str) -> bytes:
    return hashlib.blake2b(salt + secret.encode("utf-8"), digest_size=_DIGEST_SIZE).digest()


def token_digest(token: str) -> str:
    """Stable public digest of a token, used wherever a token must be
    referenced without being disclosed (grant keys, enriched TimeMaps)."""
    return hashlib.blake2b(token.encode("utf-8"), digest_size=_DIGEST_SIZE).hexdigest()


def build_auth_challenge(source_id: str, uri_p: str) -> list[tuple[str, str]]:
    """Headers for a 401 pointing the requester at the authentication
    mementity responsible for ``source_id``."""
    return [
        ("WWW-Authenticate", f'Bearer realm="{source_id}"'),
        ("Link", f'<{uri_p}>; rel="authenticate"'),
    ]


class CredentialStore:
    """Registered subjects and live token grants.

    ``time_fn`` is injectable so expiry is testable without sleeping.
    ``persist_path`` appends issued grants (digest-keyed, never the raw
    token) as JSON lines and replays them on construction.
    """

    def __init__(
        self,
        ttl_s: float = DEFAULT_TTL_S,
        time_fn: Callable[[], float] = time.time,
        persist_path: str | pathlib.Path | None = None,
    ):
        self._ttl_s = ttl_s
        self._now = time_fn
        self._lock = threading.Lock()
        # subject -> (salt, credential digest, granted source ids)
        self._subjects: dict[str, tuple[bytes, bytes, frozenset[str]]] = {}
        self._known_sources: set[str] = set()
        # token digest -> grant (grant.token holds the digest, not the raw token)
        self._grants: dict[str, TokenGrant] = {}
        self._dummy_salt = secrets.token_bytes(16)
        self._dummy_digest = _digest(self._dummy_salt, secrets.token_hex(16))
        self._persist_path = pathlib.Path(persist_path) if persist_path else None
        if self._persist_path and self._persist_path.exists():
            self._replay()

    def register(self, subject: str, credential: str, sources: Iterable[str]) -> None:
        sources = frozenset(sources)
        if not subject or not credential:
            raise ConfigError("subject and credential must be non-empty")
        if not sources:
            raise ConfigError(f"subject {subject!r} must be granted at least one source")
        salt = secrets.token_bytes(16)
        with self._lock:
            self._subjects[subject] = (salt, _digest(salt, credential), sources)
            self._known_sources.update(sources)
        logger.info("registered subject=%s sources=%s", subject, sorted(sources))

    def issue_token(self, subject: str, credential: str, source_id: str, uri_r: str = "") -> TokenGrant:
        """Verify credentials and mint a grant bound to one source.

        Verification runs in uniform time whether or not the subject
        exists. The returned grant carries the raw token; the store keeps
        only its digest.
        """
        with self._lock:
            known_source = source_id in self._known_sources
            entry = self._subjects.get(subject)
        if entry is None:
            salt, expected, granted = self._dummy_salt, self._dummy_digest, frozenset()
        else:
            salt, expected, granted = entry
        credential_ok = hmac.compare_digest(_digest(salt, credential), expected)
        if not known_source:
            raise UnknownSourceError(f"unknown source {source_id!r}")
        if entry is None or not credential_ok or source_id not in granted:
            logger.info("authentication failed for subject=%s source=%s", subject, source_id)
            raise AuthenticationError("invalid credentials")

        raw_token = secrets.token_hex(32)
        grant = TokenGrant(
            token=token_digest(raw_token),
            source_id=source_id,
            subject=subject,
            expires_at=self._now() + self._ttl_s,
        )
        with self._lock:
            self._grants[grant.token] = grant
        self._persist(grant)
        logger.info("token issued for subject=%s source=%s", subject, source_id)
        return TokenGrant(
            token=raw_token,
            source_id=source_id,
            subject=subject,
            expires_at=grant.expires_at,
        )

    def validate_token(self, token: str, source_id: str) -> str | None:
        """Return the grant's subject when the token is live and bound to
        ``source_id``; None otherwise. Never raises."""
        if not token:
            return None
        key = token_digest(token)
        now = self._now()
        with self._lock:
            grant = self._grants.get(key)
            if grant is None:
                return None
            if grant.expires_at <= now:
                del self._grants[key]
                return None
        if not hmac.compare_digest(grant.token, key):
            return None
        if grant.source_id != source_id:
            return None
        return grant.subject

    @property
    def ttl_s(self) -> float:
        return self._ttl_s

    def _persist(self, grant: TokenGrant) -> None:
        if self._persist_path is None:
            return
        line = json.dumps(
            {
                "token_digest": grant.token,
                "source_id": grant.source_id,
                "subject": grant.subject,
                "expires_at": grant.expires_at,
            }
        )
        with self._lock:
            with self._persist_path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def _replay(self) -> None:
        count = 0
        for line in self._persist_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            grant = TokenGrant(
                token=entry["token_digest"],
                source_id=entry["source_id"],
                subject=entry["subject"],
                expires_at=float(entry["expires_at"]),
            )
            if grant.expires_at > self._now():
                self._grants[grant.token] = grant
                count += 1
        logger.info("replayed %d live grants from %s", count, self._persist_path)


def load_users(path: str | pathlib.Path) -> list[dict]:
    """Read a credential fixture file: a JSON list of
    {"subject", "credential", "sources": [...]} objects."""
    try:
        entries = json.loads(pathlib.Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read users file {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ConfigError("users file must be a JSON list")
    for entry in entries:
        if not isinstance(entry, dict) or not {"subject", "credential", "sources"} <= set(entry):
            raise ConfigError(f"malformed user entry: {entry!r}")
    return entries


class GatewayService:
    """HTTP front for a CredentialStore.

    - POST /token       {subject, credential, source_id, uri_r} -> {token, expires_in}
    - POST /introspect  {token, source_id} -> {active, subject?}
    """

    def __init__(self, store: CredentialStore, *, name: str = "gateway",
                 host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self.http = HttpService(self._handle, name=name, host=host, port=port)

    @property
    def base_url(self) -> str:
        return self.http.base_url

    @property
    def token_url(self) -> str:
        return f"{self.base_url}/token"

    def start(self) -> "GatewayService":
        self.http.start()
        return self

    def stop(self) -> None:
        self.http.stop()

    def _handle(self, request: Request) -> Response:
        if request.path == "/token" and request.method == "POST":
            return self._token(request)
        if request.path == "/introspect" and request.method == "POST":
            return self._introspect(request)
        if request.path in ("/token", "/introspect"):
            return _json_response(405, {"error": "method_not_allowed"})
        return _json_response(404, {"error": "not_found"})

    def _token(self, request: Request) -> Response:
        body = _json_body(request)
        if body is None:
            return _json_response(400, {"error": "malformed_request"})
        missing = [k for k in ("subject", "credential", "source_id") if not body.get(k)]
        if missing:
            return _json_response(400, {"error": "missing_fields", "fields": missing})
        try:
            grant = self.store.issue_token(
                subject=str(body["subject"]),
                credential=str(body["credential"]),
                source_id=str(body["source_id"]),
                uri_r=str(body.get("uri_r", "")),
            )
        except UnknownSourceError:
            return _json_response(400, {"error": "unknown_source"})
        except AuthenticationError:
            return _json_response(401, {"error": "invalid_credentials"})
        return _json_response(200, {"token": grant.token, "expires_in": round(self.store.ttl_s)})

    def _introspect(self, request: Request) -> Response:
        body = _json_body(request)
        if body is None or "token" not in body or "source_id" not in body:
            return _json_response(400, {"error": "malformed_request"})
        subject = self.store.validate_token(str(body["token"]), str(body["source_id"]))
        if subject is None:
            return _json_response(200, {"active": False})
        return _json_response(200, {"active": True, "subject": subject})


def _json_body(request: Request) -> dict | None:
    try:
        body = json.loads(request.body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return None
    return body if isinstance(body, dict) else None


def _json_response(status: int, payload: dict) -> Response:
    return Response(
        status=status,
        headers=[("Content-Type", "application/json")],
        body=(json.dumps(payload) + "\n").encode("utf-8"),
    )


__all__ = [
    "CredentialStore",
    "GatewayService",
    "build_auth_challenge",
    "load_users",
    "token_digest",
]
