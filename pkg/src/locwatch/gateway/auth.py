"""Compact signed tokens: ``b64(header).b64(claims).b64(hmac-sha256)``."""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional

from ..core import Role, UserId

SECRET_ENV = "LOCWATCH_SECRET"
_HEADER = {"alg": "HS256", "typ": "JWT"}


class InvalidToken(Exception):
    pass


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode()


def _unb64(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


@dataclass(frozen=True)
class AuthToken:
    subject: UserId
    role: Role
    issued_at: int
    expires_at: int
    signature: str
    raw: str


class TokenIssuer:
    def __init__(self, secret: Optional[bytes | str] = None, clock: Callable[[], float] = time.time):
        if secret is None:
            secret = os.environ.get(SECRET_ENV) or os.urandom(32)
        self.secret = secret.encode() if isinstance(secret, str) else secret
        self.clock = clock

    def _sign(self, signing_input: bytes) -> str:
        return _b64(hmac.new(self.secret, signing_input, hashlib.sha256).digest())

    def issue(self, user: UserId, role: Role, ttl: float = 3600.0) -> AuthToken:
        now = int(self.clock())
        claims = {"sub": user, "role": Role(role).value, "iat": now, "exp": now + int(ttl)}
        head = _b64(json.dumps(_HEADER, separators=(",", ":")).encode())
        body = _b64(json.dumps(claims, separators=(",", ":"), sort_keys=True).encode())
        sig = self._sign(f"{head}.{body}".encode())
        return AuthToken(user, Role(role), now, now + int(ttl), sig, f"{head}.{body}.{sig}")

    def verify(self, raw: str) -> AuthToken:
        """Decode and check a token; raises :class:`InvalidToken` on any defect."""
        try:
            head, body, sig = raw.split(".")
        except (ValueError, AttributeError):
            raise InvalidToken("malformed token") from None
        expected = self._sign(f"{head}.{body}".encode())
        if not hmac.compare_digest(expected, sig):
            raise InvalidToken("bad signature")
        try:
            claims = json.loads(_unb64(body))
            token = AuthToken(str(claims["sub"]), Role(claims["role"]), int(claims["iat"]),
                              int(claims["exp"]), sig, raw)
        except (ValueError, KeyError, TypeError):
            raise InvalidToken("bad claims") from None
        if token.expires_at < self.clock():
            raise InvalidToken("expired")
        return token
