from .base import (
    DEFAULT_BACKOFF,
    DEFAULT_RESULT_TTL,
    DEFAULT_RETRIES,
    MAX_PAYLOAD,
    Broker,
    BrokerClosed,
    BrokerError,
    Envelope,
    PayloadTooLarge,
    Subscription,
    sync_call,
    sync_serve,
)
from .memory import MemoryBroker
from .tcp import BrokerServer, TcpBroker


def connect(url: str | None) -> Broker:
    """Broker for ``url``: ``memory://`` (or None) or ``tcp://host:port``."""
    if not url or url.startswith("memory"):
        return MemoryBroker()
    if url.startswith("tcp://"):
        return TcpBroker.from_url(url)
    raise ValueError(f"unsupported broker url {url!r}")


__all__ = [
    "Broker",
    "BrokerClosed",
    "BrokerError",
    "BrokerServer",
    "DEFAULT_BACKOFF",
    "DEFAULT_RESULT_TTL",
    "DEFAULT_RETRIES",
    "Envelope",
    "MAX_PAYLOAD",
    "MemoryBroker",
    "PayloadTooLarge",
    "Subscription",
    "TcpBroker",
    "connect",
    "sync_call",
    "sync_serve",
]
