from .app import GUARDIAN_QUEUE, INGEST_QUEUE, NOTIFY_TOPIC, Gateway, GatewayConfig, parse_metrics, render_metrics
from .auth import AuthToken, InvalidToken, TokenIssuer
from .channels import BUFFERED, DELIVERED, UNDELIVERABLE, NotificationHub

__all__ = [
    "AuthToken",
    "BUFFERED",
    "DELIVERED",
    "GUARDIAN_QUEUE",
    "Gateway",
    "GatewayConfig",
    "INGEST_QUEUE",
    "InvalidToken",
    "NOTIFY_TOPIC",
    "NotificationHub",
    "TokenIssuer",
    "UNDELIVERABLE",
    "parse_metrics",
    "render_metrics",
]
