"""
Security Utilities
Endpoint validation for remote LLM backends
"""

from urllib.parse import urlparse

import structlog

logger = structlog.get_logger()

# Allowed URL schemes
ALLOWED_SCHEMES = {"http", "https"}


def validate_endpoint_url(url: str) -> str:
    """
    Validate an LLM backend endpoint

    Local inference servers are a normal deployment, so private and loopback
    hosts are accepted; only the scheme and host are checked.

    Args:
        url: URL to validate

    Returns:
        The URL, unchanged

    Raises:
        ValueError: If URL is malformed or uses an unsupported scheme
    """
    parsed = urlparse(url)

    if parsed.scheme not in ALLOWED_SCHEMES:
        logger.warning("Invalid endpoint scheme", url=url, scheme=parsed.scheme)
        raise ValueError(f"Invalid URL scheme: {parsed.scheme or '<none>'}")

    if not parsed.hostname:
        raise ValueError(f"Endpoint has no host: {url}")

    if parsed.scheme == "http" and parsed.hostname not in {"localhost", "127.0.0.1", "::1"}:
        # API key travels as a bearer token
        logger.warning("Endpoint is not using TLS", host=parsed.hostname)

    return url
