"""JSON-over-HTTP POST with bounded retries."""
from __future__ import annotations

import logging
import os
import random
import time

import httpx

from .errors import ProtocolError, TransportError

logger = logging.getLogger(__name__)

RETRIES = 3
BACKOFF_BASE = 0.5


def bearer_headers(api_key_env: str | None) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if api_key_env:
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
    return headers


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    headers: dict[str, str],
    *,
    retries: int = RETRIES,
    backoff: float = BACKOFF_BASE,
    sleep=time.sleep,
) -> dict:
    """POST ``payload`` and return the decoded JSON body.

    Connection errors, 5xx and 429 are retried ``retries`` times with
    exponential backoff plus jitter; other 4xx and undecodable bodies raise
    ProtocolError straight away.
    """
    attempts = 0
    last = ""
    while True:
        attempts += 1
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            last = f"{type(exc).__name__}: {exc}"
        else:
            if resp.status_code < 400:
                try:
                    body = resp.json()
                except ValueError as exc:
                    raise ProtocolError(f"{url} returned invalid JSON: {exc}") from exc
                if not isinstance(body, dict):
                    raise ProtocolError(f"{url} returned a non-object JSON body")
                return body
            if resp.status_code != 429 and resp.status_code < 500:
                raise ProtocolError(f"{url} returned HTTP {resp.status_code}: {resp.text[:500]}")
            last = f"HTTP {resp.status_code}"
        if attempts > retries:
            raise TransportError(f"POST {url} failed: {last}", attempts)
        delay = backoff * (2 ** (attempts - 1))
        delay += random.uniform(0, delay / 2)
        logger.info("retrying %s in %.2fs (%s)", url, delay, last)
        sleep(delay)
