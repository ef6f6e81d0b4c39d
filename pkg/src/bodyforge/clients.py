"""Pluggable chat-model transports for curation and grading.

A transport is a callable mapping one JSON-able request to one JSON-able
response. The request is ``{"model": str, "messages": [{"role": str,
"content": [part, ...]}]}`` where a part is either ``{"type": "text",
"text": str}`` or ``{"type": "image_base64", "data": str}``; the response is
``{"content": str}``. ``ScriptedTransport`` serves canned responses for tests
and offline runs; ``HttpTransport`` POSTs the same payload to a live endpoint.

``ModelClient`` adds image loading, bounded exponential-backoff retries, and
convenience methods shared by the curation VLM and the grader.
"""

from __future__ import annotations

import base64
import json
import time
from pathlib import Path

__all__ = ["TransportError", "ScriptedTransport", "HttpTransport", "ModelClient", "text_part", "image_part_from_file"]


class TransportError(RuntimeError):
    """The model endpoint failed, answered malformed data, or kept failing
    through every retry."""


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part_from_file(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    return {"type": "image_base64", "data": base64.b64encode(data).decode("ascii")}


def _request_text(payload: dict) -> str:
    chunks = []
    for message in payload.get("messages", []):
        for part in message.get("content", []):
            if part.get("type") == "text":
                chunks.append(part.get("text", ""))
    return "\n".join(chunks)


def _request_images(payload: dict) -> list[bytes]:
    images = []
    for message in payload.get("messages", []):
        for part in message.get("content", []):
            if part.get("type") == "image_base64":
                images.append(base64.b64decode(part.get("data", "")))
    return images


class ScriptedTransport:
    """Deterministic mock transport driven by a rule list.

    Script shape::

        {"rules": [{"prompt_contains": str, "image_contains": str,
                    "min_images": int, "response": str, "fail": bool}, ...],
         "default": str}

    Rules are tried in order; every present condition must hold. A matching
    rule either raises (``fail``) or returns its response. Identical payloads
    always produce identical results.
    """

    def __init__(self, script: dict):
        if not isinstance(script, dict) or "default" not in script:
            raise ValueError("script needs at least a 'default' response")
        self.rules = list(script.get("rules", []))
        self.default = script["default"]
        self.calls = 0

    @classmethod
    def from_json(cls, path: str | Path) -> "ScriptedTransport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def __call__(self, payload: dict) -> dict:
        self.calls += 1
        text = _request_text(payload)
        images = _request_images(payload)
        blob = b"\n".join(images)
        for rule in self.rules:
            if "prompt_contains" in rule and rule["prompt_contains"] not in text:
                continue
            if "min_images" in rule and len(images) < rule["min_images"]:
                continue
            if "image_contains" in rule and rule["image_contains"].encode("utf-8") not in blob:
                continue
            if rule.get("fail"):
                raise TransportError(f"scripted failure: {rule.get('response', 'fail')}")
            return {"content": rule["response"]}
        return {"content": self.default}


class HttpTransport:
    """POSTs the request JSON to one endpoint URL."""

    def __init__(self, url: str, timeout: float = 60.0, headers: dict | None = None):
        self.url = url
        self.timeout = timeout
        self.headers = headers or {}

    def __call__(self, payload: dict) -> dict:
        import requests

        try:
            resp = requests.post(self.url, json=payload, timeout=self.timeout, headers=self.headers)
        except requests.RequestException as err:
            raise TransportError(f"POST {self.url} failed: {err}") from err
        if resp.status_code != 200:
            raise TransportError(f"POST {self.url} returned {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as err:
            raise TransportError(f"{self.url}: response is not JSON: {err}") from err
        if not isinstance(body, dict) or not isinstance(body.get("content"), str):
            raise TransportError(f"{self.url}: response missing string 'content'")
        return body


class ModelClient:
    """Retrying chat client over any transport."""

    def __init__(
        self,
        transport,
        model: str = "default",
        max_attempts: int = 3,
        retry_delay: float = 0.5,
        temperature: float | None = None,
    ):
        self.transport = transport
        self.model = model
        self.max_attempts = max_attempts
        self.retry_delay = retry_delay
        self.temperature = temperature

    def ask_messages(self, messages: list[dict]) -> str:
        for message in messages:
            if not isinstance(message.get("role"), str):
                raise ValueError(f"message needs a string role: {message!r}")
            if not isinstance(message.get("content"), list):
                raise ValueError("message content must be a list of parts")
        payload: dict = {"model": self.model, "messages": messages}
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        last: TransportError | None = None
        for attempt in range(self.max_attempts):
            try:
                response = self.transport(payload)
            except TransportError as err:
                last = err
                if attempt + 1 < self.max_attempts and self.retry_delay > 0:
                    time.sleep(self.retry_delay * (2 ** attempt))
                continue
            content = response.get("content") if isinstance(response, dict) else None
            if not isinstance(content, str):
                raise TransportError(f"transport returned malformed response: {response!r}")
            return content
        raise TransportError(f"transport failed after {self.max_attempts} attempts: {last}")

    def ask(self, prompt: str, image_paths: tuple | list = ()) -> str:
        content = [text_part(prompt)]
        content.extend(image_part_from_file(p) for p in image_paths)
        return self.ask_messages([{"role": "user", "content": content}])
