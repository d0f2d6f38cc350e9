"""LLM client abstraction used by the dataset pipeline.

Live endpoints are optional configuration. Tests and the synthetic pipeline
use :class:`MockLlmClient`, whose replies come from a deterministic function.
"""
from __future__ import annotations

import json
import logging
import os
import string
import time
import urllib.error
import urllib.request
from typing import Callable, Mapping

log = logging.getLogger(__name__)

GRAMMAR_TEMPLATE = (
    "Your task is to check the given text for grammatical errors. "
    "Are there any grammatical errors in the following text?\n"
    "{alt_text}\n"
    "Please generate the final judgment strictly in the following format:\n"
    "(1) If there are any grammatical errors, then output 'True'; otherwise output 'False'.\n"
    "(2) If your answer is True, then you need to provide the text after correcting the grammar "
    "issue in the following format: \"Corrected text:\"\n"
    "Make as few modifications as possible.\n"
    "If your answer is False, then no further changes are needed.\n"
)

REJECT_TEMPLATE = (
    "Given the best alt-text of an image and context. If you are writing the alt-text for the "
    "given image, what kind of suboptimal alt-text will you write?\n"
    "Context:\n"
    "{context}\n"
    "Best alt-text:\n"
    "{alt_text}\n"
    "Suboptimal alt-text:\n"
)

JUDGE_TEMPLATE = (
    "Context:\n{context}\n"
    "A: {option_a}\n"
    "B: {option_b}\n"
    "Which alt-text is better for this image and context, A or B? Answer A or B.\n"
)

DEFAULT_TEMPLATES = {"grammar": GRAMMAR_TEMPLATE, "reject_gen": REJECT_TEMPLATE, "judge": JUDGE_TEMPLATE}
REQUIRED_FIELDS = {
    "grammar": {"alt_text"},
    "reject_gen": {"context", "alt_text"},
    "judge": {"context", "option_a", "option_b"},
}

ENV_ENDPOINT = "MCMDPO_LLM_ENDPOINT"
ENV_TOKEN = "MCMDPO_LLM_TOKEN"


class ClientError(RuntimeError):
    """Transport failure that survived the retry budget."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


def template_fields(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name}


def validate_templates(templates: Mapping[str, str]) -> dict[str, str]:
    merged = dict(DEFAULT_TEMPLATES)
    merged.update(templates)
    for key, need in REQUIRED_FIELDS.items():
        missing = need - template_fields(merged[key])
        if missing:
            raise ValueError(f"template {key!r} lacks placeholders {sorted(missing)}")
    return merged


class LlmClient:
    """Base class: prompt templates plus a bounded retry loop around :meth:`_send`."""

    def __init__(self, templates: Mapping[str, str] | None = None, retries: int = 2, timeout: float = 30.0,
                 backoff: float = 0.0):
        if retries < 0:
            raise ValueError("retries must be >= 0")
        self.templates = validate_templates(templates or {})
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff

    def _send(self, prompt: str) -> str:
        raise NotImplementedError

    def ask(self, prompt: str) -> str:
        last: Exception | None = None
        for attempt in range(1, self.retries + 2):
            try:
                return self._send(prompt)
            except (OSError, ClientError, ValueError) as exc:
                last = exc
                log.warning("llm request failed (attempt %d/%d): %s", attempt, self.retries + 1, exc)
                if self.backoff:
                    time.sleep(self.backoff * attempt)
        raise ClientError(f"llm request failed after {self.retries + 1} attempts: {last}", self.retries + 1)

    def render(self, kind: str, **fields) -> str:
        return self.templates[kind].format(**fields)


class HttpLlmClient(LlmClient):
    """POSTs ``{"prompt": ...}`` as JSON and reads ``{"text": ...}`` back."""

    def __init__(self, endpoint: str | None = None, token: str | None = None, **kwargs):
        super().__init__(**kwargs)
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
        self.token = token if token is not None else os.environ.get(ENV_TOKEN)
        if not self.endpoint:
            raise ValueError(f"no LLM endpoint configured (set {ENV_ENDPOINT})")

    def _send(self, prompt: str) -> str:
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.URLError as exc:
            raise ClientError(str(exc)) from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise ValueError("reply lacks a string 'text' field")
        return payload["text"]


class MockLlmClient(LlmClient):
    """Replies with ``responder(prompt)``; records every prompt it receives.

    ``fail_first`` makes the first n sends raise a transport error.
    """

    def __init__(self, responder: Callable[[str], str], fail_first: int = 0, **kwargs):
        super().__init__(**kwargs)
        self.responder = responder
        self.fail_first = fail_first
        self.prompts: list[str] = []
        self.sends = 0

    def _send(self, prompt: str) -> str:
        self.sends += 1
        if self.sends <= self.fail_first:
            raise ClientError("mock transport failure")
        self.prompts.append(prompt)
        return self.responder(prompt)
