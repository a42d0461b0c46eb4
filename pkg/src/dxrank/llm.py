"""Completion interface: a remote chat-completions client with retries,
backoff, and a concurrency bound, plus two deterministic offline mocks
(an echo that preserves candidate order, and an evidence-aware ranker used
for desk-scale end-to-end runs).
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

LLM_BACKENDS = ("remote", "mock_echo", "mock_evidence")

# Retry schedule: base delay doubles per attempt.
BACKOFF_BASE_S = 0.25


class LlmError(RuntimeError):
    pass


class LlmTransportError(LlmError):
    """Unreachable endpoint, exhausted retries, or a non-retryable status."""


class LlmProtocolError(LlmError):
    """Response arrived but is not a usable chat completion."""


@dataclass(frozen=True)
class LlmConfig:
    backend: str = "mock_echo"
    endpoint_url: str = ""
    model_name: str = ""
    temperature: float = 0.0
    max_tokens: int = 512
    timeout_ms: int = 30000
    max_retries: int = 2
    max_in_flight: int = 4
    seed: int = 0
    api_key_env: str = ""

    def __post_init__(self):
        if self.backend not in LLM_BACKENDS:
            raise ValueError(f"unknown llm backend {self.backend!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        if self.max_retries < 0 or self.timeout_ms <= 0 or self.max_tokens < 1:
            raise ValueError("bad retry/timeout/token settings")
        if self.backend == "remote" and not self.endpoint_url:
            raise ValueError("remote backend requires endpoint_url")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    latency_ms: int
    attempt_count: int
    backend_tag: str


Transport = Callable[[str, bytes, dict], tuple[int, bytes]]


def request_body(prompt: str, cfg: LlmConfig, temperature: float | None = None) -> bytes:
    """Canonical chat-completion body; byte-stable for identical inputs."""
    payload = {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature if temperature is None else temperature,
        "max_tokens": cfg.max_tokens,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _default_transport_factory(timeout_ms: int) -> Transport:
    import requests

    def post(url: str, body: bytes, headers: dict) -> tuple[int, bytes]:
        resp = requests.post(
            url, data=body, headers=headers, timeout=timeout_ms / 1000.0
        )
        return resp.status_code, resp.content

    return post


class LlmClient:
    """Thread-safe completion client enforcing cfg.max_in_flight.

    The transport is injectable for tests; it must return (status, body)
    or raise TimeoutError/ConnectionError for retryable failures.
    """

    def __init__(
        self,
        cfg: LlmConfig,
        transport: Transport | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self._transport = transport or _default_transport_factory(cfg.timeout_ms)
        self._sleep = sleeper
        self._gate = threading.BoundedSemaphore(cfg.max_in_flight)

    def complete(self, prompt: str, temperature: float | None = None,
                 sample_tag: str = "") -> CompletionResult:
        """One completion. `sample_tag` diversifies mock sampling (used for
        self-consistency draws) without affecting the remote path."""
        cfg = self.cfg
        if cfg.backend == "mock_echo":
            return CompletionResult(
                text=mock_echo(prompt), latency_ms=0, attempt_count=1,
                backend_tag="mock_echo",
            )
        if cfg.backend == "mock_evidence":
            seed = derive_seed(cfg.seed, prompt, sample_tag)
            return CompletionResult(
                text=mock_evidence_aware(prompt, seed), latency_ms=0,
                attempt_count=1, backend_tag="mock_evidence",
            )
        return self._complete_remote(prompt, temperature)

    def _complete_remote(self, prompt: str,
                         temperature: float | None) -> CompletionResult:
        cfg = self.cfg
        url = cfg.endpoint_url.rstrip("/") + "/chat/completions"
        body = request_body(prompt, cfg, temperature)
        headers = {"Content-Type": "application/json"}
        if cfg.api_key_env:
            token = os.environ.get(cfg.api_key_env)
            if not token:
                raise LlmTransportError(
                    f"api_key_env {cfg.api_key_env!r} is not set in the environment"
                )
            headers["Authorization"] = f"Bearer {token}"

        start = time.monotonic()
        last_failure = ""
        for attempt in range(1, cfg.max_retries + 2):
            try:
                with self._gate:
                    status, raw = self._transport(url, body, headers)
            except (TimeoutError, ConnectionError, OSError) as exc:
                last_failure = f"{type(exc).__name__}: {exc}"
                status = None
            else:
                if status == 200:
                    text = _extract_choice(raw)
                    latency = int((time.monotonic() - start) * 1000)
                    return CompletionResult(
                        text=text, latency_ms=latency, attempt_count=attempt,
                        backend_tag="remote",
                    )
                if status < 500:
                    raise LlmTransportError(f"endpoint returned status {status}")
                last_failure = f"status {status}"
            if attempt <= cfg.max_retries:
                self._sleep(BACKOFF_BASE_S * 2 ** (attempt - 1))
        raise LlmTransportError(
            f"gave up after {cfg.max_retries + 1} attempts ({last_failure})"
        )


def _extract_choice(raw: bytes) -> str:
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LlmProtocolError(f"non-JSON response: {exc}") from None
    try:
        return data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise LlmProtocolError("response has no usable choice") from None


def complete(prompt: str, cfg: LlmConfig) -> CompletionResult:
    """One-shot completion with a fresh client."""
    return LlmClient(cfg).complete(prompt)


# ---------------------------------------------------------------------------
# Mocks
# ---------------------------------------------------------------------------


def derive_seed(seed: int, prompt: str, sample_tag: str = "") -> int:
    """Per-prompt mock seed, independent of call order."""
    digest = hashlib.sha256(f"{seed}|{sample_tag}|{prompt}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _candidate_names(prompt: str) -> list[str]:
    lines = prompt.splitlines()
    for i, line in enumerate(lines):
        if line.startswith("Candidate CCS Codes"):
            for body in lines[i + 1:]:
                if body.strip():
                    return re.findall(r'"([^"]+)"', body)
                break
            break
    raise LlmProtocolError("prompt has no candidate section")


def _supported_names(prompt: str) -> set[str]:
    pairs = re.findall(r'"([^"]*)"\s*⇒\s*"([^"]*)"', prompt)
    return {rhs for _, rhs in pairs}


def mock_echo(prompt: str) -> str:
    """Return the candidate names unchanged in prompt order."""
    return "Answer: " + ", ".join(_candidate_names(prompt))


def mock_evidence_aware(
    prompt: str,
    seed: int,
    swap_prob: float = 0.1,
    shuffle_unprioritized: bool = True,
) -> str:
    """Deterministic stand-in for the re-ranker.

    Candidates named on the right side of a relational line are promoted
    ahead of the rest, keeping their prompt order. The remaining candidates
    keep prompt order perturbed by seeded noise: one adjacent-swap pass at
    swap_prob normally, or a full shuffle when the history section is not
    prioritized (an unorganized history gives the mock much less to anchor
    on, mirroring the re-ranking quality drop the flags exist to measure).
    """
    names = _candidate_names(prompt)
    supported_set = _supported_names(prompt)
    prioritized = any(
        line.startswith("Patient Historical Diagnoses (Prioritized)")
        for line in prompt.splitlines()
    )
    supported = [n for n in names if n in supported_set]
    rest = [n for n in names if n not in supported_set]

    rng = np.random.default_rng(seed)
    if not prioritized and shuffle_unprioritized:
        rest = [rest[i] for i in rng.permutation(len(rest))]
    else:
        for i in range(len(rest) - 1):
            if rng.random() < swap_prob:
                rest[i], rest[i + 1] = rest[i + 1], rest[i]
    return "Answer: " + ", ".join(supported + rest)
