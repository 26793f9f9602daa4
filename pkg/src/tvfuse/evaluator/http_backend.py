"""HTTP client for a remote generation/scoring service.

Wire protocol (JSON over HTTP, UTF-8):

    POST /generate  {"model": str, "prompt": str, "n": int,
                     "temperature": num, "max_tokens": int, "seed": int?}
                    -> {"samples": [{"text": str}, ...]}
    POST /score     {"model": str, "text": str}
                    -> {"token_logprobs": [num, ...]}

Transient failures (5xx, connection errors, timeouts) are retried with
exponential backoff up to the configured attempt count; 4xx responses fail
immediately. Requests are idempotent, so retries never duplicate effects.
Perplexity is always recomputed client-side from the returned logprobs.
"""

from __future__ import annotations

import os
import time

import requests

from ..errors import (
    BackendTimeoutError,
    EmptyTextError,
    HttpStatusError,
    MalformedResponseError,
)
from .answers import extract_answer
from .backend import GenerationRequest, GenerationSample, ScoreResult

TOKEN_ENV_VAR = "TVFUSE_BACKEND_TOKEN"


class HttpBackend:
    def __init__(
        self,
        base_url: str,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        backoff_factor: float = 2.0,
        timeout: float = 60.0,
        auth_token: str | None = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.timeout = timeout
        self.auth_token = auth_token if auth_token is not None else os.environ.get(TOKEN_ENV_VAR)

    def _post(self, route: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt > 0:
                time.sleep(self.backoff_base * self.backoff_factor ** (attempt - 1))
            try:
                response = requests.post(
                    f"{self.base_url}{route}", json=payload, headers=headers, timeout=self.timeout
                )
            except requests.Timeout as exc:
                last_error = BackendTimeoutError(f"{route}: timed out after {self.timeout}s")
                last_error.__cause__ = exc
                continue
            except requests.RequestException as exc:
                last_error = HttpStatusError(0, f"{route}: connection failed: {exc}")
                last_error.__cause__ = exc
                continue
            if 200 <= response.status_code < 300:
                try:
                    body = response.json()
                except ValueError as exc:
                    raise MalformedResponseError(f"{route}: response is not JSON") from exc
                if not isinstance(body, dict):
                    raise MalformedResponseError(f"{route}: response is not a JSON object")
                return body
            if 500 <= response.status_code < 600:
                last_error = HttpStatusError(response.status_code, f"{route}: server error")
                continue
            raise HttpStatusError(response.status_code, f"{route}: {response.text[:200]}")
        assert last_error is not None
        raise last_error

    def generate(self, request: GenerationRequest) -> list[GenerationSample]:
        payload = {
            "model": request.model_ref,
            "prompt": request.prompt,
            "n": request.num_samples,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        body = self._post("/generate", payload)
        samples = body.get("samples")
        if not isinstance(samples, list):
            raise MalformedResponseError("/generate: missing 'samples' list")
        out: list[GenerationSample] = []
        for item in samples:
            if not isinstance(item, dict) or not isinstance(item.get("text"), str):
                raise MalformedResponseError("/generate: sample without 'text'")
            out.append(GenerationSample(text=item["text"], extracted_answer=extract_answer(item["text"])))
        return out

    def score(self, model_ref: str, text: str) -> ScoreResult:
        if not text:
            raise EmptyTextError("cannot score empty text")
        body = self._post("/score", {"model": model_ref, "text": text})
        logprobs = body.get("token_logprobs")
        if not isinstance(logprobs, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in logprobs
        ):
            raise MalformedResponseError("/score: missing numeric 'token_logprobs'")
        return ScoreResult.from_logprobs(logprobs)
