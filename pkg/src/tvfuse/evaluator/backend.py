"""Backend contract: sampling generations and scoring text.

Any object with `generate` and `score` methods satisfying these signatures
can drive data selection and coefficient search. Backends must be safe for
concurrent requests; callers bound in-flight requests themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

from ..errors import EmptyTextError, MalformedResponseError


@dataclass(frozen=True)
class GenerationRequest:
    """One sampling request against a resolved model."""

    model_ref: str
    prompt: str
    num_samples: int = 1
    temperature: float = 0.6
    max_tokens: int = 8192
    seed: int | None = None

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationSample:
    """One generated text plus its extracted, normalized final answer."""

    text: str
    extracted_answer: str | None = None


@dataclass(frozen=True)
class ScoreResult:
    """Token log-probabilities (natural log) and derived perplexity."""

    token_logprobs: tuple[float, ...]
    perplexity: float = field(default=0.0)

    @classmethod
    def from_logprobs(cls, logprobs: Sequence[float]) -> "ScoreResult":
        if len(logprobs) == 0:
            raise MalformedResponseError("score returned an empty token list")
        lp = tuple(float(x) for x in logprobs)
        return cls(token_logprobs=lp, perplexity=math.exp(-sum(lp) / len(lp)))


@runtime_checkable
class EvaluationBackend(Protocol):
    """Contract shared by the HTTP client and the in-process mock."""

    def generate(self, request: GenerationRequest) -> list[GenerationSample]: ...

    def score(self, model_ref: str, text: str) -> ScoreResult: ...


def perplexity_of(backend: EvaluationBackend, model_ref: str, text: str) -> float:
    """exp(-mean token logprob) of `text` under the given model."""
    if not text:
        raise EmptyTextError("cannot score empty text")
    return backend.score(model_ref, text).perplexity
