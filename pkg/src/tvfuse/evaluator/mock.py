"""Deterministic in-process backend driven by a synthetic landscape.

A landscape maps a coefficient pair to (consistency, perplexity); either
value may instead be a callable taking the prompt, for per-query variation.
The mock fabricates answer multisets whose majority fraction equals the
landscape's consistency quantized to multiples of 1/num_samples, so search
code can be tested against a known optimum without any model inference.

Everything is derived from SHA-256 of (seed, model_ref, prompt); outputs
are reproducible across runs, platforms and thread schedules.
"""

from __future__ import annotations

import hashlib
import math
import re
from typing import Callable

from ..errors import UnknownModelRefError
from .answers import extract_answer
from .backend import GenerationRequest, GenerationSample, ScoreResult

Landscape = Callable[[float, float], tuple[object, object]]

_MERGED_REF_RE = re.compile(r"^merged:([^:]+):([^:]+)$")

DEFAULT_ALIASES: dict[str, tuple[float, float]] = {
    "base": (0.0, 0.0),
    "sft": (1.0, 0.0),
    "rlvr": (0.0, 1.0),
}


def encode_model_ref(coeff_sft: float, coeff_rlvr: float) -> str:
    """Canonical mock-resolvable reference for a merged coefficient pair."""
    return f"merged:{coeff_sft!r}:{coeff_rlvr!r}"


def decode_model_ref(model_ref: str) -> tuple[float, float] | None:
    match = _MERGED_REF_RE.match(model_ref)
    if match is None:
        return None
    try:
        return float(match.group(1)), float(match.group(2))
    except ValueError:
        return None


def quadratic_landscape(
    peak: tuple[float, float] = (0.8, 1.5),
    falloff: float = 8.0,
    ppl_base: float = 2.0,
    ppl_slope: float = 1.0,
) -> Landscape:
    """Consistency 1 - falloff * d^2 (clamped to [0, 1]) around a single peak;
    perplexity grows linearly in d^2, so the peak is also the perplexity floor."""

    def landscape(coeff_sft: float, coeff_rlvr: float) -> tuple[float, float]:
        d2 = (coeff_sft - peak[0]) ** 2 + (coeff_rlvr - peak[1]) ** 2
        return max(0.0, min(1.0, 1.0 - falloff * d2)), ppl_base + ppl_slope * d2

    return landscape


def _digest(*parts: object) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


class MockBackend:
    """EvaluationBackend over a synthetic coefficient landscape."""

    def __init__(
        self,
        landscape: Landscape,
        seed: int = 0,
        aliases: dict[str, tuple[float, float]] | None = None,
        query_jitter: float = 0.0,
    ):
        self.landscape = landscape
        self.seed = seed
        self.aliases = DEFAULT_ALIASES if aliases is None else aliases
        self.query_jitter = query_jitter

    def _resolve(self, model_ref: str) -> tuple[float, float]:
        if model_ref in self.aliases:
            return self.aliases[model_ref]
        coeffs = decode_model_ref(model_ref)
        if coeffs is None:
            raise UnknownModelRefError(f"mock backend cannot resolve {model_ref!r}")
        return coeffs

    def _consistency_at(self, model_ref: str, prompt: str) -> float:
        raw, _ = self.landscape(*self._resolve(model_ref))
        value = raw(prompt) if callable(raw) else float(raw)
        if self.query_jitter > 0.0:
            # Deterministic per-query offset in [-jitter, +jitter].
            unit = int.from_bytes(_digest("jitter", self.seed, prompt)[:8], "big") / 2**64
            value += self.query_jitter * (2.0 * unit - 1.0)
        return max(0.0, min(1.0, value))

    def _perplexity_at(self, model_ref: str, text: str) -> float:
        _, raw = self.landscape(*self._resolve(model_ref))
        return float(raw(text) if callable(raw) else raw)

    def generate(self, request: GenerationRequest) -> list[GenerationSample]:
        k = request.num_samples
        target = self._consistency_at(request.model_ref, request.prompt)
        # Quantize to multiples of 1/k; a majority answer always exists, so
        # the smallest reachable consistency is 1/k.
        agree = min(k, max(1, round(target * k)))
        token = _digest(self.seed, request.prompt).hex()[:8]
        majority = str(100 + int(token, 16) % 900)
        samples: list[GenerationSample] = []
        for i in range(k):
            if i < agree:
                text = f"Working through it, the final answer is \\boxed{{{majority}}}."
            else:
                text = f"An alternative path gives \\boxed{{alt-{i}-{token}}}."
            samples.append(GenerationSample(text=text, extracted_answer=extract_answer(text)))
        return samples

    def score(self, model_ref: str, text: str) -> ScoreResult:
        ppl = self._perplexity_at(model_ref, text)
        logprob = -math.log(ppl)
        return ScoreResult.from_logprobs([logprob] * 8)
