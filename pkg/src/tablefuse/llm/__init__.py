from .embedding import HashingEmbedder
from .gateway import (
    AuthFailure, FixtureStore, Gateway, GatewayConfig, GatewayError, LLMResponse,
    ReplayMiss, TransportFailure, bundle_fingerprint, complete_json, fingerprint,
)
from .jsonx import JSONExtractionError, Shape, extract_strict_json
from .prompts import PromptBundle, Purpose

__all__ = [
    "AuthFailure", "FixtureStore", "Gateway", "GatewayConfig", "GatewayError", "HashingEmbedder",
    "JSONExtractionError", "LLMResponse", "PromptBundle", "Purpose", "ReplayMiss", "Shape", "TransportFailure",
    "bundle_fingerprint", "complete_json", "extract_strict_json", "fingerprint",
]
