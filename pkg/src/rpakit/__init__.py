"""Reference engine, pipeline simulator, and performance model for ragged
paged attention with fused KV-cache updates."""

__version__ = "0.1.0"
