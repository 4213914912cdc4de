"""Streaming event-causal memory for long-video reasoning."""
