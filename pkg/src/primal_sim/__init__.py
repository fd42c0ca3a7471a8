"""Simulator for a processing-in-memory LLM inference accelerator with LoRA adapters."""

__version__ = "0.1.0"
