"""Desk-scale laboratory for temperature-aware speculative decoding.

Small trainable language models (logit tables and a tiny MLP), exact
draft-verify decoding, teacher-student distillation at configurable
sampling temperatures, and a benchmark harness that sweeps distillation
temperature against decoding temperature.
"""

__version__ = "0.1.0"
