"""Shared-input multi-prompt inference for toy encoder-decoder transformers.

Two inference configurations over the same workload:

* ``pie`` (prompt-in-encoder): each prompt is concatenated to the shared
  input and encoded separately, one encoder pass per prompt.
* ``pid`` (prompt-in-decoder): the shared input is encoded once; prompts
  are prefilled in the decoder and all streams decode in lockstep against
  one broadcast cross-attention key/value cache per instance.

Alongside the engines the package provides instrumented float32 kernels,
an analytic cost model (memory access, operation counts, operational
intensity, roofline estimates), a toy training loop, and a benchmark CLI.
"""

__version__ = "0.1.0"
