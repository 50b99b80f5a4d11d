"""Instruction-conditioned visual token pruning on a toy VL decoder.

The package implements, end to end and from scratch: a causal decoder
with a KV cache and a visual front end, a learnable glimpse token whose
layer-K attention summarizes instruction-relevant image regions, a small
conditional predictor that turns that attention into a per-token
importance map, a one-shot cache pruning step, a training loop for the
glimpse and predictor parameters on synthetic grounded QA, and an exact
matmul-level cost model.
"""

__version__ = "0.1.0"
