"""unimoe: a small multimodal mixture-of-experts training sandbox.

Single-sequence multimodal transformer pieces (interval attention masks,
three-axis rotary positions, bit-code image pyramids, residual-quantized
audio), elastic sub-model co-training, policy-optimization objectives
with trust-band calibration, and a rollout scheduling simulator, all on
a self-contained float64 autodiff core.
"""

from . import (audio, autodiff, elastic, errors, kernel, masks, model, moe,
               rl, rope, sequence, vision)
from .kernel import GRAD_CASES, grad_check

__version__ = "0.1.0"

__all__ = ["audio", "autodiff", "elastic", "errors", "kernel", "masks",
           "model", "moe", "rl", "rope", "sequence", "vision",
           "GRAD_CASES", "grad_check", "__version__"]
