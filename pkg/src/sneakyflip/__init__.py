"""Range-constrained single-bit weight corruption sandbox.

Everything runs at desk scale: bit-exact storage codecs, quantized tensor
bundles, dependency-light toy victims, gradient-guided flip ranking with a
sound early-exit search, and an attack loop with census/transfer reporting.
"""

from .bitcodec import BF16, FP16, FP32, INT8, BitWord, FlipOutcome, FormatSpec

__version__ = "0.1.0"

__all__ = [
    "BF16",
    "FP16",
    "FP32",
    "INT8",
    "BitWord",
    "FlipOutcome",
    "FormatSpec",
    "__version__",
]
