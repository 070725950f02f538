"""Mixed-precision quantized CNN encoder toolkit.

Quinary/ternary/binary weight quantization with quantile-calibrated steps,
2-bit half-wave MSB activations, bitshift normalization, straight-through
training, a bit-exact integer inference path, analytic hardware cost tables,
and a patch-based image codec.
"""

__version__ = "1.0.0"
