"""picoseg: point-promptable segmentation U-Net in pure numpy.

Depthwise-separable encoder/decoder with implicit prompt encoding
(the prompt point sits at the crop center), hybrid distillation
training, static INT8 post-training quantization with integer
inference, and compute/size accounting.
"""

from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
