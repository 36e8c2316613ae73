"""Multispectral (visual + thermal) pedestrian detection with illumination- and
temperature-aware late fusion, built on a small numpy autodiff engine.

Subpackages by concern:

- ``tensor``, ``layers``: reverse-mode autodiff and network layers
- ``backbone``, ``fusion``: dual-stream feature pyramid, fusion weight network, detector
- ``anchors``, ``loss``, ``trainer``: default boxes, focal loss, training loop
- ``quant``: int8 post-training quantization
- ``evaluation``: NMS, matching, miss rate / FPPI curves, log-average MR, AP
- ``synthdata``: synthetic paired scenes with controllable illumination and temperature
- ``estimator``: scikit-learn style ``ITMNDetector`` / ``QuantizedDetector``
- ``cli``: the ``itmn`` command
"""

from .estimator import ITMNDetector, QuantizedDetector

__version__ = "0.1.0"
__all__ = ["ITMNDetector", "QuantizedDetector", "__version__"]
