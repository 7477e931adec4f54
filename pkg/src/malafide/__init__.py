"""Attack-specific convolutional filters against toy face deepfake detectors.

Submodules: ``numcore`` (convolution, Adam), ``data`` (synthetic corpus),
``detector``, ``attack``, ``evaluation`` (EER matrix), ``explain`` (Grad-CAM)
and ``cli``.
"""

__version__ = "0.1.0"
