"""LC-Net: conditional-computation CNNs with block and channel gates."""

from __future__ import annotations

__version__ = "1.0.0"
