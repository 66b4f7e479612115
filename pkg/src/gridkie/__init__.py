"""gridkie: key information extraction from OCR'd documents.

Tokens are mapped into a spatial grid preserving their relative layout,
classified per cell by a fully convolutional network with atrous
convolutions, and read back out as per-class field extractions.
"""

__version__ = "0.1.0"
