"""Jointly learned image compression and hash-based indexing.

One encoder produces both an entropy-coded representation for storage and a
compact binary code for decode-free content-based retrieval.
"""

__version__ = "0.1.0"
