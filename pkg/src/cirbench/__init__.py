"""Composed image retrieval benchmark toolkit.

Subset mining over feature vectors, directed pair construction, the
annotation-file schema, trainable image-text composers with exact manual
gradients, retrieval metrics, and a hidden-label scoring server.
"""

__version__ = "0.1.0"
