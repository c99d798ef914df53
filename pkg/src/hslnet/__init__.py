"""Hierarchical similarity learning for text-to-product-image retrieval."""
