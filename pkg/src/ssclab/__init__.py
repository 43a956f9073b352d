"""Spatial and semantic consistency regularization for multi-label attribute recognition."""
