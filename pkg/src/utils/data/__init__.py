from .batching import batch_sizes, chunk_bounds


__all__ = ["batch_sizes", "chunk_bounds"]
