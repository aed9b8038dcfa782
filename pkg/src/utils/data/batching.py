"""Utils for splitting work into fixed-size batches."""


def batch_sizes(total: int, batch_size: int) -> list[int]:
    """Split ``total`` items into batch sizes of at most ``batch_size``.

    The split depends only on ``total`` and ``batch_size``, never on the number
    of workers, so each batch can own a reproducible RNG stream.

    Params:
        total: number of items (e.g. molecules) to split.
        batch_size: maximum items per batch.

    Return:
        List of batch sizes summing to ``total``.

    >>> batch_sizes(5, 2)
    [2, 2, 1]
    """
    if total < 0 or batch_size < 1:
        raise ValueError(f"Invalid batch split: total={total}, size={batch_size}")

    full, remainder = divmod(total, batch_size)
    return [batch_size] * full + ([remainder] if remainder else [])


def chunk_bounds(length: int, chunk: int) -> list[tuple[int, int]]:
    """Return ``(start, stop)`` pairs covering ``range(length)`` in chunks.

    >>> chunk_bounds(5, 2)
    [(0, 2), (2, 4), (4, 5)]
    """
    starts = range(0, length, chunk)
    return [(_start, min(_start + chunk, length)) for _start in starts]
