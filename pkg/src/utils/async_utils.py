"""Utils for fanning out independent work items."""

import asyncio
import contextvars
from typing import Callable, Sequence, TypeVar

from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TextColumn,
    TimeElapsedColumn,
    TimeRemainingColumn,
)


T = TypeVar("T")

# Set while a progress bar is live; worker threads inherit it via to_thread.
_PROGRESS_LIVE: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "progress_live", default=False
)


async def _offload(
    position: int, work: Callable[[], T], slots: asyncio.Semaphore
) -> tuple[int, T]:
    """Run ``work`` on a thread once a worker slot is free."""
    async with slots:
        return position, await asyncio.to_thread(work)


async def _gather_in_order(
    fns: Sequence[Callable[[], T]],
    max_workers: int,
    description: str,
    disable: bool,
) -> list[T]:
    """Offload ``fns`` with a progress bar; results keep the input order."""
    slots = asyncio.Semaphore(max_workers)
    pending = [
        asyncio.create_task(_offload(_position, _fn, slots))
        for _position, _fn in enumerate(fns)
    ]
    results: dict[int, T] = {}

    with Progress(
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeRemainingColumn(),
        TimeElapsedColumn(),
        disable=disable,
        transient=True,
    ) as progress:
        bar = progress.add_task(description, total=len(pending))
        for done in asyncio.as_completed(pending):
            position, value = await done
            results[position] = value
            progress.advance(bar)

    return [results[_position] for _position in range(len(fns))]


def run_in_threads(
    fns: Sequence[Callable[[], T]],
    max_workers: int = 1,
    description: str = "Running tasks",
    disable_progress: bool = False,
) -> list[T]:
    """Run blocking callables on at most ``max_workers`` threads.

    Each callable must be self-contained (own RNG stream, no shared mutable
    state), so results are identical for every ``max_workers``. Calls nested
    inside a running fan-out never open a second progress bar.

    Parameters
    ----------
    fns : Sequence[Callable[[], T]]
        Zero-argument callables, e.g. ``functools.partial`` objects.
    max_workers : int
        Upper bound on callables running at the same time.
    description : str
        Progress bar label.
    disable_progress : bool
        Hide the progress bar.

    Returns
    -------
    list[T]
        Results in the order of ``fns``.
    """
    if not fns:
        return []

    if max_workers <= 1:
        return [_fn() for _fn in fns]

    nested = _PROGRESS_LIVE.get()
    token = _PROGRESS_LIVE.set(True)
    try:
        return asyncio.run(
            _gather_in_order(
                fns, max_workers, description, disable_progress or nested
            )
        )
    finally:
        _PROGRESS_LIVE.reset(token)
