import asyncio
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import wraps
from typing import TypeVar

T = TypeVar("T")


def top_level_sync(func):
    """
    Decorator to automatically run async functions in a new event loop.

    This effectively makes them synchronous, but means they can't be called
    from within other async functions (hence "top level" in the name).
    """

    @wraps(func)
    def func2(*args, **kwargs):
        return asyncio.run(func(*args, **kwargs))

    return func2


async def gather_in_threads(
    jobs: Sequence[Callable[[], T]], max_workers: int = 1
) -> list[T]:
    """
    Run blocking jobs on a thread pool, results in job order.

    With ``max_workers == 1`` the jobs run one after the other.
    """
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=max(max_workers, 1)) as pool:
        return list(
            await asyncio.gather(
                *(loop.run_in_executor(pool, job) for job in jobs)
            )
        )
