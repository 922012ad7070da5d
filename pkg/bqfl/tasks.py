# bqfl/tasks.py
import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

from .config import MAX_PARALLEL

# Initialize logger for this module
logger = logging.getLogger(__name__)

T = TypeVar("T")

_executor: Optional[ThreadPoolExecutor] = None

# One federated run per process; a second trigger while a run holds the lock is refused.
run_lock = asyncio.Lock()


def get_executor() -> ThreadPoolExecutor:
    global _executor
    if _executor is None:
        workers = max(1, MAX_PARALLEL)
        _executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="bqfl")
        logger.info(f"TASK: Started thread pool with {workers} worker thread(s).")
    return _executor


def shutdown_executor() -> None:
    global _executor
    if _executor is not None:
        _executor.shutdown(wait=True)
        _executor = None
        logger.info("TASK: Thread pool shut down.")


async def run_blocking(func: Callable[[], T]) -> T:
    """Runs a blocking call on the shared thread pool without stalling the event loop."""
    loop = asyncio.get_running_loop()
    return await loop.run_in_executor(get_executor(), func)


async def gather_blocking(calls: Sequence[Callable[[], T]]) -> List[T]:
    """
    Runs independent blocking calls concurrently. Results come back in submission
    order, so callers that submit by ascending device id consume them in that order.
    """
    return list(await asyncio.gather(*(run_blocking(call) for call in calls)))


async def run_exclusive(coro_factory: Callable[[], "asyncio.Future"]):
    if run_lock.locked():
        logger.info("TASK: A federated run already holds the run lock. Skipping this trigger.")
        return None
    async with run_lock:
        logger.info("TASK: Acquired run lock.")
        try:
            return await coro_factory()
        finally:
            shutdown_executor()
            logger.info("TASK: Released run lock.")
