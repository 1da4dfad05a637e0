"""Deterministic worker pool for independent full-order solves."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigurationError


class WorkerPool:
    """Fan independent tasks out to workers; collect results in submission order.

    With ``workers=1`` tasks run inline.  Results never depend on the worker
    count: tasks are independent, and the ordered collection makes the merge
    order fixed.  Use as a context manager to release threads promptly.
    """

    def __init__(self, workers: int = 1):
        if int(workers) != workers or workers < 1:
            raise ConfigurationError(f"workers must be a positive integer, got {workers}")
        self.workers = int(workers)
        self._executor = (
            ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        )

    def map(self, fn, items) -> list:
        if self._executor is None:
            return [fn(item) for item in items]
        return list(self._executor.map(fn, items))

    def shutdown(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.shutdown()
        return False
