"""Multiply-accumulate accounting used by ``flops_estimate``."""

from __future__ import annotations

import contextlib
import threading

_state = threading.local()


def add_macs(n: int) -> None:
    stack = getattr(_state, "stack", None)
    if stack:
        for counter in stack:
            counter[0] += int(n)


@contextlib.contextmanager
def count_macs():
    """Collect MACs of conv/matmul ops run inside the block.

    Yields a one-element list whose entry is the running total.
    """
    counter = [0]
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)
