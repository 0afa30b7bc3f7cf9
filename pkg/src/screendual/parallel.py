"""Thread cap shared by the parallel loops."""

import os


def thread_count(default: int = 1) -> int:
    """Worker count from SCREENDUAL_THREADS (minimum 1)."""
    raw = os.environ.get("SCREENDUAL_THREADS")
    if raw is None:
        return max(1, min(default, os.cpu_count() or 1))
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"SCREENDUAL_THREADS must be an integer, got {raw!r}") from None
