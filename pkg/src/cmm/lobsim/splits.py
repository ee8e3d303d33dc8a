"""Block-interleaved train / kernel / test splits over decision indices."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, DataError

DEFAULT_PATTERN = (("train", 3), ("kernel", 1), ("test", 1))


def interleaved_split(indices, block=500, pattern=DEFAULT_PATTERN, gap=0):
    """Cut ``indices`` into consecutive blocks and deal them out by ``pattern``.

    With the default pattern every run of five blocks goes three to ``train``,
    one to ``kernel`` and one to ``test``, so each split sees every regime of
    a long series. The first ``gap`` indices of a block that follows a block
    of another split are dropped so that input windows never straddle two
    splits.

    Returns a dict ``name -> sorted index array``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if block < 1 or gap < 0 or gap >= block:
        raise ConfigurationError("need block >= 1 and 0 <= gap < block")
    names = [name for name, count in pattern for _ in range(int(count))]
    if not names:
        raise ConfigurationError("split pattern is empty")
    out = {name: [] for name, _ in pattern}
    prev = None
    for b, start in enumerate(range(0, len(indices), block)):
        name = names[b % len(names)]
        chunk = indices[start:start + block]
        if prev is not None and prev != name:
            chunk = chunk[gap:]
        out[name].append(chunk)
        prev = name
    result = {k: (np.concatenate(v) if v else np.zeros(0, dtype=np.int64)) for k, v in out.items()}
    empty = [k for k, v in result.items() if len(v) == 0]
    if empty:
        raise DataError(f"series too short for splits {empty}; need at least {len(names)} blocks of {block}")
    return result


def holdout_split(n, fraction, chunk):
    """Row positions ``(train, validation)``; every ``round(1/fraction)``-th chunk validates."""
    period = max(2, int(round(1.0 / fraction)))
    chunk_id = np.arange(n) // chunk
    held = chunk_id % period == period - 1
    if not held.any() or held.all():
        held = np.zeros(n, dtype=bool)
        held[n - max(1, int(round(n * fraction))):] = True
    return np.flatnonzero(~held), np.flatnonzero(held)
