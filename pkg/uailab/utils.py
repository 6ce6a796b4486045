import json
import os
import os.path as op
import tempfile
from contextlib import contextmanager
from typing import Iterable, Iterator, List

import numpy as np

from . import logger


@contextmanager
def atomic_write(path: str, mode: str = "w"):
    """Write to a temporary file next to `path`, then rename it into place.
    Nothing is left behind if the body raises."""
    dirname = op.dirname(op.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=dirname)
    try:
        if "b" in mode:
            f = os.fdopen(fd, mode)
        else:
            f = os.fdopen(fd, mode, encoding="utf-8", newline="")
        with f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_jsonl(path: str, records: Iterable[dict]) -> int:
    """Write one compact JSON object per line. Returns the record count."""
    n = 0
    with atomic_write(path) as f:
        for r in records:
            f.write(json.dumps(r, separators=(",", ":")))
            f.write("\n")
            n += 1
    logger.debug('Wrote %d records to "%s"', n, path)
    return n


def iter_jsonl(path: str) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except ValueError as e:
                raise ValueError(f'{path}:{i}: invalid JSON line: {e}')


def read_jsonl(path: str) -> List[dict]:
    return list(iter_jsonl(path))


def seeded_rng(*keys: int) -> np.random.Generator:
    """A generator seeded by a tuple of non-negative integers, so that
    sub-streams (episode, step, ...) never depend on call order."""
    return np.random.default_rng([int(k) for k in keys])


def humantime(seconds: float) -> str:
    """Convert seconds to a short readable duration."""
    for unit, size in (("h", 3600), ("min", 60)):
        if seconds >= size:
            return f"{seconds / size:.2f} {unit}"
    return f"{seconds:.2f} s"


def derive_seed(*keys: int) -> int:
    """A 32-bit seed determined by a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
