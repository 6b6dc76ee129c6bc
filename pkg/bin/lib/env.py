import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path


class Scale(Enum):
    FULL = 'full'
    TINY = 'tiny'


@dataclass(frozen=True)
class Config:
    seed: int
    scale: Scale
    out: Path
    threads: int

    @property
    def workers(self) -> int:
        return resolve_threads(self.threads)


def resolve_threads(threads: int) -> int:
    """0 means one worker per CPU."""
    if threads < 0:
        raise ValueError(f"Thread count must be >= 0, got {threads}")
    return threads or (os.cpu_count() or 1)
