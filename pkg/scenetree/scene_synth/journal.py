import json
import os
import time
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel


class PlacementRecord(BaseModel):
    kind: str = "placement"
    level: int
    placement: int
    wave: int
    timesteps: Tuple[int, int]
    wall_time: float
    skipped: bool = False


class LevelRecord(BaseModel):
    kind: str = "level"
    level: int
    mode: str
    patches: int
    timesteps: Tuple[int, int]
    denoiser_calls: int
    wall_time: float


class SynthesisJournal:
    """Newline-delimited progress records; kept in memory and appended to `path` when given"""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: List[Union[PlacementRecord, LevelRecord]] = []
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def record(self, entry: Union[PlacementRecord, LevelRecord]):
        self.records.append(entry)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(entry.model_dump()) + "\n")


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        self.elapsed = 0.0
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        return False
