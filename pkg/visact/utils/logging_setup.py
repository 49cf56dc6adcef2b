"""
Logging configuration and the JSONL training log.
"""

import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Union

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Union[str, int] = "INFO") -> None:
    """Single stream handler on stderr for the whole process."""
    logging.basicConfig(
        level=level if isinstance(level, int) else level.upper(),
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


class JsonlLog:
    """
    Append-only training log, one JSON object per line.

    Usable as a context manager; with path=None it only keeps records in memory.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[dict] = []
        self._fh = None

    def __enter__(self) -> "JsonlLog":
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")
        return self

    def __exit__(self, *exc) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def write(self, **record) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()


def read_jsonl(path: Union[str, Path]) -> List[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]
