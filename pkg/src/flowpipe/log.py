"""Real-time leveled logging used by every module.

Records are flushed per emit so the log can be tailed while a pipeline
runs.  Line format is fixed: ISO-8601 timestamp, level, source, message,
tab-separated.
"""

from __future__ import annotations

import sys
import threading
from dataclasses import dataclass
from datetime import datetime

DEBUG = "DEBUG"
INFO = "INFO"
ERROR = "ERROR"

_LEVEL_RANK = {DEBUG: 10, INFO: 20, ERROR: 40}


@dataclass
class LogRecord:
    timestamp: float
    level: str
    source: str
    message: str

    def format_line(self) -> str:
        iso = datetime.fromtimestamp(self.timestamp).isoformat(timespec="milliseconds")
        return f"{iso}\t{self.level}\t{self.source}\t{self.message}"


class _Sink:
    """Serialized writer with per-record flush and stderr fallback."""

    def __init__(self):
        self._lock = threading.Lock()
        self._stream = sys.stderr
        self._owns_stream = False
        self._min_rank = _LEVEL_RANK[INFO]

    def configure(self, sink, min_level: str) -> None:
        if min_level not in _LEVEL_RANK:
            raise ValueError(f"unknown log level: {min_level!r}")
        with self._lock:
            if self._owns_stream:
                try:
                    self._stream.close()
                except OSError:
                    pass
            if sink == "stderr" or sink is None:
                self._stream = sys.stderr
                self._owns_stream = False
            elif hasattr(sink, "write"):
                self._stream = sink
                self._owns_stream = False
            else:
                self._stream = open(sink, "a", encoding="utf-8")
                self._owns_stream = True
            self._min_rank = _LEVEL_RANK[min_level]

    def emit(self, record: LogRecord) -> None:
        if _LEVEL_RANK.get(record.level, 0) < self._min_rank:
            return
        line = record.format_line() + "\n"
        with self._lock:
            try:
                self._stream.write(line)
                self._stream.flush()
            except (OSError, ValueError):
                # Sink failure must never fault the pipeline; best effort to stderr.
                try:
                    sys.stderr.write(line)
                    sys.stderr.flush()
                except (OSError, ValueError):
                    pass


_sink = _Sink()


def log_setup(sink="stderr", min_level: str = INFO) -> None:
    """Route records at or above min_level to sink ("stderr", a path, or a file object)."""
    _sink.configure(sink, min_level)


def log_emit(level: str, source: str, message: str) -> None:
    import time

    _sink.emit(LogRecord(time.time(), level, source, message))


def debug(source: str, message: str) -> None:
    log_emit(DEBUG, source, message)


def info(source: str, message: str) -> None:
    log_emit(INFO, source, message)


def error(source: str, message: str) -> None:
    log_emit(ERROR, source, message)
