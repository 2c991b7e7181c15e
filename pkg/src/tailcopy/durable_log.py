"""Per-cluster persistent append-only file store.

Files are append-only byte sequences.  Opening a file for writing bumps its
writer epoch and invalidates every earlier handle, so at most one writer can
append at a time.  The store survives process kills; nothing here is wiped by
the simulator.
"""

from __future__ import annotations

import json
import math
import os
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable


class StaleHandle(Exception):
    pass


class DurableThrottled(Exception):
    def __init__(self, retry_after_ms: int):
        super().__init__(f"read throttled, retry after {retry_after_ms} ms")
        self.retry_after_ms = retry_after_ms


@dataclass
class DurableFile:
    path: str
    data: bytearray = field(default_factory=bytearray)
    writer_epoch: int = 0
    sealed: bool = False
    created_at: int = 0

    @property
    def length(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class WriterHandle:
    path: str
    epoch: int


@dataclass
class DurableConfig:
    open_cost_ms: int = 50
    append_ms: int = 5
    read_ms: int = 10
    poll_ms: int = 1000
    max_reads_per_s: float = math.inf
    max_read_bps: float = math.inf
    retry_after_ms: int = 100


class DurableLog:
    def __init__(self, cluster: str, clock: Callable[[], int], config: DurableConfig | None = None):
        self.cluster = cluster
        self.clock = clock
        self.config = config or DurableConfig()
        self.files: dict[str, DurableFile] = {}
        self._window = -1
        self._reads = 0
        self._bytes = 0
        self.total_reads = 0
        self.total_read_bytes = 0
        self.throttled = 0

    def exists(self, path: str) -> bool:
        return path in self.files

    def _file(self, path: str) -> DurableFile:
        f = self.files.get(path)
        if f is None:
            f = self.files[path] = DurableFile(path, created_at=self.clock())
        return f

    def open_writer(self, path: str) -> WriterHandle:
        f = self._file(path)
        f.writer_epoch += 1
        return WriterHandle(path, f.writer_epoch)

    def is_stale(self, handle: WriterHandle) -> bool:
        return handle.epoch != self.files[handle.path].writer_epoch

    def append(self, handle: WriterHandle, data: bytes) -> int:
        if not data:
            raise ValueError("empty append")
        f = self.files[handle.path]
        if handle.epoch != f.writer_epoch:
            raise StaleHandle(f"{handle.path}: epoch {handle.epoch} < {f.writer_epoch}")
        if f.sealed:
            raise StaleHandle(f"{handle.path} is sealed")
        f.data += data
        return len(f.data)

    def seal(self, handle: WriterHandle) -> None:
        f = self.files[handle.path]
        if handle.epoch != f.writer_epoch:
            raise StaleHandle(handle.path)
        f.sealed = True

    def is_sealed(self, path: str) -> bool:
        f = self.files.get(path)
        return f is not None and f.sealed

    def poll_length(self, path: str) -> int:
        f = self.files.get(path)
        return 0 if f is None else len(f.data)

    def _charge(self, nbytes: int) -> None:
        w = self.clock() // 1000
        if w != self._window:
            self._window, self._reads, self._bytes = w, 0, 0
        cfg = self.config
        if self._reads + 1 > cfg.max_reads_per_s or (self._bytes + nbytes) * 8 > cfg.max_read_bps:
            self.throttled += 1
            raise DurableThrottled(cfg.retry_after_ms)
        self._reads += 1
        self._bytes += nbytes
        self.total_reads += 1
        self.total_read_bytes += nbytes

    def read(self, path: str, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0:
            raise ValueError("offset and length must be non-negative")
        f = self.files.get(path)
        if f is None or offset >= len(f.data):
            return b""
        out = bytes(f.data[offset:offset + length])
        self._charge(len(out))
        return out

    def listdir(self, prefix: str) -> list[str]:
        return sorted(p for p in self.files if p.startswith(prefix))

    # -- snapshot ---------------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> None:
        """Write one file per path plus ``manifest.json`` with lengths."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for path, f in self.files.items():
            name = urllib.parse.quote(path, safe="")
            (d / name).write_bytes(bytes(f.data))
            manifest[path] = {"file": name, "length": len(f.data), "sealed": f.sealed,
                              "writer_epoch": f.writer_epoch, "created_at": f.created_at}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory: str | os.PathLike, cluster: str, clock: Callable[[], int],
             config: DurableConfig | None = None) -> "DurableLog":
        d = Path(directory)
        log = cls(cluster, clock, config)
        manifest = json.loads((d / "manifest.json").read_text())
        for path in sorted(manifest):
            m = manifest[path]
            data = (d / m["file"]).read_bytes()
            if len(data) != m["length"]:
                raise ValueError(f"{path}: manifest length {m['length']} != {len(data)} bytes on disk")
            log.files[path] = DurableFile(path, bytearray(data), m["writer_epoch"], m["sealed"],
                                          m["created_at"])
        return log
