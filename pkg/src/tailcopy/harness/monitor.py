"""Safety and termination checks over what consumers actually read."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable


@dataclass
class Violation:
    kind: str
    consumer: str
    path: str
    offset: int
    t: int
    detail: str = ""

    def to_json(self) -> dict:
        return {"kind": self.kind, "consumer": self.consumer, "path": self.path,
                "offset": self.offset, "t": self.t, "detail": self.detail}


def first_divergence(a: bytes, b: bytes) -> int:
    n = min(len(a), len(b))
    for i in range(n):
        if a[i] != b[i]:
            return i
    return n


class CorrectnessMonitor:
    """Per consumer and file, the bytes read so far must equal the produced prefix.

    ``produced(path)`` returns the bytes produced for ``path`` so far (the
    source cluster's copy).  Every observation is checked immediately.
    """

    def __init__(self, produced: Callable[[str], bytes | bytearray]):
        self.produced = produced
        self.read_len: dict[tuple[str, str], int] = {}
        self.violations: list[Violation] = []
        self.observations = 0

    def observe(self, consumer: str, path: str, offset: int, blob: bytes, t: int) -> bool:
        self.observations += 1
        key = (consumer, path)
        have = self.read_len.get(key, 0)
        if offset != have:
            self.violations.append(Violation("order", consumer, path, have, t,
                                             f"read resumed at {offset}, expected {have}"))
            return False
        src = self.produced(path)
        want = bytes(src[offset:offset + len(blob)])
        if want != blob:
            at = offset + first_divergence(want, blob)
            detail = ("read past produced end" if len(want) < len(blob)
                      else "bytes differ from produced bytes")
            self.violations.append(Violation("bytes", consumer, path, at, t, detail))
            return False
        self.read_len[key] = offset + len(blob)
        return True

    def framing_error(self, consumer: str, msg: str, t: int) -> None:
        self.violations.append(Violation("framing", consumer, "", 0, t, msg))

    def consumed(self, consumer: str, path: str) -> int:
        return self.read_len.get((consumer, path), 0)

    def termination_gaps(self, consumers: list[str], paths: list[str]) -> list[dict]:
        """Files a consumer has not fully read; empty means readBytes = kBytes everywhere."""
        gaps = []
        for c in consumers:
            for p in paths:
                got, want = self.consumed(c, p), len(self.produced(p))
                if got != want:
                    gaps.append({"consumer": c, "path": p, "read": got, "produced": want})
        return gaps

    @property
    def ok(self) -> bool:
        return not self.violations


def prefix_violations(copies: dict[str, bytes | bytearray], source: bytes | bytearray) -> list[str]:
    """Clusters whose copy of a file is not a prefix of the source copy."""
    bad = []
    for cluster in sorted(copies):
        data = copies[cluster]
        if len(data) > len(source) or source[:len(data)] != data:
            bad.append(cluster)
    return bad
