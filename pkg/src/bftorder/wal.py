"""Write-ahead log keeping only the latest protocol-critical state.

A blockchain host already keeps the full decision history in its ledger, so
the log never needs compaction: each append overwrites the older of two slot
files and then flips a pointer file. Every record is checksummed; a torn
write at any boundary leaves the previous record intact.
"""

from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

from .codec import DecodeError, Reader, Writer
from .messages import PreparedCertificate
from .types import SequenceNumber, ViewNumber

logger = logging.getLogger(__name__)

PHASE_PREPARE = 1
PHASE_COMMIT = 2
PHASE_VIEW = 3

_SLOT_FILES = ("slot-a", "slot-b")
_POINTER_FILE = "pointer"


@dataclass(frozen=True)
class WalRecord:
    view: ViewNumber
    sequence: SequenceNumber
    phase: int
    digest: bytes | None = None
    certificate: PreparedCertificate | None = None
    counter: int = 0

    def encode(self) -> bytes:
        w = Writer()
        w.u64(self.counter).u64(self.view).u64(self.sequence).u8(self.phase)
        w.optional(self.digest, lambda wr, d: wr.bytes_(d))
        w.optional(self.certificate, lambda wr, c: c.write_to(wr))
        return w.done()

    @classmethod
    def decode(cls, buf: bytes) -> "WalRecord":
        r = Reader(buf)
        counter = r.u64()
        rec = cls(
            view=r.u64(),
            sequence=r.u64(),
            phase=r.u8(),
            digest=r.optional(lambda rd: rd.bytes_()),
            certificate=r.optional(PreparedCertificate.read_from),
            counter=counter,
        )
        r.expect_end()
        return rec


def _frame(payload: bytes) -> bytes:
    return len(payload).to_bytes(4, "big") + payload + zlib.crc32(payload).to_bytes(4, "big")


def _unframe(buf: bytes) -> bytes | None:
    if len(buf) < 8:
        return None
    length = int.from_bytes(buf[:4], "big")
    if len(buf) < 4 + length + 4:
        return None
    payload = buf[4:4 + length]
    crc = int.from_bytes(buf[4 + length:8 + length], "big")
    if zlib.crc32(payload) != crc:
        return None
    return payload


class WalCrash(Exception):
    """Raised by fault-injecting subclasses to simulate a crash mid-write."""


class WriteAheadLog:
    """Interface; see FileWal and MemoryWal."""

    def append(self, record: WalRecord) -> None:
        raise NotImplementedError

    def read_latest(self) -> WalRecord | None:
        raise NotImplementedError


class FileWal(WriteAheadLog):
    def __init__(self, directory: str | os.PathLike, *, fsync: bool = True) -> None:
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        latest = self.read_latest()
        self._counter = latest.counter if latest else 0
        self._current_slot = self._locate_slot(latest)

    def _locate_slot(self, latest: WalRecord | None) -> int:
        if latest is None:
            return 1  # first append goes to slot 0
        for i, name in enumerate(_SLOT_FILES):
            rec = self._read_slot(self.dir / name)
            if rec is not None and rec.counter == latest.counter:
                return i
        return 1

    def _write_file(self, path: Path, data: bytes) -> None:
        # no rename dance: a torn slot write is detected by its checksum and
        # the pointer is only flipped after the slot is durable
        with open(path, "wb") as fh:
            fh.write(data)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def append(self, record: WalRecord) -> None:
        self._counter += 1
        record = WalRecord(
            record.view, record.sequence, record.phase,
            record.digest, record.certificate, counter=self._counter,
        )
        target = 1 - self._current_slot
        self._write_file(self.dir / _SLOT_FILES[target], _frame(record.encode()))
        self._write_file(self.dir / _POINTER_FILE, _frame(bytes([target])))
        self._current_slot = target

    def _read_slot(self, path: Path) -> WalRecord | None:
        try:
            payload = _unframe(path.read_bytes())
        except FileNotFoundError:
            return None
        if payload is None:
            return None
        try:
            return WalRecord.decode(payload)
        except DecodeError:
            return None

    def read_latest(self) -> WalRecord | None:
        records = [r for r in (self._read_slot(self.dir / n) for n in _SLOT_FILES) if r]
        if not records:
            return None
        pointed = _unframe((self.dir / _POINTER_FILE).read_bytes()) \
            if (self.dir / _POINTER_FILE).exists() else None
        if pointed is not None and len(pointed) == 1 and pointed[0] < 2:
            rec = self._read_slot(self.dir / _SLOT_FILES[pointed[0]])
            if rec is not None and rec.counter == max(r.counter for r in records):
                return rec
        # pointer missing, torn or stale: fall back to the newest valid slot
        logger.warning("wal pointer unusable in %s, recovering from slot scan", self.dir)
        return max(records, key=lambda r: r.counter)


class MemoryWal(WriteAheadLog):
    """In-memory stand-in for simulations that do not exercise crashes."""

    def __init__(self) -> None:
        self._latest: WalRecord | None = None
        self._counter = 0

    def append(self, record: WalRecord) -> None:
        self._counter += 1
        self._latest = WalRecord(
            record.view, record.sequence, record.phase,
            record.digest, record.certificate, counter=self._counter,
        )

    def read_latest(self) -> WalRecord | None:
        return self._latest


class CrashingWal(FileWal):
    """FileWal that tears the k-th low-level file write, for replay tests."""

    def __init__(self, directory, *, crash_at_write: int, fsync: bool = False) -> None:
        self.crash_at_write = crash_at_write
        self._writes = 0
        super().__init__(directory, fsync=fsync)

    def _write_file(self, path: Path, data: bytes) -> None:
        self._writes += 1
        if self._writes == self.crash_at_write:
            with open(path, "wb") as fh:  # torn write: half the bytes land
                fh.write(data[: max(1, len(data) // 2)])
                fh.flush()
            raise WalCrash(f"simulated crash at write {self._writes} ({path.name})")
        super()._write_file(path, data)
