"""Feature archives, transcripts, alignments and unit inventories.

Feature archive layout (all integers little-endian)::

    header   "SFEA" | u32 version | u32 feature_dim | f64 frame_rate
    records  u32 id_len | utf-8 id | u32 num_frames | f32[num_frames * feature_dim]
    index    u32 id_len | utf-8 id | u64 record_offset | u32 num_frames   (per record)
    trailer  u64 index_offset | u32 num_records | "SFEI"

Records are contiguous and in index order, so a damaged trailer can still
be diagnosed by scanning records from the front.
"""

import os
import struct

import numpy as np

from . import FormatError, UsageError
from .metrics import validate_segments

ARCHIVE_MAGIC = b"SFEA"
INDEX_MAGIC = b"SFEI"
ARCHIVE_VERSION = 1
HEADER = struct.Struct("<4sIId")
TRAILER = struct.Struct("<QI4s")


def _encode_id(utt_id):
    if not isinstance(utt_id, str) or not utt_id:
        raise UsageError(f"invalid utterance id {utt_id!r}")
    return utt_id.encode("utf-8")


def write_feature_archive(path, utterances, feature_dim=None, frame_rate=100.0):
    """Write ``(utt_id, frames)`` pairs (or a mapping) to ``path``."""
    if hasattr(utterances, "items"):
        utterances = utterances.items()
    if not (np.isfinite(frame_rate) and frame_rate > 0):
        raise UsageError("frame rate must be positive")
    items = []
    seen = set()
    for utt_id, frames in utterances:
        frames = np.ascontiguousarray(frames, dtype="<f4")
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise UsageError(f"{utt_id!r}: expected a non-empty (frames, dim) matrix")
        if feature_dim is None:
            feature_dim = frames.shape[1]
        if frames.shape[1] != feature_dim:
            raise UsageError(f"{utt_id!r}: dimension {frames.shape[1]} != {feature_dim}")
        if utt_id in seen:
            raise UsageError(f"duplicate utterance id {utt_id!r}")
        seen.add(utt_id)
        items.append((utt_id, frames))
    if feature_dim is None or feature_dim < 1:
        raise UsageError("feature_dim is required for an empty archive")
    index = []
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, feature_dim, float(frame_rate)))
        for utt_id, frames in items:
            raw = _encode_id(utt_id)
            index.append((raw, fh.tell(), frames.shape[0]))
            fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", frames.shape[0]))
            fh.write(frames.tobytes())
        index_offset = fh.tell()
        for raw, offset, n in index:
            fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<QI", offset, n))
        fh.write(TRAILER.pack(index_offset, len(index), INDEX_MAGIC))


class FeatureArchive:
    """Read-only view of an archive; payloads are read on demand."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._entries = {}
        self._order = []
        with open(self.path, "rb") as fh:
            size = fh.seek(0, os.SEEK_END)
            fh.seek(0)
            head = fh.read(HEADER.size)
            if len(head) < HEADER.size:
                raise self._error(len(head), "truncated header")
            magic, version, dim, rate = HEADER.unpack(head)
            if magic != ARCHIVE_MAGIC:
                raise self._error(0, "bad magic")
            if version != ARCHIVE_VERSION:
                raise self._error(4, f"unsupported version {version}")
            if dim < 1:
                raise self._error(8, "feature dimension must be >= 1")
            if not (np.isfinite(rate) and rate > 0):
                raise self._error(12, "frame rate must be positive")
            self.feature_dim, self.frame_rate = dim, rate
            fh.seek(max(size - TRAILER.size, 0))
            tail = fh.read(TRAILER.size)
            trailer = TRAILER.unpack(tail) if len(tail) == TRAILER.size else None
            if trailer is None or trailer[2] != INDEX_MAGIC or not HEADER.size <= trailer[0] <= size - TRAILER.size:
                self._diagnose(fh, size)
            self._read_index(fh, size, *trailer[:2])

    def _error(self, offset, message):
        return FormatError(f"{self.path}: {message} at byte {offset}")

    def _record_header(self, fh, offset, size):
        fh.seek(offset)
        raw = fh.read(4)
        if len(raw) < 4:
            return None
        (n_id,) = struct.unpack("<I", raw)
        raw_id = fh.read(n_id)
        raw_n = fh.read(4)
        if len(raw_id) < n_id or len(raw_n) < 4:
            return None
        try:
            utt_id = raw_id.decode("utf-8")
        except UnicodeDecodeError:
            raise self._error(offset + 4, "invalid utterance id") from None
        (n,) = struct.unpack("<I", raw_n)
        return utt_id, n, offset + 8 + n_id

    def _diagnose(self, fh, size):
        """Walk records from the front to report where the file is cut."""
        offset = HEADER.size
        frame_bytes = 4 * self.feature_dim
        while offset < size:
            rec = self._record_header(fh, offset, size)
            if rec is None:
                raise self._error(offset, "truncated record header")
            utt_id, n, payload = rec
            end = payload + n * frame_bytes
            if end > size:
                raise self._error(payload, f"payload of utterance {utt_id!r} is truncated")
            offset = end
        raise self._error(size, "missing index trailer")

    def _read_index(self, fh, size, index_offset, count):
        fh.seek(index_offset)
        blob = fh.read(size - TRAILER.size - index_offset)
        pos = 0
        expected_offset = HEADER.size
        frame_bytes = 4 * self.feature_dim
        for _ in range(count):
            if pos + 4 > len(blob):
                raise self._error(index_offset + pos, "truncated index")
            (n_id,) = struct.unpack_from("<I", blob, pos)
            if pos + 4 + n_id + 12 > len(blob):
                raise self._error(index_offset + pos, "truncated index entry")
            try:
                utt_id = blob[pos + 4 : pos + 4 + n_id].decode("utf-8")
            except UnicodeDecodeError:
                raise self._error(index_offset + pos + 4, "invalid utterance id") from None
            offset, n = struct.unpack_from("<QI", blob, pos + 4 + n_id)
            where = index_offset + pos
            pos += 16 + n_id
            if not utt_id or utt_id in self._entries:
                raise self._error(where, f"empty or duplicate utterance id {utt_id!r}")
            if offset != expected_offset or n < 1:
                raise self._error(where, f"index entry of {utt_id!r} is inconsistent")
            rec = self._record_header(fh, offset, size)
            if rec is None or rec[0] != utt_id or rec[1] != n:
                raise self._error(offset, f"record of {utt_id!r} does not match the index")
            self._entries[utt_id] = (rec[2], n)
            self._order.append(utt_id)
            expected_offset = rec[2] + n * frame_bytes
        if pos != len(blob) or expected_offset != index_offset:
            raise self._error(index_offset + pos, "index does not cover the records")

    def __len__(self):
        return len(self._order)

    def __iter__(self):
        return iter(self._order)

    def __contains__(self, utt_id):
        return utt_id in self._entries

    def keys(self):
        return list(self._order)

    def num_frames(self, utt_id):
        return self._entries[utt_id][1]

    def __getitem__(self, utt_id):
        payload, n = self._entries[utt_id]
        with open(self.path, "rb") as fh:
            fh.seek(payload)
            raw = fh.read(n * self.feature_dim * 4)
        return np.frombuffer(raw, dtype="<f4").reshape(n, self.feature_dim)

    def items(self):
        for utt_id in self._order:
            yield utt_id, self[utt_id]


def read_feature_archive(path):
    return FeatureArchive(path)


def _split_line(line, lineno, path, nfields):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != nfields or not parts[0]:
        raise FormatError(f"{path}:{lineno}: expected {nfields} tab-separated fields")
    return parts


def read_transcripts(path):
    transcripts = {}
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            utt_id, text = _split_line(line, lineno, path, 2)
            symbols = text.split()
            if not symbols:
                raise FormatError(f"{path}:{lineno}: empty transcription for {utt_id!r}")
            if utt_id in transcripts:
                raise FormatError(f"{path}:{lineno}: duplicate utterance {utt_id!r}")
            transcripts[utt_id] = symbols
    return transcripts


def write_transcripts(path, transcripts):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt_id, symbols in transcripts.items():
            if not symbols:
                raise UsageError(f"empty transcription for {utt_id!r}")
            fh.write(f"{utt_id}\t{' '.join(symbols)}\n")


def read_alignments(path, hypothesis=False):
    """Read ``utt<TAB>label<TAB>start<TAB>end`` lines into ``utt -> sorted spans``.

    References may contain gaps; hypotheses must tile each utterance.
    """
    alignments = {}
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            utt_id, label, start, end = _split_line(line, lineno, path, 4)
            try:
                start, end = int(start), int(end)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer frame index") from None
            if start < 0 or end <= start:
                raise FormatError(f"{path}:{lineno}: invalid span [{start}, {end})")
            alignments.setdefault(utt_id, []).append((label, start, end))
    for utt_id, segs in alignments.items():
        segs.sort(key=lambda s: s[1])
        try:
            validate_segments(segs, hypothesis)
        except UsageError as err:
            raise FormatError(f"{path}: utterance {utt_id!r}: {err}") from None
    return alignments


def write_alignments(path, alignments):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt_id, segs in alignments.items():
            for label, start, end in segs:
                fh.write(f"{utt_id}\t{label}\t{start}\t{end}\n")


def write_inventory(path, unit_ids):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for uid in unit_ids:
            fh.write(f"{uid}\n")


def read_inventory(path):
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]
