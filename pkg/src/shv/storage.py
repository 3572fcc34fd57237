"""Embedded, node-partitioned time-series store.

Layout under the store root::

    store.pt                          store parameters (nodes, partition level)
    node<k>/<sid-hex>/<seq>.seg       "SHV1" + 16-byte records (u64 ts, i64 value, big-endian)
    node<k>/<sid-hex>/index           "SHV1" + one line per segment update / drop / tombstone
    node0/topics.dict                 topic-component dictionary
    node0/metadata.pt                 sensor and virtual-sensor metadata

Every record has a position: its index in the order the series received
writes.  Duplicate timestamps resolve to the highest position.  A
tombstone ``(mark, pos)`` hides every record written before ``pos`` with
a timestamp below ``mark``; compaction applies tombstones physically and
renumbers positions from zero.
"""

from __future__ import annotations

import logging
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ptree
from .errors import IoFailure
from .metadata import MetadataStore
from .model import LevelDictionary, SensorId, encode_sid, parse_topic

log = logging.getLogger(__name__)

MAGIC = b"SHV1"
RECORD_DTYPE = np.dtype([("ts", ">u8"), ("value", ">i8")])
TS_MAX = 1 << 64
DEFAULT_SEGMENT_BYTES = 1 << 20
_CACHE_BYTES = 64 << 20


@dataclass(frozen=True)
class StoreConfig:
    root: str
    nodes: int = 1
    partition_level: int = 0
    segment_bytes: int = DEFAULT_SEGMENT_BYTES

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if not 0 <= self.partition_level <= 7:
            raise ValueError("partition level must be in 0..7")
        if self.segment_bytes < 16:
            raise ValueError("segment size too small")

    def node_dir(self, k: int) -> str:
        return os.path.join(self.root, f"node{k}")


def partition(sid, cfg: StoreConfig) -> int:
    """Node holding ``sid``: the ordinal at the partition level, mod node count.

    Every SID under the same level-<=L subtree lands on the same node.
    """
    return SensorId(sid).level(cfg.partition_level) % cfg.nodes


@dataclass
class _Segment:
    seq: int
    base: int
    count: int
    min_ts: int
    max_ts: int


class _Series:
    def __init__(self, sid, path):
        self.sid = sid
        self.path = path
        self.segments = {}  # seq -> _Segment
        self.tombstones = []  # (mark, pos)
        self.flushed = 0  # positions [0, flushed) are on disk
        self.mem_ts = []
        self.mem_val = []
        self.next_seq = 0

    @property
    def total(self):
        return self.flushed + len(self.mem_ts)

    def seg_path(self, seq):
        return os.path.join(self.path, f"{seq:08d}.seg")

    @property
    def index_path(self):
        return os.path.join(self.path, "index")


def _parse_index(series, text):
    lines = text.split("\n")
    # a torn final line (crash mid-append) carries no committed state
    lines.pop()
    if not lines:
        return
    if lines[0] != MAGIC.decode():
        raise IoFailure(f"{series.index_path}: bad magic")
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        kind = parts[0]
        if kind == "seg":
            seq, base, count, lo, hi = map(int, parts[1:6])
            series.segments[seq] = _Segment(seq, base, count, lo, hi)
            series.next_seq = max(series.next_seq, seq + 1)
            series.flushed = max(series.flushed, base + count)
        elif kind == "drop":
            series.segments.pop(int(parts[1]), None)
        elif kind == "tomb":
            series.tombstones.append((int(parts[1]), int(parts[2])))
        elif kind == "total":
            series.flushed = max(series.flushed, int(parts[1]))
        else:
            raise IoFailure(f"{series.index_path}: unknown entry {kind!r}")


class Store:
    def __init__(self, config: StoreConfig):
        self.config = config
        self._lock = threading.RLock()
        self._series = {}
        self._array_cache = OrderedDict()
        self._cache_bytes = 0
        self.stats = {"queries": 0, "inserted": 0, "flushes": 0}
        try:
            for k in range(config.nodes):
                os.makedirs(config.node_dir(k), exist_ok=True)
            self._write_params()
            self.dictionary = LevelDictionary.load(self.dictionary_path)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self.metadata = MetadataStore(os.path.join(config.node_dir(0), "metadata.pt"))
        self._discover()

    # -- opening
    @classmethod
    def open(cls, root, nodes=None, partition_level=None, segment_bytes=None) -> Store:
        """Open (or create) the store at ``root``.

        Parameters saved in ``store.pt`` win; passing a conflicting value
        raises ``ValueError`` because it would silently re-route data.
        """
        params_path = os.path.join(root, "store.pt")
        saved = {}
        if os.path.exists(params_path):
            node = ptree.load(params_path).child("store")
            saved = {"nodes": node.get_int("nodes"), "partition_level": node.get_int("partitionLevel"),
                     "segment_bytes": node.get_int("segmentBytes")}
        given = {"nodes": nodes, "partition_level": partition_level, "segment_bytes": segment_bytes}
        merged = {}
        for key in given:
            if saved.get(key) is not None and given[key] is not None and saved[key] != given[key] and key != "segment_bytes":
                raise ValueError(f"store at {root} was created with {key}={saved[key]}, not {given[key]}")
            value = saved.get(key) if saved.get(key) is not None else given[key]
            if value is not None:
                merged[key] = value
        return cls(StoreConfig(root, **merged))

    def _write_params(self):
        path = os.path.join(self.config.root, "store.pt")
        if os.path.exists(path):
            return
        node = ptree.Node("store", "", [
            ptree.Node("nodes", str(self.config.nodes)),
            ptree.Node("partitionLevel", str(self.config.partition_level)),
            ptree.Node("segmentBytes", str(self.config.segment_bytes)),
        ])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(ptree.dumps(ptree.Node("", "", [node])))

    @property
    def dictionary_path(self):
        return os.path.join(self.config.node_dir(0), "topics.dict")

    def _discover(self):
        for k in range(self.config.nodes):
            for name in os.listdir(self.config.node_dir(k)):
                full = os.path.join(self.config.node_dir(k), name)
                if len(name) == 32 and os.path.isdir(full):
                    try:
                        sid = SensorId.fromhex(name)
                    except ValueError:
                        continue
                    self._series[sid] = None  # loaded lazily

    def _get(self, sid, create=False):
        sid = SensorId(sid)
        series = self._series.get(sid)
        if series is not None:
            return series
        path = os.path.join(self.config.node_dir(partition(sid, self.config)), sid.hex())
        if sid in self._series:
            series = _Series(sid, path)
            try:
                with open(series.index_path, "r+b") as fh:
                    data = fh.read()
                    _parse_index(series, data.decode("utf-8", "replace"))
                    keep = data.rfind(b"\n") + 1
                    if keep != len(data):
                        # cut the torn tail so later appends start on a fresh line
                        fh.truncate(keep)
            except FileNotFoundError:
                pass
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
            self._series[sid] = series
            return series
        if not create:
            return None
        series = _Series(sid, path)
        self._series[sid] = series
        return series

    def sids(self) -> list:
        with self._lock:
            return sorted(self._series)

    def sid_of(self, topic, register=False):
        topic = parse_topic(topic)
        if register:
            return encode_sid(topic, self.dictionary)
        return self.dictionary.lookup(topic)

    def topic_of(self, sid):
        return self.dictionary.decode(sid)

    # -- writes
    def insert(self, sid, ts: int, value: int):
        if not 0 < ts < TS_MAX:
            raise ValueError("timestamp must be a positive u64")
        with self._lock:
            series = self._get(sid, create=True)
            series.mem_ts.append(ts)
            series.mem_val.append(value)
            self.stats["inserted"] += 1

    def insert_many(self, sid, records):
        """Append ``(ts, value)`` pairs for one SID."""
        with self._lock:
            series = self._get(sid, create=True)
            for ts, value in records:
                if not 0 < ts < TS_MAX:
                    raise ValueError("timestamp must be a positive u64")
                series.mem_ts.append(ts)
                series.mem_val.append(value)
            self.stats["inserted"] += len(records)

    def flush(self, durable=False):
        """Flush barrier: everything inserted so far survives a reopen."""
        with self._lock:
            try:
                for series in self._series.values():
                    if series is not None and series.mem_ts:
                        self._flush_series(series, durable)
                if self.dictionary.dirty:
                    self.dictionary.save(self.dictionary_path)
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
            self.stats["flushes"] += 1

    def _flush_series(self, series, durable):
        os.makedirs(series.path, exist_ok=True)
        new_index = not os.path.exists(series.index_path)
        arr = np.empty(len(series.mem_ts), dtype=RECORD_DTYPE)
        arr["ts"] = series.mem_ts
        arr["value"] = series.mem_val
        lines = []
        open_seg = max(series.segments.values(), key=lambda s: s.seq, default=None)
        start = 0
        while start < len(arr):
            if open_seg is None or (open_seg.count + 1) * 16 > self.config.segment_bytes or \
                    open_seg.base + open_seg.count != series.flushed:
                open_seg = _Segment(series.next_seq, series.flushed, 0, TS_MAX, 0)
                series.next_seq += 1
                with open(series.seg_path(open_seg.seq), "wb") as fh:
                    fh.write(MAGIC)
            room = max(1, self.config.segment_bytes // 16 - open_seg.count)
            chunk = arr[start:start + room]
            with open(series.seg_path(open_seg.seq), "r+b") as fh:
                fh.seek(len(MAGIC) + open_seg.count * 16)
                fh.write(chunk.tobytes())
                if durable:
                    fh.flush()
                    os.fsync(fh.fileno())
            open_seg.count += len(chunk)
            open_seg.min_ts = min(open_seg.min_ts, int(chunk["ts"].min()))
            open_seg.max_ts = max(open_seg.max_ts, int(chunk["ts"].max()))
            series.segments[open_seg.seq] = open_seg
            series.flushed += len(chunk)
            lines.append(f"seg {open_seg.seq} {open_seg.base} {open_seg.count} {open_seg.min_ts} {open_seg.max_ts}\n")
            start += len(chunk)
        with open(series.index_path, "a", encoding="utf-8") as fh:
            if new_index:
                fh.write(MAGIC.decode() + "\n")
            fh.write("".join(lines))
            if durable:
                fh.flush()
                os.fsync(fh.fileno())
        series.mem_ts = []
        series.mem_val = []

    # -- reads
    def _segment_array(self, series, seg):
        key = (series.sid, seg.seq, seg.count)
        arr = self._array_cache.get(key)
        if arr is not None:
            self._array_cache.move_to_end(key)
            return arr
        try:
            with open(series.seg_path(seg.seq), "rb") as fh:
                if fh.read(4) != MAGIC:
                    raise IoFailure(f"{series.seg_path(seg.seq)}: bad magic")
                data = fh.read(seg.count * 16)
        except FileNotFoundError as exc:
            raise IoFailure(str(exc)) from exc
        if len(data) < seg.count * 16:
            raise IoFailure(f"{series.seg_path(seg.seq)}: truncated segment")
        arr = np.frombuffer(data, dtype=RECORD_DTYPE)
        self._array_cache[key] = arr
        self._cache_bytes += arr.nbytes
        while self._cache_bytes > _CACHE_BYTES and len(self._array_cache) > 1:
            _, old = self._array_cache.popitem(last=False)
            self._cache_bytes -= old.nbytes
        return arr

    def _visible(self, series, t0, t1):
        """Visible ``(ts, value)`` arrays of one series within ``[t0, t1)``."""
        ts_parts, val_parts, pos_parts = [], [], []
        for seg in sorted(series.segments.values(), key=lambda s: s.base):
            if seg.count == 0 or seg.max_ts < t0 or seg.min_ts >= t1:
                continue
            arr = self._segment_array(series, seg)
            ts_parts.append(arr["ts"].astype(np.uint64))
            val_parts.append(arr["value"].astype(np.int64))
            pos_parts.append(np.arange(seg.base, seg.base + seg.count, dtype=np.int64))
        if series.mem_ts:
            ts_parts.append(np.array(series.mem_ts, dtype=np.uint64))
            val_parts.append(np.array(series.mem_val, dtype=np.int64))
            pos_parts.append(np.arange(series.flushed, series.total, dtype=np.int64))
        if not ts_parts:
            return np.empty(0, np.uint64), np.empty(0, np.int64)
        ts = np.concatenate(ts_parts)
        val = np.concatenate(val_parts)
        pos = np.concatenate(pos_parts)
        keep = ts >= np.uint64(t0)
        if t1 < TS_MAX:
            keep &= ts < np.uint64(t1)
        if series.tombstones:
            keep &= ~_deleted(ts, pos, series.tombstones)
        ts, val, pos = ts[keep], val[keep], pos[keep]
        if len(ts) == 0:
            return ts, val
        order = np.lexsort((pos, ts))
        ts, val = ts[order], val[order]
        last = np.ones(len(ts), dtype=bool)
        last[:-1] = ts[1:] != ts[:-1]
        return ts[last], val[last]

    def query(self, sid, t0: int, t1: int) -> list:
        if t0 > t1:
            raise ValueError("t0 must be <= t1")
        with self._lock:
            self.stats["queries"] += 1
            series = self._get(sid)
            if series is None or t0 == t1:
                return []
            ts, val = self._visible(series, max(t0, 0), min(t1, TS_MAX))
        return list(zip(ts.tolist(), val.tolist()))

    def count(self, sid=None) -> int:
        with self._lock:
            sids = [sid] if sid is not None else list(self._series)
            total = 0
            for s in sids:
                series = self._get(s)
                if series is not None:
                    total += len(self._visible(series, 0, TS_MAX)[0])
            return total

    def newest(self, sid):
        with self._lock:
            series = self._get(sid)
            if series is None:
                return None
            ts, val = self._visible(series, 0, TS_MAX)
            if not len(ts):
                return None
            return int(ts[-1]), int(val[-1])

    # -- retention
    def delete_before(self, ts: int, sids=None) -> int:
        """Hide every record older than ``ts``; returns how many were removed."""
        removed = 0
        with self._lock:
            targets = list(self._series) if sids is None else [SensorId(s) for s in sids]
            try:
                for sid in targets:
                    series = self._get(sid)
                    if series is None:
                        continue
                    n = len(self._visible(series, 0, ts)[0]) if ts > 0 else 0
                    if n == 0:
                        continue
                    removed += n
                    series.tombstones.append((ts, series.total))
                    lines = [f"tomb {ts} {series.total}\n"]
                    for seg in list(series.segments.values()):
                        if seg.max_ts < ts:
                            del series.segments[seg.seq]
                            lines.append(f"drop {seg.seq}\n")
                            self._unlink(series.seg_path(seg.seq))
                    self._append_index(series, lines)
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
        return removed

    def _append_index(self, series, lines):
        os.makedirs(series.path, exist_ok=True)
        new_index = not os.path.exists(series.index_path)
        with open(series.index_path, "a", encoding="utf-8") as fh:
            if new_index:
                fh.write(MAGIC.decode() + "\n")
            # keeps positions monotonic if unflushed writes are lost
            lines = lines + [f"total {series.total}\n"]
            fh.write("".join(lines))

    @staticmethod
    def _unlink(path):
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass

    def compact(self):
        """Rewrite every series: merge segments, resolve duplicates, apply tombstones."""
        with self._lock:
            try:
                for sid in list(self._series):
                    series = self._get(sid)
                    if series is None or (not series.segments and not series.mem_ts):
                        continue
                    self._compact_series(series)
                if self.dictionary.dirty:
                    self.dictionary.save(self.dictionary_path)
            except OSError as exc:
                raise IoFailure(str(exc)) from exc

    def _compact_series(self, series):
        ts, val = self._visible(series, 0, TS_MAX)
        old = list(series.segments.values())
        os.makedirs(series.path, exist_ok=True)
        per_seg = max(1, self.config.segment_bytes // 16)
        new = []
        seq = series.next_seq
        for start in range(0, len(ts), per_seg):
            arr = np.empty(min(per_seg, len(ts) - start), dtype=RECORD_DTYPE)
            arr["ts"] = ts[start:start + per_seg]
            arr["value"] = val[start:start + per_seg]
            with open(series.seg_path(seq), "wb") as fh:
                fh.write(MAGIC)
                fh.write(arr.tobytes())
            new.append(_Segment(seq, start, len(arr), int(arr["ts"][0]), int(arr["ts"][-1])))
            seq += 1
        tmp = series.index_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(MAGIC.decode() + "\n")
            for seg in new:
                fh.write(f"seg {seg.seq} {seg.base} {seg.count} {seg.min_ts} {seg.max_ts}\n")
            fh.write(f"total {len(ts)}\n")
        os.replace(tmp, series.index_path)
        for seg in old:
            self._unlink(series.seg_path(seg.seq))
        series.segments = {seg.seq: seg for seg in new}
        series.tombstones = []
        series.flushed = len(ts)
        series.mem_ts = []
        series.mem_val = []
        series.next_seq = seq

    def disk_bytes(self) -> int:
        total = 0
        for dirpath, _, files in os.walk(self.config.root):
            for f in files:
                if f.endswith(".seg"):
                    total += os.path.getsize(os.path.join(dirpath, f))
        return total

    def close(self):
        self.flush()


def _deleted(ts, pos, tombstones):
    """Mask of records hidden by a tombstone written after them."""
    tomb = sorted(tombstones, key=lambda x: x[1])
    tpos = np.array([p for _, p in tomb], dtype=np.int64)
    # suffix max of marks; 0 hides nothing
    suffix = [0] * (len(tomb) + 1)
    for i in range(len(tomb) - 1, -1, -1):
        suffix[i] = max(min(tomb[i][0], TS_MAX - 1), suffix[i + 1])
    marks = np.array(suffix, dtype=np.uint64)
    return ts < marks[np.searchsorted(tpos, pos, side="right")]
