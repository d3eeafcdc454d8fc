"""Frame and hit containers.

``Frame``/``Hit`` are the per-exposure view used at API edges.  Bulk work goes
through :class:`FrameBatch`, a columnar block of consecutive frames whose
hits are stored CSR-style (``ptr[i]:ptr[i+1]`` are the hits of frame
``first_frame + i``).
"""
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Arm(IntEnum):
    S = 0
    AS = 1
    S1 = 2
    S2 = 3
    AS1 = 4
    AS2 = 5

    @property
    def label(self):
        return self.name

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown arm {value!r}") from None
        return cls(int(value))


class Source(IntEnum):
    PAIR = 0
    DARK = 1
    NOISE = 2


@dataclass(frozen=True)
class Hit:
    arm: Arm
    kx: float
    ky: float
    px: int
    py: int
    source: int | None = None
    pair: int | None = None
    cell: int | None = None


@dataclass
class Frame:
    index: int
    storage_time: float
    hits: list = field(default_factory=list)

    def count(self, arm):
        arm = Arm.parse(arm)
        return sum(1 for h in self.hits if h.arm == arm)


_HIT_COLUMNS = ("arm", "kx", "ky", "px", "py", "source", "pair", "cell")
_DTYPES = {"arm": np.int8, "kx": np.float64, "ky": np.float64, "px": np.int32, "py": np.int32,
           "source": np.int8, "pair": np.int32, "cell": np.int32}


@dataclass
class FrameBatch:
    first_frame: int
    ptr: np.ndarray
    arm: np.ndarray
    kx: np.ndarray
    ky: np.ndarray
    px: np.ndarray
    py: np.ndarray
    source: np.ndarray
    pair: np.ndarray
    cell: np.ndarray
    storage_time: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.ptr) - 1

    @property
    def n_hits(self):
        return len(self.arm)

    @property
    def frame_index(self):
        """Absolute frame index of every hit."""
        return self.first_frame + np.repeat(np.arange(self.n_frames, dtype=np.int64), np.diff(self.ptr))

    @property
    def fov(self):
        return self.meta.get("fov")

    @classmethod
    def empty(cls, first_frame=0, n_frames=0, storage_time=None, meta=None):
        cols = {c: np.zeros(0, dtype=_DTYPES[c]) for c in _HIT_COLUMNS}
        st = np.zeros(n_frames) if storage_time is None else np.asarray(storage_time, dtype=float)
        return cls(first_frame=first_frame, ptr=np.zeros(n_frames + 1, dtype=np.int64),
                   storage_time=st, meta=dict(meta or {}), **cols)

    @classmethod
    def from_frames(cls, frames, meta=None):
        frames = list(frames)
        if not frames:
            return cls.empty(meta=meta)
        first = frames[0].index
        for i, fr in enumerate(frames):
            if fr.index != first + i:
                raise ValueError("frames must be contiguous and in index order")
        counts = [len(fr.hits) for fr in frames]
        ptr = np.zeros(len(frames) + 1, dtype=np.int64)
        ptr[1:] = np.cumsum(counts)
        hits = [h for fr in frames for h in fr.hits]
        cols = {
            "arm": np.array([int(h.arm) for h in hits], dtype=np.int8),
            "kx": np.array([h.kx for h in hits], dtype=np.float64),
            "ky": np.array([h.ky for h in hits], dtype=np.float64),
            "px": np.array([h.px for h in hits], dtype=np.int32),
            "py": np.array([h.py for h in hits], dtype=np.int32),
            "source": np.array([-1 if h.source is None else h.source for h in hits], dtype=np.int8),
            "pair": np.array([-1 if h.pair is None else h.pair for h in hits], dtype=np.int32),
            "cell": np.array([-1 if h.cell is None else h.cell for h in hits], dtype=np.int32),
        }
        return cls(first_frame=first, ptr=ptr, storage_time=np.array([fr.storage_time for fr in frames], float),
                   meta=dict(meta or {}), **cols)

    def frame(self, i):
        """Materialise local frame ``i`` as a :class:`Frame`."""
        lo, hi = self.ptr[i], self.ptr[i + 1]
        hits = [
            Hit(Arm(int(self.arm[h])), float(self.kx[h]), float(self.ky[h]), int(self.px[h]), int(self.py[h]),
                int(self.source[h]), int(self.pair[h]), int(self.cell[h]))
            for h in range(lo, hi)
        ]
        return Frame(self.first_frame + i, float(self.storage_time[i]), hits)

    def frames(self):
        for i in range(self.n_frames):
            yield self.frame(i)

    def slice(self, start, stop):
        """Local frames ``[start, stop)`` as a new batch sharing no state."""
        start = max(0, start)
        stop = min(self.n_frames, stop)
        lo, hi = self.ptr[start], self.ptr[stop]
        cols = {c: getattr(self, c)[lo:hi].copy() for c in _HIT_COLUMNS}
        return FrameBatch(first_frame=self.first_frame + start, ptr=self.ptr[start:stop + 1] - lo,
                          storage_time=self.storage_time[start:stop].copy(), meta=dict(self.meta), **cols)

    def select(self, mask):
        """Keep only the hits where ``mask`` is true; frames are preserved."""
        mask = np.asarray(mask, dtype=bool)
        local = np.repeat(np.arange(self.n_frames), np.diff(self.ptr))
        ptr = np.zeros_like(self.ptr)
        ptr[1:] = np.cumsum(np.bincount(local[mask], minlength=self.n_frames))
        cols = {c: getattr(self, c)[mask] for c in _HIT_COLUMNS}
        return FrameBatch(first_frame=self.first_frame, ptr=ptr, storage_time=self.storage_time.copy(),
                          meta=dict(self.meta), **cols)

    def counts_per_frame(self, arm):
        sel = (self.arm == int(arm)).astype(np.int64)
        out = np.zeros(self.n_frames, dtype=np.int64)
        if self.n_hits:
            np.add.at(out, np.repeat(np.arange(self.n_frames), np.diff(self.ptr)), sel)
        return out

    @staticmethod
    def concat(batches):
        batches = [b for b in batches if b is not None]
        if not batches:
            return FrameBatch.empty()
        batches.sort(key=lambda b: b.first_frame)
        for a, b in zip(batches, batches[1:]):
            if a.first_frame + a.n_frames != b.first_frame:
                raise ValueError("batches are not contiguous")
        offsets = np.cumsum([0] + [b.n_hits for b in batches[:-1]])
        ptr = np.concatenate([batches[0].ptr[:1]] + [b.ptr[1:] + off for b, off in zip(batches, offsets)])
        cols = {c: np.concatenate([getattr(b, c) for b in batches]) for c in _HIT_COLUMNS}
        return FrameBatch(first_frame=batches[0].first_frame, ptr=ptr,
                          storage_time=np.concatenate([b.storage_time for b in batches]),
                          meta=dict(batches[0].meta), **cols)

    @staticmethod
    def merge_hits(a, b):
        """Interleave the hits of two batches covering the same frames (``a``'s first)."""
        if a.first_frame != b.first_frame or a.n_frames != b.n_frames:
            raise ValueError("batches cover different frames")
        fa = np.repeat(np.arange(a.n_frames), np.diff(a.ptr))
        fb = np.repeat(np.arange(b.n_frames), np.diff(b.ptr))
        frame = np.concatenate([fa, fb])
        origin = np.concatenate([np.zeros(len(fa), np.int8), np.ones(len(fb), np.int8)])
        order = np.lexsort((origin, frame))
        cols = {c: np.concatenate([getattr(a, c), getattr(b, c)])[order] for c in _HIT_COLUMNS}
        ptr = a.ptr + b.ptr
        return FrameBatch(first_frame=a.first_frame, ptr=ptr, storage_time=a.storage_time.copy(),
                          meta=dict(a.meta), **cols)

    def equals(self, other, atol=0.0):
        """Same frames and hits.  With ``atol > 0`` wavevectors may differ by up to that much."""
        if self.first_frame != other.first_frame or not np.array_equal(self.ptr, other.ptr):
            return False
        for c in _HIT_COLUMNS:
            a, b = getattr(self, c), getattr(other, c)
            if atol and c in ("kx", "ky"):
                if a.shape != b.shape or np.any(np.abs(a - b) > atol):
                    return False
            elif not np.array_equal(a, b):
                return False
        return np.array_equal(self.storage_time, other.storage_time)
