"""Text frame-stream files.

Layout::

    # wavemux-frames 1
    # config_digest=<sha256>
    # fov=420.0,420.0
    # pixel_pitch=2.1
    # n_frames=<N>
    # columns=frame_index,arm,kx,ky,px,py
    0,S,12.5,-3.25,105,98
    0,AS,-12.9,3.0,93,101
    1,-,,,,
    ...
    # end frames=<N>

Wavevectors are written with ``repr`` (shortest round-trip decimal), so a
file read back reproduces the floats exactly.  A run that failed midway ends
in ``# partial frames=<k>`` instead of ``# end``.  An optional ``.prov``
sidecar holds one ``source,pair,cell`` line per hit, in the same order.
"""
import os

import numpy as np

from .frames import Arm, FrameBatch

FORMAT_TAG = "# wavemux-frames 1"
COLUMNS = "frame_index,arm,kx,ky,px,py"
_LABELS = {int(a): a.name for a in Arm}
_CODES = {a.name: int(a) for a in Arm}


class FrameFormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def format_batch(batch):
    """Text lines (without newlines) for one batch."""
    labels = [_LABELS[int(a)] for a in batch.arm.tolist()]
    kx = batch.kx.tolist()
    ky = batch.ky.tolist()
    px = batch.px.tolist()
    py = batch.py.tolist()
    ptr = batch.ptr.tolist()
    lines = []
    for i in range(batch.n_frames):
        f = batch.first_frame + i
        lo, hi = ptr[i], ptr[i + 1]
        if lo == hi:
            lines.append(f"{f},-,,,,")
            continue
        for h in range(lo, hi):
            lines.append(f"{f},{labels[h]},{kx[h]!r},{ky[h]!r},{px[h]},{py[h]}")
    return lines


def header_lines(digest, fov, pitch, n_frames, extra=None):
    out = [FORMAT_TAG, f"# config_digest={digest}", f"# fov={float(fov[0])!r},{float(fov[1])!r}",
           f"# pixel_pitch={float(pitch)!r}", f"# n_frames={int(n_frames)}"]
    for k, v in (extra or {}).items():
        out.append(f"# {k}={v}")
    out.append(f"# columns={COLUMNS}")
    return out


class FrameFileSink:
    """Writes batches in frame order; needs in-order delivery."""

    order_tolerant = False

    def __init__(self, path, digest, fov, pitch, n_frames, provenance=False, extra_header=None):
        self.path = path
        self.n_frames = n_frames
        self.written = 0
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._prov = open(path + ".prov", "w", encoding="utf-8", newline="\n") if provenance else None
        self._fh.write("\n".join(header_lines(digest, fov, pitch, n_frames, extra_header)) + "\n")
        if self._prov:
            self._prov.write(f"# config_digest={digest}\n# columns=source,pair,cell\n")

    def write(self, batch):
        if batch.first_frame != self.written:
            raise ValueError(f"expected frame {self.written}, got {batch.first_frame}")
        lines = format_batch(batch)
        if lines:
            self._fh.write("\n".join(lines) + "\n")
        if self._prov and batch.n_hits:
            self._prov.write("\n".join(f"{s},{p},{c}" for s, p, c in zip(
                batch.source.tolist(), batch.pair.tolist(), batch.cell.tolist())) + "\n")
        self.written += batch.n_frames

    def close(self):
        self._fh.write(f"# end frames={self.written}\n")
        self._fh.close()
        if self._prov:
            self._prov.close()

    def abort(self, exc):
        try:
            self._fh.write(f"# partial frames={self.written}\n")
        finally:
            self._fh.close()
            if self._prov:
                self._prov.close()


def _parse_header(line, header):
    body = line[1:].strip()
    if "=" in body:
        k, v = body.split("=", 1)
        header[k.strip()] = v.strip()


def iter_frame_file(path, chunk_frames=65536, allow_partial=False, provenance=None):
    """Stream a frame file as :class:`FrameBatch` chunks.

    Raises :class:`FrameFormatError` (with the line number) on malformed
    content, missing frames, or a missing/partial trailer.
    """
    header = {}
    prov_fh = None
    if provenance is None:
        provenance = os.path.exists(path + ".prov")
    if provenance:
        prov_fh = open(path + ".prov", encoding="utf-8")

    def prov_rows(n):
        rows = []
        while len(rows) < n:
            ln = prov_fh.readline()
            if not ln:
                raise FrameFormatError("provenance sidecar shorter than frame file")
            if ln.startswith("#"):
                continue
            rows.append(tuple(int(x) for x in ln.split(",")))
        return rows

    state = {"next": 0, "rows": [], "counts": [], "cur": None, "cur_n": 0}
    trailer = None

    def flush():
        rows = state["rows"]
        counts = state["counts"]
        if not counts:
            return None
        first = state["next"] - len(counts)
        ptr = np.zeros(len(counts) + 1, dtype=np.int64)
        ptr[1:] = np.cumsum(counts)
        n = len(rows)
        prov = prov_rows(n) if prov_fh else [(-1, -1, -1)] * n
        batch = FrameBatch(
            first_frame=first, ptr=ptr,
            arm=np.array([r[0] for r in rows], dtype=np.int8),
            kx=np.array([r[1] for r in rows], dtype=float), ky=np.array([r[2] for r in rows], dtype=float),
            px=np.array([r[3] for r in rows], dtype=np.int32), py=np.array([r[4] for r in rows], dtype=np.int32),
            source=np.array([p[0] for p in prov], dtype=np.int8), pair=np.array([p[1] for p in prov], dtype=np.int32),
            cell=np.array([p[2] for p in prov], dtype=np.int32),
            storage_time=_times(header, first, len(counts)), meta=_meta(header))
        state["rows"], state["counts"] = [], []
        return batch

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if trailer is not None and line.strip():
                raise FrameFormatError("content after trailer", lineno)
            if line.startswith("#"):
                body = line[1:].strip()
                if lineno == 1 and line != FORMAT_TAG:
                    raise FrameFormatError(f"unrecognised format tag {line!r}", lineno)
                if body.startswith("end frames=") or body.startswith("partial frames="):
                    trailer = (body.split()[0], lineno)
                    continue
                _parse_header(line, header)
                continue
            if lineno == 1:
                raise FrameFormatError("missing format header", lineno)
            if header.get("columns") != COLUMNS:
                raise FrameFormatError(f"expected columns={COLUMNS}", lineno)
            parts = line.split(",")
            if len(parts) != 6:
                raise FrameFormatError(f"expected 6 fields, got {len(parts)}", lineno)
            try:
                f = int(parts[0])
            except ValueError:
                raise FrameFormatError(f"bad frame index {parts[0]!r}", lineno) from None
            if state["cur"] is None or f != state["cur"]:
                expect = state["next"]
                if f != expect:
                    raise FrameFormatError(f"frame {f} out of sequence (expected {expect})", lineno)
                if len(state["counts"]) >= chunk_frames:
                    yield flush()
                state["cur"] = f
                state["counts"].append(0)
                state["next"] += 1
                state["cur_empty"] = False
            if parts[1] == "-":
                if any(parts[2:]) or state["counts"][-1] or state.get("cur_empty"):
                    raise FrameFormatError("malformed empty-frame line", lineno)
                state["cur_empty"] = True
                continue
            if state.get("cur_empty"):
                raise FrameFormatError("hit listed for a frame already marked empty", lineno)
            code = _CODES.get(parts[1])
            if code is None:
                raise FrameFormatError(f"unknown arm {parts[1]!r}", lineno)
            try:
                row = (code, float(parts[2]), float(parts[3]), int(parts[4]), int(parts[5]))
            except ValueError:
                raise FrameFormatError("non-numeric hit field", lineno) from None
            state["rows"].append(row)
            state["counts"][-1] += 1
        if trailer is None:
            raise FrameFormatError("file ends without a trailer (truncated?)", lineno + 1)
        if trailer[0] == "partial" and not allow_partial:
            raise FrameFormatError("file is marked partial", trailer[1])
        declared = header.get("n_frames")
        if trailer[0] == "end" and declared is not None and int(declared) != state["next"]:
            raise FrameFormatError(f"header declares {declared} frames, file holds {state['next']}", trailer[1])
        batch = flush()
        if batch is not None:
            yield batch
    if prov_fh:
        prov_fh.close()


def _times(header, first, n):
    sched = header.get("storage_times")
    if not sched:
        return np.zeros(n)
    t = np.array([float(x) for x in sched.split(",")])
    return t[np.arange(first, first + n) % len(t)]


def _meta(header):
    meta = {"config_digest": header.get("config_digest")}
    if "fov" in header:
        meta["fov"] = tuple(float(x) for x in header["fov"].split(","))
    if "pixel_pitch" in header:
        meta["pitch"] = float(header["pixel_pitch"])
    return meta


def read_header(path):
    header = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            _parse_header(line.rstrip("\n"), header)
    return header


def read_frames(path, allow_partial=False):
    batches = list(iter_frame_file(path, allow_partial=allow_partial))
    if not batches:
        return FrameBatch.empty(meta=_meta(read_header(path)))
    return FrameBatch.concat(batches)
