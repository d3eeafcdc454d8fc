"""Counter-based random streams (Philox4x32-10).

Every random number in the simulator is a pure function of
``(master_seed, index, purpose, draw)``: the 64-bit seed is the Philox key,
and the 128-bit counter carries the draw number, a purpose tag, and the frame
(or protocol run) index.  Any frame can therefore be regenerated on its own,
by any worker, in any order.

Counter layout ``(c0, c1, c2, c3)``:

* ``c0`` - draw number within the purpose (round, pair, hit, ...)
* ``c1`` - purpose tag, optionally with a trial number in the upper 24 bits
* ``c2, c3`` - low and high 32 bits of the frame / run index

Both a scalar numba version and a vectorised numpy version are provided and
they agree bit for bit.
"""
import numpy as np

from ._accel import njit

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S6 = np.uint64(6)
_TWO26 = 67108864.0
_TWO_M52 = 2.0 ** -52

# purpose tags (c1 low byte); frame simulation
P_OCCUPANCY = 1
P_ACCEPT = 2
P_PAIR_JITTER = 3
P_PAIR_GAUSS = 4
P_PAIR_DETECT = 5
P_COUNTS = 6
P_NOISE_COUNT = 7
P_DARK_S_POS = 8
P_DARK_AS_POS = 9
P_NOISE_POS = 10
P_SPLIT_S = 11
P_SPLIT_AS = 12
# protocol runs
P_PROTO_OCCUPANCY = 33
P_PROTO_JITTER = 34
P_PROTO_HERALD = 35
P_PROTO_READOUT = 36

MAX_TRIAL = 1 << 24


def seed_key(seed):
    """Split a 64-bit seed into the two 32-bit Philox key words."""
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


@njit(inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds; all arguments are uint64 holding 32-bit words."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = (p1 >> _S32) ^ c1 ^ k0
        n1 = p1 & _MASK
        n2 = (p0 >> _S32) ^ c3 ^ k1
        n3 = p0 & _MASK
        c0 = n0
        c1 = n1
        c2 = n2
        c3 = n3
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@njit(inline="always")
def uniform2(k0, k1, draw, purpose, index):
    """Two doubles strictly inside (0, 1) for one counter value.

    ``k0, k1`` are uint64 key words; ``draw``, ``purpose`` and ``index`` are
    ordinary integers.
    """
    idx = np.uint64(index)
    x0, x1, x2, x3 = philox4x32(np.uint64(draw) & _MASK, np.uint64(purpose) & _MASK,
                                idx & _MASK, idx >> _S32, k0, k1)
    u0 = ((x0 >> _S6) * _TWO26 + (x1 >> _S6) + 0.5) * _TWO_M52
    u1 = ((x2 >> _S6) * _TWO26 + (x3 >> _S6) + 0.5) * _TWO_M52
    return u0, u1


def philox4x32_np(c0, c1, c2, c3, k0, k1):
    """Vectorised Philox4x32-10 over broadcastable uint64 arrays."""
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in np.broadcast_arrays(c0, c1, c2, c3))
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (p1 >> _S32) ^ c1 ^ k0, p1 & _MASK, (p0 >> _S32) ^ c3 ^ k1, p0 & _MASK
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


def uniform2_np(k0, k1, draw, purpose, index):
    """Vectorised twin of :func:`uniform2`."""
    idx = np.asarray(index, dtype=np.uint64)
    draw = np.asarray(draw, dtype=np.int64).astype(np.uint64) & _MASK
    purpose = np.asarray(purpose, dtype=np.int64).astype(np.uint64) & _MASK
    x0, x1, x2, x3 = philox4x32_np(draw, purpose, idx & _MASK, idx >> _S32, k0, k1)
    u0 = ((x0 >> _S6).astype(np.float64) * _TWO26 + (x1 >> _S6).astype(np.float64) + 0.5) * _TWO_M52
    u1 = ((x2 >> _S6).astype(np.float64) * _TWO26 + (x3 >> _S6).astype(np.float64) + 0.5) * _TWO_M52
    return u0, u1


def trial_purpose(trial, purpose):
    """Pack a protocol trial number into the purpose word."""
    return (np.asarray(trial, dtype=np.int64) << 8) | purpose
