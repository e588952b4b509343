"""
Probabilistic membership filters used to ship mask deltas

Implements a seeded 64-bit hash family, n-bit fingerprints and two static
XOR-based filters over integer keys:

- binary fuse filters (3- or 4-wise, segmented layout)
- classic 3-wise XOR filters (three independent blocks)

Both are built by peeling and answer membership with zero false negatives
and a false-positive rate close to 2^-bits_per_entry. All hashing is
vectorised with numpy so that a membership sweep over a whole mask (10^6
positions) is a handful of array operations.
"""

import logging
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from utils.errors import (
    ConstructionFailed,
    DuplicateKeys,
    MalformedHeader,
    TruncatedPayload,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN64 = 0x9E3779B97F4A7C15

# Role constants XOR-ed into the public seed, one per use of the hash family
ROLE_FINGERPRINT = 0xA0761D6478BD642F
ROLE_LOCATION = 0xE7037ED1A0B428DB
ROLE_OFFSET = 0x8EBC6AF09C88C6E3
ROLE_RESEED = 0x589965CC75374CC3

LAYOUT_FUSE = "fuse"
LAYOUT_XOR = "xor"
LAYOUT_CODES = {LAYOUT_FUSE: 0, LAYOUT_XOR: 1}

SUPPORTED_ARITY = (3, 4)
SUPPORTED_BPE = (8, 16, 32)

DEFAULT_ARITY = 4
DEFAULT_BITS_PER_ENTRY = 8
MAX_RETRIES = 100

MIN_SEGMENT_LENGTH = 4
MAX_SEGMENT_LENGTH = 1 << 18

FILTER_MAGIC = b"DMF1"
FILTER_VERSION = 1
# version, arity, bpe, layout(reserved), seed, key_count, array_length, segment_length, segment_count
PARAMS_STRUCT = struct.Struct("<BBBBQIIII")
FILTER_HEADER_SIZE = len(FILTER_MAGIC) + PARAMS_STRUCT.size

_C1 = np.uint64(0xFF51AFD7ED558CCD)
_C2 = np.uint64(0xC4CEB9FE1A85EC53)
_S33 = np.uint64(33)
_S32 = np.uint64(32)


def _fmix64_int(x: int) -> int:
    """MurmurHash3 64-bit finalizer on a Python int"""
    x &= MASK64
    x ^= x >> 33
    x = (x * 0xFF51AFD7ED558CCD) & MASK64
    x ^= x >> 33
    x = (x * 0xC4CEB9FE1A85EC53) & MASK64
    x ^= x >> 33
    return x


def _fmix64(x: np.ndarray) -> np.ndarray:
    """MurmurHash3 64-bit finalizer, element-wise on a uint64 array"""
    with np.errstate(over="ignore"):
        x = x ^ (x >> _S33)
        x = x * _C1
        x = x ^ (x >> _S33)
        x = x * _C2
        x = x ^ (x >> _S33)
    return x


def derive_seed(seed: int, role: int) -> int:
    return (int(seed) ^ role) & MASK64


def hash64(key, seed: int):
    """
    Seeded 64-bit avalanche hash.

    Args:
        key: unsigned 64-bit integer or array of them
        seed: 64-bit seed

    Returns:
        int for a scalar key, uint64 ndarray otherwise
    """
    mixed = np.uint64(_fmix64_int((int(seed) + GOLDEN64) & MASK64))
    keys = np.asarray(key, dtype=np.uint64)
    out = _fmix64(np.atleast_1d(keys) ^ mixed)
    if keys.ndim == 0:
        return int(out[0])
    return out.reshape(keys.shape)


def fingerprint_dtype(bits_per_entry: int):
    return {8: np.uint8, 16: np.uint16, 32: np.uint32}[bits_per_entry]


@dataclass(frozen=True)
class FilterParams:
    arity: int
    bits_per_entry: int
    segment_length: int
    segment_count: int
    array_length: int
    seed: int
    key_count: int
    layout: str = LAYOUT_FUSE

    def __post_init__(self):
        if self.arity not in SUPPORTED_ARITY:
            raise ValueError(f"Unsupported arity {self.arity}")
        if self.bits_per_entry not in SUPPORTED_BPE:
            raise ValueError(f"Unsupported bits per entry {self.bits_per_entry}")
        if self.layout not in LAYOUT_CODES:
            raise ValueError(f"Unknown filter layout '{self.layout}'")
        if self.segment_length <= 0 or self.segment_count < self.arity:
            raise ValueError("Segment layout cannot hold one key per window")
        if self.array_length != self.segment_length * self.segment_count:
            raise ValueError("array_length must equal segment_length * segment_count")
        if self.layout == LAYOUT_FUSE and self.segment_length & (self.segment_length - 1):
            raise ValueError("Fuse segment length must be a power of two")
        if self.layout == LAYOUT_XOR and self.segment_count != self.arity:
            raise ValueError("XOR layout uses exactly one block per hash")

    @property
    def payload_bytes(self) -> int:
        return self.array_length * self.bits_per_entry // 8

    def with_seed(self, seed: int) -> "FilterParams":
        return FilterParams(self.arity, self.bits_per_entry, self.segment_length,
                            self.segment_count, self.array_length, seed & MASK64,
                            self.key_count, self.layout)


@dataclass(frozen=True, eq=False)
class FuseFilter:
    params: FilterParams
    fingerprints: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, FuseFilter):
            return NotImplemented
        return (self.params == other.params
                and self.fingerprints.dtype == other.fingerprints.dtype
                and np.array_equal(self.fingerprints, other.fingerprints))

    def __contains__(self, key):
        return bool(contains(self, key))

    @property
    def bits_per_key(self) -> float:
        """Total fingerprint bits divided by the number of inserted keys"""
        if self.params.key_count == 0:
            return math.inf
        return self.params.array_length * self.params.bits_per_entry / self.params.key_count


# ---------------------------------------------------------------------------
# Sizing
# ---------------------------------------------------------------------------

def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def fuse_sizing(key_count: int, arity: int):
    """
    Segment length and segment count for a binary fuse filter.

    Constants follow the binary fuse filter reference construction;
    the overhead factor floors are 1.125 (3-wise) and 1.075 (4-wise).

    Returns:
        (segment_length, segment_count)
    """
    n = key_count
    if n < 2 * arity:
        # degenerate layout: one start position, a window per hash
        segment_length = max(MIN_SEGMENT_LENGTH, _next_pow2(max(n, 1)))
        return segment_length, arity

    if arity == 3:
        segment_length = 1 << int(math.floor(math.log(n) / math.log(3.33) + 2.25))
        factor = max(1.125, 0.875 + 0.25 * math.log(1_000_000) / math.log(n))
    else:
        segment_length = 1 << int(math.floor(math.log(n) / math.log(2.91) - 0.5))
        factor = max(1.075, 0.77 + 0.305 * math.log(600_000) / math.log(n))
    segment_length = min(max(segment_length, MIN_SEGMENT_LENGTH), MAX_SEGMENT_LENGTH)

    capacity = int(math.ceil(n * factor))
    inner = max(1, -(-capacity // segment_length) - (arity - 1))
    return segment_length, inner + arity - 1


def xor_sizing(key_count: int):
    """Block length for a 3-wise XOR filter (1.23 n + 32 slots, three blocks)"""
    capacity = int(math.floor(1.23 * key_count)) + 32
    return -(-capacity // 3)


def make_params(key_count: int, bits_per_entry: int = DEFAULT_BITS_PER_ENTRY,
                arity: int = DEFAULT_ARITY, seed: int = 0,
                layout: str = LAYOUT_FUSE) -> FilterParams:
    if layout == LAYOUT_XOR:
        block = xor_sizing(key_count)
        return FilterParams(3, bits_per_entry, block, 3, 3 * block, seed & MASK64,
                            key_count, LAYOUT_XOR)
    segment_length, segment_count = fuse_sizing(key_count, arity)
    return FilterParams(arity, bits_per_entry, segment_length, segment_count,
                        segment_length * segment_count, seed & MASK64, key_count,
                        LAYOUT_FUSE)


# ---------------------------------------------------------------------------
# Fingerprints and locations
# ---------------------------------------------------------------------------

def fingerprint(key, params: FilterParams):
    """n-bit fingerprint of a key; 0 is remapped to 1"""
    h = hash64(key, derive_seed(params.seed, ROLE_FINGERPRINT))
    width_mask = (1 << params.bits_per_entry) - 1
    dtype = fingerprint_dtype(params.bits_per_entry)
    if isinstance(h, int):
        return (h & width_mask) or 1
    f = (h & np.uint64(width_mask)).astype(dtype)
    f[f == 0] = 1
    return f


def _reduce(h: np.ndarray, bound: int) -> np.ndarray:
    # maps the upper 32 bits onto [0, bound) without a modulo
    return ((h >> _S32) * np.uint64(bound)) >> _S32


def _location_matrix(keys: np.ndarray, params: FilterParams) -> np.ndarray:
    h = hash64(keys, derive_seed(params.seed, ROLE_LOCATION))
    offset_seed = derive_seed(params.seed, ROLE_OFFSET)
    cols = []
    if params.layout == LAYOUT_XOR:
        block = params.segment_length
        for j in range(params.arity):
            hj = hash64(h, offset_seed + j)
            cols.append(np.uint64(j * block) + _reduce(hj, block))
    else:
        span = params.segment_count - params.arity + 1
        start = _reduce(h, span)
        slot_mask = np.uint64(params.segment_length - 1)
        seg_len = np.uint64(params.segment_length)
        for j in range(params.arity):
            hj = hash64(h, offset_seed + j)
            cols.append((start + np.uint64(j)) * seg_len + (hj & slot_mask))
    return np.stack(cols, axis=-1).astype(np.int64)


def locations(key, params: FilterParams):
    """
    The `arity` array slots probed for a key.

    Args:
        key: integer key or array of keys
        params: filter parameters

    Returns:
        list of ints for a scalar key, (n, arity) int64 array otherwise
    """
    keys = np.asarray(key, dtype=np.uint64)
    locs = _location_matrix(np.atleast_1d(keys), params)
    if keys.ndim == 0:
        return [int(v) for v in locs[0]]
    return locs


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _as_key_array(keys) -> np.ndarray:
    if isinstance(keys, (set, frozenset)):
        keys = sorted(keys)
    arr = np.asarray(keys, dtype=np.uint64).ravel()
    if np.unique(arr).size != arr.size:
        raise DuplicateKeys(f"{arr.size - np.unique(arr).size} duplicate keys in filter input")
    return arr


def _peel(keys: np.ndarray, params: FilterParams) -> Optional[np.ndarray]:
    """
    Build the fingerprint array by peeling, or return None when the
    hypergraph has a non-empty core.

    Slots referenced by exactly one live key are peeled in batches; each
    batch is then back-substituted in reverse order.
    """
    n = keys.size
    arity = params.arity
    size = params.array_length
    locs = _location_matrix(keys, params)
    fps = fingerprint(keys, params)

    flat = locs.ravel()
    count = np.bincount(flat, minlength=size)
    owner = np.zeros(size, dtype=np.int64)
    np.bitwise_xor.at(owner, flat, np.repeat(np.arange(n, dtype=np.int64), arity))

    batches = []
    peeled = 0
    candidates = np.flatnonzero(count == 1)
    while candidates.size:
        singles = candidates[count[candidates] == 1]
        if singles.size == 0:
            break
        ids, first = np.unique(owner[singles], return_index=True)
        batches.append((ids, singles[first]))
        peeled += ids.size
        touched = locs[ids].ravel()
        np.subtract.at(count, touched, 1)
        np.bitwise_xor.at(owner, touched, np.repeat(ids, arity))
        candidates = np.unique(touched)

    if peeled != n:
        return None

    table = np.zeros(size, dtype=fingerprint_dtype(params.bits_per_entry))
    for ids, slots in reversed(batches):
        values = fps[ids].copy()
        for j in range(arity):
            values ^= table[locs[ids, j]]
        table[slots] = values
    return table


def build_filter(keys, bits_per_entry: int = DEFAULT_BITS_PER_ENTRY,
                 arity: int = DEFAULT_ARITY, seed: int = 0,
                 layout: str = LAYOUT_FUSE, max_retries: int = MAX_RETRIES) -> FuseFilter:
    """
    Construct a static filter over a set of integer keys.

    Args:
        keys: distinct unsigned 64-bit keys (set, list or array)
        bits_per_entry: fingerprint width, one of 8/16/32
        arity: hashes per key for the fuse layout (3 or 4)
        seed: public hashing seed
        layout: 'fuse' or 'xor'
        max_retries: reseeding attempts before giving up

    Returns:
        FuseFilter in which every key is a member

    Raises:
        DuplicateKeys: repeated keys in the input
        ConstructionFailed: peeling failed on every attempt
    """
    key_array = _as_key_array(keys)
    params = make_params(key_array.size, bits_per_entry, arity, seed, layout)

    attempt_seed = params.seed
    for attempt in range(max_retries + 1):
        if attempt:
            attempt_seed = hash64(attempt, derive_seed(params.seed, ROLE_RESEED))
            logger.debug(f"Filter peeling failed for {key_array.size} keys, retry {attempt} with reseed")
        trial = params.with_seed(attempt_seed)
        table = _peel(key_array, trial)
        if table is not None:
            table.flags.writeable = False
            return FuseFilter(trial, table)

    raise ConstructionFailed(
        f"Could not build a {layout} filter over {key_array.size} keys after {max_retries} retries")


def build_xor_filter(keys, bits_per_entry: int = DEFAULT_BITS_PER_ENTRY, seed: int = 0,
                     max_retries: int = MAX_RETRIES) -> FuseFilter:
    return build_filter(keys, bits_per_entry, 3, seed, LAYOUT_XOR, max_retries)


def contains(filter: FuseFilter, key):
    """
    Membership check: XOR of the probed slots equals the key's fingerprint.

    Returns:
        bool for a scalar key, boolean ndarray otherwise
    """
    params = filter.params
    keys = np.asarray(key, dtype=np.uint64)
    flat_keys = np.atleast_1d(keys)
    locs = _location_matrix(flat_keys, params)
    acc = filter.fingerprints[locs[:, 0]].copy()
    for j in range(1, params.arity):
        acc ^= filter.fingerprints[locs[:, j]]
    hits = acc == fingerprint(flat_keys, params)
    if keys.ndim == 0:
        return bool(hits[0])
    return hits.reshape(keys.shape)


def contains_xor(filter: FuseFilter, key):
    if filter.params.layout != LAYOUT_XOR:
        raise ValueError("contains_xor expects a filter built with the XOR layout")
    return contains(filter, key)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def pack_params(params: FilterParams) -> bytes:
    """Filter header without its magic (embedded in update containers)"""
    return PARAMS_STRUCT.pack(FILTER_VERSION, params.arity, params.bits_per_entry,
                              LAYOUT_CODES[params.layout], params.seed, params.key_count,
                              params.array_length, params.segment_length,
                              params.segment_count)


def unpack_params(buf: bytes, offset: int = 0) -> FilterParams:
    if len(buf) - offset < PARAMS_STRUCT.size:
        raise TruncatedPayload("Filter header is truncated")
    (version, arity, bpe, layout_code, seed, key_count, array_length,
     segment_length, segment_count) = PARAMS_STRUCT.unpack_from(buf, offset)
    if version != FILTER_VERSION:
        raise VersionMismatch(f"Filter header version {version}, expected {FILTER_VERSION}")
    layouts = {code: name for name, code in LAYOUT_CODES.items()}
    if layout_code not in layouts:
        raise MalformedHeader(f"Unknown filter layout code {layout_code}")
    try:
        return FilterParams(arity, bpe, segment_length, segment_count, array_length,
                            seed, key_count, layouts[layout_code])
    except ValueError as e:
        raise MalformedHeader(f"Invalid filter header: {str(e)}") from e


def fingerprint_bytes(filter: FuseFilter) -> bytes:
    width = filter.params.bits_per_entry // 8
    return filter.fingerprints.astype(f"<u{width}").tobytes()


def fingerprints_from_bytes(payload: bytes, params: FilterParams) -> np.ndarray:
    width = params.bits_per_entry // 8
    table = np.frombuffer(payload, dtype=f"<u{width}").astype(fingerprint_dtype(params.bits_per_entry))
    table.flags.writeable = False
    return table


def serialize_filter(filter: FuseFilter) -> bytes:
    return FILTER_MAGIC + pack_params(filter.params) + fingerprint_bytes(filter)


def deserialize_filter(data: bytes) -> FuseFilter:
    """
    Inverse of serialize_filter.

    Raises:
        MalformedHeader: bad magic, impossible parameters or trailing bytes
        VersionMismatch: unknown format version
        TruncatedPayload: header or fingerprint payload cut short
    """
    if data[:len(FILTER_MAGIC)] != FILTER_MAGIC:
        raise MalformedHeader("Missing DMF1 magic")
    params = unpack_params(data, len(FILTER_MAGIC))
    payload = data[FILTER_HEADER_SIZE:]
    if len(payload) < params.payload_bytes:
        raise TruncatedPayload(
            f"Fingerprint payload has {len(payload)} bytes, header announces {params.payload_bytes}")
    if len(payload) > params.payload_bytes:
        raise MalformedHeader(f"{len(payload) - params.payload_bytes} trailing bytes after payload")
    return FuseFilter(params, fingerprints_from_bytes(payload, params))
