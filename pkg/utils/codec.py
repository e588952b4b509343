"""
Mask update codec

Client side: sample the shared server mask, catalogue where the client's
mask differs, keep the top-κ differences ranked by Bernoulli KL divergence,
insert them into a probabilistic filter and DEFLATE the fingerprint array.

Server side: inflate, rebuild the filter, sweep membership over every
position and bit-flip the shared server mask.
"""

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from utils.errors import (
    DecompressFailure,
    IndexOutOfRange,
    LengthMismatch,
    MalformedHeader,
    TruncatedPayload,
    VersionMismatch,
)
from utils.filters import (
    DEFAULT_ARITY,
    DEFAULT_BITS_PER_ENTRY,
    LAYOUT_FUSE,
    PARAMS_STRUCT,
    FilterParams,
    FuseFilter,
    build_filter,
    contains,
    derive_seed,
    fingerprint_bytes,
    fingerprints_from_bytes,
    hash64,
    pack_params,
    unpack_params,
)

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-6
ROLE_SAMPLE = 0x2D358DCCAA6C78A5

UPDATE_MAGIC = b"DMU1"
DENSE_MAGIC = b"DMD1"
UPDATE_VERSION = 1
_UPDATE_PREFIX = struct.Struct("<4sBIQ")   # magic, version, round, d
_COMPRESSED_LEN = struct.Struct("<I")
UPDATE_HEADER_SIZE = _UPDATE_PREFIX.size + PARAMS_STRUCT.size + _COMPRESSED_LEN.size
DENSE_HEADER_SIZE = _UPDATE_PREFIX.size
# largest mask a container may announce; decode sweeps it in chunks
MAX_MASK_LENGTH = 1 << 28
DECODE_CHUNK = 1 << 20


# ---------------------------------------------------------------------------
# Mask types
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p, eps: float = KL_EPSILON):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool).ravel()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def d(self) -> int:
        return int(self.bits.size)

    def __len__(self):
        return self.d

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    @classmethod
    def ones(cls, d: int) -> "BinaryMask":
        return cls(np.ones(d, dtype=bool))

    @classmethod
    def zeros(cls, d: int) -> "BinaryMask":
        return cls(np.zeros(d, dtype=bool))


@dataclass(frozen=True, eq=False)
class ProbabilityMask:
    """Unbounded scores s with θ = sigmoid(s)"""
    scores: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).ravel()
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)

    @property
    def d(self) -> int:
        return int(self.scores.size)

    @property
    def probabilities(self) -> np.ndarray:
        return sigmoid(self.scores)

    @classmethod
    def from_probabilities(cls, theta, eps: float = KL_EPSILON) -> "ProbabilityMask":
        return cls(logit(theta, eps))

    @classmethod
    def uniform(cls, d: int, theta0: float = 0.5) -> "ProbabilityMask":
        return cls.from_probabilities(np.full(d, theta0))


def _theta(mask) -> np.ndarray:
    if isinstance(mask, ProbabilityMask):
        return mask.probabilities
    return np.asarray(mask, dtype=np.float64).ravel()


@dataclass(frozen=True, eq=False)
class DeltaSet:
    """Retained delta positions (ascending) and their KL weights"""
    indices: np.ndarray
    kl_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64).ravel()
        weights = (np.zeros(indices.size) if self.kl_weights is None
                   else np.asarray(self.kl_weights, dtype=np.float64).ravel())
        if indices.size != weights.size:
            raise LengthMismatch(f"{indices.size} indices but {weights.size} KL weights")
        if indices.size > 1 and np.any(np.diff(indices) <= 0):
            raise ValueError("DeltaSet indices must be strictly increasing")
        if indices.size and indices[0] < 0:
            raise IndexOutOfRange("DeltaSet indices must be non-negative")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "kl_weights", weights)

    def __len__(self):
        return int(self.indices.size)

    def ranked_indices(self) -> np.ndarray:
        """Indices by KL descending, ties by ascending index"""
        return self.indices[np.lexsort((self.indices, -self.kl_weights))]


# ---------------------------------------------------------------------------
# Client-side delta extraction
# ---------------------------------------------------------------------------

def round_seed(seed: int, round: int) -> int:
    """Public per-round sampling key derived from the shared seed"""
    return hash64(int(round), derive_seed(seed, ROLE_SAMPLE))


def uniform_stream(seed: int, round: int, d: int) -> np.ndarray:
    """Counter-based uniforms in [0, 1) keyed by (seed, round, i)"""
    h = hash64(np.arange(d, dtype=np.uint64), round_seed(seed, round))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def sample_mask(theta, seed: int, round: int = 0) -> BinaryMask:
    """
    Deterministic Bernoulli sample of a probability mask.

    Every party holding the same (θ, seed, round) obtains the same mask.
    """
    probs = _theta(theta)
    return BinaryMask(uniform_stream(seed, round, probs.size) < probs)


def delta_indices(m_server: BinaryMask, m_client: BinaryMask) -> np.ndarray:
    if m_server.d != m_client.d:
        raise LengthMismatch(f"Server mask has {m_server.d} entries, client mask {m_client.d}")
    return np.flatnonzero(m_server.bits != m_client.bits)


def kl_bernoulli(p, q, eps: float = KL_EPSILON):
    """KL(Bern(p) || Bern(q)), element-wise, inputs clamped to [eps, 1 - eps]"""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    q = np.clip(np.asarray(q, dtype=np.float64), eps, 1.0 - eps)
    kl = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def retained_count(size: int, kappa: float) -> int:
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    # rounding guards against 0.1 * 30 = 3.0000000000000004
    return min(size, int(math.ceil(round(kappa * size, 9))))


def rank_topk(delta, theta_client, theta_server, kappa: float) -> DeltaSet:
    """
    Keep the ceil(κ·|Δ|) delta positions with the largest Bernoulli KL
    divergence between client and server probabilities.
    """
    delta = np.unique(np.asarray(delta, dtype=np.int64))
    keep = retained_count(delta.size, kappa)
    if keep == 0:
        return DeltaSet(np.empty(0, dtype=np.int64), np.empty(0))
    weights = np.atleast_1d(kl_bernoulli(_theta(theta_client)[delta], _theta(theta_server)[delta]))
    # delta is ascending, so sorting the kept positions keeps indices ascending
    chosen = np.sort(np.lexsort((delta, -weights))[:keep])
    return DeltaSet(delta[chosen], weights[chosen])


def rank_random(delta, theta_client, theta_server, kappa: float, seed: int) -> DeltaSet:
    """Ablation: keep a uniformly random subset of the same size as rank_topk"""
    delta = np.unique(np.asarray(delta, dtype=np.int64))
    keep = retained_count(delta.size, kappa)
    if keep == 0:
        return DeltaSet(np.empty(0, dtype=np.int64), np.empty(0))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(delta.size, size=keep, replace=False))
    weights = np.atleast_1d(kl_bernoulli(_theta(theta_client)[delta[chosen]],
                                         _theta(theta_server)[delta[chosen]]))
    return DeltaSet(delta[chosen], weights)


# ---------------------------------------------------------------------------
# Wire containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterSpec:
    bits_per_entry: int = DEFAULT_BITS_PER_ENTRY
    arity: int = DEFAULT_ARITY
    layout: str = LAYOUT_FUSE


def _check_length(d: int, minimum: int):
    if not minimum <= d <= MAX_MASK_LENGTH:
        raise MalformedHeader(f"Mask length {d} outside [{minimum}, {MAX_MASK_LENGTH}]")


@dataclass(frozen=True)
class EncodedUpdate:
    round: int
    d: int
    params: FilterParams
    payload: bytes
    png_export: bool = False

    @property
    def header_bytes(self) -> int:
        return UPDATE_HEADER_SIZE

    @property
    def encoded_bytes(self) -> int:
        return UPDATE_HEADER_SIZE + len(self.payload)

    @property
    def encoded_bits(self) -> int:
        return 8 * self.encoded_bytes

    def to_bytes(self) -> bytes:
        return (_UPDATE_PREFIX.pack(UPDATE_MAGIC, UPDATE_VERSION, self.round, self.d)
                + pack_params(self.params)
                + _COMPRESSED_LEN.pack(len(self.payload))
                + self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedUpdate":
        if data[:4] != UPDATE_MAGIC:
            raise MalformedHeader("Missing DMU1 magic")
        if len(data) < UPDATE_HEADER_SIZE:
            raise TruncatedPayload(f"Update header needs {UPDATE_HEADER_SIZE} bytes, got {len(data)}")
        _, version, rnd, d = _UPDATE_PREFIX.unpack_from(data, 0)
        if version != UPDATE_VERSION:
            raise VersionMismatch(f"Update version {version}, expected {UPDATE_VERSION}")
        _check_length(d, minimum=1)
        params = unpack_params(data, _UPDATE_PREFIX.size)
        if params.key_count > d:
            raise MalformedHeader(f"Filter holds {params.key_count} keys but the mask has only {d} positions")
        (compressed_len,) = _COMPRESSED_LEN.unpack_from(data, _UPDATE_PREFIX.size + PARAMS_STRUCT.size)
        payload = data[UPDATE_HEADER_SIZE:]
        if len(payload) < compressed_len:
            raise TruncatedPayload(f"DEFLATE stream has {len(payload)} bytes, header announces {compressed_len}")
        if len(payload) > compressed_len:
            raise MalformedHeader(f"{len(payload) - compressed_len} trailing bytes after DEFLATE stream")
        return cls(rnd, d, params, bytes(payload))


@dataclass(frozen=True)
class DenseUpdate:
    """Raw packed binary mask, the 1 bpp reference transmission"""
    round: int
    d: int
    payload: bytes

    @property
    def header_bytes(self) -> int:
        return DENSE_HEADER_SIZE

    @property
    def encoded_bytes(self) -> int:
        return DENSE_HEADER_SIZE + len(self.payload)

    @property
    def encoded_bits(self) -> int:
        return 8 * self.encoded_bytes

    def to_bytes(self) -> bytes:
        return _UPDATE_PREFIX.pack(DENSE_MAGIC, UPDATE_VERSION, self.round, self.d) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "DenseUpdate":
        if data[:4] != DENSE_MAGIC:
            raise MalformedHeader("Missing DMD1 magic")
        if len(data) < DENSE_HEADER_SIZE:
            raise TruncatedPayload("Dense update header is truncated")
        _, version, rnd, d = _UPDATE_PREFIX.unpack_from(data, 0)
        if version != UPDATE_VERSION:
            raise VersionMismatch(f"Dense update version {version}, expected {UPDATE_VERSION}")
        _check_length(d, minimum=0)
        payload = data[DENSE_HEADER_SIZE:]
        expected = -(-d // 8)
        if len(payload) < expected:
            raise TruncatedPayload(f"Dense payload has {len(payload)} bytes, expected {expected}")
        if len(payload) > expected:
            raise MalformedHeader("Trailing bytes after dense payload")
        return cls(rnd, d, bytes(payload))


def read_update(data: bytes) -> Union[EncodedUpdate, DenseUpdate]:
    """Parse either container, dispatching on the magic bytes"""
    if data[:4] == DENSE_MAGIC:
        return DenseUpdate.from_bytes(data)
    return EncodedUpdate.from_bytes(data)


def _deflate(raw: bytes) -> bytes:
    compressor = zlib.compressobj(9, zlib.DEFLATED, -15)
    return compressor.compress(raw) + compressor.flush()


def _inflate(payload: bytes, expected: int) -> bytes:
    inflater = zlib.decompressobj(-15)
    try:
        raw = inflater.decompress(payload, expected + 1)
    except zlib.error as e:
        raise DecompressFailure(f"DEFLATE stream is corrupt: {str(e)}") from e
    if not inflater.eof or len(raw) != expected:
        raise DecompressFailure(
            f"DEFLATE stream inflated to {len(raw)} bytes, header announces {expected}")
    return raw


def encode_update(delta, d: int, spec: Optional[FilterSpec] = None, seed: int = 0,
                  round: int = 0, png_export: bool = False) -> EncodedUpdate:
    """
    Pack retained delta positions into a filter and DEFLATE its fingerprints.

    Args:
        delta: DeltaSet or iterable of positions in [0, d)
        d: maskable parameter count
        spec: filter width, arity and layout
        seed: public filter seed for this client and round
        round: federated round number written into the header

    Raises:
        IndexOutOfRange: a position is outside [0, d)
        ConstructionFailed: the filter could not be built
    """
    spec = spec or FilterSpec()
    indices = delta.indices if isinstance(delta, DeltaSet) else np.asarray(delta, dtype=np.int64).ravel()
    if indices.size and (indices.min() < 0 or indices.max() >= d):
        raise IndexOutOfRange(f"Delta positions must lie in [0, {d})")
    built = build_filter(indices.astype(np.uint64), spec.bits_per_entry, spec.arity, seed, spec.layout)
    raw = fingerprint_bytes(built)
    payload = _deflate(raw)
    logger.debug(f"Encoded {indices.size} delta positions: {len(raw)} fingerprint bytes -> {len(payload)} deflated")
    return EncodedUpdate(round, d, built.params, payload, png_export)


def fingerprint_payload(update: EncodedUpdate) -> bytes:
    """The inflated fingerprint array bytes of an update"""
    return _inflate(update.payload, update.params.payload_bytes)


def update_filter(update: EncodedUpdate) -> FuseFilter:
    return FuseFilter(update.params, fingerprints_from_bytes(fingerprint_payload(update), update.params))


def decode_update(update: EncodedUpdate) -> np.ndarray:
    """
    Membership sweep over all d positions.

    Returns:
        ascending positions that pass the filter (a superset of the encoded ones)
    """
    if update.d <= 0:
        raise MalformedHeader("Update announces an empty mask")
    if update.d > MAX_MASK_LENGTH:
        raise MalformedHeader(f"Update announces {update.d} positions, limit is {MAX_MASK_LENGTH}")
    built = update_filter(update)
    found = []
    for start in range(0, update.d, DECODE_CHUNK):
        positions = np.arange(start, min(start + DECODE_CHUNK, update.d), dtype=np.uint64)
        found.append(positions[contains(built, positions)])
    return np.concatenate(found).astype(np.int64)


def encode_dense(mask: BinaryMask, round: int = 0) -> DenseUpdate:
    return DenseUpdate(round, mask.d, np.packbits(mask.bits, bitorder="little").tobytes())


def decode_dense(update: DenseUpdate) -> BinaryMask:
    bits = np.unpackbits(np.frombuffer(update.payload, dtype=np.uint8), count=update.d, bitorder="little")
    return BinaryMask(bits.astype(bool))


def reconstruct_mask(m_server: BinaryMask, flips) -> BinaryMask:
    """The server mask with every listed position inverted"""
    flips = np.unique(np.asarray(flips, dtype=np.int64).ravel())
    if flips.size and (flips[0] < 0 or flips[-1] >= m_server.d):
        raise IndexOutOfRange(f"Flip positions must lie in [0, {m_server.d})")
    bits = m_server.bits.copy()
    bits[flips] ^= True
    return BinaryMask(bits)


def bits_per_parameter(update, d: Optional[int] = None) -> float:
    d = update.d if d is None else d
    if d <= 0:
        raise ValueError("Parameter count must be positive")
    return update.encoded_bits / d
