import math

import numpy as np
import pytest
from scipy import stats

from utils.codec import (
    DENSE_HEADER_SIZE,
    UPDATE_HEADER_SIZE,
    BinaryMask,
    DeltaSet,
    DenseUpdate,
    EncodedUpdate,
    FilterSpec,
    ProbabilityMask,
    bits_per_parameter,
    decode_dense,
    decode_update,
    delta_indices,
    encode_dense,
    encode_update,
    fingerprint_payload,
    kl_bernoulli,
    rank_random,
    rank_topk,
    read_update,
    reconstruct_mask,
    retained_count,
    sample_mask,
    uniform_stream,
)
from utils.errors import (
    DecompressFailure,
    IndexOutOfRange,
    LengthMismatch,
    MalformedHeader,
    TruncatedPayload,
    VersionMismatch,
    WireFormatError,
)
from utils.filters import make_params


class TestSampleMask:

    def test_degenerate_probabilities(self):
        assert sample_mask(np.zeros(100), seed=1) == BinaryMask.zeros(100)
        assert sample_mask(np.ones(100), seed=1) == BinaryMask.ones(100)

    def test_half_probability_popcount(self):
        mask = sample_mask(np.full(100_000, 0.5), seed=3, round=2)
        assert 0.494 <= mask.popcount() / mask.d <= 0.506

    def test_shared_seed_gives_identical_masks(self, rng):
        theta = ProbabilityMask.from_probabilities(rng.random(5000))
        assert sample_mask(theta, seed=42, round=7) == sample_mask(theta, seed=42, round=7)

    def test_round_changes_mask(self):
        theta = np.full(5000, 0.5)
        assert sample_mask(theta, seed=42, round=1) != sample_mask(theta, seed=42, round=2)

    def test_stream_is_uniform(self):
        u = uniform_stream(seed=9, round=3, d=100_000)
        assert np.all((u >= 0.0) & (u < 1.0))
        counts = np.bincount((u * 20).astype(np.int64), minlength=20)
        assert stats.chisquare(counts).pvalue > 1e-4

    def test_unbiased_over_seeds(self):
        grid = np.array([0.05, 0.2, 0.5, 0.8, 0.95])
        trials = 10_000
        totals = np.zeros(grid.size)
        for seed in range(trials):
            totals += sample_mask(grid, seed=seed).bits
        sigma = np.sqrt(grid * (1 - grid) / trials)
        assert np.all(np.abs(totals / trials - grid) <= 5 * sigma)


class TestDeltaIndices:

    def test_identical(self):
        m = BinaryMask([0, 1, 1, 0])
        assert delta_indices(m, m).size == 0

    def test_xor(self):
        diff = delta_indices(BinaryMask([0, 1, 0, 1]), BinaryMask([1, 1, 0, 0]))
        np.testing.assert_array_equal(diff, [0, 3])

    def test_complement(self):
        m = BinaryMask(np.arange(10) % 2 == 0)
        np.testing.assert_array_equal(delta_indices(m, BinaryMask(~m.bits)), np.arange(10))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            delta_indices(BinaryMask.ones(3), BinaryMask.ones(4))


class TestKL:

    def test_identity(self):
        assert kl_bernoulli(0.3, 0.3) == 0.0

    def test_closed_form(self):
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert kl_bernoulli(0.5, 0.25) == pytest.approx(expected, abs=1e-12)
        assert kl_bernoulli(0.5, 0.25) == pytest.approx(0.14384, abs=1e-5)

    def test_asymmetry(self):
        assert kl_bernoulli(0.9, 0.5) != pytest.approx(kl_bernoulli(0.5, 0.9))
        # this particular pair is symmetric
        assert kl_bernoulli(0.9, 0.1) == pytest.approx(kl_bernoulli(0.1, 0.9))
        assert kl_bernoulli(0.9, 0.1) == pytest.approx(1.7578, abs=1e-4)

    def test_boundaries_are_clamped(self):
        values = kl_bernoulli(np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
        assert np.all(np.isfinite(values))
        assert values[2] == 0.0

    def test_non_negative(self, rng):
        p, q = rng.random(10_000), rng.random(10_000)
        assert np.all(kl_bernoulli(p, q) >= 0)


class TestRankTopK:

    def test_full_kappa_keeps_everything(self, rng):
        delta = np.array([2, 5, 9, 11])
        ranked = rank_topk(delta, rng.random(12), rng.random(12), 1.0)
        np.testing.assert_array_equal(ranked.indices, delta)

    def test_exact_count(self, rng):
        delta = np.arange(0, 20, 2)
        ranked = rank_topk(delta, rng.random(20), rng.random(20), 0.8)
        assert len(ranked) == 8

    def test_empty(self):
        ranked = rank_topk([], np.zeros(4), np.zeros(4), 0.5)
        assert len(ranked) == 0

    def test_ceil_without_float_noise(self):
        assert retained_count(30, 0.1) == 3
        assert retained_count(10, 0.85) == 9
        assert retained_count(1, 0.01) == 1
        with pytest.raises(ValueError):
            retained_count(10, 0.0)

    def test_ties_by_ascending_index(self):
        theta_c = np.full(10, 0.7)
        theta_s = np.full(10, 0.4)
        ranked = rank_topk([8, 1, 5, 3], theta_c, theta_s, 0.5)
        np.testing.assert_array_equal(ranked.indices, [1, 3])

    def test_matches_full_sort(self, rng):
        for _ in range(300):
            d = int(rng.integers(1, 40))
            size = int(rng.integers(0, min(d, 20) + 1))
            delta = np.sort(rng.choice(d, size=size, replace=False))
            theta_c, theta_s = rng.random(d), rng.random(d)
            # coarse values force ties
            if rng.random() < 0.3:
                theta_c = np.round(theta_c, 1)
                theta_s = np.round(theta_s, 1)
            kappa = float(rng.uniform(0.05, 1.0))
            weights = np.atleast_1d(kl_bernoulli(theta_c[delta], theta_s[delta])) if size else np.empty(0)
            order = sorted(range(size), key=lambda i: (-weights[i], delta[i]))
            keep = math.ceil(round(kappa * size, 9))
            expected = np.sort(delta[order[:keep]]) if size else np.empty(0, dtype=np.int64)
            np.testing.assert_array_equal(rank_topk(delta, theta_c, theta_s, kappa).indices, expected)

    def test_ranked_indices_order(self):
        delta = DeltaSet([1, 4, 6], [0.1, 0.9, 0.1])
        np.testing.assert_array_equal(delta.ranked_indices(), [4, 1, 6])


class TestRankRandom:

    def test_same_size_as_topk(self, rng):
        delta = np.arange(0, 50, 3)
        theta_c, theta_s = rng.random(50), rng.random(50)
        for kappa in (0.2, 0.55, 1.0):
            assert len(rank_random(delta, theta_c, theta_s, kappa, seed=1)) == \
                len(rank_topk(delta, theta_c, theta_s, kappa))

    def test_subset_and_seeded(self, rng):
        delta = np.arange(0, 100, 7)
        theta = rng.random(100)
        a = rank_random(delta, theta, 1 - theta, 0.5, seed=4)
        b = rank_random(delta, theta, 1 - theta, 0.5, seed=4)
        np.testing.assert_array_equal(a.indices, b.indices)
        assert set(a.indices.tolist()) <= set(delta.tolist())


class TestEncodeDecode:

    def test_exact_small(self):
        update = encode_update([0, 3], d=4, spec=FilterSpec(bits_per_entry=32), seed=1)
        np.testing.assert_array_equal(decode_update(update), [0, 3])

    def test_empty_delta(self):
        update = encode_update(DeltaSet([]), d=1000, seed=2)
        assert decode_update(update).size == 0
        assert update.encoded_bytes == UPDATE_HEADER_SIZE + len(update.payload)

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            encode_update([0, 10], d=10)

    def test_wire_round_trip(self, rng):
        delta = np.sort(rng.choice(5000, size=300, replace=False))
        update = encode_update(delta, d=5000, spec=FilterSpec(16, 3), seed=8, round=12)
        restored = read_update(update.to_bytes())
        assert restored == update
        assert restored.round == 12

    def test_superset_and_false_positive_count(self, rng):
        spurious = 0
        expected = 0.0
        variance = 0.0
        p = 2.0 ** -8
        for i in range(150):
            d = int(rng.integers(10, 20_000))
            size = int(rng.integers(0, d // 4 + 1))
            delta = np.sort(rng.choice(d, size=size, replace=False))
            decoded = decode_update(encode_update(delta, d, seed=i, round=i))
            assert np.all(np.isin(delta, decoded))
            spurious += decoded.size - size
            expected += (d - size) * p
            variance += (d - size) * p * (1 - p)
        assert abs(spurious - expected) <= 5 * math.sqrt(variance)

    def test_xor_layout_recorded(self, rng):
        update = encode_update(np.arange(0, 900, 9), d=1000, spec=FilterSpec(layout="xor"), seed=3)
        wire = update.to_bytes()
        # prefix (17 bytes) then version, arity, bits per entry, layout
        assert wire[17 + 3] == 1
        np.testing.assert_array_equal(np.isin(np.arange(0, 900, 9), decode_update(read_update(wire))), True)

    def test_bitrate_monotone_in_width(self, rng):
        delta = np.sort(rng.choice(100_000, size=2000, replace=False))
        sizes = [encode_update(delta, 100_000, FilterSpec(bpe), seed=1).encoded_bytes for bpe in (8, 16, 32)]
        assert sizes[0] <= sizes[1] <= sizes[2]

    @pytest.mark.slow
    def test_million_parameter_update(self, rng):
        d = 1_000_000
        delta = np.sort(rng.choice(d, size=10_000, replace=False))
        update = encode_update(delta, d, FilterSpec(8), seed=5)
        assert bits_per_parameter(update, d) <= 0.1
        decoded = decode_update(update)
        assert np.all(np.isin(delta, decoded))
        assert 3000 <= decoded.size - delta.size <= 4800

    @pytest.mark.slow
    def test_thousand_instances(self, rng):
        p = 2.0 ** -8
        spurious, expected, variance = 0, 0.0, 0.0
        for i in range(1000):
            d = int(rng.integers(1, 100_001))
            size = int(rng.integers(0, min(d, 5000) + 1))
            delta = np.sort(rng.choice(d, size=size, replace=False))
            decoded = decode_update(encode_update(delta, d, seed=i))
            assert np.all(np.isin(delta, decoded))
            spurious += decoded.size - size
            expected += (d - size) * p
            variance += (d - size) * p * (1 - p)
        assert abs(spurious - expected) <= 5 * math.sqrt(variance)


class TestWireErrors:

    def _wire(self):
        return encode_update([1, 5, 9, 200], d=500, seed=3).to_bytes()

    def test_bad_magic(self):
        with pytest.raises(MalformedHeader):
            read_update(b"NOPE" + self._wire()[4:])

    def test_version(self):
        wire = bytearray(self._wire())
        wire[4] = 2
        with pytest.raises(VersionMismatch):
            read_update(bytes(wire))

    def test_truncated(self):
        with pytest.raises(TruncatedPayload):
            read_update(self._wire()[:-1])
        with pytest.raises(TruncatedPayload):
            read_update(self._wire()[:20])

    def test_zero_length_mask(self):
        update = read_update(self._wire())
        empty = EncodedUpdate(update.round, 0, update.params, update.payload)
        with pytest.raises(MalformedHeader):
            decode_update(empty)

    def test_tampered_payload_never_crashes(self, rng):
        wire = self._wire()
        for _ in range(50):
            tampered = bytearray(wire)
            position = int(rng.integers(UPDATE_HEADER_SIZE, len(wire)))
            tampered[position] ^= int(rng.integers(1, 256))
            try:
                decoded = decode_update(read_update(bytes(tampered)))
            except DecompressFailure:
                continue
            assert decoded.dtype.kind == "i"

    @pytest.mark.parametrize("value", [0x00, 0x7F, 0xFF])
    def test_tampered_header_never_crashes(self, value):
        wire = self._wire()
        for position in range(UPDATE_HEADER_SIZE):
            tampered = bytearray(wire)
            tampered[position] = value
            try:
                decoded = decode_update(read_update(bytes(tampered)))
            except WireFormatError:
                continue
            assert decoded.dtype.kind == "i"
            assert np.all(np.diff(decoded) > 0)

    def test_oversized_mask_length(self):
        wire = bytearray(self._wire())
        wire[16] = 0x7F
        with pytest.raises(MalformedHeader):
            read_update(bytes(wire))
        dense = bytearray(encode_dense(BinaryMask.ones(8)).to_bytes())
        dense[16] = 0x7F
        with pytest.raises(MalformedHeader):
            read_update(bytes(dense))

    def test_more_keys_than_positions(self):
        update = read_update(self._wire())
        with pytest.raises(MalformedHeader):
            read_update(EncodedUpdate(update.round, 3, update.params, update.payload).to_bytes())

    def test_wire_errors_share_a_base(self):
        assert issubclass(DecompressFailure, WireFormatError)
        assert issubclass(TruncatedPayload, ValueError)


class TestReconstruct:

    def test_identity(self):
        m = BinaryMask([1, 0, 1])
        assert reconstruct_mask(m, []) == m

    def test_flip(self):
        result = reconstruct_mask(BinaryMask([0, 1, 0, 1]), [0, 3])
        np.testing.assert_array_equal(result.bits, [True, True, False, False])

    def test_involution(self, rng):
        m = BinaryMask(rng.random(1000) < 0.5)
        flips = rng.choice(1000, size=100, replace=False)
        assert reconstruct_mask(reconstruct_mask(m, flips), flips) == m

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            reconstruct_mask(BinaryMask.ones(4), [4])

    def test_protocol_round_trip(self, rng):
        d = 3000
        m_server = sample_mask(np.full(d, 0.5), seed=1, round=1)
        m_client = sample_mask(rng.random(d), seed=2, round=1)
        delta = delta_indices(m_server, m_client)
        update = encode_update(delta, d, FilterSpec(32), seed=6)
        assert reconstruct_mask(m_server, decode_update(update)) == m_client


class TestBitrate:

    def test_arithmetic(self):
        update = EncodedUpdate(0, 100_000, make_params(0), b"\x00" * (1250 - UPDATE_HEADER_SIZE))
        assert update.encoded_bytes == 1250
        assert bits_per_parameter(update) == pytest.approx(0.1)

    def test_dense_baseline(self, rng):
        mask = BinaryMask(rng.random(800) < 0.5)
        update = encode_dense(mask, round=3)
        assert bits_per_parameter(update) == pytest.approx(1.0 + 8 * DENSE_HEADER_SIZE / 800)
        restored = read_update(update.to_bytes())
        assert isinstance(restored, DenseUpdate)
        assert decode_dense(restored) == mask

    def test_dense_odd_length(self):
        mask = BinaryMask([1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 1])
        assert decode_dense(DenseUpdate.from_bytes(encode_dense(mask).to_bytes())) == mask

    def test_zero_parameters(self):
        with pytest.raises(ValueError):
            bits_per_parameter(encode_dense(BinaryMask.ones(8)), d=0)

    def test_fingerprint_payload_size(self, rng):
        update = encode_update(np.arange(100), d=1000, spec=FilterSpec(16), seed=1)
        assert len(fingerprint_payload(update)) == update.params.payload_bytes
