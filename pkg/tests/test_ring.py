"""Ring arithmetic: NTT roundtrips, schoolbook oracle, RNS bijection, samplers."""

import numpy as np
import pytest

from heplan.modmath import (NttTables, get_ntt_tables,
                            negacyclic_mul_schoolbook, mulmod_np)
from heplan.ring import (RingPoly, RnsPoly, ntt_forward, ntt_inverse,
                         poly_mul_mod, rns_merge, rns_signed, rns_split,
                         sample_error, sample_gaussian_rounded,
                         sample_ternary, sample_uniform)
from heplan.errors import ConstructionError, ParameterError
from heplan.params import find_ntt_primes


def _prime_for(n, bits=30):
    return find_ntt_primes(n, bits, count=1)[0]


def test_mulmod_exact_vs_python_int():
    # adversarial + random values at the largest supported modulus size
    rng = np.random.default_rng(7)
    for m in [(1 << 51) - 129, (1 << 50) + 549, 12289, (1 << 31) - 1]:
        # scan for a prime-ish odd modulus is unnecessary: exactness only
        # needs m odd and < 2^51
        if m % 2 == 0:
            m += 1
        inv_m = 1.0 / m
        a = rng.integers(0, m, size=2000, dtype=np.int64)
        b = rng.integers(0, m, size=2000, dtype=np.int64)
        a[:4] = [m - 1, m - 1, 0, 1]
        b[:4] = [m - 1, 1, m - 1, m - 1]
        got = mulmod_np(a, b, m, inv_m)
        want = [(int(x) * int(y)) % m for x, y in zip(a, b)]
        assert got.tolist() == want


def test_ntt_zero_poly_n8():
    q = _prime_for(8)
    z = RingPoly.zero(q, 8)
    assert np.all(ntt_forward(z).coeffs == 0)


def test_ntt_roundtrip_bit_exact_all_supported_degrees():
    rng = np.random.default_rng(1)
    for logn in range(8, 15):
        n = 1 << logn
        q = _prime_for(n, bits=40)
        p = sample_uniform(q, n, rng)
        back = ntt_inverse(ntt_forward(p))
        assert np.array_equal(back.coeffs, p.coeffs)


def test_ntt_roundtrip_max_value_coefficients():
    # overflow-safety fixture: all coefficients at q-1
    for bits in (30, 50):
        n = 256
        q = _prime_for(n, bits=bits)
        p = RingPoly(np.full(n, q - 1, dtype=np.int64), q, n)
        back = ntt_inverse(ntt_forward(p))
        assert np.array_equal(back.coeffs, p.coeffs)


def test_ntt_product_matches_schoolbook_n8():
    n, q = 8, _prime_for(8)
    a = RingPoly.from_signed([1, 1, 0, 0, 0, 0, 0, 0], q)
    b = RingPoly.from_signed([1, 1, 0, 0, 0, 0, 0, 0], q)
    c = poly_mul_mod(a, b)
    assert c.coeffs.tolist() == [1, 2, 1, 0, 0, 0, 0, 0]
    assert np.array_equal(
        c.coeffs, negacyclic_mul_schoolbook(a.coeffs, b.coeffs, q))


def test_negacyclic_wraparound_sign():
    n, q = 16, _prime_for(16)
    a = np.zeros(n, dtype=np.int64)
    a[n - 1] = 1  # x^(n-1)
    b = np.zeros(n, dtype=np.int64)
    b[1] = 1  # x
    c = poly_mul_mod(RingPoly(a, q, n), RingPoly(b, q, n))
    want = np.zeros(n, dtype=np.int64)
    want[0] = q - 1  # -1 mod q
    assert np.array_equal(c.coeffs, want)


def test_mul_identity():
    n, q = 64, _prime_for(64)
    rng = np.random.default_rng(3)
    one = RingPoly.from_signed([1] + [0] * (n - 1), q)
    b = sample_uniform(q, n, rng)
    assert np.array_equal(poly_mul_mod(one, b).coeffs, b.coeffs)


@pytest.mark.parametrize("n", [16, 64, 128])
def test_mul_matches_schoolbook_random(n):
    q = _prime_for(n)
    rng = np.random.default_rng(n)
    reps = 1000 if n <= 64 else 200
    for _ in range(reps):
        a = sample_uniform(q, n, rng)
        b = sample_uniform(q, n, rng)
        got = poly_mul_mod(a, b)
        want = negacyclic_mul_schoolbook(a.coeffs, b.coeffs, q)
        assert np.array_equal(got.coeffs, want)


def test_automorphism_matches_ntt_permutation():
    n = 64
    q = _prime_for(n)
    tab = get_ntt_tables(q, n)
    rng = np.random.default_rng(5)
    a = sample_uniform(q, n, rng)
    for g in (3, 9, 2 * n - 1, 5):
        direct = tab.forward(a.automorphism(g).coeffs)
        perm = tab.automorphism_perm(g)
        via_perm = tab.forward(a.coeffs)[perm]
        assert np.array_equal(direct, via_perm)


def test_ntt_tables_reject_bad_modulus():
    with pytest.raises(ConstructionError):
        NttTables(12289, 8192)  # 12289 != 1 mod 16384
    with pytest.raises(ConstructionError):
        NttTables((1 << 52) + 1, 64)  # too wide
    with pytest.raises(ConstructionError):
        NttTables(12289, 24)  # not a power of two


def test_ring_op_mismatch_raises():
    q1, q2 = _prime_for(32), _prime_for(64)
    a = RingPoly.zero(q1, 32)
    b = RingPoly.zero(q2, 64)
    with pytest.raises(ParameterError):
        a.add(b)
    with pytest.raises(ParameterError):
        poly_mul_mod(a, b)


# ---------------------------------------------------------------- RNS


def test_rns_zero_roundtrip():
    limbs = find_ntt_primes(16, 30, count=2)
    z = rns_split([0] * 16, limbs)
    assert all(np.all(l.coeffs == 0) for l in z.limbs)
    assert rns_merge(z) == [0] * 16


def test_rns_single_limb_identity():
    (m,) = find_ntt_primes(16, 30, count=1)
    vals = list(range(16))
    x = rns_split(vals, [m])
    assert rns_merge(x) == vals


def test_rns_roundtrip_100bit_coefficients():
    limbs = find_ntt_primes(32, 51, count=2)
    q = limbs[0] * limbs[1]
    assert q.bit_length() >= 100
    rng = np.random.default_rng(9)
    vals = [int(rng.integers(0, 2 ** 63)) * int(rng.integers(0, 2 ** 37)) % q
            for _ in range(32)]
    x = rns_split(vals, limbs)
    assert rns_merge(x) == vals


def test_rns_max_value_roundtrip():
    limbs = find_ntt_primes(16, 40, count=3)
    q = limbs[0] * limbs[1] * limbs[2]
    vals = [q - 1] * 16
    assert rns_merge(rns_split(vals, limbs)) == vals
    signed = rns_signed(rns_split(vals, limbs))
    assert signed == [-1] * 16


def test_rns_rejects_non_coprime():
    (m,) = find_ntt_primes(16, 30, count=1)
    with pytest.raises(ConstructionError):
        rns_split([0] * 16, [m, m])


def test_rns_split_is_exact_bijection_random():
    limbs = find_ntt_primes(64, 45, count=2)
    q = limbs[0] * limbs[1]
    rng = np.random.default_rng(11)
    vals = [int(v) % q for v in rng.integers(0, 2 ** 62, size=64)]
    assert rns_merge(rns_split(vals, limbs)) == vals


# ---------------------------------------------------------------- sampling


def test_gaussian_sampler_stddev_within_2pct():
    rng = np.random.default_rng(1234)
    draws = sample_gaussian_rounded(3.2, 10 ** 6, rng)
    assert abs(draws.std() / 3.2 - 1.0) < 0.02
    assert abs(draws.mean()) < 0.02


def test_gaussian_sampler_degenerate_width():
    rng = np.random.default_rng(0)
    draws = sample_gaussian_rounded(1e-9, 4096, rng)
    assert np.all(draws == 0)
    with pytest.raises(ParameterError):
        sample_gaussian_rounded(0.0, 16, rng)


def test_samplers_deterministic_under_seed():
    q = _prime_for(256)
    a = sample_error(3.2, 256, q, np.random.default_rng(42))
    b = sample_error(3.2, 256, q, np.random.default_rng(42))
    assert np.array_equal(a.coeffs, b.coeffs)
    u1 = sample_uniform(q, 256, np.random.default_rng(42))
    u2 = sample_uniform(q, 256, np.random.default_rng(42))
    assert np.array_equal(u1.coeffs, u2.coeffs)
    t1 = sample_ternary(256, np.random.default_rng(42))
    t2 = sample_ternary(256, np.random.default_rng(42))
    assert np.array_equal(t1, t2)
    assert set(np.unique(t1)).issubset({-1, 0, 1})


def test_ring_poly_immutability():
    q = _prime_for(32)
    p = RingPoly.zero(q, 32)
    with pytest.raises(ValueError):
        p.coeffs[0] = 1
