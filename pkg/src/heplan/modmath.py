"""Exact modular arithmetic and negacyclic NTT kernels.

All moduli handled here are odd primes below 2**51 so that the
float-assisted multiply-mod trick stays exact on int64 arrays: the
quotient a*b/m is estimated in float64 (error at most 2 either way) and
repaired with two conditional corrections.  Everything is plain integer
arithmetic; no op ever returns an approximate value.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .errors import ConstructionError, ParameterError

MAX_MODULUS_BITS = 51


def is_power_of_two(x: int) -> bool:
    return x > 0 and (x & (x - 1)) == 0


def bit_reverse(x: int, bits: int) -> int:
    r = 0
    for _ in range(bits):
        r = (r << 1) | (x & 1)
        x >>= 1
    return r


def mulmod_np(a, b, m: int, inv_m: float, out=None):
    """Vectorized (a*b) % m for int64 arrays, m < 2**51, inputs in [0, m).

    Float-assisted quotient (error at most +-2) with branchless repairs;
    kept allocation-light so profiling measures arithmetic, not the heap.
    """
    fq = a.astype(np.float64)
    if np.isscalar(b):
        np.multiply(fq, b * inv_m, out=fq)
    else:
        np.multiply(fq, b.astype(np.float64) * inv_m, out=fq)
    q = fq.astype(np.int64)
    with np.errstate(over="ignore"):
        r = np.multiply(a, b, out=out)
        q *= m
        r -= q
    r += np.multiply(r >> 63, -m)  # add m where negative (twice suffices)
    r += np.multiply(r >> 63, -m)
    r -= np.multiply(m - 1 - r >> 63, -m)  # subtract m where r >= m
    r -= np.multiply(m - 1 - r >> 63, -m)
    return r


@njit(cache=True, inline="always")
def _mulmod(a, b, m, inv_m):
    q = np.int64(np.float64(a) * (np.float64(b) * inv_m))
    r = a * b - q * m
    if r < 0:
        r += m
        if r < 0:
            r += m
    elif r >= m:
        r -= m
        if r >= m:
            r -= m
    return r


@njit(cache=True)
def _ntt_forward(a, psis, m, inv_m):
    """In-place negacyclic forward NTT (Cooley-Tukey, bit-reversed output)."""
    n = a.shape[0]
    t = n
    grp = 1
    while grp < n:
        t //= 2
        for i in range(grp):
            s = psis[grp + i]
            j1 = 2 * i * t
            for j in range(j1, j1 + t):
                u = a[j]
                v = _mulmod(a[j + t], s, m, inv_m)
                x = u + v
                if x >= m:
                    x -= m
                y = u - v
                if y < 0:
                    y += m
                a[j] = x
                a[j + t] = y
        grp *= 2


@njit(cache=True)
def _ntt_inverse(a, inv_psis, n_inv, m, inv_m):
    """In-place negacyclic inverse NTT (Gentleman-Sande, bit-reversed input)."""
    n = a.shape[0]
    t = 1
    grp = n
    while grp > 1:
        j1 = 0
        h = grp // 2
        for i in range(h):
            s = inv_psis[h + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = a[j + t]
                x = u + v
                if x >= m:
                    x -= m
                a[j] = x
                y = u - v
                if y < 0:
                    y += m
                a[j + t] = _mulmod(y, s, m, inv_m)
            j1 += 2 * t
        t *= 2
        grp //= 2
    for j in range(n):
        a[j] = _mulmod(a[j], n_inv, m, inv_m)


@njit(cache=True, parallel=True)
def _batch_ntt_forward(arr, psis, m, inv_m):
    for b in prange(arr.shape[0]):
        _ntt_forward(arr[b], psis, m, inv_m)


@njit(cache=True, parallel=True)
def _batch_ntt_inverse(arr, inv_psis, n_inv, m, inv_m):
    for b in prange(arr.shape[0]):
        _ntt_inverse(arr[b], inv_psis, n_inv, m, inv_m)


def _primitive_root(m: int) -> int:
    """Smallest primitive root of the prime m (factorize m-1, check orders)."""
    from sympy import factorint

    phi = m - 1
    factors = list(factorint(phi).keys())
    g = 2
    while True:
        if all(pow(g, phi // f, m) != 1 for f in factors):
            return g
        g += 1


class NttTables:
    """Per-(modulus, degree) tables for the negacyclic NTT.

    Holds the power-of-psi butterflies plus the evaluation-point exponent
    map used to express ring automorphisms as NTT-domain permutations.
    """

    def __init__(self, modulus: int, degree: int):
        if not is_power_of_two(degree):
            raise ConstructionError(f"degree {degree} is not a power of two")
        if modulus.bit_length() > MAX_MODULUS_BITS:
            raise ConstructionError(
                f"modulus {modulus} exceeds {MAX_MODULUS_BITS} bits")
        if modulus % (2 * degree) != 1:
            raise ConstructionError(
                f"modulus {modulus} is not NTT-friendly for degree {degree} "
                f"(needs modulus = 1 mod {2 * degree})")
        self.modulus = modulus
        self.degree = degree
        self.inv_modulus = 1.0 / modulus

        g = _primitive_root(modulus)
        psi = pow(g, (modulus - 1) // (2 * degree), modulus)
        assert pow(psi, degree, modulus) == modulus - 1
        self.psi = psi

        bits = degree.bit_length() - 1
        psis = np.zeros(degree, dtype=np.int64)
        inv_psis = np.zeros(degree, dtype=np.int64)
        psi_inv = pow(psi, -1, modulus)
        for i in range(degree):
            r = bit_reverse(i, bits)
            psis[i] = pow(psi, r, modulus)
            inv_psis[i] = pow(psi_inv, r, modulus)
        self.psis = psis
        self.inv_psis = inv_psis
        self.n_inv = pow(degree, -1, modulus)

        # exponent map: forward-NTT output slot k holds the evaluation at
        # psi**eval_exponents[k]; recovered by transforming the monomial x.
        mono = np.zeros(degree, dtype=np.int64)
        mono[1] = 1
        evals = self.forward(mono)
        dlog = {pow(psi, e, modulus): e for e in range(2 * degree)}
        self.eval_exponents = np.array([dlog[int(v)] for v in evals],
                                       dtype=np.int64)
        assert np.all(self.eval_exponents % 2 == 1)
        self._index_of_exponent = {
            int(e): k for k, e in enumerate(self.eval_exponents)}

    def forward(self, coeffs: np.ndarray) -> np.ndarray:
        out = np.ascontiguousarray(coeffs, dtype=np.int64).copy()
        _ntt_forward(out, self.psis, self.modulus, self.inv_modulus)
        return out

    def inverse(self, evals: np.ndarray) -> np.ndarray:
        out = np.ascontiguousarray(evals, dtype=np.int64).copy()
        _ntt_inverse(out, self.inv_psis, self.n_inv, self.modulus,
                     self.inv_modulus)
        return out

    def forward_batch(self, arr: np.ndarray) -> np.ndarray:
        out = np.ascontiguousarray(arr, dtype=np.int64).copy()
        _batch_ntt_forward(out, self.psis, self.modulus, self.inv_modulus)
        return out

    def inverse_batch(self, arr: np.ndarray) -> np.ndarray:
        out = np.ascontiguousarray(arr, dtype=np.int64).copy()
        _batch_ntt_inverse(out, self.inv_psis, self.n_inv, self.modulus,
                           self.inv_modulus)
        return out

    def automorphism_perm(self, g: int) -> np.ndarray:
        """NTT-domain permutation realizing a(x) -> a(x**g), g odd.

        Returns perm such that ntt(a(x**g))[k] == ntt(a)[perm[k]].
        """
        two_n = 2 * self.degree
        if g % 2 == 0:
            raise ParameterError("automorphism power must be odd")
        g %= two_n
        return np.array(
            [self._index_of_exponent[(g * int(e)) % two_n]
             for e in self.eval_exponents],
            dtype=np.int64)

    def automorphism_coeffs(self, coeffs: np.ndarray, g: int) -> np.ndarray:
        """Coefficient-domain a(x) -> a(x**g) mod (x^n + 1), for tests."""
        n = self.degree
        m = self.modulus
        out = np.zeros(n, dtype=np.int64)
        for i in range(n):
            e = (i * g) % (2 * n)
            v = int(coeffs[i])
            if e >= n:
                e -= n
                v = (-v) % m
            out[e] = (out[e] + v) % m
        return out


def negacyclic_mul_schoolbook(a, b, modulus: int):
    """O(n^2) negacyclic product oracle: c = a*b mod (x^n + 1, modulus)."""
    n = len(a)
    if len(b) != n:
        raise ParameterError("length mismatch")
    c = [0] * n
    for i in range(n):
        ai = int(a[i])
        if ai == 0:
            continue
        for j in range(n):
            k = i + j
            prod = ai * int(b[j])
            if k >= n:
                c[k - n] = (c[k - n] - prod) % modulus
            else:
                c[k] = (c[k] + prod) % modulus
    return np.array([v % modulus for v in c], dtype=np.int64)


_TABLE_CACHE: dict[tuple[int, int], NttTables] = {}


def get_ntt_tables(modulus: int, degree: int) -> NttTables:
    key = (modulus, degree)
    tab = _TABLE_CACHE.get(key)
    if tab is None:
        tab = NttTables(modulus, degree)
        _TABLE_CACHE[key] = tab
    return tab
