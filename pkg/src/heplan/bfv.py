"""Desk-scale BFV simulator with exact per-ciphertext noise measurement.

Every ciphertext carries a plaintext shadow (the value an error-free
pipeline would decrypt).  That bookkeeping, and the synthetic key-switch
noise used by rotations, make this an analysis instrument rather than a
deployable cryptosystem: decryption failure events are exact, keys are
visible to the simulator, and nothing here provides real-world security.

The decryption-failure indicator is exact: with the scaled residual
E_i = centered_mod(p*v_i - q*m_i, p*q), a coefficient decrypts wrongly iff
|E_i| > q/2, which is the same event as decrypt(ct) != shadow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (BatchingUnsupportedError, ConstructionError,
                     ParameterError)
from .modmath import get_ntt_tables, mulmod_np
from .params import HEParams, validate_rules
from .ring import (RingPoly, RnsPoly, poly_mul_mod, rns_merge,
                   sample_gaussian_rounded, sample_ternary)


@dataclass(frozen=True)
class NoiseModel:
    """Noise widths used by the simulator.

    ks_word_bits sets the synthetic key-switch noise that a rotation adds
    (stddev sigma * 2**ks_word_bits * sqrt(n/12), the shape of a digit-
    decomposition key switch with that word size).  The default keeps
    rotations the dominant noise source while leaving desk-scale layers
    inside the security ceiling at n=2048.
    """

    sigma: float = 3.2
    ks_word_bits: int = 6

    def ks_sigma(self, n: int) -> float:
        return self.sigma * (2.0 ** self.ks_word_bits) * math.sqrt(n / 12.0)


DEFAULT_NOISE = NoiseModel()


@dataclass(frozen=True)
class SecretKey:
    s: np.ndarray  # signed ternary coefficients, length n

    def __post_init__(self):
        arr = np.asarray(self.s, dtype=np.int64).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "s", arr)


@dataclass(frozen=True)
class PublicKey:
    a: RnsPoly
    b: RnsPoly  # b = -(a*s + e_pk) mod q


@dataclass(frozen=True)
class Plaintext:
    """Packed plaintext: slot values plus the ring polynomial over Z_p.

    Coefficient-mode plaintexts (no batching) keep slots=None and treat the
    polynomial coefficients themselves as the payload.
    """

    poly: RingPoly
    slots: np.ndarray | None = None

    def __post_init__(self):
        if self.slots is not None:
            arr = np.asarray(self.slots, dtype=np.int64).copy()
            arr.setflags(write=False)
            object.__setattr__(self, "slots", arr)


@dataclass(frozen=True)
class Ciphertext:
    c0: RnsPoly
    c1: RnsPoly
    shadow: np.ndarray  # exact expected plaintext (slots, or coeffs mod p)
    params: HEParams
    batched: bool = True

    def __post_init__(self):
        arr = np.asarray(self.shadow, dtype=np.int64).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "shadow", arr)


@dataclass(frozen=True)
class NoiseMeasurement:
    """Exact residual of one ciphertext against its shadow."""

    scaled_residual: tuple  # E_i = centered(p*v_i - q*m_i mod p*q), ints
    q: int
    p: int

    @property
    def linf_scaled(self) -> int:
        return max(abs(e) for e in self.scaled_residual)

    @property
    def residual(self) -> np.ndarray:
        """Residual in plaintext-scaled units (E/p); budget is q/(2p)."""
        return np.array([e / self.p for e in self.scaled_residual])

    @property
    def linf(self) -> float:
        return self.linf_scaled / self.p

    @property
    def budget(self) -> float:
        return self.q / (2 * self.p)

    @property
    def failed(self) -> bool:
        return 2 * self.linf_scaled > self.q


class BfvContext:
    """Parameter-bound encoder/encryptor/evaluator for the simulator."""

    def __init__(self, params: HEParams, noise: NoiseModel | None = None,
                 require_valid: bool = True):
        if require_valid:
            report = validate_rules(params, require_batching=False)
            if not report.valid:
                raise ConstructionError(
                    "params violate selection rules: "
                    + "; ".join(f"{k}: {report.explanations[k]}"
                                for k in report.failed_rules()))
        self.params = params
        self.noise = noise or NoiseModel(sigma=params.sigma)
        self.n = params.n
        self.p = params.p
        self.q = params.q
        self.delta = (2 * self.q + self.p) // (2 * self.p)  # round(q/p)
        self.q_tables = [get_ntt_tables(l, self.n) for l in params.q_limbs]
        self.batching = (self.p % (2 * self.n) == 1)
        if self.batching:
            self.p_tables = get_ntt_tables(self.p, self.n)
            self._build_slot_maps()
        self._keys = None

    # ---------------------------------------------------------- slot maps

    def _build_slot_maps(self):
        n = self.n
        two_n = 2 * n
        half = n // 2
        exps = np.zeros(n, dtype=np.int64)
        e = 1
        for i in range(half):
            exps[i] = e
            exps[half + i] = two_n - e
            e = (e * 3) % two_n
        self.slot_exponents = exps
        idx_of = self.p_tables._index_of_exponent
        self.slot_to_eval = np.array([idx_of[int(x)] for x in exps],
                                     dtype=np.int64)

    @property
    def n_slots(self) -> int:
        return self.n

    @property
    def row_size(self) -> int:
        return self.n // 2

    # ----------------------------------------------------------- encoding

    def encode_batch(self, slots) -> Plaintext:
        if not self.batching:
            raise BatchingUnsupportedError(
                f"p={self.p} is not 1 mod 2n (n={self.n})")
        vals = np.asarray(slots, dtype=np.int64) % self.p
        if len(vals) > self.n:
            raise ParameterError("more slot values than slots")
        if len(vals) < self.n:
            vals = np.concatenate(
                [vals, np.zeros(self.n - len(vals), dtype=np.int64)])
        evals = np.zeros(self.n, dtype=np.int64)
        evals[self.slot_to_eval] = vals
        poly = RingPoly(self.p_tables.inverse(evals), self.p, self.n)
        return Plaintext(poly=poly, slots=vals)

    def decode_batch(self, pt: Plaintext) -> np.ndarray:
        if not self.batching:
            raise BatchingUnsupportedError(
                f"p={self.p} is not 1 mod 2n (n={self.n})")
        evals = self.p_tables.forward(pt.poly.coeffs)
        return evals[self.slot_to_eval]

    def encode_coeffs(self, coeffs) -> Plaintext:
        poly = RingPoly(np.asarray(coeffs, dtype=np.int64) % self.p,
                        self.p, self.n)
        return Plaintext(poly=poly, slots=None)

    def _decode_poly(self, coeffs: np.ndarray, batched: bool) -> np.ndarray:
        if batched:
            return self.p_tables.forward(coeffs)[self.slot_to_eval]
        return coeffs

    # ------------------------------------------------------------- keygen

    def keygen(self, seed) -> tuple:
        rng = np.random.default_rng(seed)
        s = sample_ternary(self.n, rng)
        e_pk = sample_gaussian_rounded(self.noise.sigma, self.n, rng)
        return self.keygen_with(s, e_pk, rng)

    def keygen_with(self, s, e_pk, rng) -> tuple:
        sk = SecretKey(s=s)
        a_limbs = []
        for tab in self.q_tables:
            a_limbs.append(RingPoly(
                rng.integers(0, tab.modulus, size=self.n, dtype=np.int64),
                tab.modulus, self.n))
        a = RnsPoly(tuple(a_limbs), self.params.q_limbs)
        b_limbs = []
        for tab, a_l in zip(self.q_tables, a.limbs):
            s_l = RingPoly.from_signed(s, tab.modulus)
            e_l = RingPoly.from_signed(e_pk, tab.modulus)
            b_limbs.append(poly_mul_mod(a_l, s_l).add(e_l).neg())
        b = RnsPoly(tuple(b_limbs), self.params.q_limbs)
        pk = PublicKey(a=a, b=b)
        self._keys = (sk, pk)
        return sk, pk

    def attach_keys(self, sk: SecretKey, pk: PublicKey):
        self._keys = (sk, pk)

    def _require_keys(self):
        if self._keys is None:
            raise ParameterError("context has no keys attached")
        return self._keys

    # ---------------------------------------------------------- encryption

    def encrypt(self, pt: Plaintext, pk: PublicKey | None = None,
                rng=None) -> Ciphertext:
        rng = np.random.default_rng(rng) if not isinstance(
            rng, np.random.Generator) else rng
        u = sample_ternary(self.n, rng)
        e1 = sample_gaussian_rounded(self.noise.sigma, self.n, rng)
        e2 = sample_gaussian_rounded(self.noise.sigma, self.n, rng)
        return self.encrypt_with(pt, u, e1, e2, pk)

    def encrypt_with(self, pt: Plaintext, u, e1, e2,
                     pk: PublicKey | None = None) -> Ciphertext:
        """Deterministic encryption from explicit randomness (test hook)."""
        if pk is None:
            pk = self._require_keys()[1]
        if pt.poly.modulus != self.p or pt.poly.degree != self.n:
            raise ParameterError("plaintext does not match context ring")
        c0_limbs, c1_limbs = [], []
        for tab, a_l, b_l in zip(self.q_tables, pk.a.limbs, pk.b.limbs):
            m = tab.modulus
            u_l = RingPoly.from_signed(u, m)
            e1_l = RingPoly.from_signed(e1, m)
            e2_l = RingPoly.from_signed(e2, m)
            c0_limbs.append(poly_mul_mod(a_l, u_l).add(e1_l))
            dm = mulmod_np(pt.poly.coeffs % m,
                           np.full(self.n, self.delta % m, dtype=np.int64),
                           m, tab.inv_modulus)
            c1_limbs.append(poly_mul_mod(b_l, u_l).add(e2_l)
                            .add(RingPoly(dm, m, self.n)))
        batched = pt.slots is not None
        shadow = pt.slots if batched else pt.poly.coeffs
        return Ciphertext(c0=RnsPoly(tuple(c0_limbs), self.params.q_limbs),
                          c1=RnsPoly(tuple(c1_limbs), self.params.q_limbs),
                          shadow=shadow, params=self.params, batched=batched)

    # ---------------------------------------------------------- decryption

    def _phase(self, ct: Ciphertext, sk: SecretKey) -> list:
        """v = c0*s + c1 as exact big integers in [0, q)."""
        limbs = []
        for tab, c0_l, c1_l in zip(self.q_tables, ct.c0.limbs, ct.c1.limbs):
            s_l = RingPoly.from_signed(sk.s, tab.modulus)
            limbs.append(poly_mul_mod(c0_l, s_l).add(c1_l))
        return rns_merge(RnsPoly(tuple(limbs), self.params.q_limbs))

    def _shadow_poly(self, ct: Ciphertext) -> np.ndarray:
        if ct.batched:
            evals = np.zeros(self.n, dtype=np.int64)
            evals[self.slot_to_eval] = ct.shadow
            return self.p_tables.inverse(evals)
        return np.asarray(ct.shadow, dtype=np.int64)

    def decrypt(self, ct: Ciphertext, sk: SecretKey | None = None) -> np.ndarray:
        """Rounded decryption; returns slot values (or coefficients)."""
        if sk is None:
            sk = self._require_keys()[0]
        if ct.params != self.params:
            raise ParameterError("ciphertext params do not match context")
        v = self._phase(ct, sk)
        p, q = self.p, self.q
        coeffs = np.array([((2 * p * vi + q) // (2 * q)) % p for vi in v],
                          dtype=np.int64)
        return self._decode_poly(coeffs, ct.batched)

    def measure_noise(self, ct: Ciphertext,
                      sk: SecretKey | None = None) -> NoiseMeasurement:
        """Exact residual: uses the shadow to subtract the true message."""
        if sk is None:
            sk = self._require_keys()[0]
        v = self._phase(ct, sk)
        m_poly = self._shadow_poly(ct)
        p, q = self.p, self.q
        pq = p * q
        half = pq // 2
        es = []
        for vi, mi in zip(v, m_poly):
            e = (p * int(vi) - q * int(mi)) % pq
            if e > half:
                e -= pq
            es.append(e)
        return NoiseMeasurement(scaled_residual=tuple(es), q=q, p=p)

    # ------------------------------------------------------- homomorphic ops

    def _check_pair(self, a: Ciphertext, b: Ciphertext):
        if a.params != b.params or a.batched != b.batched:
            raise ParameterError("ciphertext mismatch")

    def add_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check_pair(a, b)
        return Ciphertext(c0=a.c0.add(b.c0), c1=a.c1.add(b.c1),
                          shadow=(a.shadow + b.shadow) % self.p,
                          params=a.params, batched=a.batched)

    def mul_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        """Plaintext multiply; the operand is lifted centered mod p."""
        if pt.poly.modulus != self.p or pt.poly.degree != self.n:
            raise ParameterError("plaintext does not match context ring")
        w_signed = pt.poly.signed()
        c0_limbs, c1_limbs = [], []
        for tab, c0_l, c1_l in zip(self.q_tables, ct.c0.limbs, ct.c1.limbs):
            w_l = RingPoly.from_signed(w_signed, tab.modulus)
            c0_limbs.append(poly_mul_mod(c0_l, w_l))
            c1_limbs.append(poly_mul_mod(c1_l, w_l))
        if ct.batched:
            if pt.slots is None:
                raise ParameterError("batched ciphertext needs batched plaintext")
            shadow = (ct.shadow * pt.slots) % self.p
        else:
            prod = poly_mul_mod(RingPoly(np.asarray(ct.shadow) % self.p,
                                         self.p, self.n), pt.poly)
            shadow = prod.coeffs
        return Ciphertext(c0=RnsPoly(tuple(c0_limbs), self.params.q_limbs),
                          c1=RnsPoly(tuple(c1_limbs), self.params.q_limbs),
                          shadow=shadow, params=ct.params, batched=ct.batched)

    def rotate(self, ct: Ciphertext, k: int, rng=None) -> Ciphertext:
        rng = np.random.default_rng(rng) if not isinstance(
            rng, np.random.Generator) else rng
        e_ks = sample_gaussian_rounded(self.noise.ks_sigma(self.n),
                                       self.n, rng)
        return self.rotate_with(ct, k, e_ks)

    def rotate_with(self, ct: Ciphertext, k: int, e_ks) -> Ciphertext:
        """Slot rotation by k via the Galois map, plus synthetic key-switch
        noise.  Requires attached keys (simulator-only shortcut replacing
        Galois-key switching machinery)."""
        sk, _ = self._require_keys()
        if not ct.batched:
            raise ParameterError("rotation needs a batched ciphertext")
        g = pow(3, k % self.row_size, 2 * self.n)
        c0_limbs, c1_limbs = [], []
        for tab, c0_l, c1_l in zip(self.q_tables, ct.c0.limbs, ct.c1.limbs):
            m = tab.modulus
            d = c0_l.automorphism(g)
            s_l = RingPoly.from_signed(sk.s, m)
            s_rot = s_l.automorphism(g)
            fix = poly_mul_mod(d, s_rot.sub(s_l))
            c1_limbs.append(c1_l.automorphism(g).add(fix)
                            .add(RingPoly.from_signed(e_ks, m)))
            c0_limbs.append(d)
        half = self.row_size
        shadow = ct.shadow.copy()
        shadow[:half] = np.roll(ct.shadow[:half], -k)
        shadow[half:] = np.roll(ct.shadow[half:], -k)
        return Ciphertext(c0=RnsPoly(tuple(c0_limbs), self.params.q_limbs),
                          c1=RnsPoly(tuple(c1_limbs), self.params.q_limbs),
                          shadow=shadow, params=ct.params, batched=ct.batched)

    def add_error(self, ct: Ciphertext, values) -> Ciphertext:
        """Test hook: inject an exact integer error polynomial into c1."""
        c1_limbs = []
        for tab, c1_l in zip(self.q_tables, ct.c1.limbs):
            err = RingPoly(np.array([int(v) % tab.modulus for v in values],
                                    dtype=np.int64), tab.modulus, self.n)
            c1_limbs.append(c1_l.add(err))
        return Ciphertext(c0=ct.c0, c1=RnsPoly(tuple(c1_limbs),
                                               self.params.q_limbs),
                          shadow=ct.shadow, params=ct.params,
                          batched=ct.batched)
