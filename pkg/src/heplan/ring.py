"""Polynomial rings Z_q[x]/(x^n + 1) with RNS limb decomposition.

RingPoly/RnsPoly values are immutable after construction; every operation
returns a fresh value, so they are safe to share across workers.  All
samplers take an explicit numpy Generator for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

from .errors import ConstructionError, ParameterError
from .modmath import get_ntt_tables, is_power_of_two, mulmod_np


@dataclass(frozen=True)
class RingPoly:
    """Element of Z_modulus[x]/(x^degree + 1), coefficients in [0, modulus)."""

    coeffs: np.ndarray
    modulus: int
    degree: int

    def __post_init__(self):
        if not is_power_of_two(self.degree):
            raise ConstructionError(f"degree {self.degree} not a power of two")
        if len(self.coeffs) != self.degree:
            raise ConstructionError("coefficient count != degree")
        arr = np.asarray(self.coeffs, dtype=np.int64)
        if arr.min(initial=0) < 0 or arr.max(initial=0) >= self.modulus:
            raise ConstructionError("coefficients outside [0, modulus)")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "coeffs", arr)

    @classmethod
    def from_signed(cls, values, modulus: int) -> "RingPoly":
        arr = np.asarray(values, dtype=np.int64) % modulus
        return cls(arr, modulus, len(arr))

    @classmethod
    def zero(cls, modulus: int, degree: int) -> "RingPoly":
        return cls(np.zeros(degree, dtype=np.int64), modulus, degree)

    def signed(self) -> np.ndarray:
        """Centered representatives in (-modulus/2, modulus/2]."""
        half = self.modulus // 2
        c = self.coeffs.astype(np.int64)
        return np.where(c > half, c - self.modulus, c)

    def _check_compatible(self, other: "RingPoly"):
        if self.degree != other.degree or self.modulus != other.modulus:
            raise ParameterError(
                f"ring mismatch: (n={self.degree}, q={self.modulus}) vs "
                f"(n={other.degree}, q={other.modulus})")

    def add(self, other: "RingPoly") -> "RingPoly":
        self._check_compatible(other)
        s = self.coeffs + other.coeffs
        s = np.where(s >= self.modulus, s - self.modulus, s)
        return RingPoly(s, self.modulus, self.degree)

    def sub(self, other: "RingPoly") -> "RingPoly":
        self._check_compatible(other)
        s = self.coeffs - other.coeffs
        s = np.where(s < 0, s + self.modulus, s)
        return RingPoly(s, self.modulus, self.degree)

    def neg(self) -> "RingPoly":
        s = np.where(self.coeffs > 0, self.modulus - self.coeffs, 0)
        return RingPoly(s, self.modulus, self.degree)

    def mul_scalar(self, k: int) -> "RingPoly":
        k %= self.modulus
        tab = get_ntt_tables(self.modulus, self.degree)
        s = mulmod_np(self.coeffs,
                      np.full(self.degree, k, dtype=np.int64),
                      self.modulus, tab.inv_modulus)
        return RingPoly(s, self.modulus, self.degree)

    def automorphism(self, g: int) -> "RingPoly":
        tab = get_ntt_tables(self.modulus, self.degree)
        return RingPoly(tab.automorphism_coeffs(self.coeffs, g),
                        self.modulus, self.degree)


def ntt_forward(poly: RingPoly, tables=None) -> RingPoly:
    """Negacyclic NTT; output holds evaluation-form values."""
    tab = tables or get_ntt_tables(poly.modulus, poly.degree)
    if tab.degree != poly.degree or tab.modulus != poly.modulus:
        raise ParameterError("tables do not match polynomial ring")
    return RingPoly(tab.forward(poly.coeffs), poly.modulus, poly.degree)


def ntt_inverse(poly: RingPoly, tables=None) -> RingPoly:
    tab = tables or get_ntt_tables(poly.modulus, poly.degree)
    if tab.degree != poly.degree or tab.modulus != poly.modulus:
        raise ParameterError("tables do not match polynomial ring")
    return RingPoly(tab.inverse(poly.coeffs), poly.modulus, poly.degree)


def poly_mul_mod(a: RingPoly, b: RingPoly) -> RingPoly:
    """c = a*b in Z_q[x]/(x^n + 1), exact, via NTT."""
    a._check_compatible(b)
    tab = get_ntt_tables(a.modulus, a.degree)
    ea = tab.forward(a.coeffs)
    eb = tab.forward(b.coeffs)
    ec = mulmod_np(ea, eb, a.modulus, tab.inv_modulus)
    return RingPoly(tab.inverse(ec), a.modulus, a.degree)


@dataclass(frozen=True)
class RnsPoly:
    """One big-modulus ring element stored as residues per RNS prime limb."""

    limbs: tuple
    limb_moduli: tuple

    def __post_init__(self):
        if len(self.limbs) != len(self.limb_moduli):
            raise ConstructionError("limb count mismatch")
        if len(set(self.limb_moduli)) != len(self.limb_moduli):
            raise ConstructionError("limb moduli must be distinct")
        for i, mi in enumerate(self.limb_moduli):
            for mj in self.limb_moduli[i + 1:]:
                if np.gcd(mi, mj) != 1:
                    raise ConstructionError("limb moduli must be coprime")
        degs = {l.degree for l in self.limbs}
        if len(degs) != 1:
            raise ConstructionError("all limbs must share one degree")
        for limb, m in zip(self.limbs, self.limb_moduli):
            if limb.modulus != m:
                raise ConstructionError("limb modulus mismatch")
        object.__setattr__(self, "limbs", tuple(self.limbs))
        object.__setattr__(self, "limb_moduli", tuple(self.limb_moduli))

    @property
    def degree(self) -> int:
        return self.limbs[0].degree

    @property
    def modulus(self) -> int:
        return reduce(lambda a, b: a * b, self.limb_moduli, 1)

    def add(self, other: "RnsPoly") -> "RnsPoly":
        if self.limb_moduli != other.limb_moduli:
            raise ParameterError("RNS basis mismatch")
        return RnsPoly(tuple(a.add(b) for a, b in zip(self.limbs, other.limbs)),
                       self.limb_moduli)

    def sub(self, other: "RnsPoly") -> "RnsPoly":
        if self.limb_moduli != other.limb_moduli:
            raise ParameterError("RNS basis mismatch")
        return RnsPoly(tuple(a.sub(b) for a, b in zip(self.limbs, other.limbs)),
                       self.limb_moduli)

    def neg(self) -> "RnsPoly":
        return RnsPoly(tuple(l.neg() for l in self.limbs), self.limb_moduli)

    def automorphism(self, g: int) -> "RnsPoly":
        return RnsPoly(tuple(l.automorphism(g) for l in self.limbs),
                       self.limb_moduli)


def rns_split(coeffs, limb_moduli) -> RnsPoly:
    """Decompose big-integer coefficients (Python ints) into RNS residues."""
    limb_moduli = tuple(int(m) for m in limb_moduli)
    q = reduce(lambda a, b: a * b, limb_moduli, 1)
    vals = [int(c) for c in coeffs]
    for c in vals:
        if not (0 <= c < q):
            raise ParameterError("coefficient outside [0, product of limbs)")
    degree = len(vals)
    limbs = []
    for m in limb_moduli:
        limbs.append(RingPoly(np.array([c % m for c in vals], dtype=np.int64),
                              m, degree))
    return RnsPoly(tuple(limbs), limb_moduli)


def rns_merge(poly: RnsPoly) -> list:
    """CRT-reconstruct big-integer coefficients (exact, Python ints)."""
    q = poly.modulus
    parts = []
    for m in poly.limb_moduli:
        qi = q // m
        inv = pow(qi % m, -1, m)
        parts.append((qi, inv, m))
    out = []
    for idx in range(poly.degree):
        acc = 0
        for (qi, inv, m), limb in zip(parts, poly.limbs):
            acc += qi * ((int(limb.coeffs[idx]) * inv) % m)
        out.append(acc % q)
    return out


def rns_signed(poly: RnsPoly) -> list:
    """Centered big-integer representatives in (-q/2, q/2]."""
    q = poly.modulus
    half = q // 2
    return [c - q if c > half else c for c in rns_merge(poly)]


def sample_gaussian_rounded(sigma: float, n: int, rng: np.random.Generator,
                            scale: float = 1.0) -> np.ndarray:
    """Signed error coefficients: nearest-integer rounding of N(0, (scale*sigma)^2).

    The pre-rounding draws decide importance weights elsewhere, so the
    sampler keeps a fixed consumption order: n standard normals.
    """
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    z = rng.standard_normal(n)
    return np.rint(z * (sigma * scale)).astype(np.int64)


def sample_ternary(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform {-1, 0, +1} coefficients (secret keys, encryption randomness)."""
    return rng.integers(-1, 2, size=n, dtype=np.int64)


def sample_error(sigma: float, n: int, modulus: int,
                 rng: np.random.Generator) -> RingPoly:
    return RingPoly.from_signed(sample_gaussian_rounded(sigma, n, rng), modulus)


def sample_uniform(modulus: int, n: int, rng: np.random.Generator) -> RingPoly:
    return RingPoly(rng.integers(0, modulus, size=n, dtype=np.int64),
                    modulus, n)
