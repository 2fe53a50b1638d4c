"""HE parameter sets, the five selection rules, and table-driven security.

The security oracle is a bundled, versioned table (ternary secret,
classical cost model) rather than a live lattice estimator; the table maps
each supported ring degree to the largest ciphertext-modulus width that
still clears a given security level.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import lru_cache, reduce
from importlib import resources

import sympy

from .errors import (ConstructionError, InfeasibleError, ParameterError,
                     UnsupportedDegreeError)
from .modmath import is_power_of_two

SECURITY_TABLE_ENV = "HEPLAN_SECURITY_TABLE"
SECURITY_FLOOR = 128
DEFAULT_SIGMA = 3.2
DEFAULT_RULE4_SLACK = 1
PSEUDO_MERSENNE_C_MAX = 1 << 20
LIMB_BITS_MAX = 50
LIMB_BITS_MIN = 20


def centered_mod(x: int, m: int) -> int:
    r = x % m
    return r - m if r > m // 2 else r


@dataclass(frozen=True)
class HEParams:
    """One layer's BFV parameter set: plaintext/ciphertext moduli + degree."""

    p: int
    n: int
    q_limbs: tuple
    sigma: float = DEFAULT_SIGMA
    mode: str = "rns"  # "rns" | "single"
    lambda_bits: int | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "q_limbs", tuple(int(l) for l in self.q_limbs))
        if self.mode not in ("rns", "single"):
            raise ConstructionError(f"unknown mode {self.mode!r}")
        if self.mode == "single" and len(self.q_limbs) != 1:
            raise ConstructionError("single-prime mode takes exactly one limb")
        if self.sigma <= 0:
            raise ConstructionError("sigma must be positive")
        if self.lambda_bits is None:
            table = default_security_table()
            lam = (table.security_level(self.n, self.log_q, self.sigma)
                   if table.covers(self.n) else None)
            object.__setattr__(self, "lambda_bits", lam)

    @property
    def q(self) -> int:
        return reduce(lambda a, b: a * b, self.q_limbs, 1)

    @property
    def log_q(self) -> float:
        return sum(math.log2(l) for l in self.q_limbs)

    @property
    def log_n(self) -> int:
        return self.n.bit_length() - 1

    def describe(self) -> str:
        lam = self.lambda_bits if self.lambda_bits is not None else "?"
        return (f"p={self.p} n={self.n} log_q={self.log_q:.1f} "
                f"limbs={len(self.q_limbs)} sigma={self.sigma} lambda={lam}")


RULE_NAMES = ("rule1_n_power_of_two", "rule2_q_congruent", "rule3_p_congruent",
              "rule4_q_mod_p_small", "rule5_q_shape", "batching_congruence")


@dataclass(frozen=True)
class RuleReport:
    """Per-rule outcome of validate_rules; params valid iff all checks pass."""

    checks: dict
    explanations: dict

    @property
    def valid(self) -> bool:
        return all(self.checks.values())

    def failed_rules(self) -> list:
        return [k for k, ok in self.checks.items() if not ok]


def _is_pseudo_mersenne(q: int, c_max: int = PSEUDO_MERSENNE_C_MAX) -> bool:
    k = q.bit_length()
    c = (1 << k) - q
    return 0 < c <= c_max


def validate_rules(params: HEParams, mode: str | None = None,
                   strict_paper: bool = False,
                   rule4_slack: int = DEFAULT_RULE4_SLACK,
                   require_batching: bool = True) -> RuleReport:
    """Check the five parameter rules plus the slot-batching congruence.

    Default interpretation checks congruences modulo 2n (needed by the
    negacyclic NTT and by batching); strict_paper relaxes rules 2/3 to
    modulo n only.
    """
    mode = mode or params.mode
    n, p = params.n, params.p
    cong = n if strict_paper else 2 * n
    checks, why = {}, {}

    checks["rule1_n_power_of_two"] = is_power_of_two(n)
    why["rule1_n_power_of_two"] = f"n={n}"

    if mode == "rns":
        bad = [l for l in params.q_limbs if l % cong != 1]
        checks["rule2_q_congruent"] = not bad
        why["rule2_q_congruent"] = (f"limbs != 1 mod {cong}: {bad}" if bad
                                    else f"all limbs = 1 mod {cong}")
    else:
        ok = params.q % cong == 1
        checks["rule2_q_congruent"] = ok
        why["rule2_q_congruent"] = f"q mod {cong} = {params.q % cong}"

    checks["rule3_p_congruent"] = p % cong == 1 and sympy.isprime(p)
    why["rule3_p_congruent"] = f"p mod {cong} = {p % cong}, prime={sympy.isprime(p)}"

    if mode == "rns":
        bad = [l for l in params.q_limbs if abs(centered_mod(l, p)) > rule4_slack]
        checks["rule4_q_mod_p_small"] = not bad
        why["rule4_q_mod_p_small"] = (
            f"limb residues mod p exceed slack {rule4_slack}: {bad}" if bad
            else f"all limb residues within +-{rule4_slack} of 0 mod p")
    else:
        r = abs(centered_mod(params.q, p))
        checks["rule4_q_mod_p_small"] = r <= rule4_slack
        why["rule4_q_mod_p_small"] = f"|q mod p| = {r}"

    if mode == "rns":
        bad = [l for l in params.q_limbs
               if not sympy.isprime(l) or l % (2 * n) != 1]
        checks["rule5_q_shape"] = not bad
        why["rule5_q_shape"] = ("non-NTT-friendly limbs: %s" % bad if bad
                                else "all limbs NTT-friendly primes")
    else:
        ok = sympy.isprime(params.q) and _is_pseudo_mersenne(params.q)
        checks["rule5_q_shape"] = ok
        why["rule5_q_shape"] = f"q = 2^{params.q.bit_length()} - {(1 << params.q.bit_length()) - params.q}"

    if require_batching:
        ok = p % (2 * n) == 1 and sympy.isprime(p)
        checks["batching_congruence"] = ok
        why["batching_congruence"] = f"p mod 2n = {p % (2 * n)}"

    return RuleReport(checks=checks, explanations=why)


# ------------------------------------------------------------------ security


class SecurityTable:
    """Bundled stand-in for a live LWE security estimator.

    Rows give, for each ring degree, the maximum total log2(q) that keeps
    the scheme at a security level, for the ternary secret distribution the
    simulator uses.  Rows are exact; interpolation between degrees is
    deliberately not offered.
    """

    def __init__(self, rows):
        # rows: list of (n, lambda, max_log_q, sigma, dist)
        self.rows = {}
        self.sigma = None
        for n, lam, max_log_q, sigma, dist in rows:
            self.rows.setdefault(int(n), {})[int(lam)] = int(max_log_q)
            self.sigma = float(sigma)
            self.dist = dist
        for n, tiers in self.rows.items():
            if sorted(tiers) != sorted(tiers, key=lambda l: -tiers[l]):
                raise ConstructionError("table tiers must shrink with lambda")

    @classmethod
    def load(cls, path=None) -> "SecurityTable":
        if path is None:
            path = os.environ.get(SECURITY_TABLE_ENV)
        if path is None:
            text = (resources.files("heplan") / "assets" /
                    "security_table.tsv").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            n, lam, max_log_q, sigma, dist = line.split("\t")
            rows.append((int(n), int(lam), int(max_log_q), float(sigma), dist))
        return cls(rows)

    def covers(self, n: int) -> bool:
        return n in self.rows

    def degrees(self):
        return sorted(self.rows)

    def levels(self, n: int):
        return sorted(self.rows[n])

    def _check_degree(self, n: int, sigma: float):
        if n not in self.rows:
            raise UnsupportedDegreeError(
                f"n={n} not covered by the security table (rows: "
                f"{sorted(self.rows)})")
        if sigma < self.sigma:
            raise ParameterError(
                f"sigma {sigma} below the table's {self.sigma}; the bundled "
                "bounds would overstate security")

    def security_level(self, n: int, log_q: float, sigma: float) -> int:
        """Level of the smallest max-log_q bound that still covers log_q.

        Returns 0 when log_q exceeds every bound for this degree (security
        below the weakest tabulated tier).
        """
        self._check_degree(n, sigma)
        tiers = self.rows[n]
        feasible = [lam for lam, bound in tiers.items() if log_q <= bound]
        return max(feasible) if feasible else 0

    def q_max_for_security(self, n: int, sigma: float,
                           lambda_target: int) -> int:
        """Largest log_q keeping security_level >= lambda_target."""
        self._check_degree(n, sigma)
        tiers = self.rows[n]
        feasible = [bound for lam, bound in tiers.items()
                    if lam >= lambda_target]
        if not feasible:
            raise InfeasibleError(
                f"no tier of the security table reaches lambda="
                f"{lambda_target} at n={n}")
        return max(feasible)


_DEFAULT_TABLE = None


def default_security_table() -> SecurityTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None or os.environ.get(SECURITY_TABLE_ENV):
        _DEFAULT_TABLE = SecurityTable.load()
    return _DEFAULT_TABLE


def security_level(n: int, log_q: float, sigma: float = DEFAULT_SIGMA) -> int:
    return default_security_table().security_level(n, log_q, sigma)


def q_max_for_security(n: int, sigma: float = DEFAULT_SIGMA,
                       lambda_target: int = SECURITY_FLOOR) -> int:
    return default_security_table().q_max_for_security(n, sigma, lambda_target)


# ------------------------------------------------------------- prime search


@lru_cache(maxsize=None)
def _scan_ntt_primes(n: int, bits: int, count: int,
                     p: int | None, slack: int):
    lo, hi = 1 << (bits - 1), 1 << bits
    out = []
    step = 2 * n
    if p is None:
        residues = [1]
        modulus = step
    else:
        modulus = step * p
        residues = []
        for rp in range(-slack, slack + 1):
            if rp % p == 0:
                continue
            r = sympy.ntheory.modular.crt([step, p], [1, rp % p])
            if r is not None:
                residues.append(int(r[0]))
        if not residues:
            return ()
    start = (lo // modulus) * modulus
    x = start
    while x < hi and len(out) < count:
        for r in sorted(residues):
            cand = x + r
            if lo <= cand < hi and sympy.isprime(cand):
                out.append(cand)
        x += modulus
    return tuple(sorted(out)[:count])


def find_ntt_primes(n: int, bits: int, count: int = 1,
                    p: int | None = None, slack: int = DEFAULT_RULE4_SLACK):
    """Primes of the given bit width, = 1 mod 2n, optionally within +-slack
    of 0 mod p.  Returned ascending; raises when the range is exhausted."""
    out = _scan_ntt_primes(n, bits, count, p, slack)
    if len(out) < count:
        raise InfeasibleError(
            f"only {len(out)} NTT primes of {bits} bits for n={n}, p={p}")
    return out


@lru_cache(maxsize=None)
def limb_pool(n: int, p: int | None, slack: int = DEFAULT_RULE4_SLACK,
              bits_lo: int = LIMB_BITS_MIN, bits_hi: int = LIMB_BITS_MAX,
              per_octave: int = 96):
    """Usable RNS limb primes for (n, p), spread evenly in log2 space.

    Each octave is sampled at per_octave targets and the first qualifying
    prime at or above each target is kept, so q ladders resolve sub-bit
    steps across the whole width range.
    """
    step = 2 * n
    if p is None:
        residues = [1]
        modulus = step
    else:
        modulus = step * p
        residues = []
        for rp in range(-slack, slack + 1):
            if rp % p == 0:
                continue
            r = sympy.ntheory.modular.crt([step, p], [1, rp % p])
            if r is not None:
                residues.append(int(r[0]))
        residues.sort()
        if not residues:
            return ()
    pool = set()
    for bits in range(bits_lo, bits_hi + 1):
        for idx in range(per_octave):
            target = 2.0 ** (bits - 1 + idx / per_octave)
            limit = min(2.0 ** (bits - 1 + (idx + 1) / per_octave),
                        float(1 << bits))
            x = (int(target) // modulus) * modulus
            found = None
            while found is None and x < limit:
                for r in residues:
                    cand = x + r
                    if target <= cand < limit and sympy.isprime(cand):
                        found = cand
                        break
                x += modulus
            if found is not None:
                pool.add(found)
    return tuple(sorted(pool))


def nearest_limb(pool, target_log2: float, exclude=()):
    """Pool prime with log2 closest to target, skipping excluded values."""
    best, best_d = None, None
    for prime in pool:
        if prime in exclude:
            continue
        d = abs(math.log2(prime) - target_log2)
        if best_d is None or d < best_d:
            best, best_d = prime, d
    if best is None:
        raise InfeasibleError("limb pool exhausted")
    return best


def make_q_ladder(n: int, p: int | None, log_q_lo: float, log_q_hi: float,
                  step_bits: float = 0.25,
                  slack: int = DEFAULT_RULE4_SLACK) -> list:
    """Ascending limb-set candidates covering [log_q_lo, log_q_hi].

    Coarse structure moves in whole-limb increments; the last limb sweeps
    in sub-bit steps so tight q_min searches can resolve fractions of a
    bit.  Every candidate passes validate_rules in rns mode.
    """
    pool = limb_pool(n, p, slack)
    if not pool:
        raise InfeasibleError(f"no limb primes exist for n={n}, p={p}")
    max_bits = math.log2(pool[-1])
    min_bits = math.log2(pool[0])
    out = []
    seen = set()
    target = log_q_lo
    while target <= log_q_hi + 1e-9:
        count0 = max(1, math.ceil(target / max_bits))
        for count in (count0, count0 + 1):
            even = target / count
            if not (min_bits - 0.6 <= even <= max_bits + 0.6):
                continue
            chosen = []
            remaining = target
            ok = True
            for _ in range(count - 1):
                try:
                    limb = nearest_limb(pool, even, exclude=chosen)
                except InfeasibleError:
                    ok = False
                    break
                chosen.append(limb)
                remaining -= math.log2(limb)
            if ok and min_bits - 0.6 <= remaining <= max_bits + 0.6:
                try:
                    chosen.append(nearest_limb(pool, remaining,
                                               exclude=chosen))
                except InfeasibleError:
                    ok = False
            else:
                ok = False
            if ok:
                limbs = tuple(sorted(chosen))
                if limbs not in seen:
                    seen.add(limbs)
                    out.append(limbs)
                break
        target += step_bits
    out.sort(key=lambda ls: sum(math.log2(l) for l in ls))
    return out


def enumerate_q_candidates(n: int, log_q_min: float, log_q_max: float,
                           mode: str = "rns", p: int | None = None,
                           slack: int = DEFAULT_RULE4_SLACK,
                           c_max: int = PSEUDO_MERSENNE_C_MAX,
                           strict_paper: bool = False,
                           step_bits: float = 0.25) -> list:
    """Ordered ciphertext-modulus candidates in [log_q_min, log_q_max].

    rns mode yields limb tuples; single mode yields one-element tuples of
    pseudo-Mersenne primes.  Empty list when nothing satisfies the rules.
    """
    if log_q_min > log_q_max:
        return []
    out = []
    if mode == "single":
        cong = n if strict_paper else 2 * n
        for k in range(max(2, math.floor(log_q_min)),
                       math.floor(log_q_max) + 2):
            for c in range(1, c_max + 1):
                q = (1 << k) - c
                if q < 3 or not (log_q_min <= math.log2(q) <= log_q_max):
                    continue
                if q % cong != 1:
                    continue
                if p is not None and abs(centered_mod(q, p)) > slack:
                    continue
                if sympy.isprime(q):
                    out.append((q,))
        out.sort(key=lambda t: t[0])
        return out
    ladder = make_q_ladder(n, p, max(log_q_min, 1.0), log_q_max,
                           step_bits=step_bits, slack=slack)
    for limbs in ladder:
        lq = sum(math.log2(l) for l in limbs)
        if log_q_min - 1e-9 <= lq <= log_q_max + 1e-9:
            out.append(limbs)
    return out


def choose_plaintext_modulus(n: int, target_bits: int = 14) -> int:
    """Smallest batching-capable prime of the target width for degree n.

    Falls back to the smallest prime = 1 mod 2n above 2**(target_bits - 1)
    when no prime of exactly target_bits exists (large n squeezes the
    congruence class out of the 14-bit window).
    """
    step = 2 * n
    lo = 1 << (target_bits - 1)
    cand = (lo // step) * step + 1
    while cand < (1 << target_bits):
        if cand >= lo and sympy.isprime(cand):
            return cand
        cand += step
    # fallback: first prime above the window
    cand = (lo // step) * step + 1
    while True:
        if cand >= lo and sympy.isprime(cand):
            return cand
        cand += step
