"""Decryption-failure estimation for packed linear layers.

Each trial runs the layer's full homomorphic schedule on exact integer
state: the accumulated noise polynomial and the unreduced message
polynomial are tracked in NTT form over a helper prime large enough that
no wraparound ever occurs, which makes the failure decision for every
candidate ciphertext modulus available from a single simulated trial
(failure at modulus q iff round((p*e_i - r_q*m_i)/q) != 0 mod p for some
coefficient).  A slow reference path drives the same draws through the
full BFV simulator; tests require decision-for-decision agreement.

Rare rates use sigma-scaled importance sampling: every Gaussian component
is widened by a factor s and trials are reweighted by the exact density
ratio of the pre-rounding draws, so s=1 degenerates bit-exactly to plain
Monte Carlo.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.stats import norm

from .bfv import BfvContext, NoiseModel, Plaintext
from .errors import InfeasibleError, ParameterError
from .modmath import _ntt_forward, _ntt_inverse, get_ntt_tables
from .packing import LayerSpec, Schedule, build_schedule, input_slots
from .params import (HEParams, SECURITY_FLOOR, choose_plaintext_modulus,
                     default_security_table, make_q_ladder)

CHUNK = 64  # trials per draw chunk; part of the reproducibility contract
D_LEFT = 5
D_RIGHT = 15
CODE_VERSION = 3  # bump to invalidate cached estimates

OP_ROT, OP_MUL, OP_ADD, OP_MOV = 0, 1, 2, 3


@dataclass(frozen=True)
class DerTarget:
    """Decryption-error-rate target 2^-d with d in [D_LEFT, D_RIGHT]."""

    d: int

    def __post_init__(self):
        if not (D_LEFT <= self.d <= D_RIGHT):
            raise ParameterError(
                f"DER exponent {self.d} outside [{D_LEFT}, {D_RIGHT}]")

    @property
    def rate(self) -> float:
        return 2.0 ** (-self.d)


@dataclass(frozen=True)
class FailureEstimate:
    rate: float
    method: str  # "mc" | "sss" | "analytic"
    trials: int
    scale: float = 1.0
    half_width_log2: float = float("inf")  # confidence half-width, log2 domain
    raw_failures: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rate <= 1.0 + 1e-9):
            raise ParameterError("rate outside [0, 1]")

    @property
    def log2_rate(self) -> float:
        return math.log2(self.rate) if self.rate > 0 else float("-inf")


@dataclass(frozen=True)
class ErrorSample:
    """Slotwise plaintext error of one failing decryption (signed mod p)."""

    slot_errors: np.ndarray  # over the layer's output values
    layer_index: int
    weight: float = 1.0  # importance tag when collected under widened noise

    def __post_init__(self):
        arr = np.asarray(self.slot_errors, dtype=np.int64).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "slot_errors", arr)
        if not np.any(arr):
            raise ParameterError("failure sample must have a nonzero slot")


# --------------------------------------------------------------- the kernel


@njit(cache=True, inline="always")
def _mm(a, b, m, inv_m):
    t = a * b - np.int64(np.float64(a) * (np.float64(b) * inv_m)) * m
    if t < 0:
        t += m
        if t < 0:
            t += m
    elif t >= m:
        t -= m
        if t >= m:
            t -= m
    return t


@njit(cache=True)
def _run_one_trial(m_slots, u, s_key, e_pk, e1, e2, ks,
                   op_kind, op_dst, op_src, op_arg, rot_noise,
                   rot_perms, masks_hat, n_regs,
                   h_psis, h_inv_psis, h_ninv, h_mod, h_inv_mod,
                   p_psis, p_inv_psis, p_ninv, p_mod, p_inv_mod,
                   slot_to_eval, regs_e, regs_m, scratch, e_out, m_out):
    """One exact trial; regs_e/regs_m: (n_regs, n), scratch: (8, n)."""
    n = m_slots.shape[0]
    half_h = h_mod // 2

    # encode message: slot values -> Z_p polynomial -> helper NTT domain
    m_hat = scratch[0]
    for j in range(n):
        m_hat[j] = 0
    for j in range(n):
        m_hat[slot_to_eval[j]] = m_slots[j]
    _ntt_inverse(m_hat, p_inv_psis, p_ninv, p_mod, p_inv_mod)
    _ntt_forward(m_hat, h_psis, h_mod, h_inv_mod)

    # fresh encryption noise: e1*s + e2 - e_pk*u (helper NTT domain)
    buf_u, buf_s, buf_pk, buf_e1, buf_e2 = (scratch[1], scratch[2],
                                            scratch[3], scratch[4],
                                            scratch[5])
    for j in range(n):
        buf_u[j] = u[j] % h_mod
        buf_s[j] = s_key[j] % h_mod
        buf_pk[j] = e_pk[j] % h_mod
        buf_e1[j] = e1[j] % h_mod
        buf_e2[j] = e2[j] % h_mod
    _ntt_forward(buf_u, h_psis, h_mod, h_inv_mod)
    _ntt_forward(buf_s, h_psis, h_mod, h_inv_mod)
    _ntt_forward(buf_pk, h_psis, h_mod, h_inv_mod)
    _ntt_forward(buf_e1, h_psis, h_mod, h_inv_mod)
    _ntt_forward(buf_e2, h_psis, h_mod, h_inv_mod)

    for j in range(n):
        t1 = _mm(buf_e1[j], buf_s[j], h_mod, h_inv_mod)
        t2 = _mm(buf_pk[j], buf_u[j], h_mod, h_inv_mod)
        v = t1 + buf_e2[j] - t2
        if v >= h_mod:
            v -= h_mod
        if v < 0:
            v += h_mod
        regs_e[0, j] = v
        regs_m[0, j] = m_hat[j]

    # run the schedule
    ks_buf = scratch[6]
    tmp = scratch[7]
    for oi in range(op_kind.shape[0]):
        kind = op_kind[oi]
        dst = op_dst[oi]
        src = op_src[oi]
        arg = op_arg[oi]
        if kind == OP_ROT:
            perm = rot_perms[arg]
            nz = rot_noise[oi]
            for j in range(n):
                ks_buf[j] = ks[nz, j] % h_mod
            _ntt_forward(ks_buf, h_psis, h_mod, h_inv_mod)
            if dst == src:
                for j in range(n):
                    tmp[j] = regs_e[src, perm[j]]
                for j in range(n):
                    x = tmp[j] + ks_buf[j]
                    if x >= h_mod:
                        x -= h_mod
                    regs_e[dst, j] = x
                for j in range(n):
                    tmp[j] = regs_m[src, perm[j]]
                for j in range(n):
                    regs_m[dst, j] = tmp[j]
            else:
                for j in range(n):
                    x = regs_e[src, perm[j]] + ks_buf[j]
                    if x >= h_mod:
                        x -= h_mod
                    regs_e[dst, j] = x
                    regs_m[dst, j] = regs_m[src, perm[j]]
        elif kind == OP_MUL:
            mask = masks_hat[arg]
            for j in range(n):
                regs_e[dst, j] = _mm(regs_e[src, j], mask[j], h_mod,
                                     h_inv_mod)
                regs_m[dst, j] = _mm(regs_m[src, j], mask[j], h_mod,
                                     h_inv_mod)
        elif kind == OP_ADD:
            for j in range(n):
                x = regs_e[dst, j] + regs_e[src, j]
                if x >= h_mod:
                    x -= h_mod
                regs_e[dst, j] = x
                x = regs_m[dst, j] + regs_m[src, j]
                if x >= h_mod:
                    x -= h_mod
                regs_m[dst, j] = x
        else:  # OP_MOV
            for j in range(n):
                regs_e[dst, j] = regs_e[src, j]
                regs_m[dst, j] = regs_m[src, j]

    # back to coefficients, centered (true integers; helper never wraps)
    for j in range(n):
        e_out[j] = regs_e[1, j]
        m_out[j] = regs_m[1, j]
    _ntt_inverse(e_out, h_inv_psis, h_ninv, h_mod, h_inv_mod)
    _ntt_inverse(m_out, h_inv_psis, h_ninv, h_mod, h_inv_mod)
    for j in range(n):
        if e_out[j] > half_h:
            e_out[j] -= h_mod
        if m_out[j] > half_h:
            m_out[j] -= h_mod


@njit(cache=True, parallel=True)
def _trial_batch(m_slots, u, s_key, e_pk, e1, e2, ks,
                 op_kind, op_dst, op_src, op_arg, rot_noise,
                 rot_perms, masks_hat, n_regs,
                 h_psis, h_inv_psis, h_ninv, h_mod, h_inv_mod,
                 p_psis, p_inv_psis, p_ninv, p_mod, p_inv_mod,
                 slot_to_eval, p, q_arr, r_arr,
                 ws_regs_e, ws_regs_m, ws_scratch, ws_e, ws_m,
                 fail_out, guard_out, sumv2_out, maxv_out):
    batch = m_slots.shape[0]
    n = m_slots.shape[1]
    nq = q_arr.shape[0]
    for b in prange(batch):
        e_out = ws_e[b]
        m_out = ws_m[b]
        _run_one_trial(m_slots[b], u[b], s_key[b], e_pk[b], e1[b], e2[b],
                       ks[b], op_kind, op_dst, op_src, op_arg, rot_noise,
                       rot_perms, masks_hat, n_regs,
                       h_psis, h_inv_psis, h_ninv, h_mod, h_inv_mod,
                       p_psis, p_inv_psis, p_ninv, p_mod, p_inv_mod,
                       slot_to_eval, ws_regs_e[b], ws_regs_m[b],
                       ws_scratch[b], e_out, m_out)
        guard = np.int64(0)
        sumv2 = 0.0
        maxv = np.int64(0)
        for j in range(n):
            a = e_out[j] if e_out[j] >= 0 else -e_out[j]
            if a > guard:
                guard = a
            a = m_out[j] if m_out[j] >= 0 else -m_out[j]
            if a > guard:
                guard = a
            # reference residual (r=+1) for tail statistics
            v = p * e_out[j] - m_out[j]
            fv = np.float64(v)
            sumv2 += fv * fv
            av = v if v >= 0 else -v
            if av > maxv:
                maxv = av
        guard_out[b] = guard
        sumv2_out[b] = sumv2
        maxv_out[b] = maxv
        for k in range(nq):
            q = q_arr[k]
            r = r_arr[k]
            failed = False
            for j in range(n):
                t = p * e_out[j] - r * m_out[j]
                kh = (2 * t + q) // (2 * q)
                if kh % p != 0:
                    failed = True
                    break
            fail_out[b, k] = 1 if failed else 0


# ------------------------------------------------------------- trial plans


class TrialPlan:
    """Precomputed kernel inputs for one (layer, n, weights) combination."""

    def __init__(self, layer: LayerSpec, n: int, p: int, weights,
                 noise: NoiseModel):
        self.layer = layer
        self.n = n
        self.p = p
        self.noise = noise
        self.schedule = build_schedule(layer, n, weights)
        self.weights = np.asarray(weights)
        if p % (2 * n) != 1:
            raise ParameterError("plaintext modulus must support batching")
        self.p_tables = get_ntt_tables(p, n)
        self.h_mod = _helper_prime(n)
        self.h_tables = get_ntt_tables(self.h_mod, n)

        # slot map (matches BfvContext)
        two_n = 2 * n
        half = n // 2
        exps = np.zeros(n, dtype=np.int64)
        e = 1
        for i in range(half):
            exps[i] = e
            exps[half + i] = two_n - e
            e = (e * 3) % two_n
        idx_of = self.p_tables._index_of_exponent
        self.slot_to_eval = np.array([idx_of[int(x)] for x in exps],
                                     dtype=np.int64)

        # encode masks into centered Z_p polynomials, lift to helper NTT
        mask_polys = []
        for vec in self.schedule.masks:
            evals = np.zeros(n, dtype=np.int64)
            evals[self.slot_to_eval] = np.asarray(vec) % p
            poly = self.p_tables.inverse(evals)
            signed = np.where(poly > p // 2, poly - p, poly)
            mask_polys.append(self.h_tables.forward(signed % self.h_mod))
        self.masks_hat = (np.stack(mask_polys) if mask_polys
                          else np.zeros((0, n), dtype=np.int64))

        # op arrays
        ops = self.schedule.ops
        self.op_kind = np.zeros(len(ops), dtype=np.int64)
        self.op_dst = np.zeros(len(ops), dtype=np.int64)
        self.op_src = np.zeros(len(ops), dtype=np.int64)
        self.op_arg = np.zeros(len(ops), dtype=np.int64)
        self.rot_noise = np.full(len(ops), -1, dtype=np.int64)
        perms = []
        rot_count = 0
        for i, op in enumerate(ops):
            if op[0] == "rot":
                _, dst, src, step = op
                g = pow(3, step % (n // 2), 2 * n)
                perms.append(self.h_tables.automorphism_perm(g))
                self.op_kind[i] = OP_ROT
                self.op_dst[i], self.op_src[i] = dst, src
                self.op_arg[i] = len(perms) - 1
                self.rot_noise[i] = rot_count
                rot_count += 1
            elif op[0] == "mul":
                _, dst, src, mid = op
                self.op_kind[i] = OP_MUL
                self.op_dst[i], self.op_src[i], self.op_arg[i] = dst, src, mid
            elif op[0] == "add":
                self.op_kind[i] = OP_ADD
                self.op_dst[i], self.op_src[i] = op[1], op[2]
            else:
                self.op_kind[i] = OP_MOV
                self.op_dst[i], self.op_src[i] = op[1], op[2]
        self.n_rots = rot_count
        self.rot_perms = (np.stack(perms) if perms
                          else np.zeros((0, n), dtype=np.int64))
        self.gauss_per_trial = n * (3 + rot_count)  # e_pk, e1, e2, ks...

    def weights_hash(self) -> str:
        return hashlib.sha256(self.weights.tobytes()).hexdigest()[:16]

    # ------------------------------------------------------------- draws

    def draw_chunk(self, seed: int, chunk_idx: int, scale: float):
        """Generate one chunk of trial randomness plus importance stats.

        Returns (m_slots, u, s_key, e_pk, e1, e2, ks, sum_z2) where sum_z2
        is the squared norm of the standard-normal pre-rounding draws.
        Draws are float32 throughout; the dtype is part of the
        reproducibility contract.
        """
        n = self.n
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=int(seed),
                                   spawn_key=(int(chunk_idx),)))
        m_slots = rng.integers(0, self.p, size=(CHUNK, n), dtype=np.int64)
        u = rng.integers(-1, 2, size=(CHUNK, n), dtype=np.int64)
        s_key = rng.integers(-1, 2, size=(CHUNK, n), dtype=np.int64)
        sig = self.noise.sigma * scale
        sigks = self.noise.ks_sigma(n) * scale
        sum_z2 = np.zeros(CHUNK)

        def rounded(shape, width):
            z = rng.standard_normal(shape, dtype=np.float32)
            if z.ndim == 2:
                sum_z2[:] += np.einsum("ij,ij->i", z, z, dtype=np.float64)
            else:
                sum_z2[:] += np.einsum("ijk,ijk->i", z, z, dtype=np.float64)
            np.multiply(z, np.float32(width), out=z)
            np.rint(z, out=z)
            return z.astype(np.int64)

        e_pk = rounded((CHUNK, n), sig)
        e1 = rounded((CHUNK, n), sig)
        e2 = rounded((CHUNK, n), sig)
        if self.n_rots:
            ks = rounded((CHUNK, self.n_rots, n), sigks)
        else:
            ks = np.zeros((CHUNK, 1, n), dtype=np.int64)
        return m_slots, u, s_key, e_pk, e1, e2, ks, sum_z2

    def _workspaces(self):
        n = self.n
        nreg = self.schedule.n_regs
        return (np.zeros((CHUNK, nreg, n), dtype=np.int64),
                np.zeros((CHUNK, nreg, n), dtype=np.int64),
                np.zeros((CHUNK, 8, n), dtype=np.int64),
                np.zeros((CHUNK, n), dtype=np.int64),
                np.zeros((CHUNK, n), dtype=np.int64))

    def run_chunks(self, q_limb_sets, seed: int, trials: int, scale: float):
        """Run trials; returns (fails [trials, nq], log_weights, sumv2, maxv).

        sumv2/maxv summarize the reference residual V = p*e - m per trial
        (second moment over coefficients, per-trial max) for tail fitting.
        """
        q_arr, r_arr, big = _q_arrays(q_limb_sets, self.p)
        n_chunks = -(-trials // CHUNK)
        fails = np.zeros((n_chunks * CHUNK, len(q_arr)), dtype=np.uint8)
        logw = np.zeros(n_chunks * CHUNK)
        sumv2 = np.zeros(n_chunks * CHUNK)
        maxv = np.zeros(n_chunks * CHUNK, dtype=np.int64)
        ht, pt = self.h_tables, self.p_tables
        ws = self._workspaces()
        for ci in range(n_chunks):
            m_slots, u, s_key, e_pk, e1, e2, ks, sum_z2 = self.draw_chunk(
                seed, ci, scale)
            fail_out = np.zeros((CHUNK, len(q_arr)), dtype=np.uint8)
            guard = np.zeros(CHUNK, dtype=np.int64)
            sv = np.zeros(CHUNK)
            mv = np.zeros(CHUNK, dtype=np.int64)
            _trial_batch(m_slots, u, s_key, e_pk, e1, e2, ks,
                         self.op_kind, self.op_dst, self.op_src, self.op_arg,
                         self.rot_noise, self.rot_perms, self.masks_hat,
                         self.schedule.n_regs,
                         ht.psis, ht.inv_psis, ht.n_inv, ht.modulus,
                         ht.inv_modulus,
                         pt.psis, pt.inv_psis, pt.n_inv, pt.modulus,
                         pt.inv_modulus,
                         self.slot_to_eval, self.p, q_arr, r_arr,
                         ws[0], ws[1], ws[2], ws[3], ws[4],
                         fail_out, guard, sv, mv)
            if guard.max(initial=0) > self.h_mod // 4:
                raise ParameterError(
                    "helper modulus headroom exhausted; pipeline values too "
                    "large for exact tracking")
            lo = ci * CHUNK
            fails[lo:lo + CHUNK] = fail_out
            sumv2[lo:lo + CHUNK] = sv
            maxv[lo:lo + CHUNK] = mv
            if scale != 1.0:
                # per pre-rounding draw x = scale*sigma*z:
                # ln(f/g) = ln(scale) - (scale^2 - 1) * z^2 / 2
                logw[lo:lo + CHUNK] = (
                    self.gauss_per_trial * math.log(scale)
                    - 0.5 * (scale * scale - 1.0) * sum_z2)
        fails = fails[:trials]
        logw = logw[:trials]
        for k in big:
            fails[:, k] = 0  # modulus beyond any trackable noise: no failures
        return fails, logw, sumv2[:trials], maxv[:trials]

    def trial_residual(self, seed: int, trial_idx: int, scale: float):
        """Recompute one trial's exact (e, m) residual pair (sample path)."""
        ci, off = divmod(trial_idx, CHUNK)
        m_slots, u, s_key, e_pk, e1, e2, ks, _ = self.draw_chunk(
            seed, ci, scale)
        ht, pt = self.h_tables, self.p_tables
        n = self.n
        nreg = self.schedule.n_regs
        e_out = np.empty(n, dtype=np.int64)
        m_out = np.empty(n, dtype=np.int64)
        _run_one_trial(m_slots[off], u[off], s_key[off], e_pk[off], e1[off],
                       e2[off], ks[off], self.op_kind, self.op_dst,
                       self.op_src, self.op_arg, self.rot_noise,
                       self.rot_perms, self.masks_hat, nreg,
                       ht.psis, ht.inv_psis, ht.n_inv, ht.modulus,
                       ht.inv_modulus, pt.psis, pt.inv_psis, pt.n_inv,
                       pt.modulus, pt.inv_modulus, self.slot_to_eval,
                       np.zeros((nreg, n), dtype=np.int64),
                       np.zeros((nreg, n), dtype=np.int64),
                       np.zeros((8, n), dtype=np.int64), e_out, m_out)
        return e_out, m_out, m_slots[off]

    def slot_errors_for(self, e_out, m_out, q_limbs):
        """Decode the slotwise plaintext error a failing trial produces."""
        q = 1
        for l in q_limbs:
            q *= int(l)
        r = q % self.p
        if r > self.p // 2:
            r -= self.p
        t = self.p * e_out.astype(object) - r * m_out.astype(object)
        kh = np.array([(2 * int(x) + q) // (2 * q) for x in t], dtype=object)
        delta = np.array([int(x) % self.p for x in kh], dtype=np.int64)
        evals = self.p_tables.forward(delta)
        slot_err = evals[self.slot_to_eval]
        signed = np.where(slot_err > self.p // 2, slot_err - self.p, slot_err)
        return signed

    def reference_trial(self, params: HEParams, seed: int, trial_idx: int,
                        scale: float = 1.0):
        """Run the same trial through the full BFV simulator (oracle path)."""
        ci, off = divmod(trial_idx, CHUNK)
        m_slots, u, s_key, e_pk, e1, e2, ks, _ = self.draw_chunk(
            seed, ci, scale)
        ctx = BfvContext(params, noise=self.noise, require_valid=False)
        rng = np.random.default_rng(99)  # public randomness a: cancels
        ctx.keygen_with(s_key[off], e_pk[off], rng)
        pt = ctx.encode_batch(m_slots[off])
        sched = self.schedule
        regs = [None] * sched.n_regs
        regs[0] = ctx.encrypt_with(pt, u[off], e1[off], e2[off])
        rot_i = 0
        for op in sched.ops:
            if op[0] == "rot":
                _, dst, src, step = op
                regs[dst] = ctx.rotate_with(regs[src], step, ks[off, rot_i])
                rot_i += 1
            elif op[0] == "mul":
                _, dst, src, mid = op
                mask_pt = ctx.encode_batch(np.asarray(sched.masks[mid]) % self.p)
                regs[dst] = ctx.mul_plain(regs[src], mask_pt)
            elif op[0] == "add":
                regs[op[1]] = ctx.add_ct(regs[op[1]], regs[op[2]])
            else:
                regs[op[1]] = regs[op[2]]
        out = regs[1]
        meas = ctx.measure_noise(out)
        sk = ctx._keys[0]
        decrypted = ctx.decrypt(out, sk)
        return meas, decrypted, out.shadow


def _helper_prime(n: int) -> int:
    from .params import find_ntt_primes
    return find_ntt_primes(n, 51, count=1)[0]


def _q_arrays(q_limb_sets, p):
    """int64 modulus array + centered residues; oversized moduli flagged."""
    q_arr = np.zeros(len(q_limb_sets), dtype=np.int64)
    r_arr = np.zeros(len(q_limb_sets), dtype=np.int64)
    big = []
    for k, limbs in enumerate(q_limb_sets):
        q = 1
        for l in limbs:
            q *= int(l)
        if q.bit_length() > 61:
            big.append(k)
            q_arr[k] = (1 << 61) - 1
            r_arr[k] = 1
            continue
        q_arr[k] = q
        r = q % p
        r_arr[k] = r - p if r > p // 2 else r
    return q_arr, r_arr, big


# ---------------------------------------------------------------- estimates


def _wilson_halfwidth_log2(fails: int, trials: int) -> float:
    if fails == 0:
        return float("inf")
    rate = fails / trials
    se = math.sqrt(rate * (1 - rate) / trials)
    lo = max(rate - 1.96 * se, 1e-300)
    hi = min(rate + 1.96 * se, 1.0)
    return 0.5 * (math.log2(hi) - math.log2(lo))


def _weighted_rate(fails: np.ndarray, logw: np.ndarray):
    """Importance-weighted failure rate and its log2 half-width."""
    trials = len(fails)
    mask = fails.astype(bool)
    raw = int(mask.sum())
    if raw == 0:
        return 0.0, float("inf"), 0
    w = np.exp(logw[mask])
    est = float(w.sum()) / trials
    var = (float((w * w).sum()) / trials - est * est) / trials
    se = math.sqrt(max(var, 0.0))
    if est <= 0:
        return 0.0, float("inf"), raw
    hi = est + 1.96 * se
    lo = max(est - 1.96 * se, est / 16.0)
    return est, 0.5 * (math.log2(hi) - math.log2(lo)), raw


def make_plan(layer: LayerSpec, n: int, p: int | None = None, weights=None,
              noise: NoiseModel | None = None, weight_seed: int = 0):
    """Build a TrialPlan; synthesizes quantized weights when none given."""
    p = p or choose_plaintext_modulus(n)
    noise = noise or DEFAULT_PLAN_NOISE
    if weights is None:
        weights = synth_weights(layer, seed=weight_seed)
    return TrialPlan(layer, n, p, weights, noise)


DEFAULT_PLAN_NOISE = NoiseModel()


def synth_weights(layer: LayerSpec, seed: int = 0, lo: int = -100,
                  hi: int = 101):
    rng = np.random.default_rng([seed, layer.index])
    if layer.kind == "fc":
        return rng.integers(lo, hi, size=(layer.c_out, layer.c_in))
    cin = 1 if layer.kind == "dwconv" else layer.c_in
    return rng.integers(lo, hi, size=(layer.c_out, cin, layer.k_s, layer.k_s))


@dataclass(frozen=True)
class TailModel:
    """Gaussian tail of the per-coefficient residual V = p*e - r*m.

    sigma_c comes from the exact second moment over every simulated
    coefficient; n_eff (effective independent coefficients per ciphertext)
    is calibrated against the directly measured per-ciphertext rates.
    Used to extend DER(q) below the Monte-Carlo floor; the overlap region
    is cross-checked against direct estimates in tests.
    """

    sigma_c: float
    n_eff: float
    calib_points: int

    def rate(self, q: int) -> float:
        z = float(q) / (2.0 * self.sigma_c)
        per_coeff = 2.0 * float(norm.sf(z))
        if per_coeff <= 0:
            return 0.0
        return float(-np.expm1(self.n_eff * np.log1p(-min(per_coeff, 0.5))))

    def q_bits_for_rate(self, target: float) -> float:
        per_coeff = -math.expm1(math.log1p(-target) / self.n_eff)
        z = float(norm.isf(per_coeff / 2.0))
        return math.log2(2.0 * z * self.sigma_c)


def fit_tail_model(plan: TrialPlan, fails, sumv2, trials: int,
                   q_limb_sets) -> TailModel:
    sigma_c = math.sqrt(float(sumv2.sum()) / (trials * plan.n))
    n_eff = float(plan.n)
    pts = 0
    ratios = []
    for k, limbs in enumerate(q_limb_sets):
        q = 1
        for l in limbs:
            q *= int(l)
        raw = int(fails[:trials, k].sum())
        rate = raw / trials
        if raw >= 20 and rate <= 0.5:
            per_coeff = 2.0 * float(norm.sf(float(q) / (2.0 * sigma_c)))
            if per_coeff > 0:
                implied = math.log1p(-rate) / math.log1p(-min(per_coeff, 0.5))
                if 1.0 <= implied <= 10.0 * plan.n:
                    ratios.append(implied)
                    pts += 1
    if ratios:
        n_eff = float(np.median(ratios))
    return TailModel(sigma_c=sigma_c, n_eff=n_eff, calib_points=pts)


def estimate_curve(plan: TrialPlan, q_limb_sets, trials: int, seed: int,
                   scale: float = 1.0, cache_dir=None, with_tail=False):
    """Failure estimates for every candidate modulus from shared trials."""
    key = _cache_key(plan, q_limb_sets, trials, seed, scale)
    cached = _cache_load(cache_dir, key)
    if cached is not None and (not with_tail or cached[1] is not None):
        return cached if with_tail else cached[0]
    fails, logw, sumv2, _maxv = plan.run_chunks(q_limb_sets, seed, trials,
                                                scale)
    method = "mc" if scale == 1.0 else "sss"
    out = []
    for k in range(len(q_limb_sets)):
        if scale == 1.0:
            raw = int(fails[:, k].sum())
            out.append(FailureEstimate(
                rate=raw / trials, method=method, trials=trials, scale=1.0,
                half_width_log2=_wilson_halfwidth_log2(raw, trials),
                raw_failures=raw))
        else:
            est, hw, raw = _weighted_rate(fails[:, k], logw)
            out.append(FailureEstimate(
                rate=min(est, 1.0), method=method, trials=trials, scale=scale,
                half_width_log2=hw, raw_failures=raw))
    tail = (fit_tail_model(plan, fails, sumv2, trials, q_limb_sets)
            if scale == 1.0 else None)
    _cache_store(cache_dir, key, (out, tail))
    return (out, tail) if with_tail else out


def estimate_mc(layer: LayerSpec, params: HEParams, trials: int, seed: int,
                weights=None, noise: NoiseModel | None = None,
                cache_dir=None) -> FailureEstimate:
    """Brute-force Monte Carlo estimate of the layer's failure rate."""
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    plan = make_plan(layer, params.n, params.p, weights, noise)
    return estimate_curve(plan, [params.q_limbs], trials, seed,
                          scale=1.0, cache_dir=cache_dir)[0]


def estimate_sss(layer: LayerSpec, params: HEParams, scale: float,
                 trials: int, seed: int, weights=None,
                 noise: NoiseModel | None = None,
                 cache_dir=None) -> FailureEstimate:
    """Sigma-scaled importance-sampling estimate (scale > 1)."""
    if scale <= 1.0:
        raise ParameterError("sigma scale must exceed 1 for amplification")
    plan = make_plan(layer, params.n, params.p, weights, noise)
    return estimate_curve(plan, [params.q_limbs], trials, seed,
                          scale=scale, cache_dir=cache_dir)[0]


# ------------------------------------------------------- analytic tracking


def _mask_stats(plan: TrialPlan):
    """(l1, l2sq) norms of each mask polynomial, centered mod p."""
    p = plan.p
    stats = []
    for vec in plan.schedule.masks:
        evals = np.zeros(plan.n, dtype=np.int64)
        evals[plan.slot_to_eval] = np.asarray(vec) % p
        poly = plan.p_tables.inverse(evals)
        signed = np.where(poly > p // 2, poly - p, poly).astype(float)
        stats.append((float(np.abs(signed).sum()),
                      float((signed * signed).sum())))
    return stats


def predict_noise_std(plan: TrialPlan, scale: float = 1.0) -> float:
    """Independence-assumption stddev of the scaled residual E = p*e - r*m.

    Used only to center candidate windows; certification comes from
    sampling or from the worst-case bound, never from this value.
    """
    n = plan.n
    sig = plan.noise.sigma * scale
    sigks = plan.noise.ks_sigma(n) * scale
    stats = _mask_stats(plan)
    var_fresh = sig * sig * (1.0 + 4.0 * n / 3.0)
    var_m0 = plan.p * plan.p / 12.0
    var_e = [0.0] * plan.schedule.n_regs
    var_m = [0.0] * plan.schedule.n_regs
    var_e[0] = var_fresh
    var_m[0] = var_m0
    for op, kind in zip(plan.schedule.ops, plan.op_kind):
        if kind == OP_ROT:
            _, dst, src, _ = op
            var_e[dst] = var_e[src] + sigks * sigks
            var_m[dst] = var_m[src]
        elif kind == OP_MUL:
            _, dst, src, mid = op
            l2 = stats[mid][1]
            var_e[dst] = var_e[src] * l2
            var_m[dst] = var_m[src] * l2
        elif kind == OP_ADD:
            _, dst, src = op
            var_e[dst] += var_e[src]
            var_m[dst] += var_m[src]
        else:
            _, dst, src = op
            var_e[dst] = var_e[src]
            var_m[dst] = var_m[src]
    p = plan.p
    return math.sqrt(p * p * var_e[1] + var_m[1])


def predict_qmin_bits(plan: TrialPlan, target_rate: float) -> float:
    """Model-based center for the q_min search window."""
    std = predict_noise_std(plan)
    per_coeff = max(target_rate / plan.n, 1e-300)
    z = float(norm.isf(per_coeff / 2.0))
    return math.log2(2.0 * z * std)


def worstcase_qmin_bits(plan: TrialPlan, union_draws: int | None = None,
                        rate_budget: float = 2.0 ** -40) -> float:
    """Sound worst-case bound: composes l-inf/l-1 bounds along the schedule.

    Conditional on every Gaussian draw staying within its truncation z
    (chosen so the union misses with probability rate_budget), no
    coefficient can overflow at the returned modulus size.
    """
    n = plan.n
    draws = union_draws if union_draws is not None else plan.gauss_per_trial
    z = float(norm.isf(rate_budget / (2.0 * draws)))
    sig = plan.noise.sigma
    sigks = plan.noise.ks_sigma(n)
    stats = _mask_stats(plan)
    p = plan.p
    b_fresh = z * sig * (2.0 * n + 1.0)
    b_e = [0.0] * plan.schedule.n_regs
    b_m = [0.0] * plan.schedule.n_regs
    b_e[0] = b_fresh
    b_m[0] = float(p - 1)
    for op, kind in zip(plan.schedule.ops, plan.op_kind):
        if kind == OP_ROT:
            _, dst, src, _ = op
            b_e[dst] = b_e[src] + z * sigks
            b_m[dst] = b_m[src]
        elif kind == OP_MUL:
            _, dst, src, mid = op
            l1 = stats[mid][0]
            b_e[dst] = b_e[src] * l1
            b_m[dst] = b_m[src] * l1
        elif kind == OP_ADD:
            _, dst, src = op
            b_e[dst] += b_e[src]
            b_m[dst] += b_m[src]
        else:
            _, dst, src = op
            b_e[dst] = b_e[src]
            b_m[dst] = b_m[src]
    bound = p * b_e[1] + b_m[1]
    return math.log2(2.0 * bound)


# --------------------------------------------------------------- q_min etc.


ADAPTIVE_START_SCALE = 1.02
ADAPTIVE_GROWTH = 1.25
MIN_RELIABLE_FAILURES = 20


def max_healthy_scale(plan: TrialPlan) -> float:
    """Largest sigma scale whose importance weights stay usable.

    The log-weight spread grows like (s^2-1)*sqrt(J/2); beyond ~1.5 nats
    the effective sample size collapses, so s-1 must shrink like 1/sqrt(J)
    with the number of scaled Gaussian draws J.
    """
    return 1.0 + 1.0 / math.sqrt(plan.gauss_per_trial)


def choose_scale(plan: TrialPlan, q_limb_sets, trials: int, seed: int,
                 cache_dir=None, min_raw: int = 100) -> float:
    """Grow the sigma scale until the rarest candidate sees raw failures,
    bounded by the weight-health ceiling."""
    ceiling = max_healthy_scale(plan)
    scale = min(ADAPTIVE_START_SCALE, ceiling)
    for _ in range(24):
        ests = estimate_curve(plan, q_limb_sets, min(trials, 4096), seed,
                              scale=scale, cache_dir=cache_dir)
        if min(e.raw_failures for e in ests) >= min_raw // 4:
            return scale
        if scale >= ceiling:
            return ceiling
        scale = min(scale * ADAPTIVE_GROWTH, ceiling)
    return scale


def der_curve(plan: TrialPlan, ladder, trials: int, seed: int,
              cache_dir=None):
    """Monotone DER(q) over a candidate ladder: direct Monte Carlo where
    measurable, the calibrated Gaussian tail model below the MC floor."""
    ests, tail = estimate_curve(plan, ladder, trials, seed, scale=1.0,
                                cache_dir=cache_dir, with_tail=True)
    rates = []
    running = 1.0
    for limbs, est in zip(ladder, ests):
        if est.raw_failures >= MIN_RELIABLE_FAILURES:
            rate = est.rate
            method = "mc"
        else:
            q = 1
            for l in limbs:
                q *= int(l)
            rate = tail.rate(q) if q.bit_length() <= 61 else 0.0
            method = "tail"
        running = min(running, rate)
        rates.append(FailureEstimate(
            rate=running, method=method, trials=trials,
            half_width_log2=est.half_width_log2,
            raw_failures=est.raw_failures))
    return rates, tail


def q_min_for_der(layer: LayerSpec, n: int, target: DerTarget,
                  p: int | None = None, weights=None,
                  noise: NoiseModel | None = None, trials: int = 16384,
                  seed: int = 0, cache_dir=None,
                  lambda_floor: int = SECURITY_FLOOR,
                  step_bits: float = 0.2, q_cap_bits: float | None = None):
    """Smallest modulus (limb set) meeting the DER target at this degree.

    Scans a sub-bit candidate ladder between the model-predicted floor and
    the security ceiling; rates for every candidate come from one shared
    batch of exact trials (coarse limb structure + fine last-limb stage),
    with the calibrated tail model carrying the curve below the direct
    Monte-Carlo floor.  Raises InfeasibleError when the degree cannot
    reach the target within the security ceiling (caller escalates n).
    """
    p = p or choose_plaintext_modulus(n)
    if q_cap_bits is not None:
        q_max = q_cap_bits
    else:
        table = default_security_table()
        q_max = table.q_max_for_security(n, noise.sigma if noise else 3.2,
                                         lambda_floor)
    plan = make_plan(layer, n, p, weights, noise)
    # the candidate window depends only on (layer, n) so the shared trial
    # batch is reused across every DER target
    center = predict_qmin_bits(plan, 2.0 ** -(D_RIGHT + 1))
    if predict_qmin_bits(plan, target.rate) > q_max + 2.5:
        raise InfeasibleError(
            f"predicted q_min 2^{center:.1f} far exceeds the security "
            f"ceiling 2^{q_max} at n={n}", {"n": n, "predicted_bits": center})
    lo = max(center - 5.0, 15.0)
    hi = q_max + 1e-9
    ladder = make_q_ladder(n, p, lo, hi, step_bits=step_bits)
    if not ladder:
        raise InfeasibleError(f"no modulus candidates for n={n} in "
                              f"[{lo:.1f}, {q_max}]", {"n": n})
    rates, tail = der_curve(plan, ladder, trials, seed, cache_dir=cache_dir)
    best = None
    for limbs, est in zip(ladder, rates):
        if est.rate <= target.rate:
            best = limbs
            break
    if best is None:
        raise InfeasibleError(
            f"no q at n={n} meets DER 2^-{target.d} within the security "
            f"ceiling (reached rate {rates[-1].rate:.3g})",
            {"n": n, "floor_rate": rates[-1].rate})
    return best, rates, ladder


def select_params_for_layer(layer: LayerSpec, target: DerTarget,
                            weights=None, noise: NoiseModel | None = None,
                            trials: int = 16384, seed: int = 0,
                            cache_dir=None, sigma: float = 3.2,
                            lambda_floor: int = SECURITY_FLOOR) -> HEParams:
    """Smallest (n, q) admitting the DER target with the security floor."""
    table = default_security_table()
    last_err = None
    for n in table.degrees():
        p = choose_plaintext_modulus(n)
        if p % (2 * n) != 1:
            continue
        try:
            limbs, _, _ = q_min_for_der(layer, n, target, p=p,
                                        weights=weights, noise=noise,
                                        trials=trials, seed=seed,
                                        cache_dir=cache_dir,
                                        lambda_floor=lambda_floor)
        except (InfeasibleError, ParameterError) as exc:
            last_err = exc
            continue
        params = HEParams(p=p, n=n, q_limbs=limbs, sigma=sigma)
        if params.lambda_bits is not None and params.lambda_bits >= lambda_floor:
            return params
        last_err = InfeasibleError(f"security drop at n={n}")
    raise InfeasibleError(
        f"no (n, q) on layer {layer.index} reaches DER 2^-{target.d}",
        {"last": str(last_err)})


def collect_error_samples(layer: LayerSpec, params: HEParams, count: int,
                          seed: int, weights=None,
                          noise: NoiseModel | None = None,
                          max_trials: int = 200000, cache_dir=None) -> list:
    """Slotwise plaintext errors from failing decryptions.

    Widens the noise (importance-tagging each sample) when the plain rate
    is too rare for the trial budget; returns [] with a notice when even
    that fails.
    """
    plan = make_plan(layer, params.n, params.p, weights, noise)
    out_slots = plan.schedule.out_slots
    scale = 1.0
    est = estimate_curve(plan, [params.q_limbs], min(8192, max_trials), seed,
                         scale=1.0, cache_dir=cache_dir)[0]
    need_rate = count / max_trials
    if est.rate < need_rate * 4:
        scale = ADAPTIVE_START_SCALE
        for _ in range(24):
            est = estimate_curve(plan, [params.q_limbs],
                                 min(8192, max_trials), seed, scale=scale,
                                 cache_dir=cache_dir)[0]
            if est.raw_failures / est.trials >= need_rate * 4:
                break
            scale *= ADAPTIVE_GROWTH
    fails, logw, _, _ = plan.run_chunks([params.q_limbs], seed, max_trials,
                                        scale)
    idx = np.nonzero(fails[:, 0])[0]
    samples = []
    for ti in idx[:count]:
        e_out, m_out, _ = plan.trial_residual(seed, int(ti), scale)
        slot_err = plan.slot_errors_for(e_out, m_out, params.q_limbs)
        vec = slot_err[out_slots]
        if not np.any(vec):
            vec = slot_err[:len(out_slots)]
        if not np.any(vec):
            continue
        samples.append(ErrorSample(slot_errors=vec, layer_index=layer.index,
                                   weight=float(np.exp(logw[ti]))))
    return samples


def split_samples(samples: list, seed: int) -> tuple:
    """Disjoint 50/50 split for finetuning vs evaluation."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    half = len(samples) // 2
    train = [samples[i] for i in order[:half]]
    evalh = [samples[i] for i in order[half:]]
    return train, evalh


# -------------------------------------------------------------------- cache


def _cache_key(plan: TrialPlan, q_limb_sets, trials, seed, scale) -> str:
    payload = json.dumps({
        "layer": plan.layer.geometry_key(),
        "n": plan.n, "p": plan.p,
        "sigma": plan.noise.sigma, "ksbits": plan.noise.ks_word_bits,
        "weights": plan.weights_hash(),
        "q": [[int(l) for l in limbs] for limbs in q_limb_sets],
        "trials": trials, "seed": seed, "scale": scale,
        "chunk": CHUNK, "version": CODE_VERSION,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def _cache_path(cache_dir, key):
    if cache_dir is None:
        cache_dir = os.environ.get("HEPLAN_CACHE_DIR", ".heplan_cache")
    os.makedirs(cache_dir, exist_ok=True)
    return os.path.join(cache_dir, f"est_{key}.json")


def _cache_load(cache_dir, key):
    path = _cache_path(cache_dir, key)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        data = json.load(fh)
    ests = [FailureEstimate(**row) for row in data["estimates"]]
    tail = TailModel(**data["tail"]) if data.get("tail") else None
    return ests, tail


def _cache_store(cache_dir, key, payload):
    estimates, tail = payload
    path = _cache_path(cache_dir, key)
    data = {
        "estimates": [
            {"rate": e.rate, "method": e.method, "trials": e.trials,
             "scale": e.scale, "half_width_log2": e.half_width_log2,
             "raw_failures": e.raw_failures} for e in estimates],
        "tail": ({"sigma_c": tail.sigma_c, "n_eff": tail.n_eff,
                  "calib_points": tail.calib_points} if tail else None),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(data, fh)
    os.replace(tmp, path)
