"""Primitive-op latency calibration and inference latency estimation.

The profiled operations are exactly the batched NTT-domain array kernels
the timed simulator executes, so a policy's estimated latency (counts
times primitives) can be validated against a wall-clock run of the same
schedule.  Profiling is single-threaded by design; timing noise is tamed
by batching work inside the timed region and taking medians.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (CalibrationError, GapError, InfeasibleError,
                     ParameterError)
from .modmath import get_ntt_tables, mulmod_np
from .packing import LayerSpec, build_schedule, extract_op_counts
from .params import LIMB_BITS_MAX, find_ntt_primes
from .policy import PolicyAssignment
from .ring import sample_gaussian_rounded

PROFILE_BATCH = 16  # ciphertext copies processed inside one timed op
OPS = ("mul_plain_us", "add_us", "rotate_us", "ntt_us")

FLOOD_N_FACTOR = 4
FLOOD_LOGQ_FACTOR = 3


def limbs_for_logq(log_q: float) -> int:
    return max(1, math.ceil(log_q / LIMB_BITS_MAX - 1e-9))


def host_fingerprint() -> str:
    info = f"{platform.node()}|{platform.machine()}|{platform.processor()}"
    return hashlib.sha256(info.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class LatencyEntry:
    n: int
    log_q: int
    limbs: int
    mul_plain_us: float
    add_us: float
    rotate_us: float
    ntt_us: float

    def get(self, op: str) -> float:
        return getattr(self, op)


@dataclass
class LatencyTable:
    entries: dict  # (n, limbs) -> LatencyEntry
    reps: int
    host: str
    timestamp: float
    interpolate: bool = False

    def lookup(self, n: int, log_q: float) -> LatencyEntry:
        limbs = limbs_for_logq(log_q)
        entry = self.entries.get((n, limbs))
        if entry is not None:
            return entry
        if not self.interpolate:
            raise GapError(
                f"latency table has no entry for n={n}, log_q={log_q:.1f} "
                f"({limbs} limbs); profile a wider grid or enable the "
                f"interpolation mode")
        same_n = sorted((e for (en, _), e in self.entries.items()
                         if en == n), key=lambda e: e.log_q)
        if not same_n:
            raise GapError(f"latency table has no rows at n={n}")
        lo = max((e for e in same_n if e.log_q <= log_q),
                 default=same_n[0], key=lambda e: e.log_q)
        hi = min((e for e in same_n if e.log_q >= log_q),
                 default=same_n[-1], key=lambda e: e.log_q)
        if lo.log_q == hi.log_q:
            return lo
        t = (log_q - lo.log_q) / (hi.log_q - lo.log_q)
        t = min(max(t, 0.0), 1.0)
        vals = {op: lo.get(op) + t * (hi.get(op) - lo.get(op)) for op in OPS}
        return LatencyEntry(n=n, log_q=int(round(log_q)),
                            limbs=limbs_for_logq(log_q), **vals)

    def validate_monotone(self):
        """Latency must be non-decreasing in n and in log_q, for every op."""
        problems = []
        keys = sorted(self.entries)
        for op in OPS:
            for (n, limbs) in keys:
                e = self.entries[(n, limbs)]
                up_n = self.entries.get((2 * n, limbs))
                if up_n is not None and up_n.get(op) < e.get(op):
                    problems.append(
                        f"{op} decreases from n={n} to n={2 * n} at "
                        f"{limbs} limbs ({e.get(op):.2f} -> "
                        f"{up_n.get(op):.2f} us)")
                up_q = self.entries.get((n, limbs + 1))
                if up_q is not None and up_q.get(op) < e.get(op):
                    problems.append(
                        f"{op} decreases from {limbs} to {limbs + 1} limbs "
                        f"at n={n} ({e.get(op):.2f} -> {up_q.get(op):.2f} us)")
        if problems:
            raise CalibrationError(
                "latency table is not monotone:\n  " + "\n  ".join(problems))

    # ------------------------------------------------------------ storage

    def save(self, path: str):
        rows = [e.__dict__ for e in self.entries.values()]
        data = {"reps": self.reps, "host": self.host,
                "timestamp": self.timestamp, "rows": rows, "version": 1}
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(data, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str, interpolate: bool = False) -> "LatencyTable":
        with open(path) as fh:
            data = json.load(fh)
        entries = {}
        for row in data["rows"]:
            e = LatencyEntry(**row)
            entries[(e.n, e.limbs)] = e
        return cls(entries=entries, reps=data["reps"], host=data["host"],
                   timestamp=data["timestamp"], interpolate=interpolate)


# ------------------------------------------------------------ timed kernels


class _OpBench:
    """The array kernels whose cost the table models.

    A ciphertext batch is a pair of (limbs, batch, n) int64 arrays in NTT
    evaluation form; operations mirror the simulator's semantics.
    """

    def __init__(self, n: int, limbs: int, seed: int = 0):
        self.n = n
        self.limbs = find_ntt_primes(n, LIMB_BITS_MAX + 1, count=limbs)
        self.tables = [get_ntt_tables(m, n) for m in self.limbs]
        rng = np.random.default_rng(seed)
        self.ct = [np.stack([rng.integers(0, m, size=(PROFILE_BATCH, n),
                                          dtype=np.int64) for m in self.limbs])
                   for _ in range(2)]
        self.mask = np.stack([rng.integers(0, m, size=n, dtype=np.int64)
                              for m in self.limbs])
        self.perm = self.tables[0].automorphism_perm(3)
        self.noise_sigma = 3.2 * 64.0 * math.sqrt(n / 12.0)
        self.rng = rng

    def op_mul_plain(self):
        for part in self.ct:
            for li, (m, tab) in enumerate(zip(self.limbs, self.tables)):
                part[li] = mulmod_np(part[li], self.mask[li][None, :], m,
                                     tab.inv_modulus)

    def op_add(self):
        for part in self.ct:
            for li, m in enumerate(self.limbs):
                s = part[li] + part[li]
                part[li] = np.where(s >= m, s - m, s)

    def op_ntt(self):
        for li, tab in enumerate(self.tables):
            self.ct[0][li] = tab.forward_batch(self.ct[0][li])

    def op_rotate(self):
        noise = sample_gaussian_rounded(self.noise_sigma,
                                        PROFILE_BATCH * self.n, self.rng
                                        ).reshape(PROFILE_BATCH, self.n)
        for part in self.ct:
            for li in range(len(self.limbs)):
                part[li] = part[li][:, self.perm]
        for li, (m, tab) in enumerate(zip(self.limbs, self.tables)):
            hats = tab.forward_batch(noise % m)
            s = self.ct[1][li] + hats
            self.ct[1][li] = np.where(s >= m, s - m, s)


def _time_op(fn, reps: int, min_time_ns: int = 6_000_000) -> float:
    """Median microseconds per single-ciphertext op (batch-amortized).

    Each rep keeps the best of three timed windows (scheduler spikes on a
    shared host only ever slow a window down); the returned value is the
    median over reps after warm-up.
    """
    fn()  # warm-up (JIT, caches)
    fn()
    # auto-batch: repeat the op inside the timed region until the region
    # is long enough for the timer
    inner = 1
    while True:
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            fn()
        if time.perf_counter_ns() - t0 >= min_time_ns:
            break
        inner *= 2
    samples = []
    for _ in range(reps):
        best = None
        for _ in range(3):
            t0 = time.perf_counter_ns()
            for _ in range(inner):
                fn()
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
        samples.append(best / inner / PROFILE_BATCH / 1000.0)
    return float(np.median(samples))


def profile_primitives(n_set, log_q_set, reps: int = 31,
                       seed: int = 0) -> LatencyTable:
    """Calibrate primitive latencies over the (n, log_q) grid.

    Covers the full cross product; rejects non-monotone results.
    """
    if reps < 30:
        raise ParameterError("need reps >= 30 for stable medians")
    entries = {}
    for n in sorted(n_set):
        for log_q in sorted(log_q_set):
            limbs = limbs_for_logq(log_q)
            if (n, limbs) in entries:
                continue
            bench = _OpBench(n, limbs, seed=seed)
            entry = LatencyEntry(
                n=n, log_q=int(log_q), limbs=limbs,
                mul_plain_us=_time_op(bench.op_mul_plain, reps),
                add_us=_time_op(bench.op_add, reps),
                rotate_us=_time_op(bench.op_rotate, reps),
                ntt_us=_time_op(bench.op_ntt, reps),
            )
            entries[(n, limbs)] = entry
    table = LatencyTable(entries=entries, reps=reps, host=host_fingerprint(),
                         timestamp=time.time())
    try:
        table.validate_monotone()
    except CalibrationError:
        # one retry with more reps before rejecting
        retry = profile_once_more(n_set, log_q_set, reps * 2 + 1, seed)
        retry.validate_monotone()
        return retry
    return table


def profile_once_more(n_set, log_q_set, reps, seed):
    entries = {}
    for n in sorted(n_set):
        for log_q in sorted(log_q_set):
            limbs = limbs_for_logq(log_q)
            if (n, limbs) in entries:
                continue
            bench = _OpBench(n, limbs, seed=seed)
            entries[(n, limbs)] = LatencyEntry(
                n=n, log_q=int(log_q), limbs=limbs,
                mul_plain_us=_time_op(bench.op_mul_plain, reps),
                add_us=_time_op(bench.op_add, reps),
                rotate_us=_time_op(bench.op_rotate, reps),
                ntt_us=_time_op(bench.op_ntt, reps),
            )
    return LatencyTable(entries=entries, reps=reps, host=host_fingerprint(),
                        timestamp=time.time())


# ------------------------------------------------------------- estimation


def layer_latency_us(layer: LayerSpec, params, table: LatencyTable,
                     flooding: bool = False) -> float:
    n = params.n * FLOOD_N_FACTOR if flooding else params.n
    log_q = params.log_q * FLOOD_LOGQ_FACTOR if flooding else params.log_q
    counts = extract_op_counts(layer, params.n)
    entry = table.lookup(n, log_q)
    return (counts.simd_mults * entry.mul_plain_us
            + counts.rotations * entry.rotate_us
            + counts.adds * entry.add_us)


def estimate_latency(network, policy: PolicyAssignment, table: LatencyTable,
                     flooding: bool = False):
    """Estimated linear-layer seconds: (total, per-layer list)."""
    per_layer = []
    for layer in network.layers:
        a = policy.assignment_for(layer.index)
        per_layer.append(layer_latency_us(layer, a.params, table, flooding)
                         * 1e-6)
    return float(sum(per_layer)), per_layer


def ciphertext_bytes(params) -> int:
    """Wire size of one ciphertext: two polynomials of n log_q-bit coeffs."""
    return int(2 * params.n * params.log_q / 8)


def communication_bytes(network, policy: PolicyAssignment,
                        flooding: bool = False) -> int:
    total = 0
    for layer in network.layers:
        a = policy.assignment_for(layer.index)
        counts = extract_op_counts(layer, a.params.n)
        params = a.params
        size = ciphertext_bytes(params)
        if flooding:
            size = int(2 * (params.n * FLOOD_N_FACTOR)
                       * (params.log_q * FLOOD_LOGQ_FACTOR) / 8)
        total += size * (counts.cts_in + counts.cts_out)
    return total


def simulate_policy_latency(network, policy: PolicyAssignment,
                            weights_by_layer=None, seed: int = 0) -> float:
    """Wall-clock seconds of actually executing every layer's schedule on
    batched ciphertext arrays (oracle for estimate_latency)."""
    from .failure import synth_weights
    total_ns = 0
    for layer in network.layers:
        a = policy.assignment_for(layer.index)
        n = a.params.n
        weights = (weights_by_layer.get(layer.index)
                   if weights_by_layer else None)
        if weights is None:
            weights = synth_weights(layer, seed=seed)
        sched = build_schedule(layer, n, weights)
        limbs = limbs_for_logq(a.params.log_q)
        bench = _OpBench(n, limbs, seed=seed)
        regs = [[part.copy() for part in bench.ct]
                for _ in range(sched.n_regs)]

        def run():
            for op in sched.ops:
                if op[0] == "rot":
                    bench.ct = regs[op[1]]
                    bench.op_rotate()
                elif op[0] == "mul":
                    bench.ct = regs[op[1]]
                    bench.op_mul_plain()
                elif op[0] == "add":
                    bench.ct = regs[op[1]]
                    bench.op_add()
                # mov is free

        run()  # warm-up
        best = None
        for _ in range(3):
            t0 = time.perf_counter_ns()
            run()
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
        total_ns += best / PROFILE_BATCH
    return total_ns * 1e-9


def enforce_budget(network, policy: PolicyAssignment, budget_seconds: float,
                   table: LatencyTable, downgrade, flooding: bool = False,
                   max_steps: int = 10000) -> PolicyAssignment:
    """Clip the policy until its estimate fits the budget.

    downgrade(layer, assignment) -> next assignment with one step smaller
    modulus (or degree), or None when the layer is at its floor.  Layers
    are visited in descending per-layer latency; clipped layers and their
    new implied failure rates ride along in the result.
    """
    if budget_seconds <= 0:
        raise InfeasibleError("latency budget must be positive")
    total, per_layer = estimate_latency(network, policy, table, flooding)
    if total <= budget_seconds:
        return policy.with_fields(estimated_latency=total)
    assignments = {a.layer_index: a for a in policy.assignments}
    clipped = set()
    for _ in range(max_steps):
        total, per_layer = estimate_latency(
            network, policy.with_fields(
                assignments=tuple(assignments.values())), table, flooding)
        if total <= budget_seconds:
            return policy.with_fields(
                assignments=tuple(assignments[l.index]
                                  for l in network.layers),
                estimated_latency=total,
                clipped_layers=tuple(sorted(clipped)))
        order = sorted(network.layers,
                       key=lambda l: -per_layer[network.layers.index(l)])
        stepped = False
        for layer in order:
            nxt = downgrade(layer, assignments[layer.index])
            if nxt is not None:
                assignments[layer.index] = nxt
                clipped.add(layer.index)
                stepped = True
                break
        if not stepped:
            raise InfeasibleError(
                f"budget {budget_seconds:.3f}s unreachable: every layer is "
                f"at its most aggressive parameters (estimate {total:.3f}s)")
    raise InfeasibleError("budget enforcement did not converge")
