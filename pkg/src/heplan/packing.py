"""Slot packing plans and homomorphic op schedules for linear layers.

Layout: one ciphertext per layer input.  Channels (or the flattened fc
vector) are spread across the usable row of n/2 slots at a power-of-two
block stride, so slot rotations cycle the blocks exactly.  Convolutions
use rotate-and-accumulate over kernel taps and channel offsets; fully
connected layers use the baby-step/giant-step diagonal method.  Masks
absorb borders, stride subsampling, and zero channel padding.

A schedule is a straight-line program over a small register file:
    ("rot", dst, src, step)   rotate slots left by step     cost: 1 rotation
    ("mul", dst, src, mask)   slotwise multiply by mask     cost: 1 simd mult
    ("add", dst, src)         dst += src                    cost: 1 add
    ("mov", dst, src)         register assign               cost: free
The same schedule drives cleartext checks, the exact BFV simulator, and
the batched failure-estimation kernel, so op counts and noise behaviour
cannot drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstructionError, ParameterError


def next_pow2(x: int) -> int:
    return 1 << max(0, (x - 1).bit_length())


@dataclass(frozen=True)
class LayerSpec:
    """One linear layer: conv / dwconv / fc with its geometry.

    fc layers normalize to k_s=1, s_s=0 and x_w=x_h=1 with c_in/c_out as
    feature counts.
    """

    index: int
    kind: str  # "conv" | "dwconv" | "fc"
    c_in: int
    c_out: int
    x_w: int
    x_h: int
    k_s: int = 1
    s_s: int = 1
    quant_bits: int = 8

    def __post_init__(self):
        if self.kind not in ("conv", "dwconv", "fc"):
            raise ConstructionError(f"unknown layer kind {self.kind!r}")
        if self.kind == "fc":
            object.__setattr__(self, "k_s", 1)
            object.__setattr__(self, "s_s", 0)
            object.__setattr__(self, "x_w", 1)
            object.__setattr__(self, "x_h", 1)
        else:
            if self.k_s < 1 or self.s_s < 1:
                raise ConstructionError("conv needs k_s >= 1 and s_s >= 1")
            if self.kind == "dwconv" and self.c_in != self.c_out:
                raise ConstructionError("depthwise conv keeps c_in == c_out")
        if min(self.c_in, self.c_out, self.x_w, self.x_h) < 1:
            raise ConstructionError("layer dims must be positive")

    @property
    def out_w(self) -> int:
        return 1 if self.kind == "fc" else -(-self.x_w // self.s_s)

    @property
    def out_h(self) -> int:
        return 1 if self.kind == "fc" else -(-self.x_h // self.s_s)

    @property
    def in_size(self) -> int:
        return self.c_in * self.x_w * self.x_h

    @property
    def out_size(self) -> int:
        return self.c_out * self.out_w * self.out_h

    def geometry_key(self) -> tuple:
        return (self.kind, self.c_in, self.c_out, self.x_w, self.x_h,
                self.k_s, self.s_s)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered linear layers plus dataset binding."""

    name: str
    layers: tuple
    activation: str = "relu"
    classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        prev = None
        for layer in self.layers:
            if prev is not None:
                if layer.kind == "fc":
                    want = prev.out_size if prev.kind != "fc" else prev.c_out
                    if layer.c_in != want:
                        raise ConstructionError(
                            f"layer {layer.index}: fc c_in {layer.c_in} != "
                            f"upstream size {want}")
                else:
                    if layer.c_in != prev.c_out:
                        raise ConstructionError(
                            f"layer {layer.index}: c_in {layer.c_in} != "
                            f"upstream c_out {prev.c_out}")
                    if (layer.x_w, layer.x_h) != (prev.out_w, prev.out_h):
                        raise ConstructionError(
                            f"layer {layer.index}: input {layer.x_w}x"
                            f"{layer.x_h} != upstream {prev.out_w}x{prev.out_h}")
            prev = layer


@dataclass(frozen=True)
class OpCounts:
    simd_mults: int
    rotations: int
    adds: int
    cts_in: int = 1
    cts_out: int = 1

    def scaled(self, k: int) -> "OpCounts":
        return OpCounts(self.simd_mults * k, self.rotations * k,
                        self.adds * k, self.cts_in * k, self.cts_out * k)


# register file layout for schedules
R_INPUT, R_ACC, R_CHAIN, R_PART, R_TMP = 0, 1, 2, 3, 4
N_FIXED_REGS = 5


@dataclass(frozen=True)
class Schedule:
    """Executable op program for one layer at one ring degree."""

    layer: LayerSpec
    n: int
    row: int                # usable slots (n/2)
    stride: int             # block stride in slots
    blocks: int             # cyclic block count (power of two)
    ops: tuple
    masks: tuple            # slot vectors (np.int64 arrays of length n)
    n_regs: int
    out_slots: np.ndarray   # slot index of each output value

    def counts(self) -> OpCounts:
        rot = sum(1 for op in self.ops if op[0] == "rot")
        mul = sum(1 for op in self.ops if op[0] == "mul")
        add = sum(1 for op in self.ops if op[0] == "add")
        return OpCounts(simd_mults=mul, rotations=rot, adds=add)


def _conv_deltas(layer: LayerSpec) -> list:
    """Structurally valid channel offsets for the cyclic block layout."""
    if layer.kind == "dwconv":
        return [0]
    blocks = next_pow2(max(layer.c_in, layer.c_out))
    deltas = sorted({(i - o) % blocks
                     for o in range(layer.c_out)
                     for i in range(layer.c_in)})
    return deltas


def _fc_geometry(layer: LayerSpec) -> tuple:
    d = next_pow2(max(layer.c_in, layer.c_out))
    baby = 1 << (d.bit_length() - 1) // 2 if d > 1 else 1
    baby = max(1, min(d, baby))
    giant = d // baby
    return d, baby, giant


def extract_op_counts(layer: LayerSpec, n: int) -> OpCounts:
    """Closed-form op counts for the packing plan (weight-independent)."""
    _check_capacity(layer, n)
    if layer.kind == "fc":
        d, baby, giant = _fc_geometry(layer)
        return OpCounts(simd_mults=d,
                        rotations=(baby - 1) + (giant - 1),
                        adds=d - 1)
    taps = layer.k_s * layer.k_s
    deltas = _conv_deltas(layer)
    center = layer.k_s // 2
    tap_rots = sum(1 for dy in range(layer.k_s) for dx in range(layer.k_s)
                   if (dy - center) * layer.x_w + (dx - center) != 0)
    return OpCounts(simd_mults=taps * len(deltas),
                    rotations=tap_rots + taps * (len(deltas) - 1),
                    adds=taps * len(deltas) - 1)


def _check_capacity(layer: LayerSpec, n: int) -> tuple:
    row = n // 2
    if layer.kind == "fc":
        blocks, _, _ = _fc_geometry(layer)
        stride = row // blocks
        if stride < 1:
            raise ParameterError(
                f"fc width {blocks} exceeds the {row} usable slots at n={n}")
        return row, stride, blocks
    blocks = next_pow2(max(layer.c_in, layer.c_out))
    s = layer.x_w * layer.x_h
    stride = row // blocks
    if stride < s:
        raise ParameterError(
            f"layer needs {blocks} blocks of {s} slots but the row only has "
            f"{row} slots at n={n}")
    # keep the stride aligned so rotations by k*stride stay block-cyclic
    stride = (row // blocks)
    return row, stride, blocks


def input_slots(layer: LayerSpec, n: int) -> np.ndarray:
    """Slot index of each input value (channel-major, then y, x)."""
    row, stride, blocks = _check_capacity(layer, n)
    if layer.kind == "fc":
        return np.arange(layer.c_in) * stride
    s = layer.x_w * layer.x_h
    idx = np.empty(layer.c_in * s, dtype=np.int64)
    for c in range(layer.c_in):
        idx[c * s:(c + 1) * s] = c * stride + np.arange(s)
    return idx


def pack_input(layer: LayerSpec, n: int, values) -> np.ndarray:
    """Spread-pack a flat input vector into the slot row (length n)."""
    slots = np.zeros(n, dtype=np.int64)
    idx = input_slots(layer, n)
    vals = np.asarray(values, dtype=np.int64).reshape(-1)
    if len(vals) != len(idx):
        raise ParameterError(f"expected {len(idx)} values, got {len(vals)}")
    slots[idx] = vals
    return slots


def output_slots(layer: LayerSpec, n: int) -> np.ndarray:
    """Slot index of each output value (c_out, out_h, out_w order)."""
    row, stride, blocks = _check_capacity(layer, n)
    if layer.kind == "fc":
        return np.arange(layer.c_out) * stride
    out = []
    for o in range(layer.c_out):
        for y in range(layer.out_h):
            for x in range(layer.out_w):
                out.append(o * stride + (y * layer.s_s) * layer.x_w
                           + x * layer.s_s)
    return np.array(out, dtype=np.int64)


def _conv_mask(layer, n, stride, blocks, weights, dy, dx, delta):
    """Mask slots for one (tap, channel-offset) product."""
    mask = np.zeros(n, dtype=np.int64)
    center = layer.k_s // 2
    for o in range(layer.c_out):
        i = (o + delta) % blocks
        if i >= layer.c_in:
            continue
        if layer.kind == "dwconv" and i != o:
            continue
        w = int(weights[o, 0 if layer.kind == "dwconv" else i, dy, dx])
        for y in range(layer.out_h):
            for x in range(layer.out_w):
                yy = y * layer.s_s + dy - center
                xx = x * layer.s_s + dx - center
                if not (0 <= yy < layer.x_h and 0 <= xx < layer.x_w):
                    continue
                slot = o * stride + (y * layer.s_s) * layer.x_w + x * layer.s_s
                mask[slot] = w
    return mask


def build_schedule(layer: LayerSpec, n: int, weights) -> Schedule:
    """Emit the op program and weight masks for a layer.

    weights: conv (c_out, c_in, k, k) int array (dwconv: (c, 1, k, k));
    fc (c_out, c_in).
    """
    row, stride, blocks = _check_capacity(layer, n)
    ops = []
    masks = []

    def mask_id(vec):
        masks.append(vec)
        return len(masks) - 1

    if layer.kind == "fc":
        d, baby, giant = _fc_geometry(layer)
        weights = np.asarray(weights)
        if weights.shape != (layer.c_out, layer.c_in):
            raise ParameterError("fc weights shape mismatch")
        # baby registers hold rot(x, b*stride) for b in [0, baby)
        baby_reg = [R_INPUT]
        for b in range(1, baby):
            reg = N_FIXED_REGS + b - 1
            ops.append(("rot", reg, baby_reg[-1], stride))
            baby_reg.append(reg)
        first_out = True
        for g in range(giant):
            first_part = True
            for b in range(baby):
                # mask[j] = M[(j - gB) mod D, (j + b) mod D]; after the
                # giant rotation by gB this contributes diag_{gB+b}
                vec = np.zeros(n, dtype=np.int64)
                for j in range(d):
                    r = (j - g * baby) % d
                    c = (j + b) % d
                    if r < layer.c_out and c < layer.c_in:
                        vec[j * stride] = int(weights[r, c])
                ops.append(("mul", R_TMP, baby_reg[b], mask_id(vec)))
                if first_part:
                    ops.append(("mov", R_PART, R_TMP))
                    first_part = False
                else:
                    ops.append(("add", R_PART, R_TMP))
            if g > 0:
                ops.append(("rot", R_PART, R_PART,
                            (g * baby * stride) % row))
            if first_out:
                ops.append(("mov", R_ACC, R_PART))
                first_out = False
            else:
                ops.append(("add", R_ACC, R_PART))
        n_regs = N_FIXED_REGS + max(0, baby - 1)
    else:
        weights = np.asarray(weights)
        want = (layer.c_out, 1 if layer.kind == "dwconv" else layer.c_in,
                layer.k_s, layer.k_s)
        if weights.shape != want:
            raise ParameterError(
                f"conv weights shape {weights.shape} != {want}")
        deltas = _conv_deltas(layer)
        center = layer.k_s // 2
        first_out = True
        for dy in range(layer.k_s):
            for dx in range(layer.k_s):
                step = (dy - center) * layer.x_w + (dx - center)
                if step % row == 0:
                    tap_reg = R_INPUT
                else:
                    ops.append(("rot", R_CHAIN, R_INPUT, step % row))
                    tap_reg = R_CHAIN
                prev_delta = 0
                chain_reg = tap_reg
                for delta in deltas:
                    if delta == 0:
                        src = tap_reg
                    else:
                        ops.append(("rot", R_PART, chain_reg,
                                    ((delta - prev_delta) * stride) % row))
                        chain_reg = R_PART
                        prev_delta = delta
                        src = R_PART
                    vec = _conv_mask(layer, n, stride, blocks, weights,
                                     dy, dx, delta)
                    ops.append(("mul", R_TMP, src, mask_id(vec)))
                    if first_out:
                        ops.append(("mov", R_ACC, R_TMP))
                        first_out = False
                    else:
                        ops.append(("add", R_ACC, R_TMP))
        n_regs = N_FIXED_REGS

    return Schedule(layer=layer, n=n, row=row, stride=stride, blocks=blocks,
                    ops=tuple(ops), masks=tuple(masks), n_regs=n_regs,
                    out_slots=output_slots(layer, n))


def execute_clear(schedule: Schedule, packed_slots: np.ndarray) -> np.ndarray:
    """Run the schedule on cleartext slots (integer arithmetic, no modulus).

    Oracle for packing correctness: result row equals the layer's linear
    map applied to the packed input.
    """
    n = schedule.n
    row = schedule.row

    def rot(vec, k):
        out = vec.copy()
        out[:row] = np.roll(vec[:row], -k)
        out[row:] = np.roll(vec[row:], -k)
        return out

    regs = [np.zeros(n, dtype=np.int64) for _ in range(schedule.n_regs)]
    regs[R_INPUT] = np.asarray(packed_slots, dtype=np.int64).copy()
    for op in schedule.ops:
        kind = op[0]
        if kind == "rot":
            _, dst, src, step = op
            regs[dst] = rot(regs[src], step)
        elif kind == "mul":
            _, dst, src, mid = op
            regs[dst] = regs[src] * schedule.masks[mid]
        elif kind == "add":
            _, dst, src = op
            regs[dst] = regs[dst] + regs[src]
        elif kind == "mov":
            _, dst, src = op
            regs[dst] = regs[src].copy()
        else:
            raise ParameterError(f"unknown op {kind}")
    return regs[R_ACC]


def layer_linear_oracle(layer: LayerSpec, weights, values) -> np.ndarray:
    """Direct dense computation of the layer's linear map (no packing)."""
    if layer.kind == "fc":
        return np.asarray(weights, dtype=np.int64) @ np.asarray(
            values, dtype=np.int64)
    x = np.asarray(values, dtype=np.int64).reshape(
        layer.c_in, layer.x_h, layer.x_w)
    w = np.asarray(weights, dtype=np.int64)
    c = layer.k_s // 2
    out = np.zeros((layer.c_out, layer.out_h, layer.out_w), dtype=np.int64)
    for o in range(layer.c_out):
        ins = [o] if layer.kind == "dwconv" else range(layer.c_in)
        for ii, i in enumerate(ins):
            wi = w[o, 0 if layer.kind == "dwconv" else i]
            for y in range(layer.out_h):
                for xx in range(layer.out_w):
                    acc = 0
                    for dy in range(layer.k_s):
                        for dx in range(layer.k_s):
                            sy = y * layer.s_s + dy - c
                            sx = xx * layer.s_s + dx - c
                            if 0 <= sy < layer.x_h and 0 <= sx < layer.x_w:
                                acc += int(wi[dy, dx]) * int(x[i, sy, sx])
                    out[o, y, xx] += acc
    return out.reshape(-1)
