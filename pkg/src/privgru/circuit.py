"""Boolean circuit IR and builders for the garbled activation blocks.

Gates are XOR (free), AND (one garbled table entry pair), and INV
(absorbed into wire labels, free).  Wires are single-assignment and
gates are emitted in topological order.  Wires 0 and 1 are the constant
0/1 wires.

Numbers on wires are little-endian bit vectors; signed values are two's
complement.  Masked protocol values enter as 20-bit field elements
together with the server's 20-bit mask, are unmasked mod p inside the
circuit, trimmed to their certified width, pushed through the
activation (and optional fused Hadamard product), then re-masked with
the server's output mask before leaving.
"""

import math

import numpy as np

from .fixedpoint import round_half_even

XOR, AND, INV = 0, 1, 2
CONST0, CONST1 = 0, 1

OUT_MASK_BITS = 18          # output masks are uniform in [0, 2^18)
M_WIDTH = 19                # masked output width: value + mask headroom


class SpecError(ValueError):
    pass


class BoolCircuit:
    """Flat gate arrays plus named input/output bit groups."""

    def __init__(self, kinds, in0, in1, outs, levels, n_wires,
                 input_groups, output_groups):
        self.kinds = np.asarray(kinds, dtype=np.uint8)
        self.in0 = np.asarray(in0, dtype=np.int64)
        self.in1 = np.asarray(in1, dtype=np.int64)
        self.outs = np.asarray(outs, dtype=np.int64)
        self.levels = np.asarray(levels, dtype=np.int64)
        self.n_wires = n_wires
        self.input_groups = input_groups    # name -> list of wire ids (LSB first)
        self.output_groups = output_groups
        self._level_order = None
        self._and_index = None

    @property
    def n_gates(self):
        return len(self.kinds)

    def stats(self):
        non_xor = int(np.count_nonzero(self.kinds == AND))
        xor = int(np.count_nonzero(self.kinds == XOR))
        inv = int(np.count_nonzero(self.kinds == INV))
        depth = int(self.levels.max()) if len(self.levels) else 0
        return CircuitStats(self.n_gates, xor, non_xor, inv, depth)

    def level_order(self):
        """Gate indices grouped by level, cached."""
        if self._level_order is None:
            order = np.argsort(self.levels, kind="stable")
            lv = self.levels[order]
            bounds = np.searchsorted(lv, np.arange(lv[-1] + 2) if len(lv) else [0])
            self._level_order = (order, bounds)
        return self._level_order

    def and_index(self):
        """Table slot of each gate (AND gates numbered in emission order)."""
        if self._and_index is None:
            idx = np.cumsum(self.kinds == AND) - 1
            self._and_index = np.where(self.kinds == AND, idx, -1)
        return self._and_index

    def input_wires(self):
        wires = [CONST0, CONST1]
        for name in sorted(self.input_groups):
            wires.extend(self.input_groups[name])
        return wires

    def tile(self, copies):
        """Replicate the circuit; constant wires stay shared.

        Group 'g' becomes 'g' with element-major bit order: copy c's bits
        of group g sit at [c*len(g) : (c+1)*len(g)].
        """
        if copies == 1:
            return self
        w_per = self.n_wires - 2
        kinds = np.tile(self.kinds, copies)
        levels = np.tile(self.levels, copies)
        offs = (np.arange(copies, dtype=np.int64) * w_per)[:, None]

        def shift(arr):
            arr = np.asarray(arr, dtype=np.int64)
            tiled = np.broadcast_to(arr, (copies, len(arr))).copy()
            tiled += np.where(tiled >= 2, offs, 0)
            return tiled.reshape(-1)

        in0 = shift(self.in0)
        in1 = shift(self.in1)
        outs = shift(self.outs)
        igroups, ogroups = {}, {}
        for name, ws in self.input_groups.items():
            ws = np.asarray(ws, dtype=np.int64)
            tiled = np.broadcast_to(ws, (copies, len(ws))).copy()
            tiled += np.where(tiled >= 2, offs, 0)
            igroups[name] = tiled.reshape(-1).tolist()
        for name, ws in self.output_groups.items():
            ws = np.asarray(ws, dtype=np.int64)
            tiled = np.broadcast_to(ws, (copies, len(ws))).copy()
            tiled += np.where(tiled >= 2, offs, 0)
            ogroups[name] = tiled.reshape(-1).tolist()
        return BoolCircuit(kinds, in0, in1, outs, levels,
                           2 + w_per * copies, igroups, ogroups)

    def dump_netlist(self):
        """One gate per line: 'AND w3 w7 -> w12'."""
        names = {XOR: "XOR", AND: "AND", INV: "INV"}
        lines = []
        for name in sorted(self.input_groups):
            ws = " ".join(f"w{w}" for w in self.input_groups[name])
            lines.append(f"# input {name}: {ws}")
        for k, a, b, o in zip(self.kinds, self.in0, self.in1, self.outs):
            if k == INV:
                lines.append(f"INV w{a} -> w{o}")
            else:
                lines.append(f"{names[k]} w{a} w{b} -> w{o}")
        for name in sorted(self.output_groups):
            ws = " ".join(f"w{w}" for w in self.output_groups[name])
            lines.append(f"# output {name}: {ws}")
        return "\n".join(lines) + "\n"


class CircuitStats:
    def __init__(self, total_gates, xor_count, non_xor_count, inv_count, depth):
        self.total_gates = total_gates
        self.xor_count = xor_count
        self.non_xor_count = non_xor_count
        self.inv_count = inv_count
        self.depth = depth

    def __repr__(self):
        return (f"CircuitStats(total={self.total_gates}, xor={self.xor_count}, "
                f"and={self.non_xor_count}, inv={self.inv_count}, depth={self.depth})")


class ActivationSpec:
    """What one garbled block computes."""

    def __init__(self, kind, bits, fused_product=False, segments=None):
        kind = kind.upper()
        if kind not in ("RELU", "SIGMOID", "TANH"):
            raise SpecError(f"unknown activation kind {kind}")
        if kind == "RELU" and fused_product:
            raise SpecError("fused product is only built for sigmoid gates")
        if segments is None:
            segments = default_segments(kind, bits)
        if segments & (segments - 1):
            raise SpecError("segments must be a power of two")
        self.kind = kind
        self.bits = bits
        self.fused_product = fused_product
        self.segments = segments


def default_segments(kind, bits):
    """Piecewise-linear resolution per activation.

    Sigmoid gates are multiplicative attenuators: segment count tracks
    the output scale (error ~ 1/S^2, target half an output LSB).  The
    candidate tanh writes the hidden state directly, so it gets one
    segment per output-LSB step of the input, capped by the input code
    count.  This is also what makes the candidate path dominate block
    cost, matching the reference system's tanh >> sigmoid asymmetry.
    """
    from .fixedpoint import activation_scale_log2
    if kind == "RELU":
        return 1
    a = activation_scale_log2(bits)
    if kind == "SIGMOID":
        return int(min(32, max(8, 1 << max(1, a - 3)), 1 << max(1, bits - 2)))
    return int(min(1 << (a + 3), 1 << max(1, bits - 2)))


SLOPE_SCALE = {"SIGMOID": 12, "TANH": 14}


class Builder:
    """Gate emitter with constant folding and duplicate-input folding."""

    def __init__(self):
        self.kinds = [XOR, XOR]      # placeholders so wire ids line up
        self.kinds.clear()
        self.in0, self.in1, self.outs, self.levels = [], [], [], []
        self.level_of = {CONST0: 0, CONST1: 0}
        self.n_wires = 2
        self.input_groups = {}
        self.output_groups = {}

    def new_input_group(self, name, bits):
        ws = list(range(self.n_wires, self.n_wires + bits))
        for w in ws:
            self.level_of[w] = 0
        self.n_wires += bits
        self.input_groups[name] = ws
        return ws

    def mark_output(self, name, wires):
        self.output_groups[name] = list(wires)

    def _emit(self, kind, a, b):
        w = self.n_wires
        self.n_wires += 1
        self.kinds.append(kind)
        self.in0.append(a)
        self.in1.append(b if b is not None else a)
        self.outs.append(w)
        lv = max(self.level_of[a], self.level_of[b] if b is not None else 0) + 1
        self.level_of[w] = lv
        self.levels.append(lv)
        return w

    def xor(self, a, b):
        if a == b:
            return CONST0
        if a == CONST0:
            return b
        if b == CONST0:
            return a
        if a == CONST1:
            return self.inv(b)
        if b == CONST1:
            return self.inv(a)
        return self._emit(XOR, a, b)

    def inv(self, a):
        if a == CONST0:
            return CONST1
        if a == CONST1:
            return CONST0
        return self._emit(INV, a, None)

    def and_(self, a, b):
        if a == CONST0 or b == CONST0:
            return CONST0
        if a == CONST1:
            return b
        if b == CONST1:
            return a
        if a == b:
            return a
        return self._emit(AND, a, b)

    def or_(self, a, b):
        return self.inv(self.and_(self.inv(a), self.inv(b)))

    def mux(self, sel, a, b):
        """sel ? b : a (bitwise scalar)."""
        return self.xor(a, self.and_(sel, self.xor(a, b)))

    def build(self):
        return BoolCircuit(self.kinds, self.in0, self.in1, self.outs,
                           self.levels, self.n_wires,
                           self.input_groups, self.output_groups)

    # ---- word helpers (little-endian bit lists) -------------------------

    def const_bits(self, value, bits):
        return [(CONST1 if (value >> i) & 1 else CONST0) for i in range(bits)]

    def add_words(self, a, b, carry_in=None, carry_out=False):
        """Ripple-carry a+b mod 2^len; b-1 ANDs (one more with carry_out)."""
        n = len(a)
        assert len(b) == n
        out = []
        c = carry_in
        for i in range(n):
            axc = self.xor(a[i], c) if c is not None else a[i]
            bxc = self.xor(b[i], c) if c is not None else b[i]
            out.append(self.xor(axc, b[i]))
            last = (i == n - 1)
            if not last or carry_out:
                if c is None:
                    c = self.and_(a[i], b[i])
                else:
                    c = self.xor(self.and_(axc, bxc), c)
        return (out, c) if carry_out else out

    def sub_words(self, a, b, borrow_out=False):
        """a - b mod 2^len via a + ~b + 1; borrow = NOT carry_out."""
        nb = [self.inv(x) for x in b]
        res = self.add_words(a, nb, carry_in=CONST1, carry_out=borrow_out)
        if borrow_out:
            out, carry = res
            return out, self.inv(carry)
        return res

    def add_const(self, a, value, carry_out=False):
        """a + constant; ANDs only above the lowest set bit of value."""
        n = len(a)
        out = []
        c = None
        for i in range(n):
            bit = (value >> i) & 1
            if c is None and bit == 0:
                out.append(a[i])
                continue
            if c is None:           # first set bit: a+1 pattern
                out.append(self.inv(a[i]))
                c = a[i]
                continue
            axc = self.xor(a[i], c)
            if bit:
                out.append(self.inv(axc))
                c = self.or_(a[i], c)
            else:
                out.append(axc)
                c = self.and_(a[i], c)
        if carry_out:
            return out, (c if c is not None else CONST0)
        return out

    def mux_words(self, sel, a, b):
        return [self.mux(sel, x, y) for x, y in zip(a, b)]

    def ge_unsigned(self, a, b):
        """a >= b for unsigned words: carry_out of a + ~b + 1."""
        nb = [self.inv(x) for x in b]
        _, carry = self.add_words(a, nb, carry_in=CONST1, carry_out=True)
        return carry

    def sign_extend(self, a, bits):
        if len(a) >= bits:
            return a[:bits]
        return a + [a[-1]] * (bits - len(a))

    def zero_extend(self, a, bits):
        if len(a) >= bits:
            return a[:bits]
        return a + [CONST0] * (bits - len(a))

    def shl(self, a, k, bits):
        return ([CONST0] * k + a)[:bits]

    def mul_words(self, a, b, out_bits, a_signed=True, b_signed=False):
        """Schoolbook product of a (len A) and b (len B), low out_bits kept.

        Partial rows are a AND b_j, sign-extended when a is signed; two's
        complement addition mod 2^out_bits keeps everything consistent.
        """
        acc = None
        for j, bj in enumerate(b):
            width = out_bits - j
            if width <= 0:
                break
            ext = self.sign_extend(a, width) if a_signed else self.zero_extend(a, width)
            row = [self.and_(x, bj) for x in ext]
            row = [CONST0] * j + row
            if b_signed and j == len(b) - 1:
                # subtract the top row for a signed multiplier
                acc = self.sub_words(acc, row) if acc is not None else \
                    self.sub_words(self.const_bits(0, out_bits), row)
                continue
            acc = row if acc is None else self.add_words(acc, row)
        return acc if acc is not None else self.const_bits(0, out_bits)

    def fetch_constants(self, sel_bits, table, out_bits):
        """Mux tree selecting table[sel] from 2^len(sel_bits) signed constants.

        Leaf layers over constant bits fold away; cost is roughly one AND
        per remaining mux per output bit.
        """
        size = 1 << len(sel_bits)
        assert len(table) == size
        outs = []
        for bit in range(out_bits):
            layer = [(CONST1 if (int(table[k]) >> bit) & 1 else CONST0)
                     for k in range(size)]
            for s in sel_bits:
                layer = [self.mux(s, layer[2 * i], layer[2 * i + 1])
                         for i in range(len(layer) // 2)]
            outs.append(layer[0])
        return outs


# ---------------------------------------------------------------------------
# Primitive builders
# ---------------------------------------------------------------------------

def build_add(bits):
    if bits < 1:
        raise SpecError("bits must be >= 1")
    b = Builder()
    a = b.new_input_group("a", bits)
    c = b.new_input_group("b", bits)
    b.mark_output("sum", b.add_words(a, c))
    return b.build()


def build_sub(bits):
    if bits < 1:
        raise SpecError("bits must be >= 1")
    b = Builder()
    a = b.new_input_group("a", bits)
    c = b.new_input_group("b", bits)
    b.mark_output("diff", b.sub_words(a, c))
    return b.build()


def build_mux(bits):
    if bits < 1:
        raise SpecError("bits must be >= 1")
    b = Builder()
    sel = b.new_input_group("sel", 1)[0]
    a = b.new_input_group("a", bits)
    c = b.new_input_group("b", bits)
    b.mark_output("out", b.mux_words(sel, a, c))
    return b.build()


def build_ge(bits):
    if bits < 1:
        raise SpecError("bits must be >= 1")
    b = Builder()
    a = b.new_input_group("a", bits)
    c = b.new_input_group("b", bits)
    b.mark_output("ge", [b.ge_unsigned(a, c)])
    return b.build()


def build_relu(bits):
    """Bare two's-complement ReLU: x if sign bit clear else 0."""
    if bits < 2:
        raise SpecError("bits must be >= 2")
    b = Builder()
    x = b.new_input_group("x", bits)
    keep = b.inv(x[-1])
    b.mark_output("out", [b.and_(xi, keep) for xi in x])
    return b.build()


# ---------------------------------------------------------------------------
# Piecewise-linear activation tables
# ---------------------------------------------------------------------------

def pwl_constants(kind, in_bits, in_scale_log2, segments, out_scale_log2,
                  slope_scale=None):
    """Slope/intercept tables for a PWL approximation on the full input range.

    The domain is exactly the representable range of the in_bits input, so
    clamping is done by the outer segments themselves.  Intercepts are the
    exact function values at segment left edges; slopes are secants, both
    rounded half-even at their scales.
    """
    if kind == "SIGMOID":
        f = lambda x: 1.0 / (1.0 + np.exp(-x))
    elif kind == "TANH":
        f = np.tanh
    else:
        raise SpecError(f"no PWL table for {kind}")
    k = int(math.log2(segments))
    frac_bits = in_bits - k
    if frac_bits < 0:
        raise SpecError("more segments than input codes")
    lo_code = -(1 << (in_bits - 1))
    step_codes = 1 << frac_bits
    if slope_scale is None:
        slope_scale = SLOPE_SCALE[kind]
    xs = (lo_code + step_codes * np.arange(segments + 1)) / (2.0 ** in_scale_log2)
    ys = f(xs)
    intercepts = round_half_even(ys[:-1] * 2.0 ** out_scale_log2)
    secants = (ys[1:] - ys[:-1]) / (xs[1:] - xs[:-1])
    slopes = round_half_even(secants * 2.0 ** slope_scale)
    slope_bits = int(max(1, int(np.abs(slopes).max()))).bit_length() + 1
    inter_bits = int(max(1, int(np.abs(intercepts).max()))).bit_length() + 1
    # product slope*frac sits at slope_scale + in_scale; shift back to out
    shift = slope_scale + in_scale_log2 - out_scale_log2
    if shift < 0:
        raise SpecError("output scale finer than slope resolution")
    return {
        "kind": kind,
        "segments": segments,
        "index_bits": k,
        "frac_bits": frac_bits,
        "slopes": slopes.astype(np.int64),
        "intercepts": intercepts.astype(np.int64),
        "slope_scale_log2": slope_scale,
        "slope_bits": slope_bits,
        "intercept_bits": inter_bits,
        "shift": shift,
        "in_bits": in_bits,
        "in_scale_log2": in_scale_log2,
        "out_scale_log2": out_scale_log2,
    }


def pwl_error_bound(tbl):
    """Published max |pwl - f| over the whole input range (real units)."""
    if tbl["kind"] == "SIGMOID":
        f = lambda x: 1.0 / (1.0 + np.exp(-x))
        tail = 1.0 / (1.0 + np.exp(2.0 ** (tbl["in_bits"] - 1 - tbl["in_scale_log2"])))
    else:
        f = np.tanh
        tail = 1.0 - np.tanh(2.0 ** (tbl["in_bits"] - 1 - tbl["in_scale_log2"]))
    probe = np.arange(-(1 << (tbl["in_bits"] - 1)), 1 << (tbl["in_bits"] - 1))
    got = pwl_eval_int(probe, tbl) / 2.0 ** tbl["out_scale_log2"]
    ref = f(probe / 2.0 ** tbl["in_scale_log2"])
    return float(np.abs(got - ref).max() + tail)


def pwl_eval_int(x, tbl):
    """Integer reference of the PWL circuit, bit-exact.

    x: signed codes at in_scale; returns signed codes at out_scale.
    """
    x = np.asarray(x, dtype=np.int64)
    off = x + (1 << (tbl["in_bits"] - 1))
    seg = off >> tbl["frac_bits"]
    frac = off & ((1 << tbl["frac_bits"]) - 1)
    m = tbl["slopes"][seg]
    c = tbl["intercepts"][seg]
    prod = m * frac
    sh = tbl["shift"]
    if sh > 0:
        prod = (prod + (1 << (sh - 1))) >> sh
    out = c + prod
    if tbl["kind"] == "SIGMOID":
        lo, hi = 0, 1 << tbl["out_scale_log2"]
    else:
        hi = 1 << tbl["out_scale_log2"]
        lo = -hi
    return np.clip(out, lo, hi)


def build_pwl(builder, x_bits, tbl):
    """Emit the PWL evaluation on wires; returns output bit list (signed)."""
    b = builder
    in_bits = tbl["in_bits"]
    assert len(x_bits) == in_bits
    off = x_bits[:-1] + [b.inv(x_bits[-1])]        # two's complement -> offset
    k = tbl["index_bits"]
    frac = off[: tbl["frac_bits"]]
    sel = off[tbl["frac_bits"]:]
    assert len(sel) == k
    m = b.fetch_constants(sel, tbl["slopes"], tbl["slope_bits"])
    c = b.fetch_constants(sel, tbl["intercepts"], tbl["intercept_bits"])
    # one extra bit so the round-half-up constant cannot overflow the sign
    prod_bits = tbl["slope_bits"] + tbl["frac_bits"] + 1
    prod = b.mul_words(m, frac, prod_bits, a_signed=True, b_signed=False)
    sh = tbl["shift"]
    if sh > 0:
        prod = b.add_const(prod, 1 << (sh - 1))
        prod = prod[sh:] if len(prod) > sh else [prod[-1]]
    out_bits_needed = tbl["out_scale_log2"] + 2
    width = max(tbl["intercept_bits"], len(prod), out_bits_needed) + 1
    total = b.add_words(b.sign_extend(c, width), b.sign_extend(prod, width))
    if tbl["kind"] == "SIGMOID":
        lo, hi = 0, 1 << tbl["out_scale_log2"]
    else:
        hi = 1 << tbl["out_scale_log2"]
        lo = -hi
    out = clamp_signed(b, total, lo, hi, out_bits_needed)
    return out


def clamp_signed(builder, x, lo, hi, out_width):
    """Clamp a signed word into [lo, hi] and narrow to out_width bits."""
    b = builder
    w = len(x)
    xo = x[:-1] + [b.inv(x[-1])]                   # offset-binary for compares
    lo_off = lo + (1 << (w - 1))
    hi_off = hi + (1 << (w - 1))
    ge_lo = b.ge_unsigned(xo, b.const_bits(lo_off, w))
    le_hi = b.inv(b.ge_unsigned(xo, b.const_bits(hi_off + 1, w)))
    out = b.mux_words(ge_lo, b.const_bits(lo & ((1 << w) - 1), w), x)
    out = b.mux_words(le_hi, b.const_bits(hi & ((1 << w) - 1), w), out)
    return out[:out_width]


# ---------------------------------------------------------------------------
# Standalone sigmoid/tanh builders
# ---------------------------------------------------------------------------

def build_sigmoid(bits, segments=None, in_scale_log2=None, out_scale_log2=None):
    return _build_act("SIGMOID", bits, segments, in_scale_log2, out_scale_log2)


def build_tanh(bits, segments=None, in_scale_log2=None, out_scale_log2=None):
    return _build_act("TANH", bits, segments, in_scale_log2, out_scale_log2)


def _build_act(kind, bits, segments, in_scale_log2, out_scale_log2):
    from .fixedpoint import activation_scale_log2
    if segments is None:
        segments = default_segments(kind, bits)
    if in_scale_log2 is None:
        in_scale_log2 = max(0, bits - 3)
    if out_scale_log2 is None:
        out_scale_log2 = activation_scale_log2(bits)
    tbl = pwl_constants(kind, bits, in_scale_log2, segments, out_scale_log2)
    b = Builder()
    x = b.new_input_group("x", bits)
    b.mark_output("out", build_pwl(b, x, tbl))
    circ = b.build()
    circ.pwl_table = tbl
    return circ


# ---------------------------------------------------------------------------
# Protocol activation blocks
# ---------------------------------------------------------------------------

WINDOW_SLACK_BITS = 8       # statistical masking slack for narrow inputs
MODP_THRESHOLD = 12         # wider values get full uniform mod-p masks


class MaskedPort:
    """Masking geometry of one value crossing the HE/GC seam.

    mode 'modp': mask uniform over Z_p, circuit unmasks mod p (one
    subtract plus a conditional +p).  mode 'window': value_bits + 8 bit
    mask window, plain subtract, statistical distance <= 2^-8.
    """

    def __init__(self, p, value_bits, shift):
        self.p = p
        self.value_bits = value_bits
        self.shift = shift
        self.offset_code = (1 << (value_bits - 1)) + (
            (1 << (shift - 1)) if shift else 0)
        if value_bits > MODP_THRESHOLD:
            self.mode = "modp"
            self.wire_bits = p.bit_length()
            self.mask_range = p
        else:
            self.mode = "window"
            self.wire_bits = value_bits + WINDOW_SLACK_BITS
            self.mask_range = (1 << self.wire_bits) - (1 << value_bits)


class BlockGeometry:
    """All widths, scales and offset constants of one garbled block.

    The server homomorphically adds each port's offset_code (the
    non-negativity offset plus the folded round-half-up constant) before
    masking, so the circuit's entry truncation is a plain bit drop.
    """

    def __init__(self, cfg, spec: ActivationSpec, operand_scale_log2=None):
        self.cfg = cfg
        self.spec = spec
        p = cfg.modulus_p
        self.p = p
        a = cfg.activation_scale_log2
        prod = cfg.product_scale_log2
        self.in_scale_log2 = prod
        self.s_in = min(spec.bits - 3, prod)
        value_bits = prod + 3                       # |value| < 4 in real units
        self.sum_port = MaskedPort(p, value_bits, prod - self.s_in)
        self.act_bits = value_bits - self.sum_port.shift
        if spec.fused_product:
            if operand_scale_log2 is None:
                operand_scale_log2 = a
            self.op_in_scale_log2 = operand_scale_log2
            self.op_port = MaskedPort(p, operand_scale_log2 + 3,
                                      operand_scale_log2 - a)
            self.op_bits = self.op_port.value_bits - self.op_port.shift
            self.out_bits = a + 3                   # |g * d| < 4
        else:
            self.op_port = None
            self.out_bits = a + 2                   # activation range
        self.out_scale_log2 = a
        self.out_offset = 1 << (self.out_bits - 1)
        self.mask_bits = self.out_bits + 7
        self.m_width = self.mask_bits + 1


def build_activation_block(spec: ActivationSpec, cfg, operand_scale_log2=None):
    """Masked-share activation block.

    Inputs: masked_sum (20b field element y), input_mask (20b r), and for
    fused blocks masked_operand / operand_mask, plus output_mask (18b s).
    Output: masked result M = (value + out_offset) + s, 19 bits.
    """
    geo = BlockGeometry(cfg, spec, operand_scale_log2)
    b = Builder()
    y = b.new_input_group("masked_sum", geo.sum_port.wire_bits)
    r = b.new_input_group("input_mask", geo.sum_port.wire_bits)
    if spec.fused_product:
        y2 = b.new_input_group("masked_operand", geo.op_port.wire_bits)
        r2 = b.new_input_group("operand_mask", geo.op_port.wire_bits)
    s = b.new_input_group("output_mask", geo.mask_bits)

    x = _unmask(b, y, r, geo.sum_port)
    if spec.kind == "RELU":
        keep = b.inv(x[-1])
        relu = [b.and_(xi, keep) for xi in x]
        a = geo.out_scale_log2
        if geo.s_in >= a:
            sh = geo.s_in - a
            if sh > 0:
                relu = b.add_const(relu, 1 << (sh - 1))
                relu = relu[sh:]
        else:
            relu = b.shl(relu, a - geo.s_in, len(relu) + (a - geo.s_in))
        relu = b.zero_extend(relu, max(len(relu), geo.out_bits) + 1)
        out = clamp_signed(b, relu, 0, (1 << (a + 1)) - 1, geo.out_bits)
    else:
        tbl = pwl_constants(spec.kind, geo.act_bits, geo.s_in,
                            spec.segments, geo.out_scale_log2)
        g = build_pwl(b, x, tbl)
        if spec.fused_product:
            d = _unmask(b, y2, r2, geo.op_port)
            a = geo.out_scale_log2
            gu = b.zero_extend(g, a + 2)      # gate value in [0, 2^a]
            prod = b.mul_words(d, gu, len(d) + a + 2,
                               a_signed=True, b_signed=False)
            prod = b.add_const(prod, 1 << (a - 1))
            prod = prod[a:]
            hi = (1 << (a + 2)) - 1
            out = clamp_signed(b, prod, -hi, hi, geo.out_bits)
        else:
            out = b.sign_extend(g, geo.out_bits)
    # offset to non-negative, then remask
    out_off = out[:-1] + [b.inv(out[-1])]
    m = b.add_words(b.zero_extend(out_off, geo.m_width),
                    b.zero_extend(s, geo.m_width))
    b.mark_output("masked_out", m)
    circ = b.build()
    circ.geometry = geo
    return circ


def _unmask(b, y, r, port: MaskedPort):
    """Recover the offset value from a masked port, two's complement out.

    mod-p ports subtract mod 2^w and conditionally add back p (the value
    wrapped at most once); window ports cannot wrap at all.
    """
    w = len(y)
    if port.mode == "modp":
        diff, borrow = b.sub_words(y, r, borrow_out=True)
        corr = b.mux_words(borrow, b.const_bits(0, w), b.const_bits(port.p, w))
        u = b.add_words(diff, corr)
    else:
        u = b.sub_words(y, r)
    u = u[:port.value_bits]
    u = u[port.shift:] if port.shift else u
    return u[:-1] + [b.inv(u[-1])]      # offset-binary -> two's complement


# ---------------------------------------------------------------------------
# Integer reference semantics (what the block computes on unmasked values)
# ---------------------------------------------------------------------------

def rhu_shift_int(v, shift):
    """floor((v + 2^(shift-1)) / 2^shift): the blocks' truncation rule."""
    v = np.asarray(v, dtype=np.int64)
    if shift == 0:
        return v
    if shift < 0:
        return v << (-shift)
    return (v + (1 << (shift - 1))) >> shift


def block_reference_value(spec: ActivationSpec, geo: BlockGeometry, v, v2=None):
    """Bit-exact twin of build_activation_block on unmasked signed codes.

    v: pre-activation sum at product scale; v2: fused operand at its port
    scale.  Returns the signed output code at activation scale.
    """
    a = geo.out_scale_log2
    x = rhu_shift_int(v, geo.sum_port.shift)
    if spec.kind == "RELU":
        r = np.maximum(x, 0)
        r = rhu_shift_int(r, geo.s_in - a)
        return np.clip(r, 0, (1 << (a + 1)) - 1)
    tbl = pwl_constants(spec.kind, geo.act_bits, geo.s_in,
                        spec.segments, a)
    g = pwl_eval_int(x, tbl)
    if not spec.fused_product:
        return g
    d = rhu_shift_int(np.asarray(v2, dtype=np.int64), geo.op_port.shift)
    prod = rhu_shift_int(d * g, a)
    hi = (1 << (a + 2)) - 1
    return np.clip(prod, -hi, hi)


# ---------------------------------------------------------------------------
# Reference evaluation
# ---------------------------------------------------------------------------

def eval_plain(circuit: BoolCircuit, inputs, batch=False):
    """Deterministic gate-by-gate evaluation.

    inputs: dict group name -> int (or array of ints when batch=True).
    Returns dict group name -> int (or int64 array).
    """
    n = 1
    if batch:
        for v in inputs.values():
            n = max(n, len(np.atleast_1d(v)))
    wires = np.zeros((circuit.n_wires, n), dtype=np.uint8)
    wires[CONST1] = 1
    for name, ws in circuit.input_groups.items():
        if name not in inputs:
            raise KeyError(f"missing input group {name}")
        if batch:
            if len(ws) <= 63:
                v = np.asarray(inputs[name], dtype=np.int64)
                for i, w in enumerate(ws):
                    wires[w] = (v >> i) & 1
            else:
                vals = [int(x) for x in np.atleast_1d(inputs[name])]
                for i, w in enumerate(ws):
                    wires[w] = np.fromiter(((x >> i) & 1 for x in vals),
                                           dtype=np.uint8, count=len(vals))
        else:
            v = int(inputs[name])
            for i, w in enumerate(ws):
                wires[w] = (v >> i) & 1
    kinds, in0, in1, outs = circuit.kinds, circuit.in0, circuit.in1, circuit.outs
    for g in range(circuit.n_gates):
        k = kinds[g]
        if k == XOR:
            wires[outs[g]] = wires[in0[g]] ^ wires[in1[g]]
        elif k == AND:
            wires[outs[g]] = wires[in0[g]] & wires[in1[g]]
        else:
            wires[outs[g]] = 1 - wires[in0[g]]
    result = {}
    for name, ws in circuit.output_groups.items():
        if len(ws) <= 63:
            acc = np.zeros(n, dtype=np.int64)
            for i, w in enumerate(ws):
                acc |= wires[w].astype(np.int64) << i
        else:
            acc = np.zeros(n, dtype=object)
            for i, w in enumerate(ws):
                acc += wires[w].astype(object) << i
        result[name] = acc if batch else int(acc[0])
    return result


def stats(circuit: BoolCircuit):
    return circuit.stats()
