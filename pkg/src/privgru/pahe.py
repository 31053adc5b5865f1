"""Packed additive homomorphic encryption.

BFV-style RLWE over R_q = Z_q[X]/(X^N+1) restricted to the additive
subset: encryption of slot vectors, ct+ct addition, ct+plaintext
addition, negation, and plaintext-matrix x ciphertext-vector products.
There is deliberately no ciphertext-ciphertext multiplication.

The ciphertext modulus q is the product of two 30-bit NTT primes
(60 bits total); the plaintext modulus p is a 20-bit prime with
p = 1 (mod 2N) so vectors pack into slots.

Noise is tracked as a conservative infinity-norm bound.  Every
operation inflates the bound by its worst-case growth, and decryption
refuses to run once the bound reaches the decodable ceiling, so a
tracked budget of zero means failure, never silent corruption.

Matrix-vector products use row-tiled packing: the client supplies the
vector replicated into width-C groups (one bundle ciphertext per column
chunk, in two plaintext windows a la Gazelle), the server multiplies by
row-stacked weight plaintexts, sums the chunk products, and folds each
group with a log2(C) rotate-and-add tree.  Rotations happen only after
plaintext multiplication, which is what keeps the worst-case noise
bound inside a 60-bit modulus.
"""

import math
import struct
import zlib

import numpy as np

from . import ntt
from .fixedpoint import (FixedPointConfig, QuantizedVector, largest_prime_below,
                         signed_lift)


class ParamError(ValueError):
    pass


class NoiseExhausted(RuntimeError):
    """Tracked noise budget hit zero; decryption is no longer guaranteed."""


class ScaleMismatch(ValueError):
    pass


class DimensionError(ValueError):
    pass


PT_WINDOW_BITS = 10          # plaintext window split for ptmul noise control
KS_DIGIT_BITS = 8            # key-switch gadget digit width
CHUNK = 16                   # columns per input chunk / rotate-tree group


def _find_ct_primes(n, total_bits=60):
    half = total_bits // 2
    q1 = largest_prime_below(1 << half, 1, 2 * n)
    q2 = largest_prime_below(q1, 1, 2 * n)
    return q1, q2


class PaheParams:
    """Ring, moduli, and the noise-accounting constants derived from them."""

    def __init__(self, ring_dimension=2048, plaintext_modulus=None,
                 ciphertext_modulus_bits=60, error_stddev=3.2,
                 fixedpoint: FixedPointConfig = None):
        if ring_dimension & (ring_dimension - 1):
            raise ParamError("ring_dimension must be a power of two")
        if fixedpoint is None:
            fixedpoint = FixedPointConfig(ring_dim=ring_dimension)
        if plaintext_modulus is None:
            plaintext_modulus = fixedpoint.modulus_p
        if plaintext_modulus % (2 * ring_dimension) != 1:
            raise ParamError("plaintext_modulus must be 1 mod 2*ring_dimension")
        self.n = ring_dimension
        self.p = plaintext_modulus
        self.fixedpoint = fixedpoint
        self.ciphertext_modulus_bits = ciphertext_modulus_bits
        self.error_stddev = error_stddev
        self.q1, self.q2 = _find_ct_primes(ring_dimension, ciphertext_modulus_bits)
        self.q = self.q1 * self.q2
        self.delta = self.q // self.p
        self.q_mod_p = self.q % self.p
        # decryption recovers m while ||noise||_inf stays under this
        self.noise_ceiling = (self.delta - self.q_mod_p) // 2
        self.err_bound = int(math.ceil(6 * error_stddev))
        self.fresh_sym_noise = self.err_bound + 1
        self.fresh_pk_noise = 2 * self.n * self.err_bound + self.err_bound + 1
        self.ks_digits_per_prime = math.ceil(30 / KS_DIGIT_BITS)
        self.ks_digits_total = 2 * self.ks_digits_per_prime
        self.ks_noise = (self.ks_digits_total * self.n *
                         ((1 << KS_DIGIT_BITS) - 1) * self.err_bound)
        self.params_id = zlib.crc32(
            f"{self.n}:{self.p}:{self.q1}:{self.q2}:{error_stddev}".encode()
        ) & 0xFFFFFFFF
        self._build_ntt()
        self._build_slots()
        self._build_gadget()

    def _build_ntt(self):
        self.ctx1 = ntt.PrimeContext(self.q1, self.n)
        self.ctx2 = ntt.PrimeContext(self.q2, self.n)
        self.ctxp = ntt.PrimeContext(self.p, self.n)
        self.contexts = (self.ctx1, self.ctx2)
        self.primes = (self.q1, self.q2)

    def _build_slots(self):
        # physical slot i of the mod-p NTT evaluates at psi^{expo[i]};
        # logical order follows powers of 3 so Galois 3^r is a row rotation.
        n, p = self.n, self.p
        psi = self.ctxp.psi
        probe = np.zeros(n, dtype=np.uint64)
        probe[1] = 1
        vals = self.ctxp.fwd(probe.copy())
        pw = {}
        acc = 1
        for e in range(2 * n):
            pw[acc] = e
            acc = acc * psi % p
        self.slot_expo = np.array([pw[int(v)] for v in vals], dtype=np.int64)
        expo_to_phys = {int(e): i for i, e in enumerate(self.slot_expo)}
        half = n // 2
        log2phys = np.empty(n, dtype=np.int64)
        for pos in range(half):
            e = pow(3, pos, 2 * n)
            log2phys[pos] = expo_to_phys[e]
            log2phys[half + pos] = expo_to_phys[2 * n - e]
        self.log2phys = log2phys
        self._expo_to_phys = expo_to_phys
        self.rows = 2
        self.row_size = half

    def _build_gadget(self):
        # CRT units scaled by digit powers: B_{i,j} = crt_i * 2^{j*w} mod q
        q, q1, q2 = self.q, self.q1, self.q2
        crt1 = q2 * pow(q2, -1, q1) % q
        crt2 = q1 * pow(q1, -1, q2) % q
        self.gadget = []
        for crt in (crt1, crt2):
            for j in range(self.ks_digits_per_prime):
                self.gadget.append(crt * (1 << (j * KS_DIGIT_BITS)) % q)

    # automorphism X -> X^g as a coefficient permutation with signs
    def auto_maps(self, g):
        n = self.n
        j = np.arange(n, dtype=np.int64)
        idx = (j * g) % (2 * n)
        tgt = idx % n
        neg = idx >= n
        return tgt, neg

    def galois_for_rotation(self, r):
        return pow(3, r, 2 * self.n)

    def encode_slots(self, logical_vals):
        """Logical slot vector (len N, mod p) -> plaintext polynomial."""
        vals = np.zeros(self.n, dtype=np.uint64)
        v = np.asarray(logical_vals, dtype=np.int64) % self.p
        vals[self.log2phys] = v.astype(np.uint64)
        return self.ctxp.inv(vals.copy())

    def decode_slots(self, poly):
        phys = self.ctxp.fwd(np.asarray(poly, dtype=np.uint64).copy())
        return phys[self.log2phys].astype(np.int64)




def _scale_message(m_poly, params, q):
    """round(q * m / p) reduced mod the RNS prime q (exact, vectorized).

    q*m/p = m*Delta + m*r/p with r = q mod p; m*r fits int64.
    """
    m = m_poly.astype(np.int64)
    corr = (m * params.q_mod_p + params.p // 2) // params.p
    dm = (np.uint64(params.delta % q) * m_poly + corr.astype(np.uint64)) % np.uint64(q)
    return dm


class Ciphertext:
    """An RLWE pair in RNS coefficient form plus tracked metadata.

    data: uint64 array (2 polys, 2 primes, N coeffs).
    noise_bound: proven infinity-norm bound on the decryption noise.
    """

    __slots__ = ("data", "scale_log2", "noise_bound", "params", "_ntt")

    def __init__(self, data, scale_log2, noise_bound, params):
        self.data = data
        self.scale_log2 = scale_log2
        self.noise_bound = noise_bound
        self.params = params
        self._ntt = None

    @property
    def slot_count(self):
        return self.params.n

    def ntt_form(self):
        if self._ntt is None:
            out = self.data.copy()
            for poly in range(2):
                for k, ctx in enumerate(self.params.contexts):
                    out[poly, k] = ctx.fwd(np.ascontiguousarray(out[poly, k]))
            self._ntt = out
        return self._ntt

    def budget_bits(self):
        ceiling = self.params.noise_ceiling
        if self.noise_bound <= 0:
            return float(ceiling.bit_length())
        return math.log2(ceiling) - math.log2(self.noise_bound)

    def to_bytes(self):
        """params-id (4B LE) || c0 coeffs || c1 coeffs, 8-byte LE words."""
        q1, q2 = self.params.primes
        t1 = np.uint64(pow(q2, -1, q1))
        q1u, q2u = np.uint64(q1), np.uint64(q2)
        combined = np.empty((2, self.params.n), dtype=np.uint64)
        for poly in range(2):
            a1 = self.data[poly, 0]
            a2 = self.data[poly, 1]
            # CRT: x = a2 + q2 * ((a1 - a2) * t1 mod q1); all fits uint64
            diff = (a1 + q1u - a2 % q1u) % q1u
            combined[poly] = a2 + q2u * ((diff * t1) % q1u)
        return (struct.pack("<I", self.params.params_id)
                + combined.tobytes())

    @classmethod
    def from_bytes(cls, raw, params, scale_log2, noise_bound):
        pid = struct.unpack("<I", raw[:4])[0]
        if pid != params.params_id:
            raise ParamError("ciphertext was produced under different params")
        flat = np.frombuffer(raw[4:], dtype=np.uint64).reshape(2, params.n)
        data = np.empty((2, 2, params.n), dtype=np.uint64)
        for poly in range(2):
            data[poly, 0] = flat[poly] % np.uint64(params.q1)
            data[poly, 1] = flat[poly] % np.uint64(params.q2)
        return cls(data, scale_log2, noise_bound, params)


class KeyPair:
    """Secret key plus the public/evaluation material derived from it."""

    def __init__(self, params, secret, public, rotation_keys):
        self.params = params
        self.secret = secret              # ternary coeffs, int64
        self.public = public              # (pk0, pk1) in RNS coeff form
        self.rotation_keys = rotation_keys

    def public_material(self):
        return PublicMaterial(self.params, self.public, self.rotation_keys)


class PublicMaterial:
    """What the evaluating party holds: pk and rotation keys, no secret."""

    def __init__(self, params, public, rotation_keys):
        self.params = params
        self.public = public
        self.rotation_keys = rotation_keys

    def byte_size(self):
        n = self.params.n
        per_poly = 2 * n * 8
        size = 2 * per_poly
        for key in self.rotation_keys.values():
            size += key.size * 8
        return size


def _sample_ternary(rng, n):
    return rng.integers(-1, 2, n, dtype=np.int64)


def _sample_error(rng, n, params):
    e = np.rint(rng.normal(0.0, params.error_stddev, n)).astype(np.int64)
    return np.clip(e, -params.err_bound, params.err_bound)


def _to_rns(int_poly, params):
    out = np.empty((2, params.n), dtype=np.uint64)
    for k, q in enumerate(params.primes):
        out[k] = (np.asarray(int_poly, dtype=np.int64) % q).astype(np.uint64)
    return out


class PaheBackend:
    """Real lattice backend."""

    name = "real"

    def __init__(self, params: PaheParams):
        self.params = params

    # ---- key generation -------------------------------------------------

    def keygen(self, seed, rotation_amounts=None):
        params = self.params
        rng = np.random.Generator(np.random.PCG64(seed))
        n = params.n
        s = _sample_ternary(rng, n)
        s_rns = _to_rns(s, params)
        s_ntt = [ctx.fwd(s_rns[k].copy()) for k, ctx in enumerate(params.contexts)]
        s_ntt_mont = [ctx._to_mont(s_ntt[k]) for k, ctx in enumerate(params.contexts)]

        a = self._uniform_poly(rng)
        e = _sample_error(rng, n, params)
        pk0 = self._neg(self._mul_by_secret(a, s_ntt_mont))
        pk0 = self._add_int(pk0, e)
        public = (pk0, a)

        if rotation_amounts is None:
            rotation_amounts = [1 << k for k in range(int(math.log2(CHUNK)) + 3)]
        rot_keys = {}
        for r in sorted(set(rotation_amounts)):
            g = params.galois_for_rotation(r)
            rot_keys[r] = self._make_ks_key(rng, g, s, s_ntt_mont)
        kp = KeyPair(params, s, public, rot_keys)
        kp._s_ntt_mont = s_ntt_mont
        return kp

    def _uniform_poly(self, rng):
        params = self.params
        out = np.empty((2, params.n), dtype=np.uint64)
        for k, q in enumerate(params.primes):
            out[k] = rng.integers(0, q, params.n, dtype=np.uint64)
        return out

    def _mul_by_secret(self, poly_rns, s_ntt_mont):
        params = self.params
        out = np.empty_like(poly_rns)
        for k, ctx in enumerate(params.contexts):
            t = ctx.fwd(poly_rns[k].copy())
            t = ctx.mul(t, s_ntt_mont[k])
            out[k] = ctx.inv(t)
        return out

    def _neg(self, poly_rns):
        out = np.empty_like(poly_rns)
        for k, q in enumerate(self.params.primes):
            qv = np.uint64(q)
            out[k] = (qv - poly_rns[k]) % qv
        return out

    def _add_int(self, poly_rns, int_poly):
        out = np.empty_like(poly_rns)
        for k, q in enumerate(self.params.primes):
            out[k] = (poly_rns[k] + (np.asarray(int_poly) % q).astype(np.uint64)) % np.uint64(q)
        return out

    def _make_ks_key(self, rng, galois_g, s, s_ntt_mont):
        """Keys K_{d} = (-(a_d s) + e_d + gadget_d * s(X^g), a_d), NTT-Mont form."""
        params = self.params
        tgt, neg = params.auto_maps(galois_g)
        s_rot = np.zeros(params.n, dtype=np.int64)
        s_rot[tgt] = np.where(neg, -s, s)
        nd = params.ks_digits_total
        key = np.empty((nd, 2, 2, params.n), dtype=np.uint64)
        for d in range(nd):
            a = self._uniform_poly(rng)
            e = _sample_error(rng, params.n, params)
            k0 = self._neg(self._mul_by_secret(a, s_ntt_mont))
            k0 = self._add_int(k0, e)
            for kk, q in enumerate(params.primes):
                b = params.gadget[d] % q
                term = (np.asarray(s_rot) % q).astype(np.uint64) * np.uint64(b) % np.uint64(q)
                k0[kk] = (k0[kk] + term) % np.uint64(q)
            for kk, ctx in enumerate(params.contexts):
                key[d, 0, kk] = ctx._to_mont(ctx.fwd(k0[kk].copy()))
                key[d, 1, kk] = ctx._to_mont(ctx.fwd(a[kk].copy()))
        return key

    # ---- encryption / decryption ----------------------------------------

    def encrypt(self, keys, message: QuantizedVector, rng, mode="sym"):
        """Encrypt a logical slot vector. 'sym' needs the secret key."""
        params = self.params
        if len(message.values) != params.n:
            vals = np.zeros(params.n, dtype=np.int64)
            vals[:len(message.values)] = message.values
        else:
            vals = message.values
        m_poly = params.encode_slots(vals)
        data = np.empty((2, 2, params.n), dtype=np.uint64)
        e = _sample_error(rng, params.n, params)
        if mode == "sym":
            if not isinstance(keys, KeyPair):
                raise ParamError("symmetric encryption needs the secret key")
            c1 = self._uniform_poly(rng)
            c0 = self._neg(self._mul_by_secret(c1, keys._s_ntt_mont))
            noise = params.fresh_sym_noise
        elif mode == "pk":
            public = keys.public if isinstance(keys, KeyPair) else keys.public
            u = _sample_ternary(rng, params.n)
            e2 = _sample_error(rng, params.n, params)
            u_rns = _to_rns(u, params)
            c0 = np.empty((2, params.n), dtype=np.uint64)
            c1 = np.empty((2, params.n), dtype=np.uint64)
            for k, ctx in enumerate(params.contexts):
                un = ctx.fwd(u_rns[k].copy())
                c0[k] = ctx.inv(ctx.mul(un, ctx._to_mont(
                    ctx.fwd(public[0][k].copy()))))
                c1[k] = ctx.inv(ctx.mul(un, ctx._to_mont(
                    ctx.fwd(public[1][k].copy()))))
            c1 = self._add_int(c1, e2)
            noise = params.fresh_pk_noise
        else:
            raise ParamError(f"unknown mode {mode}")
        c0 = self._add_int(c0, e)
        for k, q in enumerate(params.primes):
            c0[k] = (c0[k] + _scale_message(m_poly, params, q)) % np.uint64(q)
        data[0], data[1] = c0, c1
        return Ciphertext(data, message.scale_log2, noise, params)

    def decrypt(self, keys: KeyPair, ct: Ciphertext):
        params = self.params
        if ct.noise_bound >= params.noise_ceiling:
            raise NoiseExhausted(
                f"tracked noise bound 2^{math.log2(ct.noise_bound):.1f} >= "
                f"ceiling 2^{math.log2(params.noise_ceiling):.1f}")
        phase = np.empty((2, params.n), dtype=np.uint64)
        for k, ctx in enumerate(params.contexts):
            c1s = ctx.inv(ctx.mul(ctx.fwd(ct.data[1, k].copy()),
                                  keys._s_ntt_mont[k]))
            phase[k] = (ct.data[0, k] + c1s) % np.uint64(params.q1 if k == 0 else params.q2)
        q1, q2, q, p = params.q1, params.q2, params.q, params.p
        t1 = pow(q2, -1, q1)
        a1 = phase[0].astype(object)
        a2 = phase[1].astype(object)
        x = a2 + q2 * (((a1 - a2) * t1) % q1)
        poly = np.array([int((2 * p * xi + q) // (2 * q)) % p for xi in x],
                        dtype=np.uint64)
        slots = params.decode_slots(poly)
        return QuantizedVector(slots, ct.scale_log2, p)

    # ---- arithmetic -------------------------------------------------------

    def add_cc(self, a: Ciphertext, b: Ciphertext):
        if a.scale_log2 != b.scale_log2:
            raise ScaleMismatch(f"scale 2^{a.scale_log2} vs 2^{b.scale_log2}")
        params = self.params
        data = np.empty_like(a.data)
        for poly in range(2):
            for k, q in enumerate(params.primes):
                data[poly, k] = (a.data[poly, k] + b.data[poly, k]) % np.uint64(q)
        return Ciphertext(data, a.scale_log2,
                          a.noise_bound + b.noise_bound, params)

    def add_cp(self, a: Ciphertext, plain: QuantizedVector):
        if plain.scale_log2 != a.scale_log2:
            raise ScaleMismatch(f"scale 2^{a.scale_log2} vs 2^{plain.scale_log2}")
        params = self.params
        vals = np.zeros(params.n, dtype=np.int64)
        vals[:len(plain.values)] = plain.values
        m_poly = params.encode_slots(vals)
        data = a.data.copy()
        for k, q in enumerate(params.primes):
            data[0, k] = (data[0, k] + _scale_message(m_poly, params, q)) % np.uint64(q)
        return Ciphertext(data, a.scale_log2, a.noise_bound + 1, params)

    def negate(self, a: Ciphertext):
        params = self.params
        data = np.empty_like(a.data)
        for poly in range(2):
            for k, q in enumerate(params.primes):
                qv = np.uint64(q)
                data[poly, k] = (qv - a.data[poly, k]) % qv
        return Ciphertext(data, a.scale_log2, a.noise_bound, params)

    def rescale_plain(self, a: Ciphertext, factor_log2, new_scale_log2):
        """Multiply by the public constant 2^factor_log2 (exact, scales noise)."""
        params = self.params
        data = np.empty_like(a.data)
        c = 1 << factor_log2
        for poly in range(2):
            for k, q in enumerate(params.primes):
                data[poly, k] = (a.data[poly, k] * np.uint64(c % q)) % np.uint64(q)
        return Ciphertext(data, new_scale_log2, a.noise_bound * c, params)

    def rotate(self, material: PublicMaterial, ct: Ciphertext, amount):
        """Rotate logical slot rows by `amount` positions via key switching."""
        params = self.params
        if amount not in material.rotation_keys:
            raise ParamError(f"no rotation key for amount {amount}")
        g = params.galois_for_rotation(amount)
        tgt, neg = params.auto_maps(g)
        key = material.rotation_keys[amount]
        rot = np.empty_like(ct.data)
        for poly in range(2):
            for k, q in enumerate(params.primes):
                src = ct.data[poly, k].astype(np.int64)
                vals = np.where(neg, (q - src) % q, src)
                out = np.zeros(params.n, dtype=np.uint64)
                out[tgt] = vals.astype(np.uint64)
                rot[poly, k] = out
        # gadget-decompose rot(c1) and fold with the rotation key
        nd = params.ks_digits_total
        ndp = params.ks_digits_per_prime
        digits = np.empty((nd, params.n), dtype=np.uint64)
        for k in range(2):
            ntt.digit_split(np.ascontiguousarray(rot[1, k]), KS_DIGIT_BITS,
                            ndp, digits[k * ndp:(k + 1) * ndp])
        acc = np.zeros((2, 2, params.n), dtype=np.uint64)
        for k, ctx in enumerate(params.contexts):
            dig_ntt = digits.copy()
            ctx.fwd(dig_ntt)
            for d in range(nd):
                ntt.pw_addmul(acc[0, k], dig_ntt[d], key[d, 0, k], ctx.qu, ctx.qinv)
                ntt.pw_addmul(acc[1, k], dig_ntt[d], key[d, 1, k], ctx.qu, ctx.qinv)
            acc[0, k] = ctx.inv(np.ascontiguousarray(acc[0, k]))
            acc[1, k] = ctx.inv(np.ascontiguousarray(acc[1, k]))
        data = np.empty_like(ct.data)
        for k, q in enumerate(params.primes):
            data[0, k] = (rot[0, k] + acc[0, k]) % np.uint64(q)
            data[1, k] = acc[1, k]
        return Ciphertext(data, ct.scale_log2,
                          ct.noise_bound + params.ks_noise, params)

    def noise_budget(self, ct: Ciphertext):
        return ct.budget_bits()

    # ---- matvec -----------------------------------------------------------

    def encode_weights(self, w_codes, n_out, scale_log2):
        """Prepare row-tiled, windowed NTT plaintexts for one matrix.

        w_codes: (rows x cols) int64 field codes.  Returns a WeightPlan.
        """
        params = self.params
        rows, cols = w_codes.shape
        cap = params.rows * (params.row_size // CHUNK)
        if rows > cap:
            raise DimensionError(f"{rows} rows exceed packing capacity {cap}")
        chunks = math.ceil(cols / CHUNK)
        plan = WeightPlan(rows, cols, chunks, scale_log2)
        mask_lo = (1 << PT_WINDOW_BITS) - 1
        for c in range(chunks):
            slot_vals = np.zeros(params.n, dtype=np.int64)
            for r in range(rows):
                base = group_base(r)
                lo = c * CHUNK
                hi = min(cols, lo + CHUNK)
                slot_vals[base:base + (hi - lo)] = w_codes[r, lo:hi]
            poly = params.encode_slots(slot_vals).astype(np.int64)
            win0 = poly & mask_lo
            win1 = poly >> PT_WINDOW_BITS
            wins = []
            for win in (win0, win1):
                per_prime = []
                for ctx in params.contexts:
                    per_prime.append(ctx._to_mont(ctx.fwd(win.astype(np.uint64).copy())))
                wins.append(per_prime)
            plan.tables.append(wins)
        return plan

    def mult_pc(self, material, plan, bundle, bias: QuantizedVector = None):
        """W*x (+ bias): tiled bundle in, strided ciphertext out."""
        params = self.params
        if bundle.cols < plan.cols:
            raise DimensionError(f"bundle packs {bundle.cols} cols, need {plan.cols}")
        acc = np.zeros((2, 2, params.n), dtype=np.uint64)
        noise = 0
        win_max = (1 << PT_WINDOW_BITS) - 1
        for c in range(plan.chunks):
            for w in range(2):
                ct = bundle.cts[c][w]
                ct_ntt = ct.ntt_form()
                for k, ctx in enumerate(params.contexts):
                    ntt.pw_addmul(acc[0, k], np.ascontiguousarray(ct_ntt[0, k]),
                                  plan.tables[c][w][k], ctx.qu, ctx.qinv)
                    ntt.pw_addmul(acc[1, k], np.ascontiguousarray(ct_ntt[1, k]),
                                  plan.tables[c][w][k], ctx.qu, ctx.qinv)
                noise += ct.noise_bound * params.n * win_max
        for k, ctx in enumerate(params.contexts):
            acc[0, k] = ctx.inv(np.ascontiguousarray(acc[0, k]))
            acc[1, k] = ctx.inv(np.ascontiguousarray(acc[1, k]))
        out_scale = plan.scale_log2 + bundle.scale_log2
        cur = Ciphertext(acc, out_scale, noise, params)
        shift = 1
        while shift < CHUNK:
            cur = self.add_cc(cur, self.rotate(material, cur, shift))
            shift <<= 1
        if bias is not None:
            if len(bias.values) != plan.rows:
                raise DimensionError("bias length != rows")
            vals = np.zeros(params.n, dtype=np.int64)
            for r in range(plan.rows):
                vals[group_base(r)] = bias.values[r]
            cur = self.add_cp(cur, QuantizedVector(vals, out_scale, params.p))
        return cur


class WeightPlan:
    """Offline-prepared plaintext tables for one matrix."""

    def __init__(self, rows, cols, chunks, scale_log2):
        self.rows = rows
        self.cols = cols
        self.chunks = chunks
        self.scale_log2 = scale_log2
        self.tables = []


def group_base(r):
    """Logical base slot of tile group r (CHUNK-wide groups, row-major)."""
    per_row = 1024 // CHUNK
    row = r // per_row
    return row * 1024 + (r % per_row) * CHUNK


def tile_slots(vec, cols, chunk_index, n_slots):
    """Logical slot vector replicating vec[chunk] into every tile group."""
    per_row = 1024 // CHUNK
    groups = 2 * per_row
    out = np.zeros(n_slots, dtype=np.int64)
    lo = chunk_index * CHUNK
    hi = min(cols, lo + CHUNK)
    seg = np.asarray(vec[lo:hi], dtype=np.int64)
    for g in range(groups):
        base = group_base(g)
        out[base:base + (hi - lo)] = seg
    return out


class TiledBundle:
    """Client-packed encryptions of one vector: chunks x plaintext windows."""

    def __init__(self, cts, cols, scale_log2):
        self.cts = cts          # cts[chunk][window]
        self.cols = cols
        self.scale_log2 = scale_log2

    @property
    def ciphertexts(self):
        return [ct for pair in self.cts for ct in pair]


def pack_tiled(backend, keys, codes, cols, scale_log2, rng, mode="sym"):
    """Encrypt `codes` (len cols, field elements) as a tiled bundle."""
    params = backend.params
    p = params.p
    chunks = math.ceil(cols / CHUNK)
    shift = (1 << PT_WINDOW_BITS) % p
    cts = []
    codes = np.asarray(codes, dtype=np.int64) % p
    for c in range(chunks):
        pair = []
        for w in range(2):
            v = codes if w == 0 else (codes * shift) % p
            slots = tile_slots(v, cols, c, params.n)
            qv = QuantizedVector(slots, scale_log2, p)
            pair.append(backend.encrypt(keys, qv, rng, mode=mode))
        cts.append(pair)
    return TiledBundle(cts, cols, scale_log2)


# ---------------------------------------------------------------------------
# Clear-text debug backend: same interface, same noise accounting, no lattice.
# ---------------------------------------------------------------------------

class DebugCiphertext:
    __slots__ = ("slots", "scale_log2", "noise_bound", "params")

    def __init__(self, slots, scale_log2, noise_bound, params):
        self.slots = np.asarray(slots, dtype=np.int64) % params.p
        self.scale_log2 = scale_log2
        self.noise_bound = noise_bound
        self.params = params

    @property
    def slot_count(self):
        return self.params.n

    def budget_bits(self):
        ceiling = self.params.noise_ceiling
        if self.noise_bound <= 0:
            return float(ceiling.bit_length())
        return math.log2(ceiling) - math.log2(self.noise_bound)

    def to_bytes(self):
        # same wire size as a real ciphertext so byte accounting agrees
        return (struct.pack("<I", self.params.params_id)
                + b"\x00" * (2 * self.params.n * 8))


class DebugBackend:
    """Stores slot vectors in the clear; mirrors the noise model exactly."""

    name = "debug"

    def __init__(self, params: PaheParams):
        self.params = params

    def keygen(self, seed, rotation_amounts=None):
        kp = KeyPair(self.params, None, (None, None), {})
        return kp

    def encrypt(self, keys, message: QuantizedVector, rng, mode="sym"):
        params = self.params
        vals = np.zeros(params.n, dtype=np.int64)
        vals[:len(message.values)] = message.values
        noise = params.fresh_sym_noise if mode == "sym" else params.fresh_pk_noise
        return DebugCiphertext(vals, message.scale_log2, noise, params)

    def decrypt(self, keys, ct):
        params = self.params
        if ct.noise_bound >= params.noise_ceiling:
            raise NoiseExhausted(
                f"tracked noise bound 2^{math.log2(ct.noise_bound):.1f} >= "
                f"ceiling 2^{math.log2(params.noise_ceiling):.1f}")
        return QuantizedVector(ct.slots.copy(), ct.scale_log2, params.p)

    def add_cc(self, a, b):
        if a.scale_log2 != b.scale_log2:
            raise ScaleMismatch(f"scale 2^{a.scale_log2} vs 2^{b.scale_log2}")
        p = self.params.p
        return DebugCiphertext((a.slots + b.slots) % p, a.scale_log2,
                               a.noise_bound + b.noise_bound, self.params)

    def add_cp(self, a, plain: QuantizedVector):
        if plain.scale_log2 != a.scale_log2:
            raise ScaleMismatch(f"scale 2^{a.scale_log2} vs 2^{plain.scale_log2}")
        p = self.params.p
        vals = np.zeros(self.params.n, dtype=np.int64)
        vals[:len(plain.values)] = plain.values
        return DebugCiphertext((a.slots + vals) % p, a.scale_log2,
                               a.noise_bound + 1, self.params)

    def negate(self, a):
        p = self.params.p
        return DebugCiphertext((p - a.slots) % p, a.scale_log2,
                               a.noise_bound, self.params)

    def rescale_plain(self, a, factor_log2, new_scale_log2):
        p = self.params.p
        c = 1 << factor_log2
        return DebugCiphertext((a.slots * (c % p)) % p, new_scale_log2,
                               a.noise_bound * c, self.params)

    def rotate(self, material, ct, amount):
        params = self.params
        half = params.row_size
        slots = ct.slots.reshape(2, half)
        rolled = np.roll(slots, -amount, axis=1).reshape(-1)
        return DebugCiphertext(rolled, ct.scale_log2,
                               ct.noise_bound + params.ks_noise, params)

    def noise_budget(self, ct):
        return ct.budget_bits()

    def encode_weights(self, w_codes, n_out, scale_log2):
        rows, cols = w_codes.shape
        chunks = math.ceil(cols / CHUNK)
        plan = WeightPlan(rows, cols, chunks, scale_log2)
        plan.codes = np.asarray(w_codes, dtype=np.int64)
        return plan

    def mult_pc(self, material, plan, bundle, bias=None):
        params = self.params
        p = params.p
        if bundle.cols < plan.cols:
            raise DimensionError(f"bundle packs {bundle.cols} cols, need {plan.cols}")
        noise = 0
        win_max = (1 << PT_WINDOW_BITS) - 1
        x = np.zeros(plan.cols, dtype=np.int64)
        for c in range(plan.chunks):
            for w in range(2):
                noise += bundle.cts[c][w].noise_bound * params.n * win_max
            lo = c * CHUNK
            hi = min(plan.cols, lo + CHUNK)
            base = group_base(0)
            x[lo:hi] = bundle.cts[c][0].slots[base:base + (hi - lo)]
        # codes and x are < 2^20 and cols <= 128, so int64 cannot overflow
        prod = (plan.codes @ x) % p
        out_scale = plan.scale_log2 + bundle.scale_log2
        slots = np.zeros(params.n, dtype=np.int64)
        for r in range(plan.rows):
            slots[group_base(r)] = int(prod[r])
        shift = 1
        while shift < CHUNK:   # mirror the real tree's noise arithmetic
            noise = 2 * noise + params.ks_noise
            shift <<= 1
        if bias is not None:
            if len(bias.values) != plan.rows:
                raise DimensionError("bias length != rows")
            for r in range(plan.rows):
                slots[group_base(r)] = (slots[group_base(r)] + int(bias.values[r])) % p
            noise += 1
        return DebugCiphertext(slots, out_scale, noise, params)
