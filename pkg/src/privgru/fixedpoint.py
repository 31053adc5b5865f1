"""Fixed-point encoding of reals into the plaintext field Z_p.

Weights, activations and biases are stored as field elements at a
power-of-two scale; negatives use the upper half of the field
(x < 0 stored as p + x*2^scale).  All rounding of real values is
round-to-nearest, ties-to-even, so that encoding is reproducible
bit-for-bit across runs.
"""

import numpy as np


class RangeError(ValueError):
    """Value outside the representable fixed-point range."""


def is_prime(n):
    """Deterministic Miller-Rabin, valid for n < 3.3e24."""
    if n < 2:
        return False
    for q in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % q == 0:
            return n == q
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def largest_prime_below(limit, congruent_to=1, modulus=1):
    """Largest prime < limit with prime % modulus == congruent_to."""
    start = limit - 1
    start -= (start - congruent_to) % modulus
    for cand in range(start, 1, -modulus):
        if is_prime(cand):
            return cand
    raise ValueError("no prime found")


# Slot batching in the HE layer needs p = 1 (mod 2*ring_dimension).
DEFAULT_RING_DIM = 2048
DEFAULT_PLAIN_BITS = 20
DEFAULT_MODULUS = largest_prime_below(1 << DEFAULT_PLAIN_BITS,
                                      congruent_to=1,
                                      modulus=2 * DEFAULT_RING_DIM)


def activation_scale_log2(activation_bits):
    """Scale used for activations and hidden state at bit-width b.

    2^(b-2) keeps the [0,1] gate range in the top quarter of the b-bit
    two's-complement range; capped at 2^8 so one weight*activation
    product plus accumulation still fits under a 20-bit modulus.
    """
    return min(activation_bits - 2, 8)


class FixedPointConfig:
    """Encoding parameters shared by the whole pipeline.

    product_scale_log2 is the scale after one weight*activation product;
    preact_bound is the real-valued magnitude every per-gate linear
    output (and every sum of two of them) must stay under so the masked
    conversions are value-preserving.
    """

    def __init__(self, plaintext_bits=DEFAULT_PLAIN_BITS, modulus_p=None,
                 weight_scale_log2=8, activation_bits=20,
                 activation_scale_log2=None, ring_dim=DEFAULT_RING_DIM):
        if modulus_p is None:
            modulus_p = (DEFAULT_MODULUS if plaintext_bits == DEFAULT_PLAIN_BITS
                         else largest_prime_below(1 << plaintext_bits, 1, 2 * ring_dim))
        if modulus_p >= (1 << plaintext_bits) or not is_prime(modulus_p):
            raise ValueError("modulus_p must be a prime below 2^plaintext_bits")
        if activation_bits > plaintext_bits:
            raise ValueError("activation_bits must not exceed plaintext_bits")
        self.plaintext_bits = plaintext_bits
        self.modulus_p = modulus_p
        self.weight_scale_log2 = weight_scale_log2
        self.activation_bits = activation_bits
        if activation_scale_log2 is None:
            activation_scale_log2 = activation_scale_log2_default = \
                activation_scale_log2_for(activation_bits)
        self.activation_scale_log2 = activation_scale_log2
        self.product_scale_log2 = weight_scale_log2 + activation_scale_log2
        # One more weight*activation product must stay below p/2 together
        # with a 2x sum margin; 4.0 leaves >= 2 bits of sign headroom.
        self.preact_bound = min(
            4.0, float(2 ** (plaintext_bits - 2 - self.product_scale_log2)))
        if self.preact_bound < 1.0:
            raise ValueError("scales leave no headroom for linear accumulation")

    def __repr__(self):
        return (f"FixedPointConfig(p={self.modulus_p}, w_scale=2^"
                f"{self.weight_scale_log2}, b={self.activation_bits}, "
                f"a_scale=2^{self.activation_scale_log2})")

    def clone(self, **kw):
        args = dict(plaintext_bits=self.plaintext_bits, modulus_p=self.modulus_p,
                    weight_scale_log2=self.weight_scale_log2,
                    activation_bits=self.activation_bits,
                    activation_scale_log2=self.activation_scale_log2)
        args.update(kw)
        if "activation_bits" in kw and "activation_scale_log2" not in kw:
            args["activation_scale_log2"] = activation_scale_log2_for(kw["activation_bits"])
        return FixedPointConfig(**args)


def activation_scale_log2_for(activation_bits):
    return activation_scale_log2(activation_bits)


def round_half_even(x):
    """Banker's rounding of a real (scalar or ndarray) to int64."""
    return np.asarray(np.rint(np.asarray(x, dtype=np.float64)), dtype=np.int64)


def quantize(value, cfg, scale_log2=None):
    """Encode real -> field element: round(value * 2^scale) mod p."""
    scale = cfg.activation_scale_log2 if scale_log2 is None else scale_log2
    p = cfg.modulus_p
    v = np.asarray(value, dtype=np.float64)
    limit = 2.0 ** (cfg.plaintext_bits - scale - 1)
    if np.any(np.abs(v) >= limit):
        raise RangeError(f"value exceeds representable range +-{limit}")
    codes = round_half_even(v * (2.0 ** scale))
    return (codes % p) if codes.ndim else int(codes) % p


def signed_lift(x, p):
    """Field element(s) -> signed integer(s) in (-p/2, p/2]."""
    x = np.asarray(x, dtype=np.int64)
    out = np.where(x >= (p + 1) // 2, x - p, x)
    return out if out.ndim else int(out)


def dequantize(x, cfg, scale_log2=None):
    """Field element -> real, interpreting the upper half as negative."""
    scale = cfg.activation_scale_log2 if scale_log2 is None else scale_log2
    return np.asarray(signed_lift(x, cfg.modulus_p), dtype=np.float64) / (2.0 ** scale)


def _shift_half_even(v, shift):
    """Arithmetic right shift of int64 with round-to-nearest, ties-to-even."""
    if shift == 0:
        return np.asarray(v, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    half = np.int64(1 << (shift - 1))
    mask = np.int64((1 << shift) - 1)
    base = v >> shift
    rem = v & mask
    up = (rem > half) | ((rem == half) & ((base & 1) == 1))
    out = base + up.astype(np.int64)
    return out


def shift_round_half_up(v, shift):
    """Arithmetic right shift with round-half-up: floor((v + half) / 2^shift).

    This is the truncation rule used inside garbled blocks (the rounding
    constant folds into an addition, which is what the circuits do), so
    the plaintext oracle uses it at the same points.
    """
    if shift == 0:
        return np.asarray(v, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    return (v + np.int64(1 << (shift - 1))) >> shift


def requantize(x, cfg, from_scale_log2=None, to_scale_log2=None):
    """Rescale a field element from doubled scale back down.

    Signed interpretation, arithmetic shift, round-to-nearest ties-to-even,
    re-embedded mod p.
    """
    if from_scale_log2 is None:
        from_scale_log2 = 2 * cfg.activation_scale_log2
    if to_scale_log2 is None:
        to_scale_log2 = cfg.activation_scale_log2
    shift = from_scale_log2 - to_scale_log2
    if shift < 0:
        raise ValueError("requantize only reduces scale")
    p = cfg.modulus_p
    v = signed_lift(np.asarray(x, dtype=np.int64) % p, p)
    out = _shift_half_even(v, shift) % p
    return out if isinstance(x, np.ndarray) else int(out)


class QuantizedVector:
    """A vector of field elements plus the scale they were encoded at."""

    def __init__(self, values, scale_log2, modulus_p, signed=True):
        self.values = np.asarray(values, dtype=np.int64) % modulus_p
        self.scale_log2 = scale_log2
        self.modulus_p = modulus_p
        self.signed = signed

    @classmethod
    def from_real(cls, reals, cfg, scale_log2=None):
        scale = cfg.activation_scale_log2 if scale_log2 is None else scale_log2
        return cls(quantize(np.asarray(reals), cfg, scale), scale, cfg.modulus_p)

    def to_real(self):
        return np.asarray(signed_lift(self.values, self.modulus_p),
                          dtype=np.float64) / (2.0 ** self.scale_log2)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"QuantizedVector(n={len(self.values)}, scale=2^{self.scale_log2})"
