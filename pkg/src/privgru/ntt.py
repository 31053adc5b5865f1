"""Negacyclic NTT kernels over word-sized primes.

All primes are < 2^31 and = 1 (mod 2N), so a length-N negacyclic
convolution is a pointwise product between forward transforms taken with
a 2N-th root of unity.  Butterflies use Montgomery multiplication with
R = 2^32, which keeps every intermediate inside uint64.

Twiddle tables are stored in Montgomery form; polynomial values stay in
the plain domain throughout.
"""

import numpy as np
from numba import njit, uint64

_R = 1 << 32
_MASK = uint64(0xFFFFFFFF)


@njit(cache=True, inline="always")
def _mont(a, b, q, qinv):
    # b must be in Montgomery form; result is a*b' in plain form.
    t = a * b
    m = ((t & _MASK) * qinv) & _MASK
    u = (t + m * q) >> uint64(32)
    if u >= q:
        u -= q
    return u


@njit(cache=True)
def ntt_fwd(a, psis, q, qinv):
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        for i in range(m):
            j1 = 2 * i * t
            s = psis[m + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = _mont(a[j + t], s, q, qinv)
                w = u + v
                if w >= q:
                    w -= q
                a[j] = w
                w = u + q - v
                if w >= q:
                    w -= q
                a[j + t] = w
        m <<= 1


@njit(cache=True)
def ntt_inv(a, ipsis, ninv_mont, q, qinv):
    n = a.shape[0]
    t = 1
    m = n
    while m > 1:
        j1 = 0
        h = m >> 1
        for i in range(h):
            s = ipsis[h + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = a[j + t]
                w = u + v
                if w >= q:
                    w -= q
                a[j] = w
                a[j + t] = _mont(u + q - v, s, q, qinv)
            j1 += 2 * t
        t <<= 1
        m >>= 1
    for j in range(n):
        a[j] = _mont(a[j], ninv_mont, q, qinv)


@njit(cache=True)
def ntt_fwd_batch(arr, psis, q, qinv):
    for r in range(arr.shape[0]):
        ntt_fwd(arr[r], psis, q, qinv)


@njit(cache=True)
def ntt_inv_batch(arr, ipsis, ninv_mont, q, qinv):
    for r in range(arr.shape[0]):
        ntt_inv(arr[r], ipsis, ninv_mont, q, qinv)


@njit(cache=True)
def pw_mul(a, b_mont, out, q, qinv):
    for i in range(a.shape[0]):
        out[i] = _mont(a[i], b_mont[i], q, qinv)


@njit(cache=True)
def pw_addmul(acc, a, b_mont, q, qinv):
    for i in range(a.shape[0]):
        v = acc[i] + _mont(a[i], b_mont[i], q, qinv)
        if v >= q:
            v -= q
        acc[i] = v


@njit(cache=True)
def pw_add(a, b, out, q):
    for i in range(a.shape[0]):
        v = a[i] + b[i]
        if v >= q:
            v -= q
        out[i] = v


@njit(cache=True)
def pw_sub(a, b, out, q):
    for i in range(a.shape[0]):
        v = a[i] + q - b[i]
        if v >= q:
            v -= q
        out[i] = v


@njit(cache=True)
def pw_neg(a, out, q):
    for i in range(a.shape[0]):
        out[i] = (q - a[i]) % q


@njit(cache=True)
def digit_split(coeffs, width, ndigits, out):
    # coeffs: residues in [0, q_i); out: (ndigits, N) base-2^width digits.
    mask = uint64((1 << width) - 1)
    for i in range(coeffs.shape[0]):
        c = coeffs[i]
        for d in range(ndigits):
            out[d, i] = c & mask
            c >>= uint64(width)


class PrimeContext:
    """Precomputed NTT machinery for one prime q = 1 (mod 2N)."""

    def __init__(self, q, n):
        if (q - 1) % (2 * n) != 0:
            raise ValueError("q must be 1 mod 2N")
        self.q = q
        self.n = n
        self.qu = np.uint64(q)
        self.qinv = np.uint64(pow(-q, -1, _R) % _R)
        self.r2 = (_R * _R) % q
        psi = self._find_psi()
        self.psi = psi
        logn = n.bit_length() - 1
        fwd = np.zeros(n, dtype=np.uint64)
        inv = np.zeros(n, dtype=np.uint64)
        ipsi = pow(psi, 2 * n - 1, q)
        for i in range(n):
            rev = int(bin(i)[2:].zfill(logn)[::-1], 2)
            fwd[i] = pow(psi, rev, q) * _R % q
            inv[i] = pow(ipsi, rev, q) * _R % q
        self.psis = fwd
        self.ipsis = inv
        self.ninv_mont = np.uint64(pow(n, -1, q) * _R % q)

    def _find_psi(self):
        # primitive 2n-th root of unity mod q
        q, n = self.q, self.n
        for g in range(2, 2000):
            cand = pow(g, (q - 1) // (2 * n), q)
            if pow(cand, n, q) == q - 1:
                return cand
        raise ValueError("no 2n-th root found")

    def to_mont(self, a):
        return (np.asarray(a, dtype=np.uint64) * np.uint64(self.r2)) % self.qu \
            if False else self._to_mont(a)

    def _to_mont(self, a):
        a = np.ascontiguousarray(a, dtype=np.uint64)
        out = np.empty_like(a)
        r2 = np.full_like(a, np.uint64(self.r2))
        flat, r2f, outf = a.reshape(-1), r2.reshape(-1), out.reshape(-1)
        pw_mul(flat, r2f, outf, self.qu, self.qinv)
        return out

    def fwd(self, a):
        """In-place forward NTT over the last axis (1D or 2D array)."""
        a = np.ascontiguousarray(a, dtype=np.uint64)
        if a.ndim == 1:
            ntt_fwd(a, self.psis, self.qu, self.qinv)
        else:
            ntt_fwd_batch(a.reshape(-1, self.n), self.psis, self.qu, self.qinv)
        return a

    def inv(self, a):
        a = np.ascontiguousarray(a, dtype=np.uint64)
        if a.ndim == 1:
            ntt_inv(a, self.ipsis, self.ninv_mont, self.qu, self.qinv)
        else:
            ntt_inv_batch(a.reshape(-1, self.n), self.ipsis, self.ninv_mont,
                          self.qu, self.qinv)
        return a

    def mul(self, a_ntt, b_ntt_mont):
        out = np.empty(self.n, dtype=np.uint64)
        pw_mul(a_ntt, b_ntt_mont, out, self.qu, self.qinv)
        return out

    def negacyclic_mul(self, a, b):
        """Plain-coefficient negacyclic product (reference path)."""
        fa = self.fwd(a.copy())
        fb = self.to_mont(self.fwd(b.copy()))
        out = self.mul(fa, fb)
        return self.inv(out)
