"""Yao garbling engine: free-XOR, point-and-permute, half-gates.

Labels are 128 bits (two uint64 words); complementary labels differ by a
global delta whose low bit is forced to 1, so a label's LSB doubles as
the permute bit.  Each AND gate costs exactly two 16-byte table rows
(the generator and evaluator halves); XOR and INV gates cost nothing.

The gate hash is the standard fixed-key construction
H(X, t) = AES_k(2X xor t) xor (2X xor t), batched over whole topological
levels so one AES call covers every gate in the level.
"""

import struct

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .circuit import AND, INV, XOR, BoolCircuit, CONST0, CONST1

_FIXED_KEY = bytes.fromhex("9d2c5680a3b1c64e8f0a1b2c3d4e5f60")
_GF_POLY = np.uint64(0x87)


class DecodeError(RuntimeError):
    """Output label matches neither decode entry: corrupted evaluation."""


class ProtocolError(RuntimeError):
    pass


def _aes_blocks(buf):
    enc = Cipher(algorithms.AES(_FIXED_KEY), modes.ECB()).encryptor()
    return enc.update(buf)


def _double(labels):
    """GF(2^128) doubling of (k, 2) uint64 label rows."""
    lo = labels[:, 0]
    hi = labels[:, 1]
    top = hi >> np.uint64(63)
    out = np.empty_like(labels)
    out[:, 0] = (lo << np.uint64(1)) ^ (top * _GF_POLY)
    out[:, 1] = (hi << np.uint64(1)) | (lo >> np.uint64(63))
    return out


def hash_labels(labels, tweaks):
    """H(label, tweak) for (k, 2) labels and (k,) integer tweaks."""
    x = _double(np.ascontiguousarray(labels))
    x[:, 0] ^= tweaks.astype(np.uint64)
    raw = _aes_blocks(x.tobytes())
    out = np.frombuffer(raw, dtype=np.uint64).reshape(-1, 2).copy()
    out ^= x
    return out


def _rand_labels(rng, k):
    return rng.integers(0, 1 << 63, (k, 2), dtype=np.int64).astype(np.uint64) \
        | (rng.integers(0, 2, (k, 2), dtype=np.int64).astype(np.uint64) << np.uint64(63))


class GarbledCircuit:
    """Tables plus decode digests; exactly 32 bytes per AND gate."""

    def __init__(self, circuit_id, n_and, tables, decode, output_groups):
        self.circuit_id = circuit_id
        self.n_and = n_and
        self.tables = tables            # (n_and, 2, 2) uint64
        self.decode = decode            # wire -> (2, 2) uint64 digests
        self.output_groups = output_groups

    def table_bytes(self):
        return self.n_and * 32

    def to_bytes(self):
        head = struct.pack("<II", self.circuit_id & 0xFFFFFFFF, self.n_and)
        return head + self.tables.tobytes()

    @classmethod
    def header_bytes(cls):
        return 8


class GarbleResult:
    def __init__(self, gc, wire_label0, delta):
        self.gc = gc
        self.wire_label0 = wire_label0  # (n_wires, 2) uint64, garbler view
        self.delta = delta

    def input_pair(self, wire):
        l0 = self.wire_label0[wire]
        return l0, l0 ^ self.delta

    def labels_for(self, wires, bits):
        """Active labels for the garbler's own input bits."""
        wires = np.asarray(wires, dtype=np.int64)
        bits = np.asarray(bits, dtype=np.uint64).reshape(-1, 1)
        return self.wire_label0[wires] ^ (bits * self.delta)


def garble(circuit: BoolCircuit, seed, circuit_id=0):
    """Garble a circuit; deterministic for a fixed seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    delta = _rand_labels(rng, 1)[0]
    delta[0] |= np.uint64(1)
    labels = np.zeros((circuit.n_wires, 2), dtype=np.uint64)
    in_wires = circuit.input_wires()
    labels[in_wires] = _rand_labels(rng, len(in_wires))

    order, bounds = circuit.level_order()
    and_idx = circuit.and_index()
    n_and = int(np.count_nonzero(circuit.kinds == AND))
    tables = np.zeros((n_and, 2, 2), dtype=np.uint64)
    kinds, in0, in1, outs = circuit.kinds, circuit.in0, circuit.in1, circuit.outs

    for lv in range(len(bounds) - 1):
        gs = order[bounds[lv]:bounds[lv + 1]]
        if len(gs) == 0:
            continue
        k = kinds[gs]
        xors = gs[k == XOR]
        if len(xors):
            labels[outs[xors]] = labels[in0[xors]] ^ labels[in1[xors]]
        invs = gs[k == INV]
        if len(invs):
            labels[outs[invs]] = labels[in0[invs]] ^ delta
        ands = gs[k == AND]
        if len(ands):
            a0 = labels[in0[ands]]
            b0 = labels[in1[ands]]
            a1 = a0 ^ delta
            b1 = b0 ^ delta
            slot = and_idx[ands]
            tw = (2 * slot).astype(np.uint64)
            stack = np.concatenate([a0, a1, b0, b1])
            tws = np.concatenate([tw, tw, tw + 1, tw + 1])
            h = hash_labels(stack, tws)
            m = len(ands)
            ha0, ha1, hb0, hb1 = h[:m], h[m:2 * m], h[2 * m:3 * m], h[3 * m:]
            pa = (a0[:, 0] & np.uint64(1)).reshape(-1, 1)
            pb = (b0[:, 0] & np.uint64(1)).reshape(-1, 1)
            tg = ha0 ^ ha1 ^ pb * delta
            wg0 = ha0 ^ pa * tg
            te = hb0 ^ hb1 ^ a0
            we0 = hb0 ^ pb * (te ^ a0)
            tables[slot, 0] = tg
            tables[slot, 1] = te
            labels[outs[ands]] = wg0 ^ we0

    decode = {}
    for name, ws in circuit.output_groups.items():
        ws = np.asarray(ws, dtype=np.int64)
        w0 = labels[ws]
        w1 = w0 ^ delta
        tags = (np.uint64(1) << np.uint64(62)) + np.arange(len(ws), dtype=np.uint64) \
            + np.uint64(hash(name) & 0xFFFFFF) * np.uint64(1 << 32)
        d0 = hash_labels(w0, tags)
        d1 = hash_labels(w1, tags)
        decode[name] = (np.stack([d0, d1], axis=1), tags)
    gc = GarbledCircuit(circuit_id, n_and, tables, decode, circuit.output_groups)
    return GarbleResult(gc, labels, delta)


def evaluate(gc: GarbledCircuit, circuit: BoolCircuit, active):
    """Evaluate garbled tables on active input labels.

    active: (n_wires, 2) uint64 with rows filled for every input wire
    (including the two constant wires).  Returns the full active array.
    """
    order, bounds = circuit.level_order()
    and_idx = circuit.and_index()
    kinds, in0, in1, outs = circuit.kinds, circuit.in0, circuit.in1, circuit.outs
    tables = gc.tables
    for lv in range(len(bounds) - 1):
        gs = order[bounds[lv]:bounds[lv + 1]]
        if len(gs) == 0:
            continue
        k = kinds[gs]
        xors = gs[k == XOR]
        if len(xors):
            active[outs[xors]] = active[in0[xors]] ^ active[in1[xors]]
        invs = gs[k == INV]
        if len(invs):
            active[outs[invs]] = active[in0[invs]]
        ands = gs[k == AND]
        if len(ands):
            a = active[in0[ands]]
            b = active[in1[ands]]
            slot = and_idx[ands]
            tw = (2 * slot).astype(np.uint64)
            stack = np.concatenate([a, b])
            tws = np.concatenate([tw, tw + 1])
            h = hash_labels(stack, tws)
            m = len(ands)
            ha, hb = h[:m], h[m:]
            sa = (a[:, 0] & np.uint64(1)).reshape(-1, 1)
            sb = (b[:, 0] & np.uint64(1)).reshape(-1, 1)
            wg = ha ^ sa * tables[slot, 0]
            we = hb ^ sb * (tables[slot, 1] ^ a)
            active[outs[ands]] = wg ^ we
    return active


def decode_outputs(gc: GarbledCircuit, active, group=None):
    """Map output labels to bits, verifying each against its digest pair."""
    result = {}
    names = [group] if group else list(gc.output_groups)
    for name in names:
        ws = np.asarray(gc.output_groups[name], dtype=np.int64)
        digests, tags = gc.decode[name]
        h = hash_labels(active[ws], tags)
        is0 = np.all(h == digests[:, 0], axis=1)
        is1 = np.all(h == digests[:, 1], axis=1)
        if not np.all(is0 | is1):
            raise DecodeError(f"{int(np.count_nonzero(~(is0 | is1)))} output "
                              f"labels of group {name} match no decode entry")
        bits = is1.astype(np.uint8)
        result[name] = bits
    return result if group is None else result[group]


def fill_inputs(circuit, active, garbler: GarbleResult, garbler_bits,
                evaluator_labels=None):
    """Populate the active-label array for evaluation.

    garbler_bits: dict group -> bit array for wires the garbler owns
    (constants are always filled).  evaluator_labels: dict group ->
    (k, 2) labels the evaluator obtained via OT.
    """
    active[CONST0] = garbler.wire_label0[CONST0]
    active[CONST1] = garbler.wire_label0[CONST1] ^ garbler.delta
    for name, bits in garbler_bits.items():
        ws = circuit.input_groups[name]
        active[ws] = garbler.labels_for(ws, bits)
    if evaluator_labels:
        for name, labs in evaluator_labels.items():
            active[circuit.input_groups[name]] = labs
    return active


# ---------------------------------------------------------------------------
# Oblivious transfer
# ---------------------------------------------------------------------------

class OtSession:
    """Transcript-accounting wrapper shared by both OT implementations."""

    def __init__(self, role):
        self.role = role
        self.offline_bytes = 0
        self.online_bytes = 0
        self.transfers = 0


class TrustedDealerOT(OtSession):
    """Benchmark fixture: a dealer hands the chosen labels directly.

    No cryptographic cost; transcript bytes are modelled as label pairs
    to the dealer offline (32 B/wire) plus packed choice bits and chosen
    labels online (16 B/wire), mirroring a precomputed-OT layout.
    """

    def __init__(self):
        super().__init__("dealer")
        self._pairs = None

    def provision(self, pairs):
        self._pairs = pairs
        self.offline_bytes += 32 * len(pairs)

    def transfer(self, choices):
        choices = np.asarray(choices, dtype=np.uint64)
        if self._pairs is None or len(choices) != len(self._pairs):
            raise ProtocolError("dealer not provisioned for this transfer")
        chosen = np.where(choices.reshape(-1, 1).astype(bool),
                          self._pairs[:, 1], self._pairs[:, 0])
        self.online_bytes += (len(choices) + 7) // 8 + 16 * len(choices)
        self.transfers += len(choices)
        self._pairs = None
        return chosen


# RFC 3526 2048-bit MODP group; generator 2, prime-order subgroup q=(p-1)/2.
_DH_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)
_DH_G = 2


class DhBaseOT(OtSession):
    """Group-based base OT (chosen-message, semi-honest).

    Classic Diffie-Hellman style: receiver publishes h_b = g^x and the
    complementary h_{1-b} = c / g^x for a sender-chosen c, so the sender
    can derive pads for both messages while the receiver can compute
    only its chosen pad.
    """

    def __init__(self, rng=None):
        super().__init__("dh")
        self.rng = rng or np.random.default_rng()

    def _rand_exp(self):
        return int.from_bytes(self.rng.bytes(64), "little") % (_DH_P - 2) + 1

    def _pad(self, element, idx):
        import hashlib
        raw = element.to_bytes(256, "little") + struct.pack("<I", idx)
        return np.frombuffer(hashlib.sha256(raw).digest()[:16],
                             dtype=np.uint64).copy()

    def transfer(self, pairs, choices):
        """Run sender and receiver locally; returns the chosen labels.

        Receiver publishes pk_b = g^x and implicitly pk_{1-b} = c/g^x, so
        the sender pads both messages with H(pk_i^a) while the receiver
        can only unpad its choice via H(c^x).
        """
        choices = np.asarray(choices, dtype=np.uint8)
        n = len(choices)
        out = np.empty((n, 2), dtype=np.uint64)
        for i in range(n):
            a = self._rand_exp()
            c = pow(_DH_G, a, _DH_P)                      # sender -> receiver
            x = self._rand_exp()
            gx = pow(_DH_G, x, _DH_P)
            inv_gx = pow(gx, _DH_P - 2, _DH_P)
            pk0 = gx if choices[i] == 0 else (c * inv_gx) % _DH_P
            pk1 = (c * pow(pk0, _DH_P - 2, _DH_P)) % _DH_P
            e0 = pairs[i, 0] ^ self._pad(pow(pk0, a, _DH_P), 2 * i)
            e1 = pairs[i, 1] ^ self._pad(pow(pk1, a, _DH_P), 2 * i + 1)
            kb = self._pad(pow(c, x, _DH_P), 2 * i + int(choices[i]))
            out[i] = (e1 if choices[i] else e0) ^ kb
            self.online_bytes += 256 * 2 + 32             # c, pk0, e0||e1
            self.transfers += 1
        return out
