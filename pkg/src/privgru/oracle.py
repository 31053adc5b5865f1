"""Plaintext reference twins of the secure inference.

oracle_infer_fixed is the bit-exact specification of what the protocol
must produce: the same integer pipeline, including the garbled blocks'
exact truncation and clamping semantics via block_reference_value.
oracle_infer_real is the float model the fixed-point one approximates.
"""

import numpy as np

from .circuit import ActivationSpec, BlockGeometry, block_reference_value
from .fixedpoint import signed_lift
from .model import RangeViolation, ModelConfig, GruWeights


class GateOutputs:
    def __init__(self, gate_reset, gate_input, gate_new):
        self.gate_reset = gate_reset
        self.gate_input = gate_input
        self.gate_new = gate_new


def scenario_specs(cfg: ModelConfig):
    """The three garbled blocks of one cell step, in execution order."""
    b = cfg.activation_bits
    fp = cfg.fixedpoint
    reset = ActivationSpec("SIGMOID", b, fused_product=True)
    reset_geo = BlockGeometry(fp, reset, operand_scale_log2=fp.product_scale_log2)
    cand = ActivationSpec(cfg.activation_kind, b)
    cand_geo = BlockGeometry(fp, cand)
    update = ActivationSpec("SIGMOID", b, fused_product=True)
    update_geo = BlockGeometry(fp, update,
                               operand_scale_log2=fp.activation_scale_log2)
    return (reset, reset_geo), (cand, cand_geo), (update, update_geo)


def _lift_weights(cfg, weights):
    p = cfg.fixedpoint.modulus_p
    return {k: signed_lift(getattr(weights, k), p)
            for k in ("w_ih", "w_hh", "b_ih", "b_hh", "w_out", "b_out")}


def _check(vals, limit_codes, what):
    if np.any(np.abs(vals) >= limit_codes):
        raise RangeViolation(
            f"{what} magnitude {np.abs(vals).max()} >= {limit_codes}")


def oracle_infer_fixed(cfg: ModelConfig, weights: GruWeights, xs_codes,
                       collect=None):
    """Exact integer twin of the secure pipeline.

    xs_codes: (T, m) signed input codes at the activation scale.
    Returns signed score codes at the product scale.  `collect`, if a
    list, receives per-step GateOutputs (signed codes).
    """
    fp = cfg.fixedpoint
    n = cfg.hidden_dim
    w_s = fp.weight_scale_log2
    a_s = fp.activation_scale_log2
    prod_lim = 1 << (fp.product_scale_log2 + 2)       # |sum| < 4 real
    act_lim = 1 << (a_s + 2)
    (reset, geo_r), (cand, geo_c), (update, geo_u) = scenario_specs(cfg)
    w = _lift_weights(cfg, weights)
    h = np.zeros(n, dtype=np.int64)
    xs_codes = np.asarray(xs_codes, dtype=np.int64)
    for t in range(xs_codes.shape[0]):
        x = xs_codes[t]
        i_all = w["w_ih"] @ x + w["b_ih"]
        h_all = w["w_hh"] @ h + w["b_hh"]
        i_r, i_i, i_n = i_all[:n], i_all[n:2 * n], i_all[2 * n:]
        h_r, h_i, h_n = h_all[:n], h_all[n:2 * n], h_all[2 * n:]
        a_r = i_r + h_r
        a_i = i_i + h_i
        _check(a_r, prod_lim, "reset-gate sum")
        _check(a_i, prod_lim, "update-gate sum")
        _check(h_n, prod_lim, "candidate hidden product")
        rn = block_reference_value(reset, geo_r, a_r, h_n)
        a_n = i_n + (rn.astype(np.int64) << w_s)
        _check(a_n, prod_lim, "candidate sum")
        g_new = block_reference_value(cand, geo_c, a_n).astype(np.int64)
        d = h - g_new
        _check(d, act_lim, "update operand")
        upd = block_reference_value(update, geo_u, a_i, d).astype(np.int64)
        h = g_new + upd
        _check(h, act_lim, "hidden state")
        if collect is not None:
            tbl_r = block_reference_value(
                ActivationSpec("SIGMOID", cfg.activation_bits), geo_r_plain(cfg), a_r)
            tbl_i = block_reference_value(
                ActivationSpec("SIGMOID", cfg.activation_bits), geo_r_plain(cfg), a_i)
            collect.append(GateOutputs(tbl_r, tbl_i, g_new.copy()))
    scores = w["w_out"] @ h + w["b_out"]
    return scores


def geo_r_plain(cfg):
    return BlockGeometry(cfg.fixedpoint,
                         ActivationSpec("SIGMOID", cfg.activation_bits))


def oracle_infer_real(cfg: ModelConfig, real, xs_real):
    """Float GRU with exact sigmoid/tanh and the clipped ReLU variant."""
    n = cfg.hidden_dim
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    if cfg.activation_kind == "TANH":
        act = np.tanh
    else:
        act = lambda v: np.clip(v, 0.0, 2.0)
    h = np.zeros(n)
    for x in np.asarray(xs_real, dtype=np.float64):
        i_all = real["w_ih"] @ x + real["b_ih"]
        h_all = real["w_hh"] @ h + real["b_hh"]
        g_r = sig(i_all[:n] + h_all[:n])
        g_i = sig(i_all[n:2 * n] + h_all[n:2 * n])
        g_new = act(i_all[2 * n:] + g_r * h_all[2 * n:])
        h = g_new + g_i * (h - g_new)
    return real["w_out"] @ h + real["b_out"]
