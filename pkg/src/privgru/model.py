"""GRU model containers, file format, synthesis and validation.

The model file is a versioned JSON document holding already-quantized
integer weight codes (weights at the weight scale, biases at the
product scale) plus an optional real-valued mirror for the float
reference.  A GRU cell carries 3*(n^2 + n*m + n) parameters; load-time
validation checks that count and every magnitude bound the protocol's
masked conversions rely on.
"""

import json

import numpy as np

from .fixedpoint import FixedPointConfig, QuantizedVector, quantize, signed_lift

X_MAX = 1.0          # inputs are clamped to [-1, 1] before encryption
H_MAX = 2.0          # hidden state stays in (-2, 2) by gate algebra
LIN_BOUND = 2.0      # per-gate linear output bound (certified per row)

FORMAT_NAME = "privgru-model"
FORMAT_VERSION = 1


class SchemaError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class RangeViolation(RuntimeError):
    """A value escaped the magnitude bound the conversions rely on."""


class ModelConfig:
    def __init__(self, input_dim, hidden_dim, time_steps=30,
                 activation_kind="TANH", activation_bits=20, classes=2,
                 fixedpoint: FixedPointConfig = None):
        if input_dim < 1 or hidden_dim < 1:
            raise ShapeError("dimensions must be positive")
        if hidden_dim > 128:
            raise ShapeError("hidden_dim beyond packing capacity 128")
        if activation_kind not in ("TANH", "RELU"):
            raise SchemaError(f"unknown activation kind {activation_kind}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.time_steps = time_steps
        self.activation_kind = activation_kind
        self.activation_bits = activation_bits
        self.classes = classes
        self.fixedpoint = fixedpoint or FixedPointConfig(
            activation_bits=activation_bits)

    def cell_param_count(self):
        n, m = self.hidden_dim, self.input_dim
        return 3 * (n * n + n * m + n)

    def clone_scenario(self, activation_kind, activation_bits):
        return ModelConfig(self.input_dim, self.hidden_dim, self.time_steps,
                           activation_kind, activation_bits, self.classes)


class GruWeights:
    """Quantized parameter set: w_ih (3n x m), w_hh (3n x n), biases (3n),
    output head (k x n, k).  Gate row order: reset, update, candidate."""

    def __init__(self, w_ih, w_hh, b_ih, b_hh, w_out, b_out, real=None):
        self.w_ih = np.asarray(w_ih, dtype=np.int64)
        self.w_hh = np.asarray(w_hh, dtype=np.int64)
        self.b_ih = np.asarray(b_ih, dtype=np.int64)
        self.b_hh = np.asarray(b_hh, dtype=np.int64)
        self.w_out = np.asarray(w_out, dtype=np.int64)
        self.b_out = np.asarray(b_out, dtype=np.int64)
        self.real = real

    def third(self, which, mat):
        n = mat.shape[0] // 3
        return mat[which * n:(which + 1) * n]

    def validate(self, cfg: ModelConfig):
        n, m, k = cfg.hidden_dim, cfg.input_dim, cfg.classes
        p = cfg.fixedpoint.modulus_p
        if self.w_ih.shape != (3 * n, m):
            raise ShapeError(f"w_ih shape {self.w_ih.shape} != {(3*n, m)}")
        if self.w_hh.shape != (3 * n, n):
            raise ShapeError(f"w_hh shape {self.w_hh.shape} != {(3*n, n)}")
        if self.b_ih.shape != (3 * n,) or self.b_hh.shape != (3 * n,):
            raise ShapeError("bias shapes must be (3n,)")
        if self.w_out.shape != (k, n) or self.b_out.shape != (k,):
            raise ShapeError("output head shapes must be (k,n) and (k,)")
        got = self.w_ih.size + self.w_hh.size + self.b_ih.size + self.b_hh.size
        if got != cfg.cell_param_count():
            raise ShapeError(f"cell parameter count {got} != "
                             f"3(n^2+nm+n) = {cfg.cell_param_count()}")
        for arr in (self.w_ih, self.w_hh, self.b_ih, self.b_hh,
                    self.w_out, self.b_out):
            if np.any(arr < 0) or np.any(arr >= p):
                raise SchemaError("weight codes must lie in [0, p)")
        self.certify_bounds(cfg)

    def certify_bounds(self, cfg: ModelConfig):
        """Worst-case per-gate linear outputs must stay under LIN_BOUND.

        This is what guarantees masked conversions never overflow their
        value width: each a_* sum is at most two certified outputs.
        """
        fp = cfg.fixedpoint
        p = fp.modulus_p
        w_s = 2.0 ** fp.weight_scale_log2
        a_s = 2.0 ** fp.activation_scale_log2
        prod = 2.0 ** fp.product_scale_log2
        wi = signed_lift(self.w_ih, p) / w_s
        wh = signed_lift(self.w_hh, p) / w_s
        bi = signed_lift(self.b_ih, p) / prod
        bh = signed_lift(self.b_hh, p) / prod
        worst_i = np.abs(wi).sum(axis=1) * X_MAX + np.abs(bi)
        worst_h = np.abs(wh).sum(axis=1) * H_MAX + np.abs(bh)
        if worst_i.max() > LIN_BOUND or worst_h.max() > LIN_BOUND:
            raise RangeViolation(
                f"certified linear bound exceeded: input side "
                f"{worst_i.max():.3f}, hidden side {worst_h.max():.3f} "
                f"(limit {LIN_BOUND})")
        wo = signed_lift(self.w_out, p) / w_s
        bo = signed_lift(self.b_out, p) / prod
        worst_o = np.abs(wo).sum(axis=1) * H_MAX + np.abs(bo)
        if worst_o.max() > 2 * LIN_BOUND:
            raise RangeViolation("output head bound exceeded")


def save_model(path, cfg: ModelConfig, weights: GruWeights):
    fp = cfg.fixedpoint
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_dim": cfg.input_dim,
        "hidden_dim": cfg.hidden_dim,
        "time_steps": cfg.time_steps,
        "classes": cfg.classes,
        "activation_kind": cfg.activation_kind,
        "activation_bits": cfg.activation_bits,
        "plaintext_bits": fp.plaintext_bits,
        "modulus_p": fp.modulus_p,
        "weight_scale_log2": fp.weight_scale_log2,
        "activation_scale_log2": fp.activation_scale_log2,
        "weights": {
            "w_ih": weights.w_ih.tolist(),
            "w_hh": weights.w_hh.tolist(),
            "b_ih": weights.b_ih.tolist(),
            "b_hh": weights.b_hh.tolist(),
            "w_out": weights.w_out.tolist(),
            "b_out": weights.b_out.tolist(),
        },
    }
    if weights.real is not None:
        doc["real_mirror"] = {k: np.asarray(v).tolist()
                              for k, v in weights.real.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not a model file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise SchemaError("missing or wrong format marker")
    if doc.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')}")
    required = ["input_dim", "hidden_dim", "time_steps", "classes",
                "activation_kind", "activation_bits", "modulus_p",
                "weight_scale_log2", "activation_scale_log2", "weights"]
    for key in required:
        if key not in doc:
            raise SchemaError(f"missing field {key}")
    fp = FixedPointConfig(
        plaintext_bits=doc.get("plaintext_bits", 20),
        modulus_p=doc["modulus_p"],
        weight_scale_log2=doc["weight_scale_log2"],
        activation_bits=doc["activation_bits"],
        activation_scale_log2=doc["activation_scale_log2"])
    cfg = ModelConfig(doc["input_dim"], doc["hidden_dim"], doc["time_steps"],
                      doc["activation_kind"], doc["activation_bits"],
                      doc["classes"], fixedpoint=fp)
    w = doc["weights"]
    for key in ("w_ih", "w_hh", "b_ih", "b_hh", "w_out", "b_out"):
        if key not in w:
            raise SchemaError(f"missing weight array {key}")
    real = None
    if "real_mirror" in doc:
        real = {k: np.asarray(v, dtype=np.float64)
                for k, v in doc["real_mirror"].items()}
    weights = GruWeights(w["w_ih"], w["w_hh"], w["b_ih"], w["b_hh"],
                         w["w_out"], w["b_out"], real=real)
    weights.validate(cfg)
    return cfg, weights


def synth_model(seed, input_dim, hidden_dim, time_steps=30,
                activation_kind="TANH", activation_bits=20, classes=2):
    """Random bound-certified model; deterministic for a given seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = ModelConfig(input_dim, hidden_dim, time_steps,
                      activation_kind, activation_bits, classes)
    fp = cfg.fixedpoint
    n, m, k = hidden_dim, input_dim, classes

    def rows(shape, l1_target):
        w = rng.uniform(-1.0, 1.0, shape)
        norm = np.abs(w).sum(axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        scale = l1_target * rng.uniform(0.4, 1.0, (shape[0], 1)) / norm
        return w * scale

    wi = rows((3 * n, m), 0.70 / X_MAX)
    wh = rows((3 * n, n), 0.70 / H_MAX)
    bi = rng.uniform(-0.15, 0.15, 3 * n)
    bh = rng.uniform(-0.15, 0.15, 3 * n)
    wo = rows((k, n), 1.2 / H_MAX)
    bo = rng.uniform(-0.3, 0.3, k)
    real = {"w_ih": wi, "w_hh": wh, "b_ih": bi, "b_hh": bh,
            "w_out": wo, "b_out": bo}
    weights = quantize_weights(real, fp)
    weights.validate(cfg)
    return cfg, weights


def quantize_weights(real, fp: FixedPointConfig):
    ws = fp.weight_scale_log2
    prod = fp.product_scale_log2
    return GruWeights(
        quantize(real["w_ih"], fp, ws), quantize(real["w_hh"], fp, ws),
        quantize(real["b_ih"], fp, prod), quantize(real["b_hh"], fp, prod),
        quantize(real["w_out"], fp, ws), quantize(real["b_out"], fp, prod),
        real=real)
