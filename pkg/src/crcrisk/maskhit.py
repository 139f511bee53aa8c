"""Region transformer with a class token, masked-feature pretraining and task heads.

Everything is plain numpy in float64. The backward pass is written by hand and
is exercised against central finite differences in the test-suite; every loss
function follows the same protocol::

    loss = fn(params, *inputs)
    loss, grads = fn(params, *inputs, with_grad=True)

where ``grads`` maps tensor names to arrays shaped like ``params.tensors``.
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, FormatError, NumericalError, ShapeError

# name -> (kind, number of classes); kind is "ordinal" (softmax) or "count"
INTERMEDIATE_TARGETS = {
    "largest_adenoma_size": ("ordinal", 5),
    "n_adenomas": ("count", None),
    "largest_serrated_size": ("ordinal", 5),
    "n_serrated": ("count", None),
    "most_advanced_serrated": ("ordinal", 5),
    "most_advanced_adenoma": ("ordinal", 4),
}
COLONOSCOPY_TARGETS = ("largest_adenoma_size", "n_adenomas", "largest_serrated_size", "n_serrated")
MICROSCOPY_TARGETS = ("most_advanced_serrated", "most_advanced_adenoma")

SIZE_CLASSES = ("no polyp", "<5mm", "5-9mm", "10-20mm", ">20mm")
ADENOMA_TYPES = ("no adenoma", "tubular", "tubulovillous", "villous")
SERRATED_TYPES = ("no serrated polyp", "hyperplastic", "SSP without dysplasia", "SSP with dysplasia", "TSA")

CHECKPOINT_MAGIC = b"MHCK"
CHECKPOINT_VERSION = 1
STAGES = ("init", "pretrained", "intermediate", "risk")


def resolve_targets(target_spec):
    """Expand a target spec into an ordered tuple of intermediate target names."""
    if isinstance(target_spec, (list, tuple)):
        out = []
        for t in target_spec:
            out.extend(resolve_targets(t))
        return tuple(dict.fromkeys(out))
    spec = str(target_spec).strip().lower().replace(" ", "_").replace("-", "_")
    if spec == "all":
        return tuple(INTERMEDIATE_TARGETS)
    if spec in ("all_colonoscopy", "colonoscopy"):
        return COLONOSCOPY_TARGETS
    if spec in ("all_microscopy", "microscopy"):
        return MICROSCOPY_TARGETS
    if spec in INTERMEDIATE_TARGETS:
        return (spec,)
    valid = ", ".join(list(INTERMEDIATE_TARGETS) + ["all", "all_colonoscopy"])
    raise ConfigError(f"unknown intermediate target {target_spec!r}; valid: {valid}")


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 2
    model_dim: int = 32
    mlp_dim: int = 64
    feat_dim: int = 32
    max_slots: int = 64
    region_side: int = 8
    mask_ratio: float = 0.5
    ln_eps: float = 1e-5
    activation: str = "gelu_tanh"
    norm: str = "pre_layernorm"
    init_scale: float = 0.02

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "model_dim", "mlp_dim", "feat_dim", "max_slots", "region_side"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.model_dim % self.n_heads:
            raise ConfigError("model_dim must be divisible by n_heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.region_side ** 2 < self.max_slots:
            raise ConfigError("region_side**2 must cover max_slots")
        if self.activation != "gelu_tanh" or self.norm != "pre_layernorm":
            raise ConfigError("only gelu_tanh activation with pre_layernorm is implemented")

    @classmethod
    def full_size(cls, feat_dim=512, model_dim=384):
        """Architecture constants of the full-size model (12 layers, 8 heads, 400-slot regions)."""
        return cls(n_layers=12, n_heads=8, model_dim=model_dim, mlp_dim=4 * model_dim,
                   feat_dim=feat_dim, max_slots=400, region_side=20)

    @property
    def head_dim(self):
        return self.model_dim // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RegionBatch:
    """A stack of regions padded to a common slot count.

    features: (B, N, d) original patch features; positions: (B, N, 2) in-region
    (row, col); present: (B, N) real slots; masked: (B, N) slots hidden from the encoder.
    """

    features: np.ndarray
    positions: np.ndarray
    present: np.ndarray
    masked: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 2:
            self.features = self.features[None]
        B, N, _ = self.features.shape
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(B, N, 2)
        self.present = np.asarray(self.present, dtype=bool).reshape(B, N)
        if self.masked is None:
            self.masked = np.zeros((B, N), dtype=bool)
        self.masked = np.asarray(self.masked, dtype=bool).reshape(B, N)
        if np.any(self.masked & ~self.present):
            raise ShapeError("masked slots must be a subset of present slots")
        if B and not np.all(self.present.any(axis=1)):
            raise ShapeError("every region needs at least one present slot")

    @property
    def n_regions(self):
        return self.features.shape[0]

    @classmethod
    def from_regions(cls, feature_list, position_list):
        """Pad a list of (n_i, d) feature matrices with (n_i, 2) positions into one batch."""
        if not feature_list:
            raise ShapeError("empty region list")
        d = feature_list[0].shape[1]
        n_max = max(f.shape[0] for f in feature_list)
        B = len(feature_list)
        feats = np.zeros((B, n_max, d))
        pos = np.zeros((B, n_max, 2), dtype=np.int64)
        present = np.zeros((B, n_max), dtype=bool)
        for i, (f, p) in enumerate(zip(feature_list, position_list)):
            n = f.shape[0]
            if f.shape[1] != d:
                raise ShapeError("feature width differs between regions")
            feats[i, :n] = f
            pos[i, :n] = p
            present[i, :n] = True
        return cls(feats, pos, present)

    def subset(self, idx):
        return RegionBatch(self.features[idx], self.positions[idx], self.present[idx], self.masked[idx])


@dataclass
class ModelParams:
    config: TransformerConfig
    tensors: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]

    def backbone_names(self):
        return [k for k in self.tensors if not is_head(k)]

    def head_names(self):
        return [k for k in self.tensors if is_head(k)]


def is_head(name):
    return name.startswith(("risk.", "head.", "recon."))


def _layer_shapes(cfg, l):
    D, M = cfg.model_dim, cfg.mlp_dim
    p = f"layers.{l}."
    return {
        p + "ln1.g": (D,), p + "ln1.b": (D,),
        p + "attn.Wq": (D, D), p + "attn.bq": (D,),
        p + "attn.Wk": (D, D), p + "attn.bk": (D,),
        p + "attn.Wv": (D, D), p + "attn.bv": (D,),
        p + "attn.Wo": (D, D), p + "attn.bo": (D,),
        p + "ln2.g": (D,), p + "ln2.b": (D,),
        p + "mlp.W1": (D, M), p + "mlp.b1": (M,),
        p + "mlp.W2": (M, D), p + "mlp.b2": (D,),
    }


def head_shapes(cfg, targets=tuple(INTERMEDIATE_TARGETS)):
    D = cfg.model_dim
    shapes = {}
    for t in targets:
        kind, k = INTERMEDIATE_TARGETS[t]
        if kind == "ordinal":
            shapes[f"head.{t}.W"] = (D, k)
            shapes[f"head.{t}.b"] = (k,)
        else:
            shapes[f"head.{t}.W"] = (D, 1)
            shapes[f"head.{t}.b"] = (1,)
    return shapes


def init_params(cfg: TransformerConfig, seed=0, targets=tuple(INTERMEDIATE_TARGETS)) -> ModelParams:
    """Seeded initialization; weight matrices ~ N(0, 1/fan_in), tables ~ N(0, init_scale^2)."""
    rng = np.random.default_rng(seed)
    D, d, S = cfg.model_dim, cfg.feat_dim, cfg.region_side
    t = {
        "embed.W": rng.normal(0, 1 / math.sqrt(d), (d, D)),
        "embed.b": np.zeros(D),
        "pos": rng.normal(0, cfg.init_scale, (S, S, D)),
        "cls": rng.normal(0, cfg.init_scale, D),
        "mask_token": rng.normal(0, cfg.init_scale, D),
    }
    for l in range(cfg.n_layers):
        for name, shape in _layer_shapes(cfg, l).items():
            if name.endswith(".g"):
                t[name] = np.ones(shape)
            elif len(shape) == 2:
                t[name] = rng.normal(0, 1 / math.sqrt(shape[0]), shape)
            else:
                t[name] = np.zeros(shape)
    t["final_ln.g"] = np.ones(D)
    t["final_ln.b"] = np.zeros(D)
    t["recon.W"] = rng.normal(0, 1 / math.sqrt(D), (D, d))
    t["recon.b"] = np.zeros(d)
    params = ModelParams(cfg, t)
    reset_risk_head(params, rng)
    add_intermediate_heads(params, targets, rng)
    return params


def reset_risk_head(params, rng, scale=0.01):
    D = params.config.model_dim
    params.tensors["risk.w"] = rng.normal(0, scale, D)
    params.tensors["risk.b"] = np.zeros(1)


def add_intermediate_heads(params, targets, rng, scale=0.01):
    for name, shape in head_shapes(params.config, targets).items():
        params.tensors[name] = rng.normal(0, scale, shape) if len(shape) == 2 else np.zeros(shape)


def drop_intermediate_heads(params):
    for k in [k for k in params.tensors if k.startswith("head.")]:
        del params.tensors[k]


# ----------------------------------------------------------------------------
# primitives

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


def _ln_fwd(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    flat = dy.reshape(-1, dy.shape[-1])
    dg = (flat * xhat.reshape(flat.shape)).sum(axis=0)
    db = flat.sum(axis=0)
    return dx, dg, db


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _matT(a, b):
    """sum over leading axes of a^T b for (..., m) and (..., n) arrays -> (m, n)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# ----------------------------------------------------------------------------
# encoder


def _check_batch(params, batch):
    cfg = params.config
    if batch.features.shape[-1] != cfg.feat_dim:
        raise ShapeError(f"feature width {batch.features.shape[-1]} != feat_dim {cfg.feat_dim}")
    pos = batch.positions[batch.present]
    if pos.size and (pos.min() < 0 or pos.max() >= cfg.region_side):
        raise ShapeError("positions fall outside the region table")


def _encode(params: ModelParams, batch: RegionBatch):
    cfg = params.config
    P = params.tensors
    _check_batch(params, batch)
    B, N, _ = batch.features.shape
    D, H, dh = cfg.model_dim, cfg.n_heads, cfg.head_dim
    T = N + 1
    scale = 1.0 / math.sqrt(dh)

    emb = batch.features @ P["embed.W"] + P["embed.b"]
    emb = np.where(batch.masked[..., None], P["mask_token"], emb)
    tok = emb + P["pos"][batch.positions[..., 0], batch.positions[..., 1]]
    x = np.concatenate([np.broadcast_to(P["cls"], (B, 1, D)), tok], axis=1)
    admissible = np.concatenate([np.ones((B, 1), dtype=bool), batch.present], axis=1)
    key_mask = admissible[:, None, None, :]

    layers = []
    attn = []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        a, ln1 = _ln_fwd(x, P[p + "ln1.g"], P[p + "ln1.b"], cfg.ln_eps)

        def heads(W, b):
            return (a @ P[W] + P[b]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q = heads(p + "attn.Wq", p + "attn.bq")
        k = heads(p + "attn.Wk", p + "attn.bk")
        v = heads(p + "attn.Wv", p + "attn.bv")
        s = np.where(key_mask, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        A = _softmax(s)
        om = (A @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        x1 = x + om @ P[p + "attn.Wo"] + P[p + "attn.bo"]
        m2, ln2 = _ln_fwd(x1, P[p + "ln2.g"], P[p + "ln2.b"], cfg.ln_eps)
        h = m2 @ P[p + "mlp.W1"] + P[p + "mlp.b1"]
        gh = _gelu(h)
        x2 = x1 + gh @ P[p + "mlp.W2"] + P[p + "mlp.b2"]
        layers.append(dict(a=a, ln1=ln1, q=q, k=k, v=v, A=A, om=om, m2=m2, ln2=ln2, h=h, gh=gh))
        attn.append(A)
        x = x2
    y, lnf = _ln_fwd(x, P["final_ln.g"], P["final_ln.b"], cfg.ln_eps)
    cache = dict(layers=layers, lnf=lnf, batch=batch, scale=scale)
    return y, attn, cache


def _encode_backward(params: ModelParams, cache, dy):
    cfg = params.config
    P = params.tensors
    batch = cache["batch"]
    B, N, _ = batch.features.shape
    D, H, dh = cfg.model_dim, cfg.n_heads, cfg.head_dim
    T = N + 1
    scale = cache["scale"]
    g = {}

    dx, g["final_ln.g"], g["final_ln.b"] = _ln_bwd(dy, cache["lnf"])
    for l in reversed(range(cfg.n_layers)):
        p = f"layers.{l}."
        c = cache["layers"][l]
        g[p + "mlp.W2"] = _matT(c["gh"], dx)
        g[p + "mlp.b2"] = dx.sum(axis=(0, 1))
        dh_ = (dx @ P[p + "mlp.W2"].T) * _gelu_grad(c["h"])
        g[p + "mlp.W1"] = _matT(c["m2"], dh_)
        g[p + "mlp.b1"] = dh_.sum(axis=(0, 1))
        dm2 = dh_ @ P[p + "mlp.W1"].T
        dln, g[p + "ln2.g"], g[p + "ln2.b"] = _ln_bwd(dm2, c["ln2"])
        dx1 = dx + dln

        g[p + "attn.Wo"] = _matT(c["om"], dx1)
        g[p + "attn.bo"] = dx1.sum(axis=(0, 1))
        do = (dx1 @ P[p + "attn.Wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        A = c["A"]
        dA = do @ c["v"].transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ do
        ds = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dq = (ds @ c["k"]) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ c["q"]) * scale

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B, T, D)

        da = np.zeros_like(dx)
        for name, d_ in (("q", dq), ("k", dk), ("v", dv)):
            dm = merge(d_)
            g[p + f"attn.W{name}"] = _matT(c["a"], dm)
            g[p + f"attn.b{name}"] = dm.sum(axis=(0, 1))
            da += dm @ P[p + f"attn.W{name}"].T
        dln, g[p + "ln1.g"], g[p + "ln1.b"] = _ln_bwd(da, c["ln1"])
        dx = dx1 + dln

    g["cls"] = dx[:, 0].sum(axis=0)
    dtok = dx[:, 1:]
    gpos = np.zeros_like(P["pos"])
    np.add.at(gpos, (batch.positions[..., 0], batch.positions[..., 1]), dtok)
    g["pos"] = gpos
    m = batch.masked[..., None]
    g["mask_token"] = np.where(m, dtok, 0.0).sum(axis=(0, 1))
    demb = np.where(m, 0.0, dtok)
    g["embed.W"] = _matT(batch.features, demb)
    g["embed.b"] = demb.sum(axis=(0, 1))
    return g


def _full_grads(params, partial):
    return {k: partial.get(k, np.zeros_like(v)) for k, v in params.tensors.items()}


def forward_region(params: ModelParams, batch: RegionBatch):
    """Encode regions; returns (class tokens (B, D), per-layer attention (B, H, T, T)).

    Token 0 of every attention matrix is the class token; absent slots get
    exactly zero attention mass.
    """
    y, attn, _ = _encode(params, batch)
    return y[:, 0].copy(), attn


def class_token_attention(attn, present=None):
    """Class-token attention over patch slots, renormalized over patches and
    averaged over layers and heads -> (B, N)."""
    stack = np.stack([A[:, :, 0, 1:] for A in attn])  # (L, B, H, N)
    keys = np.ones(stack.shape[-1:], bool) if present is None else np.asarray(present, bool)[None, :, None, :]
    uniform = np.broadcast_to(keys / keys.sum(axis=-1, keepdims=True), stack.shape)
    total = stack.sum(axis=-1, keepdims=True)
    # a row whose patch mass underflowed to zero falls back to uniform
    safe = np.where(total > 0, total, 1.0)
    stack = np.where(total > 0, stack / safe, uniform)
    out = stack.mean(axis=(0, 2))
    if present is not None:
        out = np.where(present, out, 0.0)
    return out


def aggregate_patient(class_tokens):
    tokens = [np.asarray(t, dtype=np.float64) for t in class_tokens]
    if not tokens:
        raise ShapeError("cannot aggregate an empty list of class tokens")
    return np.mean(np.stack(tokens), axis=0)


def _segment_mean(values, index, n_groups):
    counts = np.bincount(index, minlength=n_groups).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("every patient needs at least one region")
    out = np.zeros((n_groups, values.shape[1]))
    np.add.at(out, index, values)
    return out / counts[:, None], counts


def patient_embeddings(params, batch, patient_index, n_patients=None):
    """Average class tokens of the regions belonging to each patient."""
    patient_index = np.asarray(patient_index, dtype=np.int64)
    n_patients = int(patient_index.max()) + 1 if n_patients is None else n_patients
    cls, _ = forward_region(params, batch)
    return _segment_mean(cls, patient_index, n_patients)[0]


# ----------------------------------------------------------------------------
# masking and pretraining loss


def n_to_mask(n_present, mask_ratio):
    """round-half-up of mask_ratio * n_present, at least one slot."""
    return max(1, min(n_present, int(math.floor(mask_ratio * n_present + 0.5))))


def mae_mask(batch: RegionBatch, mask_ratio, rng) -> RegionBatch:
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError("mask_ratio must lie in (0, 1)")
    counts = batch.present.sum(axis=1)
    if np.any(counts < 2):
        raise ShapeError("masking needs at least two present slots per region")
    masked = np.zeros_like(batch.present)
    for i in range(batch.n_regions):
        slots = np.flatnonzero(batch.present[i])
        chosen = rng.choice(slots, size=n_to_mask(len(slots), mask_ratio), replace=False)
        masked[i, chosen] = True
    return RegionBatch(batch.features, batch.positions, batch.present, masked)


def mae_loss(params: ModelParams, batch: RegionBatch, with_grad=False):
    """Mean squared reconstruction error of masked feature rows."""
    n_masked = int(batch.masked.sum())
    if n_masked == 0:
        raise ShapeError("mae_loss needs at least one masked slot")
    y, _, cache = _encode(params, batch)
    P = params.tensors
    ytok = y[:, 1:]
    recon = ytok @ P["recon.W"] + P["recon.b"]
    m = batch.masked[..., None]
    diff = np.where(m, recon - batch.features, 0.0)
    denom = n_masked * batch.features.shape[-1]
    loss = float((diff ** 2).sum() / denom)
    if not with_grad:
        return loss
    _require_finite(loss)
    drecon = 2.0 * diff / denom
    dy = np.zeros_like(y)
    dy[:, 1:] = drecon @ P["recon.W"].T
    g = _encode_backward(params, cache, dy)
    g["recon.W"] = _matT(ytok, drecon)
    g["recon.b"] = drecon.sum(axis=(0, 1))
    return loss, _full_grads(params, g)


def reconstruct(params, batch):
    y, _, _ = _encode(params, batch)
    return y[:, 1:] @ params["recon.W"] + params["recon.b"]


# ----------------------------------------------------------------------------
# heads


def risk_head(params: ModelParams, patient_embedding):
    e = np.asarray(patient_embedding, dtype=np.float64)
    return _sigmoid(e @ params["risk.w"] + params["risk.b"][0])


def intermediate_head(params: ModelParams, patient_embedding, target_spec):
    """Per-target outputs: softmax class scores for ordinal targets, a
    non-negative expected count for count targets."""
    e = np.asarray(patient_embedding, dtype=np.float64)
    out = {}
    for t in resolve_targets(target_spec):
        if f"head.{t}.W" not in params.tensors:
            raise ConfigError(f"checkpoint has no head for {t}")
        z = e @ params[f"head.{t}.W"] + params[f"head.{t}.b"]
        kind, _ = INTERMEDIATE_TARGETS[t]
        out[t] = _softmax(z) if kind == "ordinal" else np.exp(np.clip(z[..., 0], -30, 30))
    return out


def balanced_class_weights(labels):
    """Inverse class frequency weights n / (2 n_c); 1.0 each when a class is absent."""
    labels = np.asarray(labels)
    n = len(labels)
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return (1.0, 1.0)
    return (n / (2.0 * n_neg), n / (2.0 * n_pos))


def _embed_patients(params, batch, patient_index, n_patients, embeddings):
    if embeddings is not None:
        return np.asarray(embeddings, dtype=np.float64), None, None
    y, _, cache = _encode(params, batch)
    e, counts = _segment_mean(y[:, 0], patient_index, n_patients)
    return e, (y, cache), counts


def _backprop_patients(params, enc, counts, patient_index, de, g):
    y, cache = enc
    dy = np.zeros_like(y)
    dy[:, 0] = de[patient_index] / counts[patient_index, None]
    g.update(_encode_backward(params, cache, dy))


def risk_loss(params, batch, patient_index, labels, class_weights=(1.0, 1.0), with_grad=False,
              backbone=True, embeddings=None):
    """Class-weighted binary cross-entropy of the risk head over patients.

    When ``backbone`` is False (frozen transformer) only the head gradients are
    returned; ``embeddings`` may then be passed to skip the encoder.
    """
    labels = np.asarray(labels, dtype=np.float64)
    patient_index = np.asarray(patient_index, dtype=np.int64)
    n = len(labels)
    e, enc, counts = _embed_patients(params, batch, patient_index, n, embeddings)
    z = e @ params["risk.w"] + params["risk.b"][0]
    w = np.where(labels > 0.5, class_weights[1], class_weights[0])
    per = np.logaddexp(0.0, z) - labels * z
    loss = float((w * per).sum() / n)
    if not with_grad:
        return loss
    _require_finite(loss)
    dz = w * (_sigmoid(z) - labels) / n
    g = {"risk.w": e.T @ dz, "risk.b": np.array([dz.sum()])}
    if backbone and enc is not None:
        _backprop_patients(params, enc, counts, patient_index, np.outer(dz, params["risk.w"]), g)
    return loss, _full_grads(params, g)


def intermediate_loss(params, batch, patient_index, targets, target_spec, with_grad=False,
                      backbone=True, embeddings=None):
    """Sum over the requested targets of the mean per-patient loss.

    Ordinal targets use softmax cross-entropy; counts use the Poisson negative
    log-likelihood with a log link. ``targets`` maps target name -> (P,) ints.
    """
    names = resolve_targets(target_spec)
    patient_index = np.asarray(patient_index, dtype=np.int64)
    n = len(np.asarray(targets[names[0]]))
    e, enc, counts = _embed_patients(params, batch, patient_index, n, embeddings)
    loss = 0.0
    g = {}
    de = np.zeros_like(e)
    for t in names:
        kind, k = INTERMEDIATE_TARGETS[t]
        W, b = params[f"head.{t}.W"], params[f"head.{t}.b"]
        y = np.asarray(targets[t])
        z = e @ W + b
        if kind == "ordinal":
            y = y.astype(np.int64)
            if y.min() < 0 or y.max() >= k:
                raise ShapeError(f"{t} labels outside 0..{k - 1}")
            lse = np.logaddexp.reduce(z, axis=1)
            loss += float((lse - z[np.arange(n), y]).sum() / n)
            dz = _softmax(z)
            dz[np.arange(n), y] -= 1.0
            dz /= n
        else:
            y = y.astype(np.float64)
            a = z[:, 0]
            rate = np.exp(a)
            loss += float((rate - y * a + gammaln(y + 1.0)).sum() / n)
            dz = ((rate - y) / n)[:, None]
        g[f"head.{t}.W"] = e.T @ dz
        g[f"head.{t}.b"] = dz.sum(axis=0)
        de += dz @ W.T
    if not with_grad:
        return loss
    _require_finite(loss)
    if backbone and enc is not None:
        _backprop_patients(params, enc, counts, patient_index, de, g)
    return loss, _full_grads(params, g)


def _require_finite(loss):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")


def grad(params, loss_fn, inputs):
    """Analytic gradients of ``loss_fn(params, *inputs)`` for every tensor."""
    loss, g = loss_fn(params, *inputs, with_grad=True)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    return g


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: ModelParams
    featurizer_seed: int
    stage: str = "init"
    meta: dict = field(default_factory=dict)

    def copy(self):
        return Checkpoint(self.params.copy(), self.featurizer_seed, self.stage, copy.deepcopy(self.meta))


def save_checkpoint(path, ckpt: Checkpoint):
    if ckpt.stage not in STAGES:
        raise ConfigError(f"unknown training stage {ckpt.stage!r}")
    header = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.params.config.to_dict(),
        "featurizer_seed": int(ckpt.featurizer_seed),
        "stage": ckpt.stage,
        "meta": ckpt.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hb)), hb]
    names = sorted(ckpt.params.tensors)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.params.tensors[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    try:
        if data[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version} unsupported")
        off = 12
        header = json.loads(data[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupted checkpoint ({exc})") from exc
    cfg = TransformerConfig.from_dict(header["config"])
    return Checkpoint(ModelParams(cfg, tensors), header["featurizer_seed"], header["stage"], header.get("meta", {}))
