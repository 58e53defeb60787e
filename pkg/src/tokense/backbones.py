"""Sequence backbones: selective-SSM blocks, attention layers, and hybrids.

Every layer is pre-norm with a residual connection.  The SSM block follows
the gated design: an input projection widens d_model by the expand factor,
a short causal depthwise convolution and SiLU precede the selective scan,
a SiLU-gated elementwise product and an output projection close the block.
The bidirectional variant runs one branch left-to-right and one on the
frame-reversed sequence, concatenates the two d_model outputs over channels
and merges them back to d_model with a kernel-1 stride-1 transposed
convolution before the residual add.

``count_flops`` prices the layers analytically (multiply-adds times two);
the constants and omissions are listed in docs/flops.md.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import PreconditionError, ShapeError
from .ssm import SelectiveSsmParams, discretize_selective, init_selective_ssm, scan_parallel
from .tensor import Tensor

BACKBONE_KINDS = ("mamba_uni", "mamba_bi", "transformer", "transformer_causal", "hybrid")


@dataclass
class BackboneSpec:
    """Architecture hyperparameters for a backbone stack."""

    kind: str = "mamba_bi"
    layers: int = 12
    d_model: int = 256
    state_dim: int = 16
    conv_width: int = 4
    expand: int = 2
    heads: int = 8
    tie_directions: bool = False
    input_mode: str = "zoh"
    dt_rank: int | None = None

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise PreconditionError(f"unknown backbone kind {self.kind!r}; expected one of {BACKBONE_KINDS}")
        if self.kind in ("transformer", "transformer_causal") and self.d_model % self.heads != 0:
            raise PreconditionError(f"d_model {self.d_model} not divisible by {self.heads} heads")

    @property
    def d_inner(self):
        return self.expand * self.d_model

    @property
    def dt_rank_effective(self):
        if self.dt_rank is not None:
            return self.dt_rank
        return max(1, -(-self.d_inner // 16))

    def to_config(self):
        return {
            "kind": self.kind,
            "layers": self.layers,
            "d_model": self.d_model,
            "state_dim": self.state_dim,
            "conv_width": self.conv_width,
            "expand": self.expand,
            "heads": self.heads,
            "tie_directions": self.tie_directions,
            "input_mode": self.input_mode,
            "dt_rank": self.dt_rank,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


# -- parameter containers --------------------------------------------------


@dataclass
class MambaDirParams:
    """One directional SSM branch, including its pre-norm."""

    norm_g: Tensor
    norm_b: Tensor
    w_in: Tensor  # (d, 2 * d_inner)
    conv_w: Tensor  # (conv_width, d_inner)
    conv_b: Tensor  # (d_inner,)
    ssm: SelectiveSsmParams
    w_out: Tensor  # (d_inner, d)

    def named_tensors(self, prefix=""):
        for name in ("norm_g", "norm_b", "w_in", "conv_w", "conv_b", "w_out"):
            yield prefix + name, getattr(self, name)
        yield from self.ssm.named_tensors(prefix + "ssm.")

    def tensors(self):
        return [t for _, t in self.named_tensors()]


@dataclass
class BiMambaParams:
    fwd: MambaDirParams
    bwd: MambaDirParams  # the same object as fwd when directions are tied
    w_merge: Tensor  # (1, 2 * d_model, d_model) transposed-conv kernel, no bias

    @property
    def tied(self):
        return self.bwd is self.fwd

    def named_tensors(self, prefix=""):
        yield from self.fwd.named_tensors(prefix + "fwd.")
        if not self.tied:
            yield from self.bwd.named_tensors(prefix + "bwd.")
        yield prefix + "w_merge", self.w_merge

    def tensors(self):
        return [t for _, t in self.named_tensors()]


@dataclass
class AttentionParams:
    norm_g: Tensor
    norm_b: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def named_tensors(self, prefix=""):
        for name in ("norm_g", "norm_b", "w_q", "w_k", "w_v", "w_o"):
            yield prefix + name, getattr(self, name)

    def tensors(self):
        return [t for _, t in self.named_tensors()]


@dataclass
class FfnParams:
    norm_g: Tensor
    norm_b: Tensor
    w1: Tensor  # (d, 4d)
    b1: Tensor
    w2: Tensor  # (4d, d)
    b2: Tensor

    def named_tensors(self, prefix=""):
        for name in ("norm_g", "norm_b", "w1", "b1", "w2", "b2"):
            yield prefix + name, getattr(self, name)

    def tensors(self):
        return [t for _, t in self.named_tensors()]


@dataclass
class TransformerLayerParams:
    attn: AttentionParams
    ffn: FfnParams

    def named_tensors(self, prefix=""):
        yield from self.attn.named_tensors(prefix + "attn.")
        yield from self.ffn.named_tensors(prefix + "ffn.")

    def tensors(self):
        return [t for _, t in self.named_tensors()]


@dataclass
class HybridLayerParams:
    mixer: BiMambaParams
    ffn: FfnParams

    def named_tensors(self, prefix=""):
        yield from self.mixer.named_tensors(prefix + "mixer.")
        yield from self.ffn.named_tensors(prefix + "ffn.")

    def tensors(self):
        return [t for _, t in self.named_tensors()]


# -- initialization --------------------------------------------------------


def _linear(rng, fan_in, fan_out, dtype):
    return T.tensor(rng.standard_normal((fan_in, fan_out)) * fan_in**-0.5, requires_grad=True, dtype=dtype)


def _init_mamba_dir(spec, rng, dtype):
    d, di = spec.d_model, spec.d_inner
    return MambaDirParams(
        norm_g=T.tensor(np.ones(d), requires_grad=True, dtype=dtype),
        norm_b=T.tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        w_in=_linear(rng, d, 2 * di, dtype),
        conv_w=T.tensor(rng.standard_normal((spec.conv_width, di)) * spec.conv_width**-0.5,
                        requires_grad=True, dtype=dtype),
        conv_b=T.tensor(np.zeros(di), requires_grad=True, dtype=dtype),
        ssm=init_selective_ssm(di, spec.state_dim, rng, dt_rank=spec.dt_rank_effective, dtype=dtype),
        w_out=_linear(rng, di, d, dtype),
    )


def _init_bimamba(spec, rng, dtype):
    fwd = _init_mamba_dir(spec, rng, dtype)
    bwd = fwd if spec.tie_directions else _init_mamba_dir(spec, rng, dtype)
    d = spec.d_model
    w_merge = T.tensor(rng.standard_normal((1, 2 * d, d)) * (2 * d) ** -0.5, requires_grad=True, dtype=dtype)
    return BiMambaParams(fwd=fwd, bwd=bwd, w_merge=w_merge)


def _init_ffn(spec, rng, dtype):
    d = spec.d_model
    return FfnParams(
        norm_g=T.tensor(np.ones(d), requires_grad=True, dtype=dtype),
        norm_b=T.tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        w1=_linear(rng, d, 4 * d, dtype),
        b1=T.tensor(np.zeros(4 * d), requires_grad=True, dtype=dtype),
        w2=_linear(rng, 4 * d, d, dtype),
        b2=T.tensor(np.zeros(d), requires_grad=True, dtype=dtype),
    )


def _init_attention(spec, rng, dtype):
    d = spec.d_model
    return AttentionParams(
        norm_g=T.tensor(np.ones(d), requires_grad=True, dtype=dtype),
        norm_b=T.tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        w_q=_linear(rng, d, d, dtype),
        w_k=_linear(rng, d, d, dtype),
        w_v=_linear(rng, d, d, dtype),
        w_o=_linear(rng, d, d, dtype),
    )


def init_layer(spec, rng, dtype=None):
    if spec.kind == "mamba_uni":
        return _init_mamba_dir(spec, rng, dtype)
    if spec.kind == "mamba_bi":
        return _init_bimamba(spec, rng, dtype)
    if spec.kind in ("transformer", "transformer_causal"):
        return TransformerLayerParams(attn=_init_attention(spec, rng, dtype), ffn=_init_ffn(spec, rng, dtype))
    if spec.kind == "hybrid":
        return HybridLayerParams(mixer=_init_bimamba(spec, rng, dtype), ffn=_init_ffn(spec, rng, dtype))
    raise PreconditionError(f"unknown backbone kind {spec.kind!r}")


def init_backbone(spec, rng, dtype=None):
    return [init_layer(spec, rng, dtype=dtype) for _ in range(spec.layers)]


# -- forward passes --------------------------------------------------------


def _mamba_path(x, p, spec, reverse=False):
    """Norm, project, convolve, scan, gate; returns the branch output (L, d)."""
    di = spec.d_inner
    h = T.layer_norm(x, p.norm_g, p.norm_b)
    if reverse:
        h = T.flip(h, axis=0)
    u = T.matmul(h, p.w_in)
    main = T.getitem(u, (slice(None), slice(0, di)))
    gate = T.getitem(u, (slice(None), slice(di, 2 * di)))
    main = T.conv1d_depthwise_causal(main, p.conv_w, p.conv_b)
    main = T.silu(main)
    y = scan_parallel(discretize_selective(main, p.ssm, mode=spec.input_mode))
    y = T.mul(y, T.silu(gate))
    y = T.matmul(y, p.w_out)
    if reverse:
        y = T.flip(y, axis=0)
    return y


def mamba_block_forward(x, p, spec, reverse=False):
    """Causal SSM block with residual; reverse=True runs right-to-left."""
    return T.add(x, _mamba_path(x, p, spec, reverse=reverse))


def bimamba_forward(x, p, spec):
    """Two directional branches, channel concat, 1x1 transposed-conv merge."""
    yf = _mamba_path(x, p.fwd, spec, reverse=False)
    yb = _mamba_path(x, p.bwd, spec, reverse=True)
    cat = T.concat([yf, yb], axis=1)
    merged = T.conv_transpose1d(cat, p.w_merge, stride=1)
    return T.add(x, merged)


def _causal_mask(length, dtype):
    # strictly-upper entries get a large negative score; exp underflows to 0
    mask = np.triu(np.full((length, length), -1e30, dtype=dtype), k=1)
    return mask


def attention_forward(x, p, spec, causal, return_weights=False):
    length, d = x.shape
    nh = spec.heads
    dh = d // nh
    h = T.layer_norm(x, p.norm_g, p.norm_b)
    q = T.transpose(T.reshape(T.matmul(h, p.w_q), (length, nh, dh)), (1, 0, 2))
    k = T.transpose(T.reshape(T.matmul(h, p.w_k), (length, nh, dh)), (1, 0, 2))
    v = T.transpose(T.reshape(T.matmul(h, p.w_v), (length, nh, dh)), (1, 0, 2))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), dh**-0.5)
    if causal:
        scores = T.add(scores, T.tensor(_causal_mask(length, scores.dtype)))
    weights = T.softmax(scores)
    ctx = T.matmul(weights, v)
    out = T.matmul(T.reshape(T.transpose(ctx, (1, 0, 2)), (length, d)), p.w_o)
    if return_weights:
        return out, weights
    return out


def ffn_forward(x, p):
    h = T.layer_norm(x, p.norm_g, p.norm_b)
    h = T.relu(T.add(T.matmul(h, p.w1), p.b1))
    return T.add(T.matmul(h, p.w2), p.b2)


def transformer_layer_forward(x, p, spec, causal=False):
    x = T.add(x, attention_forward(x, p.attn, spec, causal=causal))
    return T.add(x, ffn_forward(x, p.ffn))


def hybrid_layer_forward(x, p, spec):
    """Attention sublayer replaced by the bidirectional SSM; FFN unchanged."""
    x = bimamba_forward(x, p.mixer, spec)
    return T.add(x, ffn_forward(x, p.ffn))


def backbone_forward(x, layers, spec):
    """Run the full stack; x is (L, d_model)."""
    if x.ndim != 2 or x.shape[1] != spec.d_model:
        raise ShapeError(f"backbone expects (L, {spec.d_model}) input, got {x.shape}")
    for p in layers:
        if spec.kind == "mamba_uni":
            x = mamba_block_forward(x, p, spec)
        elif spec.kind == "mamba_bi":
            x = bimamba_forward(x, p, spec)
        elif spec.kind == "transformer":
            x = transformer_layer_forward(x, p, spec, causal=False)
        elif spec.kind == "transformer_causal":
            x = transformer_layer_forward(x, p, spec, causal=True)
        else:
            x = hybrid_layer_forward(x, p, spec)
    return x


def backbone_named_tensors(layers, prefix="backbone."):
    for i, p in enumerate(layers):
        yield from p.named_tensors(f"{prefix}{i}.")


def backbone_tensors(layers):
    return [t for _, t in backbone_named_tensors(layers)]


# -- analytic cost model ---------------------------------------------------


def _mamba_dir_terms(spec, length):
    d, di, m = spec.d_model, spec.d_inner, spec.state_dim
    r = spec.dt_rank_effective
    return {
        "ssm_in_proj": 2.0 * length * d * 2 * di,
        "ssm_conv": 2.0 * length * di * spec.conv_width,
        "ssm_bc_proj": 2.0 * length * di * m * 2,
        "ssm_dt_proj": 2.0 * length * (di * r + r * di),
        "ssm_discretize": 4.0 * length * di * m,
        "ssm_scan": 6.0 * length * di * m,
        "ssm_out_proj": 2.0 * length * di * d,
    }


def count_flops(spec, length):
    """Analytic FLOPs for one forward pass of the whole stack.

    Multiply-adds count as two FLOPs.  Returns a dict with the per-term
    breakdown ("terms", summed over layers), the total, and the
    attention-only quadratic part ("attn_quadratic", zero for SSM kinds).
    Norms, softmax, and activations are excluded; see docs/flops.md.
    """
    if length < 1:
        raise PreconditionError(f"sequence length must be >= 1, got {length}")
    d = spec.d_model
    terms = {}

    def put(name, value):
        terms[name] = terms.get(name, 0.0) + value * spec.layers

    if spec.kind in ("transformer", "transformer_causal"):
        put("attn_scores", 2.0 * length * length * d)
        put("attn_weighted_sum", 2.0 * length * length * d)
        put("attn_proj", 8.0 * length * d * d)
        put("ffn", 16.0 * length * d * d)
    elif spec.kind == "mamba_uni":
        for name, val in _mamba_dir_terms(spec, length).items():
            put(name, val)
    elif spec.kind in ("mamba_bi", "hybrid"):
        for name, val in _mamba_dir_terms(spec, length).items():
            put(name, 2.0 * val)
        put("bi_merge", 2.0 * length * 2 * d * d)
        if spec.kind == "hybrid":
            put("ffn", 16.0 * length * d * d)
    total = float(sum(terms.values()))
    quad = terms.get("attn_scores", 0.0) + terms.get("attn_weighted_sum", 0.0)
    return {
        "kind": spec.kind,
        "L": int(length),
        "layers": spec.layers,
        "d_model": d,
        "terms": terms,
        "attn_quadratic": float(quad),
        "total": total,
    }
