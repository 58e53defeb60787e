"""Neural audio codec: strided conv encoder, residual vector quantizer,
transposed-conv decoder.

The encoder maps a waveform to a latent sequence at 1/256 of the audio
rate (four stride-4 stages, kernel 2x stride, symmetric padding, so the
token rate is exact for inputs divisible by 256).  The quantizer is a
four-stage residual codebook of 1024 entries each; stage k quantizes what
stages < k left behind, and the decoder resynthesizes from the summed
entries.

Codebook entry 0 of every stage is pinned to the zero vector and excluded
from EMA updates.  Quantizing against a set that contains the zero vector
can never increase the residual norm (picking 0 leaves it unchanged, and
argmin only improves on that), which makes per-stage residual energy
monotonically non-increasing by construction rather than by luck.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import PreconditionError, ShapeError
from .optim import Adam

ACTIVATIONS = ("elu", "none")


@dataclass
class CodecConfig:
    strides: tuple = (4, 4, 4, 4)
    channels: tuple = (16, 32, 64, 128)
    latent_dim: int = 64
    n_quantizers: int = 4
    codebook_size: int = 1024
    activation: str = "elu"

    def __post_init__(self):
        if len(self.strides) != len(self.channels):
            raise PreconditionError(
                f"strides {self.strides} and channels {self.channels} must pair up"
            )
        if any(s % 2 for s in self.strides):
            # kernel = 2*stride with stride/2 padding keeps every stage's
            # length an exact multiple; odd strides would break that
            raise PreconditionError(f"strides must be even, got {self.strides}")
        if self.activation not in ACTIVATIONS:
            raise PreconditionError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def hop(self):
        out = 1
        for s in self.strides:
            out *= s
        return out

    def kernel(self, i):
        return 2 * self.strides[i]

    def to_config(self):
        return {
            "strides": list(self.strides),
            "channels": list(self.channels),
            "latent_dim": self.latent_dim,
            "n_quantizers": self.n_quantizers,
            "codebook_size": self.codebook_size,
            "activation": self.activation,
        }

    @classmethod
    def from_config(cls, d):
        return cls(
            strides=tuple(d["strides"]),
            channels=tuple(d["channels"]),
            latent_dim=int(d["latent_dim"]),
            n_quantizers=int(d["n_quantizers"]),
            codebook_size=int(d["codebook_size"]),
            activation=d["activation"],
        )


@dataclass
class EncoderParams:
    convs: list  # [(w (K, Cin, Cout), b (Cout,)), ...]
    head_w: T.Tensor  # (C_last, latent)
    head_b: T.Tensor

    def named_tensors(self, prefix="encoder."):
        for i, (w, b) in enumerate(self.convs):
            yield f"{prefix}conv{i}.w", w
            yield f"{prefix}conv{i}.b", b
        yield f"{prefix}head.w", self.head_w
        yield f"{prefix}head.b", self.head_b

    def tensors(self):
        return [t for _, t in self.named_tensors()]


@dataclass
class DecoderParams:
    head_w: T.Tensor  # (latent, C_last)
    head_b: T.Tensor
    deconvs: list  # [(w (K, Cin, Cout), b (Cout,)), ...] from deep to wave

    def named_tensors(self, prefix="decoder."):
        yield f"{prefix}head.w", self.head_w
        yield f"{prefix}head.b", self.head_b
        for i, (w, b) in enumerate(self.deconvs):
            yield f"{prefix}deconv{i}.w", w
            yield f"{prefix}deconv{i}.b", b

    def tensors(self):
        return [t for _, t in self.named_tensors()]


class Codebooks:
    """Residual codebooks with EMA statistics.

    entries: (n_quantizers, codebook_size, latent_dim), entry 0 pinned to 0.
    """

    def __init__(self, entries, frozen=False):
        entries = np.asarray(entries)
        if entries.ndim != 3:
            raise ShapeError(f"codebook entries must be (K, V, D), got {entries.shape}")
        self.entries = entries
        self.entries[:, 0, :] = 0.0
        self.frozen = frozen
        k, v, d = entries.shape
        self.ema_size = np.zeros((k, v), dtype=entries.dtype)
        self.ema_sum = np.zeros_like(entries)
        self.usage = np.zeros((k, v), dtype=np.int64)

    @property
    def n_quantizers(self):
        return self.entries.shape[0]

    @property
    def codebook_size(self):
        return self.entries.shape[1]

    def freeze(self):
        self.frozen = True
        return self


@dataclass
class CodecParams:
    config: CodecConfig
    encoder: EncoderParams
    decoder: DecoderParams
    codebooks: Codebooks

    def named_tensors(self):
        yield from self.encoder.named_tensors()
        yield from self.decoder.named_tensors()

    def trainable(self):
        return self.encoder.tensors() + self.decoder.tensors()


def _conv_init(rng, k, cin, cout, dtype):
    scale = 1.0 / np.sqrt(k * cin)
    w = T.parameter(rng.standard_normal((k, cin, cout)) * scale, dtype=dtype)
    b = T.parameter(np.zeros(cout), dtype=dtype)
    return w, b


def init_codec(config, rng, dtype=None):
    dtype = dtype or T.default_dtype()
    chans = (1,) + tuple(config.channels)
    convs = []
    for i, s in enumerate(config.strides):
        convs.append(_conv_init(rng, config.kernel(i), chans[i], chans[i + 1], dtype))
    c_last = config.channels[-1]
    enc = EncoderParams(
        convs=convs,
        head_w=T.parameter(rng.standard_normal((c_last, config.latent_dim)) / np.sqrt(c_last), dtype=dtype),
        head_b=T.parameter(np.zeros(config.latent_dim), dtype=dtype),
    )
    deconvs = []
    rev_chans = chans[::-1]  # (128, 64, 32, 16, 1)
    rev_strides = config.strides[::-1]
    for i, s in enumerate(rev_strides):
        k = 2 * s
        deconvs.append(_conv_init(rng, k, rev_chans[i], rev_chans[i + 1], dtype))
    dec = DecoderParams(
        head_w=T.parameter(rng.standard_normal((config.latent_dim, c_last)) / np.sqrt(config.latent_dim), dtype=dtype),
        head_b=T.parameter(np.zeros(c_last), dtype=dtype),
        deconvs=deconvs,
    )
    entries = (rng.standard_normal((config.n_quantizers, config.codebook_size, config.latent_dim)) * 0.5).astype(dtype)
    return CodecParams(config=config, encoder=enc, decoder=dec, codebooks=Codebooks(entries))


def _act(x, config):
    return T.elu(x) if config.activation == "elu" else x


def encode_with(wave, encoder, config):
    """Waveform Tensor (L,) -> latent Tensor (T, latent_dim) through the
    given encoder parameters; L must divide by the codec hop."""
    if wave.ndim != 1:
        raise ShapeError(f"encode wants a 1-D waveform, got {wave.shape}")
    if wave.shape[0] % config.hop != 0:
        raise PreconditionError(
            f"waveform length {wave.shape[0]} is not a multiple of the codec hop {config.hop}"
        )
    h = T.reshape(wave, (wave.shape[0], 1))
    for i, (w, b) in enumerate(encoder.convs):
        s = config.strides[i]
        h = T.conv1d(h, w, b, stride=s, padding=s // 2)
        h = _act(h, config)
    return T.matmul(h, encoder.head_w) + encoder.head_b


def encode(wave, params, config=None):
    return encode_with(wave, params.encoder, config or params.config)


def decode(z, params, config=None):
    """Latent Tensor (T, latent_dim) -> waveform Tensor (T * hop,)."""
    config = config or params.config
    if z.ndim != 2 or z.shape[1] != config.latent_dim:
        raise ShapeError(f"decode wants (T, {config.latent_dim}), got {z.shape}")
    h = T.matmul(z, params.decoder.head_w) + params.decoder.head_b
    rev_strides = config.strides[::-1]
    for i, (w, b) in enumerate(params.decoder.deconvs):
        s = rev_strides[i]
        k = 2 * s
        t_in = h.shape[0]
        h = T.conv_transpose1d(h, w, b, stride=s)
        crop = (k - s) // 2
        h = h[crop : crop + s * t_in]
        if i < len(params.decoder.deconvs) - 1:
            h = _act(h, config)
    return T.reshape(h, (h.shape[0],))


# -- residual vector quantization ------------------------------------------


@dataclass
class QuantizeResult:
    codes: np.ndarray  # (T, K) int32
    quantized: np.ndarray  # (T, D), sum of chosen entries in stage order
    stage_inputs: np.ndarray  # (K, T, D): the residual each stage saw
    residual_rms: np.ndarray  # (K + 1,): before any stage, then after each


def _nearest(residual, entries):
    # squared distance argmin; ties resolve to the lowest index, and
    # identical entries produce bit-identical distances, so the tie-break
    # is deterministic
    d = -2.0 * residual @ entries.T + np.sum(entries * entries, axis=1)[None, :]
    return np.argmin(d, axis=1)


def rvq_quantize(z, codebooks):
    """Quantize latents (T, D) through all stages."""
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != codebooks.entries.shape[2]:
        raise ShapeError(f"latents {z.shape} do not match codebook dim {codebooks.entries.shape[2]}")
    k = codebooks.n_quantizers
    t = z.shape[0]
    codes = np.zeros((t, k), dtype=np.int32)
    stage_inputs = np.zeros((k,) + z.shape, dtype=z.dtype)
    rms = np.zeros(k + 1)
    residual = z.copy()
    quantized = np.zeros_like(z)
    rms[0] = float(np.sqrt(np.mean(residual**2)))
    for i in range(k):
        stage_inputs[i] = residual
        idx = _nearest(residual, codebooks.entries[i])
        codes[:, i] = idx
        chosen = codebooks.entries[i][idx]
        quantized += chosen
        residual = residual - chosen
        rms[i + 1] = float(np.sqrt(np.mean(residual**2)))
    return QuantizeResult(codes=codes, quantized=quantized, stage_inputs=stage_inputs, residual_rms=rms)


def rvq_dequantize(codes, codebooks):
    """Codes (T, K) -> latents (T, D); bit-identical to the quantizer's sum."""
    codes = np.asarray(codes)
    k, v, d = codebooks.entries.shape
    if codes.ndim != 2 or codes.shape[1] != k:
        raise ShapeError(f"codes must be (T, {k}), got {codes.shape}")
    if codes.min() < 0 or codes.max() >= v:
        bad_t, bad_k = np.unravel_index(int(np.argmax((codes < 0) | (codes >= v))), codes.shape)
        raise PreconditionError(
            f"token index {codes[bad_t, bad_k]} out of range [0, {v}) at frame {bad_t}, quantizer {bad_k + 1}"
        )
    out = np.zeros((codes.shape[0], d), dtype=codebooks.entries.dtype)
    for i in range(k):
        out += codebooks.entries[i][codes[:, i]]
    return out


def ema_update(codebooks, quant_result, decay=0.99, rng=None, reseed_floor=1e-3, eps=1e-5):
    """EMA codebook update from one quantized batch.

    Entry 0 stays pinned at zero.  Entries whose smoothed usage falls
    below reseed_floor are reseeded from random stage inputs when an rng
    is supplied.  decay=1.0 or a frozen codebook leaves everything
    untouched.
    """
    if codebooks.frozen or decay >= 1.0:
        return
    k, v, d = codebooks.entries.shape
    for i in range(k):
        idx = quant_result.codes[:, i]
        x = quant_result.stage_inputs[i]
        counts = np.bincount(idx, minlength=v).astype(codebooks.entries.dtype)
        sums = np.zeros((v, d), dtype=codebooks.entries.dtype)
        np.add.at(sums, idx, x)
        codebooks.ema_size[i] = decay * codebooks.ema_size[i] + (1 - decay) * counts
        codebooks.ema_sum[i] = decay * codebooks.ema_sum[i] + (1 - decay) * sums
        codebooks.usage[i] += np.bincount(idx, minlength=v)
        n = codebooks.ema_size[i].sum()
        smoothed = (codebooks.ema_size[i] + eps) / (n + v * eps) * n
        live = smoothed > 0
        live[0] = False  # pinned zero entry
        codebooks.entries[i][live] = codebooks.ema_sum[i][live] / smoothed[live][:, None]
        if rng is not None:
            dead = (codebooks.ema_size[i] < reseed_floor) & (np.arange(v) != 0)
            n_dead = int(dead.sum())
            if n_dead and len(x):
                picks = rng.integers(0, len(x), size=n_dead)
                codebooks.entries[i][dead] = x[picks]
                codebooks.ema_size[i][dead] = 1.0
                codebooks.ema_sum[i][dead] = x[picks]
        codebooks.entries[i][0] = 0.0


# -- training losses -------------------------------------------------------

STFT_RESOLUTIONS = ((512, 128), (1024, 256), (256, 64))


def _l1(x):
    return T.reduce_mean(T.relu(x) + T.relu(T.neg(x)))


_dft_cache = {}


def _dft_mats(n_fft, dtype):
    key = (n_fft, np.dtype(dtype).str)
    if key not in _dft_cache:
        t = np.arange(n_fft)
        f = np.arange(n_fft // 2 + 1)
        ang = 2.0 * np.pi * np.outer(t, f) / n_fft
        win = 0.5 - 0.5 * np.cos(2.0 * np.pi * t / n_fft)
        _dft_cache[key] = (
            (np.cos(ang) * win[:, None]).astype(dtype),
            (-np.sin(ang) * win[:, None]).astype(dtype),
        )
    return _dft_cache[key]


def _spec_mag(x, n_fft, hop):
    length = x.shape[0]
    if length < n_fft:
        x = T.pad(x, ((0, n_fft - length),))
        length = n_fft
    n_frames = 1 + (length - n_fft) // hop
    starts = np.arange(n_frames) * hop
    idx = (starts[:, None] + np.arange(n_fft)[None, :]).reshape(-1)
    frames = T.reshape(T.take(x, idx), (n_frames, n_fft))
    cos_w, sin_w = _dft_mats(n_fft, x.dtype)
    re = T.matmul(frames, T.tensor(cos_w))
    im = T.matmul(frames, T.tensor(sin_w))
    return T.sqrt(re * re + im * im + 1e-9)


def multires_stft_loss(x, y, resolutions=STFT_RESOLUTIONS):
    """L1 on linear and log magnitudes over several STFT resolutions."""
    total = None
    for n_fft, hop in resolutions:
        mx = _spec_mag(x, n_fft, hop)
        my = _spec_mag(y, n_fft, hop)
        term = _l1(mx - my) + _l1(T.log(mx + 1e-5) - T.log(my + 1e-5))
        total = term if total is None else total + term
    return total * (1.0 / len(resolutions))


def codec_step_loss(wave, params, commitment=0.25):
    """One training forward: reconstruction + commitment, straight-through
    through the quantizer.  Returns (loss, parts dict)."""
    z = encode(wave, params)
    q = rvq_quantize(z.data, params.codebooks)
    z_q = T.straight_through(q.quantized, z)
    recon = decode(z_q, params)
    l_time = _l1(recon - wave)
    l_spec = multires_stft_loss(recon, wave)
    commit_diff = z - T.tensor(q.quantized)
    l_commit = T.reduce_mean(commit_diff * commit_diff) * commitment
    loss = l_time + l_spec + l_commit
    return loss, {
        "time": float(l_time.item()),
        "spec": float(l_spec.item()),
        "commit": float(l_commit.item()),
        "quant": q,
    }


def train_codec(waves, config, steps=500, crop=4096, lr=1e-3, seed=0, decay=0.99, log_every=0, log_fn=None):
    """Fit the codec to a list of waveforms by random-crop steps.

    Returns (params, history) where history is a list of per-step loss
    floats.  Everything random is driven by the seed.
    """
    if not waves:
        raise PreconditionError("no training waveforms")
    if crop % config.hop:
        raise PreconditionError(f"crop {crop} must divide by the codec hop {config.hop}")
    rng = np.random.default_rng(seed)
    params = init_codec(config, rng)
    opt = Adam(params.trainable(), lr=lr)
    history = []
    for step in range(steps):
        w = waves[int(rng.integers(0, len(waves)))]
        if len(w) < crop:
            w = np.pad(w, (0, crop - len(w)))
        off = int(rng.integers(0, len(w) - crop + 1))
        x = T.tensor(w[off : off + crop])
        loss, parts = codec_step_loss(x, params)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(params.codebooks, parts["quant"], decay=decay, rng=rng)
        history.append(float(loss.item()))
        if log_every and log_fn and step % log_every == 0:
            log_fn(step, history[-1], parts)
    return params, history


def copy_encoder(encoder, dtype=None):
    """Fresh trainable parameters initialized from an existing encoder."""
    dtype = dtype or T.default_dtype()
    convs = [
        (T.parameter(np.array(w.data, dtype=dtype)), T.parameter(np.array(b.data, dtype=dtype)))
        for w, b in encoder.convs
    ]
    return EncoderParams(
        convs=convs,
        head_w=T.parameter(np.array(encoder.head_w.data, dtype=dtype)),
        head_b=T.parameter(np.array(encoder.head_b.data, dtype=dtype)),
    )


# -- convenience and serialization -----------------------------------------


def encode_tokens(wave, params):
    """Waveform ndarray -> token codes (T, K) int32, no autodiff involved."""
    wave = np.asarray(wave, dtype=T.default_dtype())
    hop = params.config.hop
    usable = (len(wave) // hop) * hop
    if usable == 0:
        raise PreconditionError(f"waveform shorter than one codec hop ({hop} samples)")
    with T.no_grad():
        z = encode(T.tensor(wave[:usable]), params)
    return rvq_quantize(z.data, params.codebooks).codes


def decode_tokens(codes, params):
    """Token codes (T, K) -> waveform ndarray (T * hop,)."""
    z = rvq_dequantize(codes, params.codebooks)
    with T.no_grad():
        wave = decode(T.tensor(z), params)
    return wave.data.copy()


def codec_to_tensors(params):
    out = {name: t.data for name, t in params.named_tensors()}
    out["codebooks.entries"] = params.codebooks.entries
    return out


def codec_from_tensors(config, tensors, frozen=True):
    cfg = CodecConfig.from_config(config) if isinstance(config, dict) else config
    rng = np.random.default_rng(0)
    params = init_codec(cfg, rng)
    named = dict(params.named_tensors())
    expected = set(named) | {"codebooks.entries"}
    if set(tensors) != expected:
        missing = expected - set(tensors)
        extra = set(tensors) - expected
        raise PreconditionError(f"codec tensor mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, t in named.items():
        if tuple(tensors[name].shape) != tuple(t.data.shape):
            raise ShapeError(f"{name}: stored shape {tensors[name].shape} != expected {t.data.shape}")
        t.data = tensors[name].astype(t.data.dtype)
    params.codebooks = Codebooks(tensors["codebooks.entries"].astype(T.default_dtype()), frozen=frozen)
    return params


def save_codec(path, params):
    save_checkpoint(path, {"kind": "codec", "codec": params.config.to_config()}, codec_to_tensors(params))


def load_codec(path, frozen=True):
    """Load a codec checkpoint; codebooks come back frozen by default."""
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "codec":
        raise PreconditionError(f"{path}: not a codec checkpoint (kind={config.get('kind')!r})")
    return codec_from_tensors(config["codec"], tensors, frozen=frozen)
