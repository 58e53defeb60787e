"""Token prediction model, its training loop, and waveform enhancement.

The model carries its own copy of the codec encoder for the degraded
waveform, initialized from the trained codec and fine-tuned with the rest
of the network unless freeze_encoder is set.  Clean-signal token targets
always come from the caller's preserved codec (kept frozen), so the
targets cannot drift while the degraded-path encoder trains.

The backbone runs exactly once per utterance; one classifier head per
quantizer stage predicts the clean token indices, and later heads see the
backbone features plus embeddings of the earlier stages' tokens
(teacher-forced in training, the model's own argmax at inference),
mirroring the residual structure of the quantizer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import backbones as B
from . import codec as CD
from . import dsp
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import PreconditionError, ShapeError
from .optim import Adam, clip_grad_norm

AUXILIARY_MODES = ("none", "mel")
N_MELS = 80


@dataclass
class ModelConfig:
    backbone: B.BackboneSpec
    codec: CD.CodecConfig
    auxiliary: str = "none"
    freeze_encoder: bool = False
    lambda_token: float = 0.5

    def __post_init__(self):
        if self.auxiliary not in AUXILIARY_MODES:
            raise PreconditionError(f"auxiliary must be one of {AUXILIARY_MODES}, got {self.auxiliary!r}")
        if self.lambda_token < 0:
            raise PreconditionError(f"lambda_token must be >= 0, got {self.lambda_token}")

    @property
    def latent_dim(self):
        return self.codec.latent_dim

    @property
    def n_quantizers(self):
        return self.codec.n_quantizers

    @property
    def codebook_size(self):
        return self.codec.codebook_size

    def to_config(self):
        return {
            "backbone": self.backbone.to_config(),
            "codec": self.codec.to_config(),
            "auxiliary": self.auxiliary,
            "freeze_encoder": self.freeze_encoder,
            "lambda_token": self.lambda_token,
        }

    @classmethod
    def from_config(cls, d):
        return cls(
            backbone=B.BackboneSpec.from_config(d["backbone"]),
            codec=CD.CodecConfig.from_config(d["codec"]),
            auxiliary=d["auxiliary"],
            freeze_encoder=bool(d["freeze_encoder"]),
            lambda_token=float(d["lambda_token"]),
        )


@dataclass
class AuxMelParams:
    conv1_w: T.Tensor
    conv1_b: T.Tensor
    ln1_g: T.Tensor
    ln1_b: T.Tensor
    conv2_w: T.Tensor
    conv2_b: T.Tensor
    ln2_g: T.Tensor
    ln2_b: T.Tensor
    out_w: T.Tensor
    out_b: T.Tensor

    def named_tensors(self, prefix="aux."):
        for name in ("conv1_w", "conv1_b", "ln1_g", "ln1_b", "conv2_w", "conv2_b", "ln2_g", "ln2_b", "out_w", "out_b"):
            yield prefix + name, getattr(self, name)


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: CD.EncoderParams  # degraded-path encoder (the fine-tuned copy)
    in_w: T.Tensor  # adapter (latent_dim, d_model)
    in_b: T.Tensor
    layers: list
    head_w: list  # K x (d_model, V)
    head_b: list  # K x (V,)
    embeds: list  # K-1 x (V, d_model): stage-k token embeddings feeding later heads
    aux: AuxMelParams | None = None

    def named_tensors(self):
        yield from self.encoder.named_tensors(prefix="enc.")
        yield "in_proj.w", self.in_w
        yield "in_proj.b", self.in_b
        yield from B.backbone_named_tensors(self.layers)
        for k, (w, b) in enumerate(zip(self.head_w, self.head_b)):
            yield f"head{k}.w", w
            yield f"head{k}.b", b
        for k, e in enumerate(self.embeds):
            yield f"embed{k}", e
        if self.aux is not None:
            yield from self.aux.named_tensors()

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    def trainable(self):
        """Optimizer view: everything, minus the encoder when frozen."""
        skip = set()
        if self.config.freeze_encoder:
            skip = {id(t) for _, t in self.encoder.named_tensors(prefix="enc.")}
        return [t for t in self.tensors() if id(t) not in skip]


def init_model(config, rng, codec_params=None, dtype=None):
    """Build model parameters; the degraded-path encoder starts from the
    given codec's weights (or randomly when codec_params is None)."""
    dtype = dtype or T.default_dtype()
    d = config.backbone.d_model
    v = config.codebook_size
    if codec_params is not None:
        if codec_params.config != config.codec:
            raise PreconditionError(
                f"codec structure mismatch: model expects {config.codec}, checkpoint has {codec_params.config}"
            )
        encoder = CD.copy_encoder(codec_params.encoder, dtype=dtype)
    else:
        encoder = CD.init_codec(config.codec, rng, dtype=dtype).encoder
    in_w = T.parameter(rng.standard_normal((config.latent_dim, d)) / np.sqrt(config.latent_dim), dtype=dtype)
    in_b = T.parameter(np.zeros(d), dtype=dtype)
    layers = B.init_backbone(config.backbone, rng, dtype=dtype)
    head_w = [T.parameter(rng.standard_normal((d, v)) / np.sqrt(d), dtype=dtype) for _ in range(config.n_quantizers)]
    head_b = [T.parameter(np.zeros(v), dtype=dtype) for _ in range(config.n_quantizers)]
    embeds = [
        T.parameter(rng.standard_normal((v, d)) * 0.02, dtype=dtype) for _ in range(config.n_quantizers - 1)
    ]
    aux = None
    if config.auxiliary == "mel":
        def conv_pair(cin, cout, k=3):
            return (
                T.parameter(rng.standard_normal((k, cin, cout)) / np.sqrt(k * cin), dtype=dtype),
                T.parameter(np.zeros(cout), dtype=dtype),
            )

        c1w, c1b = conv_pair(N_MELS, d)
        c2w, c2b = conv_pair(d, d)
        aux = AuxMelParams(
            conv1_w=c1w,
            conv1_b=c1b,
            ln1_g=T.parameter(np.ones(d), dtype=dtype),
            ln1_b=T.parameter(np.zeros(d), dtype=dtype),
            conv2_w=c2w,
            conv2_b=c2b,
            ln2_g=T.parameter(np.ones(d), dtype=dtype),
            ln2_b=T.parameter(np.zeros(d), dtype=dtype),
            out_w=T.parameter(rng.standard_normal((d, d)) / np.sqrt(d), dtype=dtype),
            out_b=T.parameter(np.zeros(d), dtype=dtype),
        )
    return ModelParams(
        config=config,
        encoder=encoder,
        in_w=in_w,
        in_b=in_b,
        layers=layers,
        head_w=head_w,
        head_b=head_b,
        embeds=embeds,
        aux=aux,
    )


def encode_degraded(wave, params):
    """Degraded waveform Tensor -> latents through the model's own encoder.

    Under freeze_encoder the pass runs without recording, so encoder
    gradients are exactly zero (absent) by construction.
    """
    if params.config.freeze_encoder:
        with T.no_grad():
            z = CD.encode_with(wave, params.encoder, params.config.codec)
        return T.tensor(z.data)
    return CD.encode_with(wave, params.encoder, params.config.codec)


def aux_mel_forward(wave, params, out_len):
    """Log-mel of the degraded waveform -> d_model features at the token rate."""
    mel = dsp.mel_spectrogram(np.asarray(wave, dtype=np.float64))
    x = T.tensor(mel.astype(T.default_dtype()))
    a = params.aux
    h = T.conv1d(x, a.conv1_w, a.conv1_b, padding=1)
    h = T.layer_norm(T.relu(h), a.ln1_g, a.ln1_b)
    h = T.conv1d(h, a.conv2_w, a.conv2_b, padding=1)
    h = T.layer_norm(T.relu(h), a.ln2_g, a.ln2_b)
    h = T.linear_interp_rows(h, out_len)
    return T.matmul(h, a.out_w) + a.out_b


def predict_logits(z_degraded, params, teacher_codes=None, degraded_wave=None):
    """Latents (T, latent_dim) -> list of K logit Tensors (T, V).

    The backbone runs once; head k adds embeddings of stages < k.  With
    teacher_codes the embedded tokens are the ground truth (training);
    otherwise each head's argmax feeds the next (inference).
    """
    cfg = params.config
    if z_degraded.ndim != 2 or z_degraded.shape[1] != cfg.latent_dim:
        raise ShapeError(f"expected (T, {cfg.latent_dim}) latents, got {z_degraded.shape}")
    if teacher_codes is not None:
        teacher_codes = np.asarray(teacher_codes)
        if teacher_codes.shape != (z_degraded.shape[0], cfg.n_quantizers):
            raise ShapeError(
                f"teacher codes {teacher_codes.shape} do not match ({z_degraded.shape[0]}, {cfg.n_quantizers})"
            )
    h = T.matmul(z_degraded, params.in_w) + params.in_b
    if cfg.auxiliary == "mel":
        if degraded_wave is None:
            raise PreconditionError("auxiliary=mel needs the degraded waveform")
        h = h + aux_mel_forward(degraded_wave, params, z_degraded.shape[0])
    feats = B.backbone_forward(h, params.layers, cfg.backbone)
    acc = feats
    logits = []
    for k in range(cfg.n_quantizers):
        lk = T.matmul(acc, params.head_w[k]) + params.head_b[k]
        logits.append(lk)
        if k < cfg.n_quantizers - 1:
            if teacher_codes is not None:
                tok = teacher_codes[:, k]
            else:
                tok = np.argmax(lk.data, axis=1)
            acc = acc + T.take(params.embeds[k], tok.astype(np.int64))
    return logits


def token_se_loss(logits, target_codes, entries, lambda_token=0.5):
    """Composite loss: lambda * mean token cross-entropy + codebook-entry
    regression through the softmax.

    entries is the frozen (K, V, D) codebook array; it participates as a
    constant, so no gradient flows toward the codec.  Returns
    (loss, parts) with parts carrying floats and per-quantizer teacher-
    forced accuracy.
    """
    target_codes = np.asarray(target_codes)
    k_total = len(logits)
    if target_codes.ndim != 2 or target_codes.shape[1] != k_total:
        raise ShapeError(f"targets {target_codes.shape} vs {k_total} heads")
    l_token = None
    l_entry = None
    accs = np.zeros(k_total)
    for k, lk in enumerate(logits):
        tgt = target_codes[:, k].astype(np.int64)
        ce = T.cross_entropy_logits(lk, tgt)
        l_token = ce if l_token is None else l_token + ce
        book = entries[k].astype(lk.dtype)
        soft = T.matmul(T.softmax(lk), T.tensor(book))
        hard = T.tensor(book[tgt])
        diff = soft - hard
        ek = T.reduce_mean(diff * diff)
        l_entry = ek if l_entry is None else l_entry + ek
        accs[k] = float(np.mean(np.argmax(lk.data, axis=1) == tgt))
    l_token = l_token * (1.0 / k_total)
    l_entry = l_entry * (1.0 / k_total)
    loss = l_token * lambda_token + l_entry
    return loss, {"token": float(l_token.item()), "entry": float(l_entry.item()), "acc": accs}


def clean_targets(clean_wave, codec_params):
    """Token targets from the preserved frozen codec; never recorded on
    the autodiff tape."""
    with T.no_grad():
        z = CD.encode(T.tensor(np.asarray(clean_wave, dtype=T.default_dtype())), codec_params)
        return CD.rvq_quantize(z.data, codec_params.codebooks).codes


# -- enhancement -----------------------------------------------------------


def _check_codec_match(params, codec_params):
    if codec_params.config != params.config.codec:
        raise PreconditionError(
            f"model was trained against codec {params.config.codec.to_config()}, "
            f"got {codec_params.config.to_config()}"
        )


def enhance(wave, params, codec_params):
    """Degraded waveform -> enhanced waveform via predicted clean tokens."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or len(wave) == 0:
        raise ShapeError(f"enhance wants a non-empty 1-D waveform, got {wave.shape}")
    _check_codec_match(params, codec_params)
    hop = codec_params.config.hop
    padded = len(wave) if len(wave) % hop == 0 else len(wave) + hop - len(wave) % hop
    x = np.zeros(padded, dtype=T.default_dtype())
    x[: len(wave)] = wave
    with T.no_grad():
        z_d = encode_degraded(T.tensor(x), params)
        logits = predict_logits(z_d, params, degraded_wave=x if params.config.auxiliary == "mel" else None)
    codes = np.stack([np.argmax(lk.data, axis=1) for lk in logits], axis=1).astype(np.int32)
    out = CD.decode_tokens(codes, codec_params)
    return out[: len(wave)]


def predict_codes(wave, params, codec_params):
    """Degraded waveform -> predicted clean token codes (T, K)."""
    wave = np.asarray(wave, dtype=T.default_dtype())
    _check_codec_match(params, codec_params)
    hop = codec_params.config.hop
    usable = (len(wave) // hop) * hop
    if usable == 0:
        raise PreconditionError(f"waveform shorter than one codec hop ({hop})")
    with T.no_grad():
        z_d = encode_degraded(T.tensor(wave[:usable]), params)
        logits = predict_logits(
            z_d, params, degraded_wave=wave[:usable] if params.config.auxiliary == "mel" else None
        )
    return np.stack([np.argmax(lk.data, axis=1) for lk in logits], axis=1).astype(np.int32)


# -- training --------------------------------------------------------------


@dataclass
class TrainSeSettings:
    epochs: int = 300
    lr: float = 2e-4
    clip: float = 1.0
    batch: int = 4
    crop: int = 4096
    patience: int = 20
    seed: int = 0
    log_path: str | None = None
    checkpoint_path: str | None = None
    progress: object = None  # callable(epoch, row) or None


LOG_HEADER = ["epoch", "train_loss", "val_loss", "acc_q1", "acc_q2", "acc_q3", "acc_q4", "patience_left"]


def _materialize(rows):
    cache = []
    for row in rows:
        mix, clean = dsp.synthesize_row(row)
        n = min(len(mix), len(clean))
        cache.append((mix[:n].astype(T.default_dtype()), clean[:n].astype(T.default_dtype())))
    return cache


def _crop_pair(mix, clean, crop, rng):
    if len(mix) < crop:
        pad = crop - len(mix)
        return np.pad(mix, (0, pad)), np.pad(clean, (0, pad))
    off = int(rng.integers(0, len(mix) - crop + 1))
    return mix[off : off + crop], clean[off : off + crop]


def _item_loss(mix, clean, params, codec_params):
    targets = clean_targets(clean, codec_params)
    z_d = encode_degraded(T.tensor(mix), params)
    logits = predict_logits(
        z_d, params, teacher_codes=targets, degraded_wave=mix if params.config.auxiliary == "mel" else None
    )
    return token_se_loss(logits, targets, codec_params.codebooks.entries, params.config.lambda_token)


def train_se(train_rows, val_rows, codec_params, model_config, settings):
    """Fit the token predictor; returns (params, log_rows).

    Deterministic for a fixed seed: epoch shuffles, crop offsets, and
    parameter init all derive from it, and per-item gradients accumulate
    in item order regardless of any scan threading.
    """
    if not train_rows:
        raise PreconditionError("no training rows")
    if not codec_params.codebooks.frozen:
        raise PreconditionError("codec must be frozen before enhancement training")
    if settings.crop % codec_params.config.hop:
        raise PreconditionError(
            f"crop {settings.crop} must divide by the codec hop {codec_params.config.hop}"
        )
    rng = np.random.default_rng(settings.seed)
    params = init_model(model_config, rng, codec_params=codec_params)
    opt = Adam(params.trainable(), lr=settings.lr)
    train_cache = _materialize(train_rows)
    val_cache = _materialize(val_rows) if val_rows else []
    val_crops = []
    for i, (mix, clean) in enumerate(val_cache):
        crng = np.random.default_rng(np.random.SeedSequence([settings.seed, 1_000_000 + i]))
        val_crops.append(_crop_pair(mix, clean, settings.crop, crng))

    log_rows = []
    best_val = np.inf
    best_state = None
    patience_left = settings.patience
    for epoch in range(settings.epochs):
        order = rng.permutation(len(train_cache))
        epoch_losses = []
        epoch_accs = []
        for start in range(0, len(order), settings.batch):
            batch = order[start : start + settings.batch]
            opt.zero_grad()
            scale = 1.0 / len(batch)
            for j in batch:
                mix, clean = train_cache[j]
                crng = np.random.default_rng(np.random.SeedSequence([settings.seed, epoch, int(j)]))
                m, c = _crop_pair(mix, clean, settings.crop, crng)
                loss, parts = _item_loss(m, c, params, codec_params)
                (loss * scale).backward()
                epoch_losses.append(float(loss.item()))
                epoch_accs.append(parts["acc"])
            clip_grad_norm(params.trainable(), settings.clip)
            opt.step()
        train_loss = float(np.mean(epoch_losses))
        accs = np.mean(np.stack(epoch_accs), axis=0)

        if val_crops:
            v_losses = []
            v_accs = []
            for m, c in val_crops:
                v_loss, parts = _item_loss(m, c, params, codec_params)
                v_losses.append(float(v_loss.item()))
                v_accs.append(parts["acc"])
            val_loss = float(np.mean(v_losses))
            accs = np.mean(np.stack(v_accs), axis=0)
        else:
            val_loss = train_loss

        if val_loss < best_val:
            best_val = val_loss
            best_state = {name: t.data.copy() for name, t in params.named_tensors()}
            patience_left = settings.patience
        else:
            patience_left -= 1
        row = [epoch, train_loss, val_loss] + [float(a) for a in accs] + [patience_left]
        log_rows.append(row)
        if settings.progress is not None:
            settings.progress(epoch, row)
        if patience_left <= 0:
            break

    if best_state is not None:
        named = dict(params.named_tensors())
        for name, data in best_state.items():
            named[name].data = data
    if settings.log_path:
        with open(settings.log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for row in log_rows:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:-1]] + [row[-1]])
    if settings.checkpoint_path:
        save_model(settings.checkpoint_path, params)
    return params, log_rows


# -- serialization ---------------------------------------------------------


def save_model(path, params):
    config = {"kind": "token_se", "model": params.config.to_config()}
    save_checkpoint(path, config, {name: t.data for name, t in params.named_tensors()})


def load_model(path):
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "token_se":
        raise PreconditionError(f"{path}: not an enhancement model checkpoint (kind={config.get('kind')!r})")
    mc = ModelConfig.from_config(config["model"])
    params = init_model(mc, np.random.default_rng(0))
    named = dict(params.named_tensors())
    if set(tensors) != set(named):
        missing = set(named) - set(tensors)
        extra = set(tensors) - set(named)
        raise PreconditionError(f"{path}: tensor mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, t in named.items():
        if tuple(tensors[name].shape) != tuple(t.data.shape):
            raise ShapeError(f"{path}: {name}: stored {tensors[name].shape} != expected {t.data.shape}")
        t.data = tensors[name].astype(t.data.dtype)
    return params
