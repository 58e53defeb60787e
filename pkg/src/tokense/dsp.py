"""Waveform I/O and signal processing for dataset synthesis and the baseline.

Everything here is plain numpy on float64 arrays in [-1, 1].  The audio
interchange format is deliberately narrow: RIFF WAV, PCM 16-bit signed
little-endian, mono, 16 kHz.  Anything else is rejected with a clear error
instead of being resampled behind the caller's back.

Level conventions:
  * dBFS is 20 log10(rms) with full scale 1.0.
  * "Active speech" frames are 10 ms (160 sample) blocks above a gate.
    Mixing and SNR measurement use an absolute gate of -40 dBFS;
    normalization uses a gate relative to the loudest frame (40 dB down)
    so that normalizing is scale-invariant and idempotent.
  * rms_normalize maps a nominal presentation level in dB SPL to digital
    full scale as dBFS = target_spl - 91, so the default 65 dB SPL puts
    active-speech RMS at -26 dBFS.
"""

from __future__ import annotations

import json
import math
import os
import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import AudioFormatError, PreconditionError, ShapeError

SAMPLE_RATE = 16000
FRAME_10MS = 160
ACTIVE_GATE_DBFS = -40.0
N_FFT = 512
HOP = 128


# -- WAV interchange -------------------------------------------------------


def read_wav(path):
    """Read a mono 16-bit 16 kHz PCM WAV into float64 in [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as fh:
            nch = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioFormatError(f"{path}: not a readable RIFF/PCM WAV ({exc})") from exc
    if nch != 1:
        raise AudioFormatError(f"{path}: expected mono, got {nch} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return x


def write_wav(path, x, clip=True):
    """Write float audio as mono 16-bit 16 kHz PCM WAV."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"write_wav expects a 1-D signal, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise PreconditionError(f"write_wav: non-finite samples in {path}")
    y = x * 32767.0
    if clip:
        y = np.clip(y, -32768, 32767)
    pcm = np.round(y).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


# -- framing and level measurement -----------------------------------------


def frame_rms_db(x, frame=FRAME_10MS):
    """Per-frame RMS in dBFS over non-overlapping frames (tail dropped)."""
    x = np.asarray(x, dtype=np.float64)
    nf = len(x) // frame
    if nf == 0:
        raise PreconditionError(f"signal too short to frame: {len(x)} < {frame} samples")
    fr = x[: nf * frame].reshape(nf, frame)
    rms = np.sqrt(np.mean(fr * fr, axis=1))
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(rms)


def active_mask(x, frame=FRAME_10MS, gate_dbfs=ACTIVE_GATE_DBFS, relative=False):
    """Boolean per-frame activity mask.

    Absolute mode gates at gate_dbfs; relative mode gates at
    (loudest frame - |gate_dbfs|), which is invariant under scaling.
    """
    db = frame_rms_db(x, frame)
    if relative:
        return db > (db.max() - abs(gate_dbfs))
    return db > gate_dbfs


def _mask_to_samples(mask, frame, n):
    out = np.zeros(n, dtype=bool)
    for i in np.nonzero(mask)[0]:
        out[i * frame : (i + 1) * frame] = True
    return out


def active_power(x, mask=None, frame=FRAME_10MS):
    """Mean power of x over the samples of active frames."""
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        mask = active_mask(x, frame)
    if not mask.any():
        raise PreconditionError("no active speech frames (signal is silence at the gate)")
    sel = _mask_to_samples(mask, frame, len(x))
    return float(np.mean(x[sel] ** 2))


def measure_snr(clean, noise, frame=FRAME_10MS, mask=None):
    """SNR in dB using the active-speech power of clean; the noise power is
    taken over the same frame positions.  Pass mask to pin the frame set
    (e.g. the one a mixing step calibrated against); by default it is
    derived from clean at the absolute gate."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ShapeError(f"clean {clean.shape} vs noise {noise.shape}")
    if mask is None:
        mask = active_mask(clean, frame)
    p_c = active_power(clean, mask, frame)
    sel = _mask_to_samples(mask, frame, len(clean))
    p_n = float(np.mean(noise[sel] ** 2))
    if p_n <= 0:
        raise PreconditionError("noise has zero power over the active region")
    return 10.0 * math.log10(p_c / p_n)


# -- degradation synthesis -------------------------------------------------


@dataclass
class MixResult:
    mixture: np.ndarray
    clean: np.ndarray  # clean component after any peak scaling
    noise: np.ndarray  # scaled noise component after any peak scaling
    noise_gain: float
    peak_scale: float
    active: np.ndarray  # frame mask the SNR was calibrated against


def _fit_noise(noise, n, rng):
    """Loop the noise to cover n samples, starting at a random offset."""
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) == 0:
        raise PreconditionError("empty noise signal")
    if len(noise) < n:
        reps = -(-(n + len(noise)) // len(noise))
        noise = np.tile(noise, reps)
    off = int(rng.integers(0, len(noise) - n + 1))
    return noise[off : off + n]


def mix_at_snr(clean, noise, snr_db, seed=0):
    """Additively mix noise into clean at an exact active-speech SNR.

    The noise is looped/cropped to length with a seeded random offset and
    scaled so 10 log10(P_clean / P_noise) == snr_db over the active frames
    of clean.  If the mixture clips, everything is scaled down together and
    the factor is recorded, which leaves the SNR untouched.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 1:
        raise ShapeError(f"clean must be 1-D, got {clean.shape}")
    rng = np.random.default_rng(seed)
    noise = _fit_noise(noise, len(clean), rng)
    mask = active_mask(clean)
    p_c = active_power(clean, mask)
    sel = _mask_to_samples(mask, FRAME_10MS, len(clean))
    p_n = float(np.mean(noise[sel] ** 2))
    if p_n <= 0:
        raise PreconditionError("noise is silent over the active region of clean")
    gain = math.sqrt(p_c / p_n * 10.0 ** (-snr_db / 10.0))
    scaled = gain * noise
    mixture = clean + scaled
    peak = float(np.max(np.abs(mixture))) if len(mixture) else 0.0
    peak_scale = 1.0
    if peak > 1.0:
        peak_scale = 1.0 / peak
        mixture = mixture * peak_scale
        clean = clean * peak_scale
        scaled = scaled * peak_scale
    return MixResult(
        mixture=mixture, clean=clean, noise=scaled, noise_gain=gain, peak_scale=peak_scale, active=mask
    )


def convolve_rir(x, rir):
    """Convolve with a room impulse response, re-aligned and re-leveled.

    The output is shifted so the direct path (the RIR's peak magnitude tap)
    lands at lag zero and rescaled to preserve the active-speech RMS of the
    dry signal, so SNR mixing after reverberation stays calibrated.
    """
    x = np.asarray(x, dtype=np.float64)
    rir = np.asarray(rir, dtype=np.float64)
    if x.ndim != 1 or rir.ndim != 1 or len(rir) == 0:
        raise ShapeError(f"convolve_rir wants 1-D signals, got {x.shape} and {rir.shape}")
    d = int(np.argmax(np.abs(rir)))
    full = np.convolve(x, rir)
    y = full[d : d + len(x)]
    mask = active_mask(x)
    sel = _mask_to_samples(mask, FRAME_10MS, len(x))
    rms_x = math.sqrt(float(np.mean(x[sel] ** 2)))
    rms_y = math.sqrt(float(np.mean(y[sel] ** 2)))
    if rms_y <= 0:
        raise PreconditionError("reverberated signal has zero energy over the active region")
    return y * (rms_x / rms_y)


def make_rir(t60, sr=SAMPLE_RATE, length=None, seed=0):
    """Synthetic exponentially decaying impulse response with a unit direct
    path at tap zero; amplitude decays 60 dB over t60 seconds."""
    if t60 <= 0:
        raise PreconditionError(f"t60 must be positive, got {t60}")
    if length is None:
        length = int(sr * t60 * 1.5)
    rng = np.random.default_rng(seed)
    n = np.arange(length)
    decay = 10.0 ** (-3.0 * n / (sr * t60))
    tail = 0.5 * rng.standard_normal(length) * decay
    tail = np.clip(tail, -0.9, 0.9)
    h = tail
    h[0] = 1.0
    return h


def measure_t60(rir, sr=SAMPLE_RATE):
    """Reverberation time via Schroeder backward integration.

    Fits the energy-decay curve between -5 and -25 dB and extrapolates the
    60 dB decay from the fitted slope.
    """
    rir = np.asarray(rir, dtype=np.float64)
    e = rir * rir
    edc = np.cumsum(e[::-1])[::-1]
    if edc[0] <= 0:
        raise PreconditionError("impulse response has no energy")
    db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-30))
    i1 = int(np.argmax(db <= -5.0))
    i2 = int(np.argmax(db <= -25.0))
    if i2 <= i1:
        raise PreconditionError("decay range too short to fit (need 20 dB of decay)")
    t = np.arange(i1, i2) / sr
    slope, _ = np.polyfit(t, db[i1:i2], 1)
    if slope >= 0:
        raise PreconditionError("energy-decay curve does not decay")
    return float(-60.0 / slope)


# -- STFT ------------------------------------------------------------------


def hann_periodic(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(x, n_fft=N_FFT, hop=HOP, center=True):
    """Complex STFT, shape (frames, n_fft // 2 + 1), periodic Hann window."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < 1:
        raise ShapeError(f"stft wants a non-empty 1-D signal, got {x.shape}")
    if center:
        x = np.pad(x, (n_fft // 2, n_fft // 2))
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    n_frames = 1 + (len(x) - n_fft + hop - 1) // hop
    total = (n_frames - 1) * hop + n_fft
    x = np.pad(x, (0, total - len(x)))
    win = hann_periodic(n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * win, axis=1)


def istft(spec, n_fft=N_FFT, hop=HOP, length=None, center=True):
    """Overlap-add inverse with window-square normalization; exact on the
    fully overlapped interior."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != n_fft // 2 + 1:
        raise ShapeError(f"istft wants (frames, {n_fft // 2 + 1}) spectra, got {spec.shape}")
    win = hann_periodic(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1)
    n_frames = spec.shape[0]
    total = (n_frames - 1) * hop + n_fft
    out = np.zeros(total)
    wsum = np.zeros(total)
    for m in range(n_frames):
        out[m * hop : m * hop + n_fft] += frames[m] * win
        wsum[m * hop : m * hop + n_fft] += win * win
    good = wsum > 1e-10
    out[good] /= wsum[good]
    if center:
        out = out[n_fft // 2 :]
    if length is not None:
        out = out[:length] if len(out) >= length else np.pad(out, (0, length - len(out)))
    return out


# -- statistical baseline enhancer -----------------------------------------

EULER_GAMMA = 0.5772156649015329


def expint_e1(x):
    """Exponential integral E1 for x > 0.

    Power series below x = 1, continued fraction (modified Lentz) above;
    the crossover at 1.0 keeps both expansions well inside their fast
    convergence regions.  Vectorized over numpy arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise PreconditionError("expint_e1 requires x > 0")
    out = np.empty_like(x)
    small = x <= 1.0
    if small.any():
        xs = x[small]
        total = np.zeros_like(xs)
        term = np.ones_like(xs)
        for n in range(1, 30):
            term = term * (-xs) / n
            total += -term / n
        out[small] = -EULER_GAMMA - np.log(xs) + total
    big = ~small
    if big.any():
        xb = x[big]
        # E1(x) = exp(-x) * CF, CF = 1/(x+1- 1^2/(x+3- 2^2/(x+5- ...)))
        tiny = 1e-300
        b = xb + 1.0
        c = np.full_like(xb, 1.0 / tiny)
        d = 1.0 / b
        f = d.copy()
        for i in range(1, 60):
            a = -(i * i * 1.0)
            b = b + 2.0
            d = 1.0 / np.maximum(a * d + b, tiny)
            c = b + a / c
            c = np.where(np.abs(c) < tiny, tiny, c)
            delta = c * d
            f = f * delta
            if np.all(np.abs(delta - 1.0) < 1e-16):
                break
        out[big] = np.exp(-xb) * f
    return out


def logmmse_enhance(noisy, alpha=0.98, gain_floor_db=-25.0, noise_init_frames=6, n_fft=N_FFT, hop=HOP,
                    return_gains=False):
    """Short-time log-spectral amplitude estimator.

    Noise PSD starts from the first ``noise_init_frames`` frames and is
    tracked afterwards by recursive smoothing on frames a crude low-energy
    detector labels as noise.  The a-priori SNR follows the
    decision-directed rule with the given alpha; the spectral gain
    (xi / (1 + xi)) * exp(E1(v) / 2) is clamped to [gain floor, 1].
    With ``return_gains`` the applied per-bin gain matrix comes back too.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    spec = stft(noisy, n_fft=n_fft, hop=hop)
    power = np.abs(spec) ** 2
    n_frames = spec.shape[0]
    if n_frames <= noise_init_frames:
        raise PreconditionError(
            f"signal too short for the baseline: {n_frames} frames <= {noise_init_frames} initialization frames"
        )
    floor = 10.0 ** (gain_floor_db / 20.0)
    noise_psd = power[:noise_init_frames].mean(axis=0) + 1e-12
    out = np.empty_like(spec)
    gains = np.empty_like(power)
    gain_prev = np.ones(spec.shape[1])
    gamma_prev = np.ones(spec.shape[1])
    for m in range(n_frames):
        gamma = np.minimum(power[m] / noise_psd, 1e6)
        xi = alpha * (gain_prev**2) * gamma_prev + (1.0 - alpha) * np.maximum(gamma - 1.0, 0.0)
        xi = np.maximum(xi, 1e-6)
        v = np.maximum(xi * gamma / (1.0 + xi), 1e-10)
        gain = (xi / (1.0 + xi)) * np.exp(0.5 * expint_e1(v))
        gain = np.clip(gain, floor, 1.0)
        out[m] = gain * spec[m]
        gains[m] = gain
        # low-energy frames refresh the noise track
        if m < noise_init_frames or 10.0 * math.log10(float(np.mean(gamma))) < 3.0:
            noise_psd = 0.98 * noise_psd + 0.02 * power[m]
        gain_prev = gain
        gamma_prev = gamma
    enhanced = istft(out, n_fft=n_fft, hop=hop, length=len(noisy))
    if return_gains:
        return enhanced, gains
    return enhanced


# -- level normalization ---------------------------------------------------

SPL_TO_DBFS_OFFSET = -91.0  # 65 dB SPL presentation level <=> -26 dBFS rms


def rms_normalize(x, target_db=65.0):
    """Scale so active-speech RMS hits the target presentation level.

    ``target_db`` is a nominal dB SPL figure mapped to digital level as
    dBFS = target_db - 91 (default 65 -> -26 dBFS).  The activity gate is
    relative to the loudest frame, so the result is invariant to input
    scaling and a second application is exact.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x != 0.0):
        raise PreconditionError("cannot normalize silence")
    mask = active_mask(x, relative=True)
    sel = _mask_to_samples(mask, FRAME_10MS, len(x))
    rms = math.sqrt(float(np.mean(x[sel] ** 2)))
    if rms <= 0:
        raise PreconditionError("cannot normalize silence")
    target_rms = 10.0 ** ((target_db + SPL_TO_DBFS_OFFSET) / 20.0)
    return x * (target_rms / rms)


# -- log-mel features ------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=80, n_fft=N_FFT, sr=SAMPLE_RATE):
    """Triangular filters on mel-spaced edges, (n_mels, n_fft // 2 + 1)."""
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        bank[i] = np.maximum(0.0, np.minimum(up, down))
    return bank


def mel_spectrogram(x, n_mels=80, n_fft=N_FFT, hop=HOP, log_floor=1e-10):
    """Log power on a mel scale, (frames, n_mels); power floored before the log."""
    spec = stft(x, n_fft=n_fft, hop=hop)
    power = np.abs(spec) ** 2
    mel = power @ mel_filterbank(n_mels, n_fft).T
    return np.log(np.maximum(mel, log_floor))


def mel_band_for_hz(f, n_mels=80, n_fft=N_FFT, sr=SAMPLE_RATE):
    """Index of the mel band whose peak is nearest the given frequency."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2.0), n_mels + 2))
    centers = edges[1:-1]
    return int(np.argmin(np.abs(centers - f)))


# -- dataset manifests -----------------------------------------------------

MANIFEST_FIELDS = ("clean_path", "noise_path", "rir_path", "snr_db", "row_seed")


@dataclass
class ManifestRow:
    clean_path: str
    noise_path: str
    rir_path: str | None
    snr_db: float
    row_seed: int

    def to_json(self):
        return {
            "clean_path": self.clean_path,
            "noise_path": self.noise_path,
            "rir_path": self.rir_path,
            "snr_db": self.snr_db,
            "row_seed": self.row_seed,
        }


def _row_seed(master_seed, index):
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def _list_wavs(directory):
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".wav"))
    if not names:
        raise PreconditionError(f"no .wav files in {directory}")
    return [os.path.abspath(os.path.join(directory, n)) for n in names]


def _write_manifest(path, meta, rows):
    with open(path, "w") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for r in rows:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def load_manifest(path):
    """Read a manifest; returns (meta, rows). Raises on malformed rows."""
    meta = None
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "clean_path" not in obj:
                if meta is not None:
                    raise PreconditionError(f"{path}:{ln}: second metadata line")
                meta = obj
                continue
            if set(obj) != set(MANIFEST_FIELDS):
                raise PreconditionError(
                    f"{path}:{ln}: row fields {sorted(obj)} != expected {sorted(MANIFEST_FIELDS)}"
                )
            rows.append(
                ManifestRow(
                    clean_path=obj["clean_path"],
                    noise_path=obj["noise_path"],
                    rir_path=obj["rir_path"],
                    snr_db=float(obj["snr_db"]),
                    row_seed=int(obj["row_seed"]),
                )
            )
    if meta is None:
        raise PreconditionError(f"{path}: missing metadata line (no 'split' record)")
    return meta, rows


OOD_SNRS_NOISY_ONLY = (0.0, 5.0)
OOD_T60S = (0.5, 0.7)
OOD_REVERB_SNR = 5.0


def build_manifest(
    clean_dir,
    noise_dir,
    out_path,
    rir_dir=None,
    seed=0,
    preset="train",
    reverb_fraction=0.75,
    snr_range=(-5.0, 20.0),
    val_fraction=0.1,
    rows_per_clean=1,
):
    """Synthesize degradation recipes for the clean corpus.

    preset="train": each row draws a noise file, an SNR uniform in
    snr_range, and (with probability reverb_fraction, when RIRs are
    available) a room impulse response.  Utterances are split 90/10 into
    train/validation by a seeded shuffle; the validation rows go to a
    sibling file <out stem>.val.jsonl.  Returns the list of written paths.

    preset="ood": a fixed evaluation grid of exactly four scenario blocks
    per utterance: {0, 5} dB without reverb, and reverberation at t60
    {0.5, 0.7} s mixed at 5 dB.  RIRs are matched by measured decay time
    from rir_dir, or synthesized next to the manifest when none are given.
    """
    if preset not in ("train", "ood"):
        raise PreconditionError(f"unknown preset {preset!r}")
    clean = _list_wavs(clean_dir)
    noises = _list_wavs(noise_dir)
    rirs = _list_wavs(rir_dir) if rir_dir else []
    rng = np.random.default_rng(seed)
    out_path = os.path.abspath(out_path)
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)

    if preset == "ood":
        rir_for = {}
        if rirs:
            measured = [(p, measure_t60(read_wav(p))) for p in rirs]
            for t60 in OOD_T60S:
                rir_for[t60] = min(measured, key=lambda pt: abs(pt[1] - t60))[0]
        else:
            stem = os.path.splitext(out_path)[0]
            for t60 in OOD_T60S:
                p = f"{stem}.rir_t60_{t60:g}.wav"
                write_wav(p, make_rir(t60, seed=seed + int(t60 * 10)) * 0.5)
                rir_for[t60] = os.path.abspath(p)
        rows = []
        idx = 0
        for snr in OOD_SNRS_NOISY_ONLY:
            for c in clean:
                rows.append(
                    ManifestRow(c, noises[idx % len(noises)], None, float(snr), _row_seed(seed, idx))
                )
                idx += 1
        for t60 in OOD_T60S:
            for c in clean:
                rows.append(
                    ManifestRow(
                        c, noises[idx % len(noises)], rir_for[t60], OOD_REVERB_SNR, _row_seed(seed, idx)
                    )
                )
                idx += 1
        _write_manifest(out_path, {"split": "test", "preset": "ood", "seed": int(seed)}, rows)
        return [out_path]

    order = rng.permutation(len(clean))
    n_val = max(1, int(round(val_fraction * len(clean)))) if len(clean) > 1 else 0
    val_set = {clean[i] for i in order[:n_val]}
    train_rows, val_rows = [], []
    idx = 0
    for c in clean:
        for _ in range(rows_per_clean):
            noise = noises[int(rng.integers(0, len(noises)))]
            snr = float(rng.uniform(*snr_range))
            rir = None
            if rirs and rng.random() < reverb_fraction:
                rir = rirs[int(rng.integers(0, len(rirs)))]
            row = ManifestRow(c, noise, rir, snr, _row_seed(seed, idx))
            (val_rows if c in val_set else train_rows).append(row)
            idx += 1
    _write_manifest(out_path, {"split": "train", "preset": "train", "seed": int(seed)}, train_rows)
    written = [out_path]
    if val_rows:
        val_path = os.path.splitext(out_path)[0] + ".val.jsonl"
        _write_manifest(val_path, {"split": "val", "preset": "train", "seed": int(seed)}, val_rows)
        written.append(val_path)
    return written


def synthesize_row(row):
    """Materialize one manifest row into (degraded, clean) float signals."""
    clean = read_wav(row.clean_path)
    noise = read_wav(row.noise_path)
    if row.rir_path:
        clean_for_mix = convolve_rir(clean, read_wav(row.rir_path))
    else:
        clean_for_mix = clean
    mix = mix_at_snr(clean_for_mix, noise, row.snr_db, seed=row.row_seed)
    # the clean reference keeps the mixture's scaling so levels compare
    return mix.mixture, clean * mix.peak_scale


# -- self-contained test material ------------------------------------------


def synthetic_speech(duration_s, seed=0, sr=SAMPLE_RATE, f0=None):
    """Speech-like test signal: voiced harmonic stretches with formant-ish
    spectral shaping, soft consonant noise bursts, and silent gaps."""
    rng = np.random.default_rng(seed)
    n = int(duration_s * sr)
    out = np.zeros(n)
    base_f0 = f0 if f0 is not None else rng.uniform(110.0, 220.0)
    while n:
        pos = 0
        while pos < n:
            kind = rng.random()
            seg_len = int(rng.uniform(0.08, 0.3) * sr)
            seg_len = min(seg_len, n - pos)
            if seg_len <= 0:
                break
            if kind < 0.55:  # voiced
                t = np.arange(seg_len) / sr
                f0_seg = base_f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(1.5, 4.0) * t) + rng.uniform(-0.1, 0.1))
                phase = 2 * np.pi * np.cumsum(f0_seg) / sr
                formants = rng.uniform([300, 900, 2200], [800, 1800, 3200])
                seg = np.zeros(seg_len)
                for k in range(1, 30):
                    fk = k * np.mean(f0_seg)
                    if fk > sr / 2 - 200:
                        break
                    amp = sum(np.exp(-0.5 * ((fk - fm) / 220.0) ** 2) for fm in formants) + 0.03
                    seg += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
                env = np.minimum(1.0, np.minimum(np.arange(seg_len), np.arange(seg_len)[::-1]) / (0.01 * sr))
                seg *= env * rng.uniform(0.5, 1.0)
            elif kind < 0.75:  # unvoiced burst
                seg = rng.standard_normal(seg_len)
                spec = np.fft.rfft(seg)
                freqs = np.fft.rfftfreq(seg_len, 1 / sr)
                spec *= np.exp(-0.5 * ((freqs - rng.uniform(2500, 5000)) / 1200.0) ** 2)
                seg = np.fft.irfft(spec, n=seg_len) * 2.0
                env = np.minimum(1.0, np.minimum(np.arange(seg_len), np.arange(seg_len)[::-1]) / (0.005 * sr))
                seg *= env * rng.uniform(0.1, 0.3)
            else:  # pause
                seg = np.zeros(seg_len)
            out[pos : pos + seg_len] += seg
            pos += seg_len
        if out.any():
            break
        # a short request can draw an all-pause plan; silence breaks any
        # downstream SNR calibration, so redraw until something lands
    peak = np.max(np.abs(out))
    if peak > 0:
        out = out / peak * 0.5
    return out
