"""Evaluation metrics and the delimited report format.

All metrics are plain functions of numpy arrays.  Scores are clamped to
finite ranges so corpus means stay meaningful when a single utterance is
reconstructed perfectly (infinite SNR) or catastrophically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dsp import ACTIVE_GATE_DBFS, HOP, N_FFT, stft
from .errors import PreconditionError, ShapeError

SI_SNR_CAP = 60.0
SEG_SNR_RANGE = (-10.0, 35.0)
SEG_FRAME = 512

REPORT_HEADER = ["id", "si_snr_db", "seg_snr_db", "lsd", "acc_q1", "acc_q2", "acc_q3", "acc_q4"]


def _check_pair(ref, est):
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape or ref.ndim != 1:
        raise ShapeError(f"expected matching 1-D signals, got {ref.shape} and {est.shape}")
    if not np.any(ref != 0):
        raise PreconditionError("reference signal is all zeros")
    return ref, est


def si_snr(ref, est):
    """Scale-invariant SNR in dB, clamped to +/-60.

    The estimate is projected onto the reference, so any global gain on
    the estimate cancels.  A bit-exact reconstruction hits the +60 cap.
    """
    ref, est = _check_pair(ref, est)
    ref = ref - ref.mean()
    est = est - est.mean()
    denom = float(np.dot(ref, ref))
    s_target = (float(np.dot(est, ref)) / denom) * ref
    e = est - s_target
    p_s = float(np.dot(s_target, s_target))
    p_e = float(np.dot(e, e))
    if p_e <= 0.0:
        return SI_SNR_CAP
    if p_s <= 0.0:
        return -SI_SNR_CAP
    return float(np.clip(10.0 * math.log10(p_s / p_e), -SI_SNR_CAP, SI_SNR_CAP))


def seg_snr(ref, est, frame=SEG_FRAME):
    """Mean per-frame SNR in dB over reference-active frames, each frame
    clamped to [-10, 35]."""
    ref, est = _check_pair(ref, est)
    nf = len(ref) // frame
    if nf == 0:
        raise PreconditionError(f"signals shorter than one frame ({frame} samples)")
    lo, hi = SEG_SNR_RANGE
    gate = 10.0 ** (ACTIVE_GATE_DBFS / 10.0)
    vals = []
    for i in range(nf):
        r = ref[i * frame : (i + 1) * frame]
        e = est[i * frame : (i + 1) * frame]
        p_r = float(np.mean(r * r))
        if p_r <= gate:
            continue
        p_err = float(np.sum((r - e) ** 2))
        if p_err <= 0.0:
            vals.append(hi)
            continue
        vals.append(float(np.clip(10.0 * math.log10(np.sum(r * r) / p_err), lo, hi)))
    if not vals:
        raise PreconditionError("no active frames in the reference")
    return float(np.mean(vals))


def lsd(ref, est, power_floor=1e-10):
    """Log-spectral distance in dB: RMS over bins of the dB difference,
    averaged over frames."""
    ref, est = _check_pair(ref, est)
    p_r = np.maximum(np.abs(stft(ref, N_FFT, HOP)) ** 2, power_floor)
    p_e = np.maximum(np.abs(stft(est, N_FFT, HOP)) ** 2, power_floor)
    d = 10.0 * np.log10(p_r) - 10.0 * np.log10(p_e)
    return float(np.mean(np.sqrt(np.mean(d * d, axis=1))))


def token_accuracy(ref_codes, est_codes):
    """Per-quantizer agreement fraction; codes are (T, K) index arrays."""
    ref_codes = np.asarray(ref_codes)
    est_codes = np.asarray(est_codes)
    if ref_codes.shape != est_codes.shape or ref_codes.ndim != 2:
        raise ShapeError(f"code shapes differ: {ref_codes.shape} vs {est_codes.shape}")
    return (ref_codes == est_codes).mean(axis=0)


# -- report format ---------------------------------------------------------


@dataclass
class EvalRow:
    id: str
    si_snr_db: float
    seg_snr_db: float
    lsd: float
    token_acc: tuple | None = None  # per-quantizer fractions, or None


def _fmt(v):
    return repr(float(v))


def write_report(path, rows):
    """Write the evaluation CSV: fixed header, one row per utterance, and
    a MEAN aggregate recomputed from the rows."""
    if not rows:
        raise PreconditionError("no evaluation rows to write")
    n_acc = 4
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in rows:
            acc = ["" for _ in range(n_acc)]
            if r.token_acc is not None:
                if not 1 <= len(r.token_acc) <= n_acc:
                    raise PreconditionError(
                        f"row {r.id}: expected 1..{n_acc} token accuracies, got {len(r.token_acc)}"
                    )
                # fewer quantizers than header columns: trailing cells stay empty
                acc[: len(r.token_acc)] = [_fmt(a) for a in r.token_acc]
            w.writerow([r.id, _fmt(r.si_snr_db), _fmt(r.seg_snr_db), _fmt(r.lsd)] + acc)
        means = [
            _fmt(np.mean([r.si_snr_db for r in rows])),
            _fmt(np.mean([r.seg_snr_db for r in rows])),
            _fmt(np.mean([r.lsd for r in rows])),
        ]
        for k in range(n_acc):
            col = [r.token_acc[k] for r in rows if r.token_acc is not None and len(r.token_acc) > k]
            means.append(_fmt(np.mean(col)) if len(col) == len(rows) else "")
        w.writerow(["MEAN"] + means)
    return path


def read_report(path):
    """Parse a report back into (rows, mean_row); inverse of write_report."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_HEADER:
            raise PreconditionError(f"{path}: header {header} != {REPORT_HEADER}")
        rows, mean_row = [], None
        for rec in reader:
            accs = tuple(float(a) for a in rec[4:8] if a != "") or None
            row = EvalRow(rec[0], float(rec[1]), float(rec[2]), float(rec[3]), accs)
            if rec[0] == "MEAN":
                mean_row = row
            else:
                rows.append(row)
    if mean_row is None:
        raise PreconditionError(f"{path}: missing MEAN aggregate row")
    return rows, mean_row
