"""Batch command-line entry point.

One static `tokense` executable with subcommands covering the whole
pipeline: manifest synthesis, codec and enhancement training, waveform
enhancement, evaluation, cost profiling, and token dumps.  Strictly
batch: read inputs, write artifacts, exit.  Exit status is 0 only when
every declared artifact was written; on failure the command prints a
one-line diagnostic to stderr and removes whatever it had started to
write.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import backbones as B
from . import codec as CD
from . import dsp
from . import figures
from . import metrics
from . import model as M
from . import tensor as T
from .errors import PreconditionError, TokenSeError


def _resolve_seed(value, default=0):
    """--seed wins; the TOKENSE_SEED environment variable fills in when
    the flag is absent."""
    if value is not None:
        return int(value)
    env = os.environ.get("TOKENSE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise PreconditionError(f"TOKENSE_SEED must be an integer, got {env!r}")
    return default


def _parse_int_list(text, flag):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise PreconditionError(f"{flag} wants comma-separated integers, got {text!r}")
    if not vals:
        raise PreconditionError(f"{flag} is empty")
    return vals


class _Outputs:
    """Artifacts a command intends to write.  Declared just before each
    write starts, so a failure leaves nothing half-finished behind."""

    def __init__(self):
        self.paths = []

    def declare(self, path):
        path = os.fspath(path)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self.paths.append(path)
        return path

    def cleanup(self):
        for p in self.paths:
            if os.path.isfile(p):
                try:
                    os.remove(p)
                except OSError:
                    pass


def _val_sibling(path):
    return os.path.splitext(os.fspath(path))[0] + ".val.jsonl"


def _load_rows(manifest):
    _, rows = dsp.load_manifest(manifest)
    val_path = _val_sibling(manifest)
    vrows = []
    if os.path.exists(val_path):
        _, vrows = dsp.load_manifest(val_path)
    return rows, vrows


# -- subcommands -----------------------------------------------------------


def cmd_synth_data(args, out):
    seed = _resolve_seed(args.seed)
    out.declare(args.out)
    if args.preset == "train":
        out.declare(_val_sibling(args.out))
    written = dsp.build_manifest(
        args.clean, args.noise, args.out, rir_dir=args.rir, seed=seed, preset=args.preset
    )
    for p in written:
        print(p)


def cmd_train_codec(args, out):
    seed = _resolve_seed(args.seed)
    rows, _ = _load_rows(args.manifest)
    clean_paths = sorted({r.clean_path for r in rows})
    waves = [dsp.read_wav(p) for p in clean_paths]
    config = CD.CodecConfig(
        strides=_parse_int_list(args.strides, "--strides"),
        channels=_parse_int_list(args.channels, "--channels"),
        latent_dim=args.latent_dim,
        n_quantizers=args.quantizers,
        codebook_size=args.codebook_size,
    )
    every = max(1, args.steps // 10)

    def log(step, loss, parts):
        print(f"step {step}/{args.steps} loss {loss:.4f}", file=sys.stderr)

    params, history = CD.train_codec(
        waves,
        config,
        steps=args.steps,
        crop=args.crop,
        lr=args.lr,
        seed=seed,
        decay=args.decay,
        log_every=every,
        log_fn=log if not args.quiet else None,
    )
    out.declare(args.out)
    CD.save_codec(args.out, params)
    print(f"{args.out} (final loss {history[-1]:.4f}, {len(waves)} utterances, {args.steps} steps)")


def cmd_train_se(args, out):
    seed = _resolve_seed(args.seed)
    rows, vrows = _load_rows(args.manifest)
    codec_params = CD.load_codec(args.codec)
    spec = B.BackboneSpec(
        kind=args.backbone,
        layers=args.layers,
        d_model=args.d_model,
        state_dim=args.state_dim,
        conv_width=args.conv_width,
        expand=args.expand,
        heads=args.heads,
    )
    config = M.ModelConfig(
        backbone=spec,
        codec=codec_params.config,
        auxiliary=args.aux or "none",
        freeze_encoder=args.freeze_encoder,
        lambda_token=args.lambda_token,
    )
    base = os.path.splitext(args.out)[0]
    log_csv = base + ".log.csv"

    def progress(epoch, row):
        if not args.quiet and (epoch % 10 == 0 or epoch == args.epochs - 1):
            print(
                f"epoch {row[0]} train {row[1]:.4f} val {row[2]:.4f} acc_q1 {row[3]:.3f}",
                file=sys.stderr,
            )

    settings = M.TrainSeSettings(
        epochs=args.epochs,
        lr=args.lr,
        batch=args.batch,
        crop=args.crop,
        patience=args.patience,
        seed=seed,
        log_path=out.declare(log_csv),
        checkpoint_path=None,
        progress=progress,
    )
    params, log_rows = M.train_se(rows, vrows, codec_params, config, settings)
    out.declare(args.out)
    M.save_model(args.out, params)
    print(log_csv)
    print(args.out)
    if not args.no_figure:
        png = out.declare(base + ".log.png")
        figures.render_training_figure(log_rows, png)
        print(png)


def cmd_enhance(args, out):
    wave = dsp.read_wav(args.infile)
    if args.baseline == "logmmse":
        enhanced = dsp.logmmse_enhance(wave)
    else:
        if not args.model or not args.codec:
            raise PreconditionError("enhance needs --model and --codec unless --baseline logmmse is given")
        params = M.load_model(args.model)
        codec_params = CD.load_codec(args.codec)
        enhanced = M.enhance(wave, params, codec_params)
    out.declare(args.out)
    dsp.write_wav(args.out, np.clip(enhanced, -1.0, 1.0))
    print(args.out)


def cmd_eval(args, out):
    ref_names = {os.path.basename(p): p for p in dsp._list_wavs(args.ref_dir)}
    est_paths = dsp._list_wavs(args.est_dir)
    if not est_paths:
        raise PreconditionError(f"no WAV files in {args.est_dir}")
    codec_params = CD.load_codec(args.codec) if args.codec else None
    rows = []
    for est_path in est_paths:
        name = os.path.basename(est_path)
        if name not in ref_names:
            raise PreconditionError(f"no reference for {name} in {args.ref_dir}")
        ref = dsp.read_wav(ref_names[name])
        est = dsp.read_wav(est_path)
        if len(ref) != len(est):
            raise PreconditionError(f"{name}: reference has {len(ref)} samples, estimate has {len(est)}")
        acc = None
        if codec_params is not None:
            acc = metrics.token_accuracy(
                CD.encode_tokens(ref, codec_params), CD.encode_tokens(est, codec_params)
            )
        rows.append(
            metrics.EvalRow(
                id=os.path.splitext(name)[0],
                si_snr_db=metrics.si_snr(ref, est),
                seg_snr_db=metrics.seg_snr(ref, est),
                lsd=metrics.lsd(ref, est),
                token_acc=acc,
            )
        )
    out.declare(args.out)
    metrics.write_report(args.out, rows)
    print(args.out)
    if not args.no_figure:
        png = out.declare(os.path.splitext(args.out)[0] + ".png")
        figures.render_report_figure(rows, png)
        print(png)


def cmd_flops(args, out):
    kinds = [k.strip() for k in args.backbone.split(",") if k.strip()]
    if not kinds:
        raise PreconditionError("--backbone is empty")
    lengths = _parse_int_list(args.lengths, "--lengths")
    table = []
    for kind in kinds:
        spec = B.BackboneSpec(kind=kind, layers=args.layers, d_model=args.d_model)
        for length in lengths:
            info = B.count_flops(spec, length)
            table.append((kind, int(length), info["total"] / 1e9))
    out.declare(args.out)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "L", "gflops"])
        for kind, length, gflops in table:
            w.writerow([kind, length, repr(float(gflops))])
    print(args.out)
    if not args.no_figure:
        png = out.declare(os.path.splitext(args.out)[0] + ".png")
        figures.render_flops_figure(table, png)
        print(png)


def cmd_tokens_dump(args, out):
    wave = dsp.read_wav(args.infile)
    codec_params = CD.load_codec(args.codec)
    codes = CD.encode_tokens(wave, codec_params)
    out.declare(args.out)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"q{k + 1}" for k in range(codes.shape[1])])
        for i, row in enumerate(codes):
            w.writerow([i] + [int(v) for v in row])
    print(args.out)


# -- parser ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="tokense",
        description="Discrete-token speech enhancement: data synthesis, training, inference, evaluation.",
    )
    p.add_argument("--threads", type=int, default=None, help="cap worker threads (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="build a degradation manifest from clean/noise corpora")
    sd.add_argument("--clean", required=True, help="directory of clean WAV files")
    sd.add_argument("--noise", required=True, help="directory of noise WAV files")
    sd.add_argument("--rir", default=None, help="directory of room impulse responses")
    sd.add_argument("--out", required=True, help="manifest JSONL path")
    sd.add_argument("--seed", type=int, default=None)
    sd.add_argument("--preset", choices=("train", "ood"), default="train")
    sd.set_defaults(func=cmd_synth_data)

    tc = sub.add_parser("train-codec", help="fit the neural codec on the manifest's clean utterances")
    tc.add_argument("--manifest", required=True)
    tc.add_argument("--out", required=True, help="codec checkpoint (.tkse)")
    tc.add_argument("--steps", type=int, default=500)
    tc.add_argument("--seed", type=int, default=None)
    tc.add_argument("--strides", default="4,4,4,4")
    tc.add_argument("--channels", default="16,32,64,128")
    tc.add_argument("--latent-dim", type=int, default=64)
    tc.add_argument("--quantizers", type=int, default=4)
    tc.add_argument("--codebook-size", type=int, default=1024)
    tc.add_argument("--crop", type=int, default=4096)
    tc.add_argument("--lr", type=float, default=2e-3)
    tc.add_argument("--decay", type=float, default=0.95, help="codebook EMA decay")
    tc.add_argument("--quiet", action="store_true")
    tc.set_defaults(func=cmd_train_codec)

    ts = sub.add_parser("train-se", help="train the token predictor against a frozen codec")
    ts.add_argument("--manifest", required=True)
    ts.add_argument("--codec", required=True)
    ts.add_argument("--out", required=True, help="model checkpoint (.tkse)")
    ts.add_argument("--backbone", choices=B.BACKBONE_KINDS, default="mamba_bi")
    ts.add_argument("--freeze-encoder", action="store_true")
    ts.add_argument("--aux", choices=("mel",), default=None)
    ts.add_argument("--seed", type=int, default=None)
    ts.add_argument("--layers", type=int, default=12)
    ts.add_argument("--d-model", type=int, default=256)
    ts.add_argument("--state-dim", type=int, default=16)
    ts.add_argument("--conv-width", type=int, default=4)
    ts.add_argument("--expand", type=int, default=2)
    ts.add_argument("--heads", type=int, default=8)
    ts.add_argument("--epochs", type=int, default=300)
    ts.add_argument("--lr", type=float, default=2e-4)
    ts.add_argument("--batch", type=int, default=4)
    ts.add_argument("--crop", type=int, default=4096)
    ts.add_argument("--patience", type=int, default=20)
    ts.add_argument("--lambda-token", type=float, default=0.5)
    ts.add_argument("--no-figure", action="store_true")
    ts.add_argument("--quiet", action="store_true")
    ts.set_defaults(func=cmd_train_se)

    en = sub.add_parser("enhance", help="enhance one noisy WAV")
    en.add_argument("--in", dest="infile", required=True)
    en.add_argument("--model", default=None)
    en.add_argument("--codec", default=None)
    en.add_argument("--out", required=True)
    en.add_argument("--baseline", choices=("logmmse",), default=None)
    en.set_defaults(func=cmd_enhance)

    ev = sub.add_parser("eval", help="score estimates against references, matched by filename")
    ev.add_argument("--ref-dir", required=True)
    ev.add_argument("--est-dir", required=True)
    ev.add_argument("--out", required=True, help="report CSV path")
    ev.add_argument("--codec", default=None, help="add per-quantizer token accuracy columns")
    ev.add_argument("--no-figure", action="store_true")
    ev.set_defaults(func=cmd_eval)

    fl = sub.add_parser("flops", help="analytic forward-cost table over sequence lengths")
    fl.add_argument("--backbone", required=True, help="kind, or comma-separated kinds")
    fl.add_argument("--lengths", required=True, help="comma-separated sequence lengths")
    fl.add_argument("--out", required=True, help="CSV path")
    fl.add_argument("--layers", type=int, default=12)
    fl.add_argument("--d-model", type=int, default=256)
    fl.add_argument("--no-figure", action="store_true")
    fl.set_defaults(func=cmd_flops)

    tk = sub.add_parser("tokens", help="codec token utilities")
    tksub = tk.add_subparsers(dest="tokens_command", required=True)
    td = tksub.add_parser("dump", help="write one WAV's token codes as CSV")
    td.add_argument("--in", dest="infile", required=True)
    td.add_argument("--codec", required=True)
    td.add_argument("--out", required=True)
    td.set_defaults(func=cmd_tokens_dump)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    T.set_scan_threads(threads)
    out = _Outputs()
    try:
        args.func(args, out)
    except (TokenSeError, OSError) as e:
        out.cleanup()
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"tokense: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
