"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 IO or file-format
error, 4 numerical failure (including divergent training).
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import data, lds, metrics, model as dvae
from .errors import DynvaeError, FormatError, UsageError
from .tensor import Prng

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
PRESETS = ("mnist-like", "running-cows", "salt-pepper", "rectangular-mask", "dyn-textures")


def _read_json(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"{what}: cannot read {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what}: {path} is not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{what}: {path} must hold a JSON object")
    return doc


def load_config(name_or_path):
    """A preset name (``mnist-like`` ...) or the path of a JSON training config."""
    if name_or_path in PRESETS:
        text = resources.files("dynvae").joinpath("presets", f"{name_or_path}.json").read_text()
        return dvae.TrainConfig.from_dict(json.loads(text))
    return dvae.TrainConfig.from_dict(_read_json(name_or_path, "config"))


def _require_file(path, flag):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{flag}: no such file {path}")


def _require_parent(path, flag):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise FileNotFoundError(f"{flag}: directory {parent} does not exist")


def _seq_from_frames(frames, frame_shape, d):
    h, w, c = frame_shape if frame_shape else (1, d, 1)
    return data.SequenceData(data.normalize(frames), h, w, c)


# --- commands -------------------------------------------------------------


def cmd_gen_synthetic(args):
    spec = data.SyntheticSpec.from_dict(_read_json(args.spec, "spec"))
    _require_parent(args.out, "--out")
    seq = data.gen_synthetic(spec)
    data.save_seq(seq, args.out)
    print(f"wrote\t{args.out}\tframes={seq.n_frames}\tshape={seq.height}x{seq.width}x{seq.channels}")
    return EXIT_OK


def cmd_gen_mask(args):
    _require_file(args.like, "--like")
    _require_parent(args.out, "--out")
    seq = data.load_seq(args.like)
    mask = data.gen_mask(seq.shape, args.kind, p=args.p, fraction=args.fraction, seed=args.seed)
    data.save_mask(mask, seq.shape, args.out)
    print(f"wrote\t{args.out}\tobserved={mask.mean():.4f}")
    return EXIT_OK


def cmd_train(args):
    config = load_config(args.config)
    _require_file(args.data, "--data")
    if args.mask:
        _require_file(args.mask, "--mask")
    _require_parent(args.out, "--out")
    seq = data.load_seq(args.data)
    if args.mask:
        mask, shape = data.load_mask(args.mask)
        if shape != seq.shape:
            raise UsageError(f"--mask: mask shape {shape} does not match data shape {seq.shape}")
        seq = seq.with_mask(mask)
    model = dvae.DvaeModel.create(seq.frame_dim, config, (seq.height, seq.width, seq.channels))
    windows = data.make_windows(seq, model.window)
    print("epoch\tloss\trecon\tkl\tstationarity\tval_loss", flush=True)

    def report_line(r):
        val = "" if r.val_loss is None else f"{r.val_loss:.6f}"
        print(f"{r.epoch}\t{r.loss:.6f}\t{r.recon:.6f}\t{r.kl:.6f}\t{r.stationarity:.3e}\t{val}", flush=True)

    model, report = dvae.train(model, windows.frames, config, windows.masks, callback=report_line)
    dvae.save_model(model, args.out)
    if args.figures:
        from . import plotting

        plotting.loss_curves(report, Path(args.figures) / "loss.png")
    return EXIT_OK


def cmd_lds_fit(args):
    _require_file(args.data, "--data")
    _require_parent(args.out, "--out")
    seq = data.load_seq(args.data)
    fitted = lds.fit_lds(seq.frames, args.n, (seq.height, seq.width, seq.channels))
    lds.save_lds(fitted, args.out)
    print(f"wrote\t{args.out}\tn={fitted.n}\td={fitted.d}")
    return EXIT_OK


def _load_any_model(path):
    """A DVMD checkpoint or a JSON LDS model, told apart by the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == dvae.MODEL_MAGIC:
        return dvae.load_model(path)
    if head[:1] == b"{":
        return lds.load_lds(path)
    raise FormatError(f"{path}: neither a DVMD checkpoint nor an LDS model", 0)


def cmd_synth(args):
    _require_file(args.model, "--model")
    if args.init_from:
        _require_file(args.init_from, "--init-from")
    _require_parent(args.out, "--out")
    if args.frames < 0:
        raise UsageError("--frames: must be non-negative")
    mdl = _load_any_model(args.model)
    rng = Prng(args.seed)
    init = data.load_seq(args.init_from) if args.init_from else None
    if isinstance(mdl, lds.LdsModel):
        if init is not None and init.frame_dim != mdl.d:
            raise UsageError("--init-from: frame dimension does not match the model")
        h0 = lds.lds_states(mdl, init.frames[:1])[0] if init is not None else np.zeros(mdl.n)
        if args.noise:
            raise UsageError("--noise: LDS models have no observation noise level")
        frames = lds.synthesize_lds(mdl, h0, args.frames, rng)
        d, shape = mdl.d, mdl.frame_shape
    else:
        if init is not None:
            if init.frame_dim != mdl.d:
                raise UsageError("--init-from: frame dimension does not match the model")
            if init.n_frames < mdl.window:
                raise UsageError(f"--init-from: needs at least {mdl.window} frames")
            h0 = dvae.estimate_initial_state(mdl, *init.frames[: mdl.window])
        else:
            h0 = np.zeros(mdl.n)
        frames = dvae.synthesize(mdl, h0, args.frames, rng, noise=args.noise)
        d, shape = mdl.d, mdl.frame_shape
    seq = _seq_from_frames(np.asarray(frames).reshape(-1, d), shape, d)
    data.save_seq(seq, args.out)
    print(f"wrote\t{args.out}\tframes={seq.n_frames}")
    return EXIT_OK


def cmd_eval(args):
    for flag, path in (("--ref", args.ref), ("--gen", args.gen)):
        _require_file(path, flag)
    if args.model:
        _require_file(args.model, "--model")
    _require_parent(args.out, "--out")
    ref = data.load_seq(args.ref)
    gen = data.load_seq(args.gen)
    dyn = None
    if args.model:
        mdl = _load_any_model(args.model)
        if isinstance(mdl, dvae.DvaeModel) and mdl.order == 1:
            dyn = (mdl.A, mdl.B)
    report = metrics.evaluate(ref, gen, lags=args.lags, dyn=dyn)
    Path(args.out).write_text(report.to_json() + "\n")
    print("metric\tvalue")
    print(f"frechet_pixel[{report.features}]\t{report.frechet_pixel:.6g}")
    print(f"mean_abs_err\t{report.mean_abs_err:.6g}")
    print(f"std_abs_err\t{report.std_abs_err:.6g}")
    for lag, err in enumerate(report.autocorr_err, 1):
        print(f"autocorr_err[{lag}]\t{err:.6g}")
    if report.stationarity_residual is not None:
        print(f"stationarity_residual\t{report.stationarity_residual:.6g}")
    if args.figures:
        from . import plotting

        plotting.eval_figures(ref, gen, report, args.figures)
    return EXIT_OK


def cmd_gradcheck(args):
    result = dvae.reference_gradcheck(seed=args.seed, order=args.order, masked=args.masked)
    ok = result.max_rel_error <= args.tol
    print("max_rel_error\tchecked\tskipped\tstatus")
    print(f"{result.max_rel_error:.3e}\t{result.checked}\t{result.skipped}\t{'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else 1


# --- parser ---------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="dynvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic sequence")
    p.add_argument("--spec", required=True, help="JSON synthetic spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("gen-mask", help="write an observation mask matching a sequence")
    p.add_argument("--like", required=True, help="sequence whose shape the mask takes")
    p.add_argument("--kind", choices=("salt_pepper", "rectangle"), default="salt_pepper")
    p.add_argument("--p", type=float, default=0.5, help="hidden probability (salt_pepper)")
    p.add_argument("--fraction", type=float, default=0.5, help="hidden area (rectangle)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_mask)

    p = sub.add_parser("train", help="train a dynamic VAE")
    p.add_argument("--config", required=True, help=f"JSON config or preset ({', '.join(PRESETS)})")
    p.add_argument("--data", required=True)
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.add_argument("--figures", help="directory for the loss-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lds-fit", help="fit the linear dynamic texture baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=10, help="latent dimension")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lds_fit)

    p = sub.add_parser("synth", help="synthesize frames from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--init-from", help="sequence whose first frames set the initial state")
    p.add_argument("--noise", action="store_true", help="add observation noise")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="compare generated with reference frames")
    p.add_argument("--ref", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--model", help="checkpoint whose dynamic layer is reported")
    p.add_argument("--lags", type=int, default=5)
    p.add_argument("--out", required=True, help="JSON report")
    p.add_argument("--figures", help="directory for figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--order", type=int, choices=(1, 2), default=1)
    p.add_argument("--masked", action="store_true")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DynvaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
