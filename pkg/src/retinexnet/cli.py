"""Command-line interface: synth, train, decompose, enhance, eval, hist.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from .denoise import DenoiseConfig
from .model import WeightsFormatError, init_weights, load_weights, save_weights
from .pipeline import decompose_image, enhance_image, psnr, ssim
from .training import (PHASES, CheckpointFormatError, TrainingDiverged, TrainLog, TrainState,
                       initial_state, load_checkpoint, run_phase, save_checkpoint)

log = logging.getLogger("retinexnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# synth / hist


def _read_dir(path) -> list[tuple[str, np.ndarray]]:
    files = D.list_pngs(path)
    if not files:
        raise DataError(f"no PNG images found in {path}")
    return [(f.stem, D.read_png(f)) for f in files]


def _write_manifest(path: Path, entries: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def cmd_synth(args) -> int:
    images = _read_dir(args.input_dir)
    if args.target_hist and args.target_hist.lower() != "none":
        target = D.YHistogram.from_csv(args.target_hist)
        fit = D.fit_darkening_params([im for _, im in images], target, noise_sigma=args.sigma, seed=args.seed)
        params, distance, fitted = fit.params, fit.distance, True
    else:
        try:
            params = D.DarkeningParams(args.gamma, args.beta, args.sigma)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        distance, fitted = None, False
    out = Path(args.output_dir)
    (out / "low").mkdir(parents=True, exist_ok=True)
    (out / "high").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for name, img in images:
        D.write_png(out / "high" / f"{name}.png", img)
        D.write_png(out / "low" / f"{name}.png", D.synth_low_light(img, params, rng))
    manifest = {"count": len(images), "gamma": params.gamma, "beta": params.beta,
                "noise_sigma": params.noise_sigma, "seed": args.seed, "fitted": str(fitted).lower()}
    if distance is not None:
        manifest["histogram_distance"] = repr(distance)
        manifest["target_hist"] = args.target_hist
    _write_manifest(out / "manifest.txt", manifest)
    print(f"wrote {len(images)} pairs to {out} (gamma={params.gamma}, beta={params.beta}, "
          f"sigma={params.noise_sigma})")
    return EXIT_OK


def cmd_hist(args) -> int:
    images = _read_dir(args.input_dir)
    hist = D.y_histogram(im for _, im in images)
    hist.to_csv(args.out)
    print(f"{len(images)} images, {hist.total} pixels, mean Y {hist.mean():.2f} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_training_data(dirs, split_seed: int) -> D.PairDataset:
    parts = []
    for i, d in enumerate(dirs):
        ds = D.load_pair_dataset(d, prefix=f"{i}:" if len(dirs) > 1 else "")
        for issue in ds.errors:
            log.warning("%s: %s", issue.id, issue.reason)
        parts.append(ds.split_train_eval(split_seed)[0])
    ds = D.PairDataset.merge(parts)
    if not ds.pairs:
        raise DataError("no training pairs found in " + ", ".join(map(str, dirs)))
    return ds


def cmd_train(args) -> int:
    cfg = C.load_config(args.config) if args.config else C.RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    phases = list(PHASES) if args.phase == "all" else [args.phase]
    out = Path(args.out)
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else out.with_name(out.name + ".ckpt")

    state: TrainState | None = None
    prior_rows: list[dict] = []
    if args.resume:
        try:
            w, state, prior_rows = load_checkpoint(args.resume)
        except FileNotFoundError as exc:
            raise DataError(f"checkpoint incomplete: {exc}") from exc
        if state.phase not in phases:
            raise UsageError(f"checkpoint phase {state.phase!r} not part of --phase {args.phase}")
        if state.finished and state.phase == phases[-1]:
            print(f"run already finished ({state.phase} {state.iteration}/{state.iterations}); nothing to do")
            return EXIT_OK
        phases = phases[phases.index(state.phase):]
        ckpt_dir = Path(args.resume)
    elif args.init:
        w = load_weights(args.init)
    elif phases[0] == "decom":
        w = init_weights(cfg.decom, None, seed=cfg.init_seed)
    else:
        raise DataError(f"phase {phases[0]!r} needs pretrained Decom-Net weights (--init)")

    if phases[0] == "finetune" and not w.subset("enhance."):
        raise DataError("phase 'finetune' needs pretrained Enhance-Net weights (--init)")
    if not w.subset("enhance.") and "enhance" in phases:
        w.update(init_weights(None, cfg.enhance, seed=cfg.init_seed + 1))

    ds = _load_training_data(args.data_dir, cfg.split_seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    C.save_config(cfg, out.with_suffix(".config.txt"))
    log.info("training on %d pairs, phases %s", len(ds), phases)

    for phase in phases:
        pcfg = cfg.phase_config(phase)
        st = state if state is not None and state.phase == phase else None
        rows = prior_rows if st is not None else []
        if st is not None and st.finished:
            tlog = TrainLog(phase, pcfg.loss_weights, [])
        else:
            def checkpoint(s, tl, rows=rows):
                save_checkpoint(ckpt_dir, w, s, rows + tl.rows)
            try:
                tlog = run_phase(pcfg, ds, w, state=st, checkpoint=checkpoint)
            except TrainingDiverged as exc:
                log_path = out.with_suffix(f".{phase}.log.csv")
                TrainLog(phase, pcfg.loss_weights, rows).write_csv(log_path)
                print(f"error: {exc}; last good checkpoint kept in {ckpt_dir}", file=sys.stderr)
                return EXIT_NUMERIC
        TrainLog(phase, pcfg.loss_weights, rows + tlog.rows).write_csv(out.with_suffix(f".{phase}.log.csv"))
        if not pcfg.checkpoint_every or pcfg.iterations == 0:
            save_checkpoint(ckpt_dir, w, _final_state(pcfg), rows + tlog.rows)
        losses = [r["total_loss"] for r in rows + tlog.rows]
        if losses:
            print(f"{phase}: {len(losses)} iterations, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
        state = None
    save_weights(w, out)
    print(f"weights written to {out}")
    return EXIT_OK


def _final_state(pcfg) -> TrainState:
    s = initial_state(pcfg)
    s.iteration = pcfg.iterations
    return s


# ---------------------------------------------------------------------------
# inference commands


def _load_weights_or_fail(path):
    if not Path(path).exists():
        raise DataError(f"weights file not found: {path}")
    return load_weights(path)


def cmd_decompose(args) -> int:
    w = _load_weights_or_fail(args.weights)
    images = _read_dir(args.input)
    out = D.ensure_dir(args.out_dir)
    errors = []
    for name, img in images:
        R, I = decompose_image(img, w)
        D.write_png(out / f"{name}_R.png", R)
        D.write_png(out / f"{name}_I.png", I)
        errors.append(float(np.mean(np.abs(R * I[..., None] - img))))
    print(f"decomposed {len(images)} images; mean |R*I - S| = {np.mean(errors):.4f}")
    return EXIT_OK


def _denoise_cfg(args) -> DenoiseConfig | None:
    if args.denoise != "on":
        return None
    return DenoiseConfig(base_strength=args.strength, illumination_exponent=args.exponent)


def cmd_enhance(args) -> int:
    w = _load_weights_or_fail(args.weights)
    images = _read_dir(args.input)
    out = D.ensure_dir(args.out_dir)
    dcfg = _denoise_cfg(args)
    for name, img in images:
        res = enhance_image(img, w, dcfg)
        D.write_png(out / f"{name}_enhanced.png", res.S_hat)
        if args.save_intermediates:
            D.write_png(out / f"{name}_R.png", res.R)
            D.write_png(out / f"{name}_I.png", res.I)
            D.write_png(out / f"{name}_I_hat.png", res.I_hat)
    print(f"enhanced {len(images)} images -> {out}")
    return EXIT_OK


EVAL_COLUMNS = ("id", "psnr_in", "psnr_out", "ssim_in", "ssim_out")


def evaluate(ds: D.PairDataset, w, denoise_cfg=None, bypass_adjustment: bool = False) -> list[dict]:
    rows = []
    for p in ds.pairs:
        res = enhance_image(p.low, w, denoise_cfg, bypass_adjustment=bypass_adjustment)
        rows.append({"id": p.id, "psnr_in": psnr(p.low, p.normal), "psnr_out": psnr(res.S_hat, p.normal),
                     "ssim_in": ssim(p.low, p.normal), "ssim_out": ssim(res.S_hat, p.normal)})
    if rows:
        rows.append({"id": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in EVAL_COLUMNS[1:]}})
    return rows


def cmd_eval(args) -> int:
    w = _load_weights_or_fail(args.weights)
    ds = D.load_pair_dataset(args.data_dir)
    for issue in ds.errors:
        log.warning("%s: %s", issue.id, issue.reason)
    if args.split == "eval":
        ds = ds.split_train_eval(args.split_seed)[1]
    if not ds.pairs:
        raise DataError(f"no low/normal pairs with ground truth in {args.data_dir}")
    rows = evaluate(ds, w, _denoise_cfg(args), bypass_adjustment=args.bypass_adjustment)
    with open(args.report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_COLUMNS)
        for r in rows:
            writer.writerow([r["id"]] + [repr(float(r[k])) for k in EVAL_COLUMNS[1:]])
    m = rows[-1]
    print(f"{len(rows) - 1} pairs: PSNR {m['psnr_in']:.2f} -> {m['psnr_out']:.2f} dB, "
          f"SSIM {m['ssim_in']:.3f} -> {m['ssim_out']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="retinexnet", description="Retinex decomposition low-light enhancement")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize low-light pairs from normal images")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--output-dir", required=True)
    s.add_argument("--target-hist", default=None, help="Y histogram CSV to fit, or 'none'")
    s.add_argument("--gamma", type=float, default=2.0)
    s.add_argument("--beta", type=float, default=0.3)
    s.add_argument("--sigma", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one phase or the full schedule")
    t.add_argument("--data-dir", required=True, nargs="+")
    t.add_argument("--phase", choices=list(PHASES) + ["all"], default="all")
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--init", default=None, help="weights to start from")
    t.add_argument("--resume", default=None, help="checkpoint directory")
    t.add_argument("--checkpoint-dir", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decompose", help="write reflectance and illumination maps")
    d.add_argument("--weights", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out-dir", required=True)
    d.set_defaults(func=cmd_decompose)

    for name, fn, helptext in (("enhance", cmd_enhance, "enhance low-light images"),
                               ("eval", cmd_eval, "PSNR/SSIM against ground truth")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--weights", required=True)
        e.add_argument("--denoise", choices=["on", "off"], default="off")
        e.add_argument("--strength", type=float, default=DenoiseConfig.base_strength)
        e.add_argument("--exponent", type=float, default=DenoiseConfig.illumination_exponent)
        e.set_defaults(func=fn)
        if name == "enhance":
            e.add_argument("--input", required=True)
            e.add_argument("--out-dir", required=True)
            e.add_argument("--save-intermediates", action="store_true")
        else:
            e.add_argument("--data-dir", required=True)
            e.add_argument("--report", required=True)
            e.add_argument("--split", choices=["all", "eval"], default="all")
            e.add_argument("--split-seed", type=int, default=0)
            e.add_argument("--bypass-adjustment", action="store_true",
                           help="use the decomposed illumination unchanged")

    h = sub.add_parser("hist", help="pooled Y-channel histogram CSV")
    h.add_argument("--input-dir", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hist)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # --help and usage errors; argparse has already printed its message
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, C.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, D.ImageFormatError, WeightsFormatError, CheckpointFormatError,
            FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
