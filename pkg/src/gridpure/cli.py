"""Command-line interface.

Exit codes: 0 ok, 1 bad flags or inputs, 2 denoiser backend failure,
3 file I/O failure, 4 gradient unavailable for the chosen backend.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from .corpus import make_corpus, write_corpus
from .diffusion import AffineDenoiser, BackendError, GradientUnavailableError, build_schedule, diffusion_loss
from .imagecore import ImageError, RngState, load_image, save_image
from .metrics import compare, mse, psnr, ssim
from .pipeline import PipelineError, load_config, make_backend, run_pipeline
from .purify import PurifyConfig, diffpure, gridpure
from .transforms import DEFAULT_EOT, gaussian_blur, jpeg_roundtrip

EXIT_OK, EXIT_USAGE, EXIT_BACKEND, EXIT_IO, EXIT_GRADIENT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, *, output: bool = True, denoiser: bool = True) -> None:
    p.add_argument("--input", required=True, help="input PNG")
    if output:
        p.add_argument("--output", required=True, help="output PNG")
    p.add_argument("--seed", type=int, default=0)
    if denoiser:
        p.add_argument(
            "--denoiser",
            help="oracle:<dir> | affine:<file.npz> | external:<command>",
        )
        p.add_argument("--schedule-steps", type=int, default=1000)
        p.add_argument("--timeout", type=float, default=60.0, help="external denoiser seconds per frame")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridpure", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("purify", help="DiffPure or GrIDPure one image")
    _common(p)
    p.add_argument("--method", choices=["gridpure", "diffpure"], default="gridpure")
    p.add_argument("--iters", type=int, default=10, help="GrIDPure iterations M")
    p.add_argument("--steps", type=int, default=10, help="forward noise timestep per pass")
    p.add_argument("--substeps", type=int, help="DDIM steps (default: --steps)")
    p.add_argument("--gamma", type=float, default=0.1, help="blend weight on the previous iterate")
    p.add_argument("--grid-size", type=int, default=256)
    p.add_argument("--no-corner", action="store_true", help="skip the corner-composite tile")
    p.add_argument("--jobs", type=int, default=1, help="tiles purified concurrently")
    p.add_argument("--reference", help="clean PNG to report metrics against")

    p = sub.add_parser("attack", help="add a protective perturbation")
    p.add_argument("--input", required=True, nargs="+", help="input PNG(s); several for antidb")
    p.add_argument("--output", required=True, help="output PNG, or a directory for antidb")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--denoiser", help="oracle:<dir> | affine:<file.npz> | external:<command>")
    p.add_argument("--schedule-steps", type=int, default=1000)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--method", choices=["advdm", "eot", "adaptive", "antidb"], default="advdm")
    p.add_argument("--budget", type=float, default=8 / 255)
    p.add_argument("--step", type=float, default=2 / 255)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--mc", type=int, default=4, help="Monte Carlo draws per step")
    p.add_argument("--p", type=float, default=0.2, help="adaptive: chained-gradient probability")
    p.add_argument("--chain-t", type=int, default=100, help="adaptive: purification timestep")
    p.add_argument("--chain-substeps", type=int, default=2, help="adaptive: DDIM steps in the chain")
    p.add_argument("--transforms", nargs="+", default=list(DEFAULT_EOT), help="eot: transform specs")
    p.add_argument("--t-range", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--random-start", action="store_true")
    p.add_argument("--alternations", type=int, default=10, help="antidb: outer iterations")
    p.add_argument("--inner-steps", type=int, default=20, help="antidb: surrogate descent steps")
    p.add_argument("--lr", type=float, default=0.2, help="antidb: surrogate learning rate")
    p.add_argument("--surrogate-out", help="antidb: save the final surrogate (.npz)")
    p.add_argument("--eval-samples", type=int, default=256)

    p = sub.add_parser("transform", help="blur or JPEG an image")
    _common(p, denoiser=False)
    p.add_argument("--op", choices=["blur", "jpeg"], required=True)
    p.add_argument("--kernel", type=int, default=7)
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--quality", type=int, default=40)

    p = sub.add_parser("eval", help="image metrics and the Monte Carlo diffusion loss")
    _common(p, output=False)
    p.add_argument("--reference", help="reference PNG for mse/psnr/ssim")
    p.add_argument("--metric", choices=["mse", "psnr", "ssim", "eps-loss", "all"], default="all")
    p.add_argument("--samples", type=int, default=1024)

    p = sub.add_parser("pipeline", help="run an experiment matrix from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, help="images processed concurrently (env GRIDPURE_JOBS wins)")

    p = sub.add_parser("corpus", help="write a synthetic oracle corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--siblings", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _backend(args):
    if not args.denoiser:
        raise UsageError("--denoiser is required")
    try:
        return make_backend(args.denoiser, timeout=args.timeout)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_purify(args) -> int:
    x = load_image(args.input)
    sched = build_schedule(args.schedule_steps)
    backend = _backend(args)
    rng = RngState(args.seed)
    substeps = args.substeps or args.steps
    try:
        if args.method == "diffpure":
            out = diffpure(x, args.steps, substeps, backend, sched, rng)
        else:
            cfg = PurifyConfig(
                t_pure=args.steps,
                substeps=substeps,
                iterations=args.iters,
                gamma=args.gamma,
                grid_size=args.grid_size,
                with_corner=not args.no_corner,
                seed=args.seed,
            )
            out = gridpure(x, cfg, backend, sched, rng, workers=args.jobs)
    finally:
        backend.close()
    save_image(out, args.output)
    print(f"wrote {args.output}")
    if args.reference:
        ref = load_image(args.reference)
        stored = load_image(args.output)
        report = compare(stored, ref)
        print(f"mse {report.mse:.6g}\npsnr {report.psnr:.4f}\nssim {report.ssim:.6f}")
    return EXIT_OK


def cmd_attack(args) -> int:
    sched = build_schedule(args.schedule_steps)
    cfg = attack_mod.AttackConfig(
        budget=args.budget,
        step=args.step,
        n_steps=args.steps,
        n_mc=args.mc,
        eot_transforms=tuple(args.transforms),
        adaptive_p=args.p,
        purify_chain=(args.chain_t, args.chain_substeps),
        seed=args.seed,
        t_range=tuple(args.t_range) if args.t_range else None,
        random_start=args.random_start,
    )
    rng = RngState(args.seed)
    images = [load_image(p) for p in args.input]

    if args.method == "antidb":
        start = None
        if args.denoiser:
            start = _backend(args)
            if not isinstance(start, AffineDenoiser):
                raise GradientUnavailableError("antidb trains an affine surrogate; use --denoiser affine:<file>")
        outs, surrogate = attack_mod.antidb_attack(
            images, cfg, args.inner_steps, args.alternations, sched, rng, backend=start, lr=args.lr
        )
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        for path, x, adv in zip(args.input, images, outs):
            save_image(adv, out_dir / Path(path).name)
            print(f"{Path(path).name} linf {np.abs(adv - x).max():.6f}")
        if args.surrogate_out:
            surrogate.save(args.surrogate_out)
        eval_rng = rng.child("eval")
        t_range = surrogate.timesteps[0], surrogate.timesteps[-1]

        def surrogate_loss(img):
            return diffusion_loss(surrogate, img, args.eval_samples, eval_rng, sched, t_range=t_range).value

        before = np.mean([surrogate_loss(x) for x in images])
        after = np.mean([surrogate_loss(a) for a in outs])
        print(f"surrogate_loss_clean {before:.6g}\nsurrogate_loss_attacked {after:.6g}")
        return EXIT_OK

    if len(images) != 1:
        raise UsageError(f"--method {args.method} takes exactly one --input")
    x = images[0]
    backend = _backend(args)
    trace = attack_mod.AttackTrace()
    fn = {
        "advdm": attack_mod.pgd_attack,
        "eot": attack_mod.eot_attack,
        "adaptive": attack_mod.adaptive_attack,
    }[args.method]
    try:
        adv = fn(x, cfg, backend, sched, rng, trace=trace)
        save_image(adv, args.output)
        stored = load_image(args.output)
        eval_rng = rng.child("eval")
        before = diffusion_loss(backend, x, args.eval_samples, eval_rng, sched).value
        after = diffusion_loss(backend, stored, args.eval_samples, eval_rng, sched).value
    finally:
        backend.close()
    print(f"wrote {args.output}")
    print(f"loss_clean {before:.6g}\nloss_attacked {after:.6g}\nloss_increase {after - before:.6g}")
    print(f"linf {np.abs(stored - x).max():.6f}")
    if args.method == "adaptive":
        print(f"chained_steps {trace.chained_steps}/{trace.steps}")
    return EXIT_OK


def cmd_transform(args) -> int:
    x = load_image(args.input)
    if args.op == "blur":
        out = gaussian_blur(x, args.kernel, args.sigma)
    else:
        out = jpeg_roundtrip(x, args.quality)
    save_image(out, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    x = load_image(args.input)
    wanted = ["mse", "psnr", "ssim", "eps-loss"] if args.metric == "all" else [args.metric]
    if args.metric == "all" and not args.denoiser:
        wanted.remove("eps-loss")
    ref = None
    if any(m != "eps-loss" for m in wanted):
        if not args.reference:
            raise UsageError("--reference is required for mse/psnr/ssim")
        ref = load_image(args.reference)
        if ref.shape != x.shape:
            raise UsageError(f"shape mismatch: {x.shape} vs {ref.shape}")
    for metric in wanted:
        if metric == "eps-loss":
            backend = _backend(args)
            try:
                sched = build_schedule(args.schedule_steps)
                est = diffusion_loss(backend, x, args.samples, RngState(args.seed), sched)
            finally:
                backend.close()
            print(f"eps-loss {est.value:.6g} samples {est.num_samples} seed {args.seed} stderr {est.std_error:.3g}")
        else:
            value = {"mse": mse, "psnr": psnr, "ssim": ssim}[metric](x, ref)
            print(f"{metric} {value:.6f}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    result = run_pipeline(cfg, jobs=args.jobs)
    print(f"report {result.report_path} rows {len(result.rows)} attacked {len(result.attacked)} skipped {result.skipped}")
    return EXIT_OK


def cmd_corpus(args) -> int:
    corpus = make_corpus(n_images=args.n, size=args.size, siblings=args.siblings, seed=args.seed)
    ds, cl = write_corpus(corpus, args.output)
    print(f"dataset {ds} ({len(corpus.dataset)} images)\nclean {cl} ({len(corpus.clean)} images)")
    return EXIT_OK


COMMANDS = {
    "purify": cmd_purify,
    "attack": cmd_attack,
    "transform": cmd_transform,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "corpus": cmd_corpus,
}


def _classify(exc: BaseException) -> int:
    if isinstance(exc, PipelineError):
        return _classify(exc.cause)
    if isinstance(exc, GradientUnavailableError):
        return EXIT_GRADIENT
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    if isinstance(exc, (OSError, ImageError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, GradientUnavailableError, BackendError, OSError, ImageError, PipelineError, ValueError) as exc:
        print(f"gridpure {args.command}: {exc}", file=sys.stderr)
        return _classify(exc)


if __name__ == "__main__":
    sys.exit(main())
