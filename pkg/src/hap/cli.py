"""``hap`` command line: one subcommand per pipeline stage plus ``run``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys

from . import io
from .errors import ExternalToolError, HapError, InvalidArgument, StageFailure

log = logging.getLogger("hap")

EXIT_OK, EXIT_INPUT, EXIT_STAGE, EXIT_TOOL = 0, 2, 3, 4


def _cmd_lift(a):
    from .camera import unproject

    dm = io.load_depth_map(a.depth, a.mask, a.camera)
    pc = unproject(dm, io.read_png(a.rgb) if a.rgb else None)
    io.write_point_cloud(a.out, pc)
    log.info("wrote %d points to %s", len(pc), a.out)


def _cmd_pose(a):
    from .body import LBSBodyModel, forward

    model = LBSBodyModel.load(a.model)
    io.write_mesh(a.out, forward(model, io.read_params(a.params))[0])


def _rectify_config(path):
    from .pipeline import tomllib
    from .rectify import RectifyConfig

    if path is None:
        return RectifyConfig()
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise InvalidArgument(f"{path}: config does not parse ({e})") from None
    d = d.get("rectify", d)
    try:
        return RectifyConfig(**d)
    except TypeError as e:
        raise InvalidArgument(f"{path}: {e}") from None


def _cmd_rectify(a):
    from .body import LBSBodyModel
    from .rectify import TERM_NAMES, rectify

    model = LBSBodyModel.load(a.model)
    cfg = _rectify_config(a.config)
    if a.iters is not None:
        cfg.iters = a.iters
    mask = io.read_mask(a.mask) if a.mask else None
    writer, fh = None, None
    if a.log:
        fh = open(a.log, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", *TERM_NAMES])

    def cb(it, total, values):
        if writer is not None:
            writer.writerow([it, repr(total), *(repr(values[k]) for k in TERM_NAMES)])

    try:
        params = rectify(model, io.read_params(a.init), io.read_point_cloud(a.partial), io.read_camera(a.camera),
                         mask, cfg, callback=cb)
    finally:
        if fh is not None:
            fh.close()
    io.write_params(a.out, params)


def _cmd_train_denoiser(a):
    from .diffusion import CompactDenoiser, NoiseSchedule, save_weights, train_denoiser
    from .pipeline import load_training_set

    samples = load_training_set(a.data, a.points, a.n_p, a.n_s, a.seed)
    sched = NoiseSchedule.linear(a.T)
    net = CompactDenoiser(a.T, a.width, seed=a.seed)
    net.configure_optimizer(a.optimizer, a.lr)
    losses = train_denoiser(net, sched, samples, a.steps, a.batch, a.seed,
                            callback=lambda s, v: s % 100 == 0 and log.info("step %d loss %.5f", s, v))
    log.info("final loss %.5f", losses[-1] if losses else float("nan"))
    save_weights(a.out, net, sched)


def _cmd_train_refiner(a):
    from .diffusion import save_weights
    from .pipeline import load_training_set
    from .refine import DisplacementNet, RefineConfig, train_refiner

    cfg = RefineConfig(alpha=a.alpha, k_s=a.k_s)
    samples = load_training_set(a.data, 0, a.n_p, a.n_s, a.seed, with_coarse=True)
    net = DisplacementNet(a.width, seed=a.seed)
    train_refiner(net, samples, a.steps, cfg, a.lr, a.seed,
                  callback=lambda s, v: s % 100 == 0 and log.info("step %d loss %.5f", s, v))
    save_weights(a.out, net)


def _cmd_generate(a):
    from .diffusion import NoiseSchedule, generate, load_weights

    net, sched = load_weights(a.denoiser)
    sched = sched or NoiseSchedule.linear(net.T)
    pc = generate(net, sched, io.read_point_cloud(a.partial), io.read_mesh(a.body), a.n, a.seed,
                  a.n_p, a.n_s, a.variance)
    io.write_point_cloud(a.out, pc)


def _cmd_refine(a):
    from .refine import RefineConfig, load_refiner, refine

    cfg = RefineConfig(alpha=a.alpha, k_s=a.k_s)
    net = load_refiner(a.weights) if a.mode == "learned" and a.weights else None
    partial = io.read_point_cloud(a.partial) if a.partial else None
    body = io.read_mesh(a.body) if a.body else None
    io.write_point_cloud(a.out, refine(io.read_point_cloud(a.coarse), partial, body, cfg, net, a.mode, a.seed))


def _cmd_replace(a):
    from .refine import RefineConfig, depth_replace

    res = depth_replace(io.read_point_cloud(a.inp), io.read_point_cloud(a.partial),
                        RefineConfig(k_replace=a.k, r_replace=a.radius))
    log.info("s1=%d s2=%d s3=%d -> %d points", len(res.s1), len(res.s2), len(res.s3), len(res.cloud))
    io.write_point_cloud(a.out, res.cloud)


def _cmd_eval(a):
    import json

    from .evaluation import evaluate

    gt = io.read_mesh(a.gt)
    data = io.read_ply(a.rec) if not a.rec.lower().endswith(".obj") else {"face": True}
    rec = io.read_mesh(a.rec) if "face" in data else io.read_point_cloud(a.rec)
    report = evaluate(rec, gt, a.samples, a.seed, a.res, not a.no_normalize)
    if a.json:
        report.write(a.json)
    d = report.to_dict()
    print(json.dumps({k: d[k] for k in ("cd", "p2f", "normal", "normalized")}))


def _cmd_run(a):
    from .pipeline import PipelineConfig, run

    cfg = PipelineConfig.load(a.config)
    if a.out_dir:
        cfg.out_dir = a.out_dir
    if a.seed_given:
        cfg.seed = a.seed
    r = run(cfg)
    log.info("executed stages: %s", ", ".join(r.executed) or "(none, all up to date)")


def _cmd_synth(a):
    from .pipeline import write_synthetic_dataset, write_synthetic_scene

    if a.dataset:
        names = write_synthetic_dataset(a.out, a.dataset, a.seed, a.res)
        log.info("wrote %d training triples to %s", len(names), a.out)
    else:
        print(write_synthetic_scene(a.out, a.seed, a.res))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root random seed")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p = argparse.ArgumentParser(prog="hap", parents=[common],
                                description="Single-view human point-cloud reconstruction tools.")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.set_defaults(func=fn)
        return s

    s = cmd("lift", _cmd_lift, "unproject a masked depth map to a partial cloud")
    s.add_argument("--depth", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--camera")
    s.add_argument("--rgb")
    s.add_argument("--out", required=True)

    s = cmd("pose", _cmd_pose, "pose the body model and write its mesh")
    s.add_argument("--model", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)

    s = cmd("rectify", _cmd_rectify, "fit body-model parameters to the partial cloud")
    for k in ("--model", "--init", "--partial", "--camera", "--out"):
        s.add_argument(k, required=True)
    s.add_argument("--mask")
    s.add_argument("--config")
    s.add_argument("--iters", type=int)
    s.add_argument("--log", help="write the per-iteration loss breakdown as CSV")

    s = cmd("train-denoiser", _cmd_train_denoiser, "train the conditional point denoiser")
    s.add_argument("--data", required=True)
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--points", type=int, default=2048)
    s.add_argument("--n-p", type=int, default=2048)
    s.add_argument("--n-s", type=int, default=1024)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--out", required=True)

    s = cmd("train-refiner", _cmd_train_refiner, "train the displacement predictor on coarse clouds")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--n-p", type=int, default=2048)
    s.add_argument("--n-s", type=int, default=2048)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--k-s", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--out", required=True)

    s = cmd("generate", _cmd_generate, "sample a coarse cloud from a trained denoiser")
    for k in ("--denoiser", "--partial", "--body", "--out"):
        s.add_argument(k, required=True)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--n-p", type=int, default=8192)
    s.add_argument("--n-s", type=int, default=1024)
    s.add_argument("--variance", choices=["gamma", "posterior"], default="gamma")

    s = cmd("refine", _cmd_refine, "displace the coarse cloud toward the surface")
    s.add_argument("--coarse", required=True)
    s.add_argument("--partial")
    s.add_argument("--body")
    s.add_argument("--mode", choices=["learned", "closed-form"], default="closed-form")
    s.add_argument("--weights")
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--k-s", type=int, default=16)
    s.add_argument("--out", required=True)

    s = cmd("replace", _cmd_replace, "swap front-facing generated points for depth points")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--partial", required=True)
    s.add_argument("--k", type=int, default=30)
    s.add_argument("--radius", type=float)
    s.add_argument("--out", required=True)

    s = cmd("eval", _cmd_eval, "compare a reconstruction with a ground-truth mesh")
    s.add_argument("--rec", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--res", type=int, default=256)
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--json")

    s = cmd("run", _cmd_run, "run or resume the full pipeline from a TOML config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")

    s = cmd("synth", _cmd_synth, "write a synthetic mannequin scene (or training set)")
    s.add_argument("--out", required=True)
    s.add_argument("--res", type=int, default=256)
    s.add_argument("--dataset", type=int, default=0, help="write this many training triples instead")
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    a.seed_given = hasattr(a, "seed")
    if not a.seed_given:
        a.seed = 0
    level = getattr(a, "log_level", "INFO")
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    try:
        a.func(a)
    except StageFailure as e:
        log.error("%s", e)
        if isinstance(e.cause, ExternalToolError):
            return EXIT_TOOL
        return EXIT_INPUT if isinstance(e.cause, (InvalidArgument, FileNotFoundError)) else EXIT_STAGE
    except ExternalToolError as e:
        log.error("%s\n%s", e, e.stderr)
        return EXIT_TOOL
    except (InvalidArgument, FileNotFoundError, IsADirectoryError) as e:
        log.error("invalid input: %s", e)
        return EXIT_INPUT
    except HapError as e:
        log.error("%s", e)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
