"""Operator surface: data synthesis, training, rendering, sweeps, evaluation,
and gradient checks.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure, 4 I/O error.
Every command prints its fully resolved configuration before acting, so any
run is reproducible from its log header.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import torch

from . import ppm
from .config import ConfigError, load_config
from .control import ToonifyModel, ToonifyRequest, degree_sweep, toonify
from .metrics import evaluate_model, summarize_loss_log
from .numcore import NumericError, parameter_count
from .renderer import CameraPose
from .scene import sample_instance_code
from .training import (CheckpointError, ToonifyTrainer, TrainingDiverged,
                       load_checkpoint, load_dataset, pretrain_decoder,
                       synthesize_dataset)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _echo_config(cfg) -> None:
    print("# resolved config")
    print(cfg.echo())
    print(f"# config digest: {cfg.digest()}")


def cmd_synth_data(args) -> int:
    cfg = load_config(args.config)
    _echo_config(cfg)
    manifest = synthesize_dataset(cfg, args.out, seed=args.seed)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_pretrain_decoder(args) -> int:
    cfg = load_config(args.config)
    _echo_config(cfg)
    log_lines: list[str] = []
    t0 = time.perf_counter()
    _, report = pretrain_decoder(cfg, out_path=args.out, resume=args.resume,
                                 steps=args.steps, log_lines=log_lines)
    wall = time.perf_counter() - t0
    if args.log is not None:
        Path(args.log).write_text("\n".join(log_lines) + "\n")
    print(f"pretrain finished: steps={report['steps']} "
          f"holdout_mse={report['holdout_mse']:.6f} wall={wall:.1f}s")
    if report["holdout_mse"] >= 5e-3:
        print("warning: held-out reconstruction MSE above the 5e-3 convergence bar",
              file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _echo_config(cfg)
    if not Path(args.decoder).exists():
        print(f"error: decoder checkpoint {args.decoder} not found; run "
              f"'toonfield pretrain-decoder --config {args.config} --out {args.decoder}' first",
              file=sys.stderr)
        return EXIT_USAGE
    dataset = load_dataset(args.data)
    decoder_ckpt = load_checkpoint(args.decoder, expect_digest=cfg.digest(),
                                   force=args.force)
    if decoder_ckpt.kind != "pretrain":
        print(f"error: {args.decoder} is not a decoder pretrain checkpoint",
              file=sys.stderr)
        return EXIT_USAGE
    from .decoder import DecoderNet
    decoder = DecoderNet(cfg.scene.feature_dim, cfg.decoder.channels, seed=cfg.decoder.seed)
    for name, p in decoder.trainable_tensors().items():
        p.data.copy_(decoder_ckpt.tensors[name])
    trainer = ToonifyTrainer(cfg, dataset, decoder, quiet=args.quiet)
    if args.resume is not None:
        trainer.load_state(load_checkpoint(args.resume, expect_digest=cfg.digest(),
                                           force=args.force))
    trainer.run(args.out, steps=args.steps)
    print(f"training finished at step {trainer.step}; outputs in {args.out}")
    return EXIT_OK


def _model_from(args) -> ToonifyModel:
    model = ToonifyModel.from_checkpoint(args.checkpoint)
    _echo_config(model.cfg)
    return model


def cmd_render(args) -> int:
    model = _model_from(args)
    tex = args.tex_style if args.tex_style is not None else args.geom_style
    w_r = sample_instance_code(args.instance_seed)
    pose = CameraPose(args.azimuth, args.elevation, model.cfg.camera.radius,
                      model.cfg.camera.fov)
    req = ToonifyRequest(w_r, args.geom_style, tex, tau=args.tau,
                         mix_weight=args.mixw, pose=pose, resolution=args.resolution)
    print(f"request: instance_seed={args.instance_seed} geometry_style={req.geometry_style} "
          f"texture_style={req.texture_style} tau={req.tau} mix_weight={req.mix_weight} "
          f"azimuth={pose.azimuth} elevation={pose.elevation}")
    image = toonify(model, req)
    ppm.encode_image(image, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = _model_from(args)
    w_r = sample_instance_code(args.instance_seed)
    pose = CameraPose(args.azimuth, args.elevation, model.cfg.camera.radius,
                      model.cfg.camera.fov)
    images = degree_sweep(model, w_r, args.style, args.steps, pose)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        ppm.encode_image(img, out_dir / f"sweep_{i:03d}.ppm")
    print(f"wrote {len(images)} images to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _model_from(args)
    trainable = parameter_count(dict(model.stylefield.named_parameters())) \
        + parameter_count(dict(model.adapters.named_parameters()))
    total = trainable + parameter_count(dict(model.decoder.named_parameters()))
    report = evaluate_model(model, num_pairs=args.pairs, seed=args.seed,
                            trainable_parameters=trainable, total_parameters=total)
    if args.train_log is not None:
        report.loss_curve_summary = summarize_loss_log(args.train_log)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "report.json").write_text(report.to_json())
    print(report.to_text())
    print(f"wrote {out_dir / 'report.txt'} and {out_dir / 'report.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite
    t0 = time.perf_counter()
    report = run_gradient_suite(seed=args.seed, rounds=args.rounds)
    for line in report.lines():
        print(line)
    wall = time.perf_counter() - t0
    print(f"gradcheck: {len(report.entries)} checks, worst rel err {report.worst:.3e}, "
          f"{wall:.1f}s")
    if not report.passed:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toonfield",
                                     description="geometry/texture-decomposed 3D toonification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a paired training dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("pretrain-decoder", help="stage 0: fit and freeze the decoder")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log", default=None)
    p.set_defaults(fn=cmd_pretrain_decoder)

    p = sub.add_parser("train", help="stage 1: train deformation field + adapters")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="toonify one instance to a PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instance-seed", type=int, required=True)
    p.add_argument("--geom-style", type=int, required=True)
    p.add_argument("--tex-style", type=int, default=None)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--mixw", type=float, default=1.0)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("sweep", help="style degree sweep image sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instance-seed", type=int, required=True)
    p.add_argument("--style", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="PSNR + deformation-error report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-log", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--rounds", type=int, default=3)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        if getattr(args, "tau", None) is not None and args.command == "render":
            if not 0.0 <= args.tau <= 1.0:
                print("error: --tau must lie in [0, 1] for inference", file=sys.stderr)
                return EXIT_USAGE
            if not 0.0 <= args.mixw <= 1.0:
                print("error: --mixw must lie in [0, 1]", file=sys.stderr)
                return EXIT_USAGE
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        msg = str(e)
        print(f"checkpoint error: {msg}", file=sys.stderr)
        return EXIT_USAGE if "digest" in msg else EXIT_IO
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
