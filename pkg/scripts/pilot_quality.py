#!/usr/bin/env python3
"""Calibration pilot: decoder pretrain trajectory + short training run with
periodic held-out metrics. Writes progress to stdout; used to validate the
default configuration before committing to full-length runs."""

import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import toonfield as tf
from toonfield.control import ToonifyModel
from toonfield.decoder import DecoderNet
from toonfield.metrics import evaluate_model
from toonfield.training import ToonifyTrainer, holdout_mse, load_dataset, pretrain_decoder, _pretrain_pairs

WORK = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/pilot")
WORK.mkdir(parents=True, exist_ok=True)

cfg = tf.default_config()
cfg.train.compile = True

t0 = time.time()
if not (WORK / "data" / "manifest.txt").exists():
    tf.synthesize_dataset(cfg, WORK / "data")
print(f"[pilot] dataset ready in {time.time()-t0:.0f}s", flush=True)
ds = load_dataset(WORK / "data")
print(f"[pilot] {len(ds)} samples", flush=True)

t0 = time.time()
pre_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600
dec, report = pretrain_decoder(cfg, out_path=WORK / "decoder.dt3d", steps=pre_steps)
print(f"[pilot] pretrain {pre_steps} steps: holdout_mse={report['holdout_mse']:.5f} "
      f"({time.time()-t0:.0f}s)", flush=True)

trainer = ToonifyTrainer(cfg, ds, dec)
train_steps = int(sys.argv[3]) if len(sys.argv) > 3 else 600
t0 = time.time()
while trainer.step < train_steps:
    r = trainer.train_step()
    if r.step % 25 == 0:
        print(f"[pilot] {r.log_row()}", flush=True)
    if (r.step + 1) % 200 == 0 or r.step + 1 == train_steps:
        trainer.save(WORK / "model.dt3d")
        model = ToonifyModel.from_checkpoint(WORK / "model.dt3d", warn_untrained=False)
        rep = evaluate_model(model, num_pairs=4, deformation_points=512)
        print(f"[pilot] step {r.step+1}: psnr={['%.2f' % p for p in rep.per_style_psnr]} "
              f"deferr={['%.4f' % d['absolute'] for d in rep.per_style_deformation_error]} "
              f"sep={rep.style_separation} wall={time.time()-t0:.0f}s", flush=True)
print("[pilot] done", flush=True)
