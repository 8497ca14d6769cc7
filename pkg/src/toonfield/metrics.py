"""Evaluation metrics: PSNR against oracle-styled renders, deformation-field
error against the analytic warp, and style separation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

from .config import RunConfig
from .control import ToonifyModel, ToonifyRequest, toonify
from .numcore import derive_seed, np_generator
from .renderer import CameraPose, render_styled_oracle
from .scene import SHAPE_RADIUS, InstanceCode, SceneField, StyleOracle
from .training import oracles_from_config, sample_pose

PSNR_CAP = 99.0


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio for [0,1] images; identical pairs cap at 99 dB."""
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def silhouette(opacity: torch.Tensor) -> torch.Tensor:
    return opacity > 0.5


def near_surface_points(field: SceneField, oracle: StyleOracle, count: int, seed: int,
                        band: float = 0.1, box: float = 1.2) -> torch.Tensor:
    """Styled-space points whose styled SDF magnitude is below ``band``."""
    rng = np_generator(seed)
    chunks = []
    collected = 0
    for _ in range(200):
        pts = torch.from_numpy(rng.uniform(-box, box, size=(4096, 3))).to(field.dtype)
        d = field.sdf(oracle.warp(pts))
        keep = pts[d.abs() < band]
        if keep.shape[0]:
            chunks.append(keep)
            collected += keep.shape[0]
        if collected >= count:
            break
    if not chunks:
        raise RuntimeError("no near-surface points found; scene/oracle mismatch")
    return torch.cat(chunks)[:count]


def deformation_error(stylefield, field: SceneField, oracle: StyleOracle, w_r: torch.Tensor,
                      style_index: int, count: int, seed: int,
                      band: float = 0.1) -> dict[str, float]:
    """Mean |H(x) - (warp(x) - x)| over near-surface styled-space samples."""
    pts = near_surface_points(field, oracle, count, seed, band)
    with torch.no_grad():
        predicted = stylefield.deform(pts, w_r, style_index)
    target = oracle.deformation_target(pts)
    err = (predicted - target).norm(dim=-1).mean()
    return {"absolute": float(err), "fraction_of_radius": float(err) / SHAPE_RADIUS}


def style_separation(stylefield, w_r: torch.Tensor, points: torch.Tensor,
                     style_a: int, style_b: int) -> float:
    with torch.no_grad():
        off_a = stylefield.deform(points, w_r, style_a)
        off_b = stylefield.deform(points, w_r, style_b)
    return float((off_a - off_b).norm(dim=-1).mean())


@dataclass
class MetricsReport:
    per_style_psnr: list = field(default_factory=list)
    per_style_deformation_error: list = field(default_factory=list)
    style_separation: dict = field(default_factory=dict)
    trainable_parameters: int = 0
    total_parameters: int = 0
    holdout_pairs: int = 0
    step: int = 0
    loss_curve_summary: dict = field(default_factory=dict)

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_parameters / max(1, self.total_parameters)

    def to_json(self) -> str:
        payload = {
            "step": self.step,
            "holdout_pairs": self.holdout_pairs,
            "per_style_psnr": self.per_style_psnr,
            "per_style_deformation_error": self.per_style_deformation_error,
            "style_separation": self.style_separation,
            "trainable_parameters": self.trainable_parameters,
            "total_parameters": self.total_parameters,
            "trainable_fraction": self.trainable_fraction,
            "loss_curve_summary": self.loss_curve_summary,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"step: {self.step}", f"holdout pairs per style: {self.holdout_pairs}"]
        for i, (p, d) in enumerate(zip(self.per_style_psnr, self.per_style_deformation_error)):
            lines.append(f"style {i}: psnr={p:.2f} dB  deformation_error="
                         f"{d['absolute']:.5f} ({100 * d['fraction_of_radius']:.2f}% of radius)")
        for key, val in sorted(self.style_separation.items()):
            lines.append(f"separation {key}: {val:.5f}")
        lines.append(f"trainable parameters: {self.trainable_parameters}")
        lines.append(f"total parameters: {self.total_parameters}")
        lines.append(f"trainable fraction: {100 * self.trainable_fraction:.2f}%")
        if self.loss_curve_summary:
            lines.append(f"loss curve: {json.dumps(self.loss_curve_summary, sort_keys=True)}")
        return "\n".join(lines) + "\n"


def evaluate_model(model: ToonifyModel, num_pairs: int | None = None,
                   seed: int | None = None, deformation_points: int | None = None,
                   trainable_parameters: int | None = None,
                   total_parameters: int | None = None) -> MetricsReport:
    """Held-out evaluation: PSNR vs oracle-styled renders plus deformation error.

    Held-out instances and poses come from the eval seed stream, disjoint from
    the training data seeds by construction.
    """
    cfg = model.cfg
    num_pairs = cfg.eval.holdout_pairs if num_pairs is None else num_pairs
    seed = cfg.eval.seed if seed is None else seed
    d_points = cfg.eval.deformation_points if deformation_points is None else deformation_points
    oracles = oracles_from_config(cfg)

    holdout = []
    for j in range(num_pairs):
        code = InstanceCode.sample(derive_seed(seed, "eval-instance", j))
        pose = sample_pose(cfg, derive_seed(seed, "eval-pose", j))
        holdout.append((code, pose))

    report = MetricsReport(holdout_pairs=num_pairs, step=model.step)
    kw = dict(samples=cfg.render.samples_per_ray, alpha=cfg.scene.alpha,
              t_near=cfg.camera.t_near, t_far=cfg.camera.t_far)
    for s, oracle in enumerate(oracles):
        vals = []
        for code, pose in holdout:
            field = SceneField(code)
            target = render_styled_oracle(field, oracle, pose,
                                          cfg.render.image_resolution, **kw).rgb
            req = ToonifyRequest(code.values, s, s, tau=1.0, mix_weight=1.0, pose=pose)
            pred = toonify(model, req)
            vals.append(psnr(pred, target))
        report.per_style_psnr.append(sum(vals) / len(vals))

        errs = {"absolute": 0.0, "fraction_of_radius": 0.0}
        n_fields = min(4, len(holdout))
        for code, _ in holdout[:n_fields]:
            field = SceneField(code)
            e = deformation_error(model.stylefield, field, oracle, code.values, s,
                                  d_points // n_fields, derive_seed(seed, "defpts", s))
            errs = {k: errs[k] + e[k] / n_fields for k in errs}
        report.per_style_deformation_error.append(errs)

    probe = torch.from_numpy(
        np_generator(derive_seed(seed, "sep")).uniform(-0.8, 0.8, size=(512, 3))
    ).to(torch.float32)
    w_probe = holdout[0][0].values
    for a in range(len(oracles)):
        for b in range(a + 1, len(oracles)):
            report.style_separation[f"{a}-{b}"] = style_separation(
                model.stylefield, w_probe, probe, a, b)

    if trainable_parameters is not None:
        report.trainable_parameters = trainable_parameters
    if total_parameters is not None:
        report.total_parameters = total_parameters
    return report


def summarize_loss_log(path) -> dict:
    """First/last rows of a loss log, for the machine-readable report."""
    rows = []
    with open(path) as f:
        header = f.readline().strip().split("\t")
        for line in f:
            rows.append(line.strip().split("\t"))
    if not rows:
        return {}
    out = {"steps_logged": len(rows)}
    for label, row in (("first", rows[0]), ("last", rows[-1])):
        out[label] = {header[i]: row[i] for i in range(min(len(header), len(row)))
                      if header[i] != "wall_ms"}
    return out
