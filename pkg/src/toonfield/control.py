"""Inference facade: full toonification, degree control, and style swap."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .config import RunConfig
from .decoder import DecoderNet, StyleAdapters, mix_style
from .numcore import NumericError
from .renderer import CameraPose, render_deformed
from .stylefield import StyleFieldNet
from .training import Checkpoint, checkpoint_config, load_checkpoint
from .scene import InstanceCode, SceneField


@dataclass
class ToonifyRequest:
    w_r: torch.Tensor
    geometry_style: int
    texture_style: int
    tau: float = 1.0
    mix_weight: float = 1.0
    pose: CameraPose = None
    resolution: int | None = None

    def validate(self, num_styles: int):
        if not 0 <= self.geometry_style < num_styles:
            raise NumericError(f"geometry style {self.geometry_style} out of range")
        if not 0 <= self.texture_style < num_styles:
            raise NumericError(f"texture style {self.texture_style} out of range")
        if not 0.0 <= self.tau <= 1.0:
            raise NumericError("tau must lie in [0, 1]")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise NumericError("mix weight must lie in [0, 1]")


class ToonifyModel:
    """Read-only bundle of the trained pieces, reconstructed from a checkpoint."""

    def __init__(self, cfg: RunConfig, stylefield: StyleFieldNet,
                 adapters: StyleAdapters, decoder: DecoderNet, step: int = 0):
        self.cfg = cfg
        self.stylefield = stylefield
        self.adapters = adapters
        self.decoder = decoder
        self.step = step
        decoder.freeze()
        for p in stylefield.parameters():
            p.requires_grad_(False)
        for p in adapters.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ToonifyModel":
        stylefield = StyleFieldNet(
            cfg.num_styles, embed_dim=cfg.stylefield.embed_dim,
            hidden=cfg.stylefield.hidden, layers=cfg.stylefield.layers,
            mapping_width=cfg.stylefield.mapping_width,
            mapping_layers=cfg.stylefield.mapping_layers,
            omega_first=cfg.stylefield.omega_first,
            backbone=cfg.stylefield.backbone,
            condition_on_instance=cfg.stylefield.condition_on_instance,
            seed=cfg.stylefield.seed)
        adapters = StyleAdapters(cfg.stylefield.embed_dim, cfg.decoder.adapter_width,
                                 seed=cfg.decoder.seed + 1)
        decoder = DecoderNet(cfg.scene.feature_dim, cfg.decoder.channels,
                             seed=cfg.decoder.seed)
        return cls(cfg, stylefield, adapters, decoder)

    @classmethod
    def from_checkpoint(cls, path, warn_untrained: bool = True) -> "ToonifyModel":
        ckpt = load_checkpoint(path)
        if ckpt.kind != "toonify":
            raise NumericError(f"{path}: not a toonification checkpoint (kind {ckpt.kind!r})")
        cfg = checkpoint_config(ckpt)
        model = cls.from_config(cfg)
        for name, p in model.stylefield.trainable_tensors().items():
            p.data.copy_(ckpt.tensors[name])
        for name, p in model.adapters.trainable_tensors().items():
            p.data.copy_(ckpt.tensors[name])
        for name, p in model.decoder.trainable_tensors().items():
            p.data.copy_(ckpt.tensors[name])
        model.step = ckpt.step
        if warn_untrained and ckpt.step == 0:
            warnings.warn(f"{path}: checkpoint has seen no training steps")
        return model

    def field_for(self, w_r: torch.Tensor) -> SceneField:
        return SceneField(InstanceCode(w_r))


def toonify_full(model: ToonifyModel, req: ToonifyRequest):
    """Toonified RGB image plus the geometry opacity mask.

    Geometry comes from the deformed render with (geometry_style, tau);
    texture from decoding with (texture_style, mix_weight). The opacity mask
    never depends on the texture half of the request.
    """
    cfg = model.cfg
    req.validate(cfg.num_styles)
    res = req.resolution if req.resolution is not None else cfg.render.feature_resolution
    pose = req.pose if req.pose is not None else CameraPose(0.0, 0.0, cfg.camera.radius,
                                                            cfg.camera.fov)
    field = model.field_for(req.w_r)
    with torch.no_grad():
        feat = render_deformed(field, model.stylefield, req.w_r, req.geometry_style,
                               req.tau, pose, res, samples=cfg.render.samples_per_ray,
                               alpha=cfg.scene.alpha, t_near=cfg.camera.t_near,
                               t_far=cfg.camera.t_far)
        z_s = model.stylefield.style_embeddings[req.texture_style]
        styles = [mix_style(req.w_r, z_s, model.adapters, site, req.mix_weight)
                  for site in (0, 1)]
        rgb = model.decoder(feat.values.permute(2, 0, 1)[None],
                            [s[None] for s in styles])[0].permute(1, 2, 0)
    return rgb, feat.opacity


def toonify(model: ToonifyModel, req: ToonifyRequest) -> torch.Tensor:
    """Toonified RGB image at twice the feature resolution."""
    rgb, _ = toonify_full(model, req)
    return rgb


def degree_sweep(model: ToonifyModel, w_r: torch.Tensor, style: int, steps: int,
                 pose: CameraPose) -> list[torch.Tensor]:
    """Images at (tau_i, w_i) = (i/(steps-1), i/(steps-1))."""
    if steps < 2:
        raise NumericError("degree_sweep needs at least 2 steps")
    out = []
    for i in range(steps):
        level = i / (steps - 1)
        req = ToonifyRequest(w_r, style, style, tau=level, mix_weight=level, pose=pose)
        out.append(toonify(model, req))
    return out
