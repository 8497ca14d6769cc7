"""Frozen upsampling decoder and the adaptive style mixing path.

The decoder turns a low-resolution feature map into RGB at twice the
resolution: one nearest-neighbor upsample block and one plain block, each
3x3 conv -> AdaIN -> leaky ReLU, then a 1x1 conv with sigmoid. Per-block
affine transforms turn a 64-d style vector into AdaIN scale/shift. After
pretraining the decoder is frozen; retexturing happens purely by blending the
instance code with adapted style embeddings before those affines.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .numcore import NumericError, checksum, generator

ADAIN_EPS = 1e-5
NUM_SITES = 2


def _adain_raw(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), unbiased=False, keepdim=True)
    standardized = (features - mean) * torch.rsqrt(var + ADAIN_EPS)
    return gamma[..., None, None] * standardized + beta[..., None, None]


def _modulate_raw(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.leaky_relu(_adain_raw(features, gamma, beta), 0.2)


_compiled_modulate = None


def _get_modulate(compile_mode: bool):
    global _compiled_modulate
    if not compile_mode:
        return _modulate_raw
    if _compiled_modulate is None:
        _compiled_modulate = torch.compile(_modulate_raw, dynamic=False)
    return _compiled_modulate


def adain(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel standardization over H x W, then scale/shift.

    ``features``: (B, C, H, W) or (C, H, W); gamma/beta broadcast over the
    spatial dims.
    """
    squeeze = features.dim() == 3
    if squeeze:
        features = features[None]
        gamma = gamma[None] if gamma.dim() == 1 else gamma
        beta = beta[None] if beta.dim() == 1 else beta
    if features.shape[1] != gamma.shape[-1]:
        raise NumericError("adain channel mismatch")
    out = _adain_raw(features, gamma, beta)
    return out[0] if squeeze else out


class DecoderNet(nn.Module):
    """Style-modulated 2x upsampler from feature maps to RGB."""

    def __init__(self, feature_dim: int = 8, channels: int = 384, style_dim: int = 64,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.feature_dim = feature_dim
        self.channels = channels
        self.style_dim = style_dim
        self.compile_modulate = False  # fuse adain+lrelu during training runs
        g = generator(seed)

        def init_conv(conv: nn.Conv2d, gain: float = 1.0):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = gain * fan_in ** -0.5
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=g, dtype=dtype) * 2 - 1) * bound)
                conv.bias.zero_()

        self.conv1 = nn.Conv2d(feature_dim, channels, 3, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        self.to_rgb = nn.Conv2d(channels, 3, 1, dtype=dtype)
        for conv in (self.conv1, self.conv2, self.to_rgb):
            init_conv(conv)

        # Affine style transforms: gamma starts at 1, beta at 0.
        self.affines = nn.ModuleList()
        for _ in range(NUM_SITES):
            aff = nn.Linear(style_dim, 2 * channels, dtype=dtype)
            with torch.no_grad():
                aff.weight.copy_((torch.rand(2 * channels, style_dim, generator=g, dtype=dtype) * 2 - 1)
                                 * 0.2 * style_dim ** -0.5)
                aff.bias.zero_()
                aff.bias[:channels] = 1.0
            self.affines.append(aff)

    def style_to_adain(self, site: int, style: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.affines[site](style)
        return out[..., :self.channels], out[..., self.channels:]

    def forward(self, features: torch.Tensor, styles: list[torch.Tensor]) -> torch.Tensor:
        """``features``: (B, feature_dim, H, W); one style vector per site."""
        if features.shape[1] != self.feature_dim:
            raise NumericError("decoder feature channel mismatch")
        modulate = _get_modulate(self.compile_modulate)
        x = F.interpolate(features, scale_factor=2, mode="nearest")
        x = self.conv1(x)
        g1, b1 = self.style_to_adain(0, styles[0])
        x = modulate(x, g1, b1)
        x = self.conv2(x)
        g2, b2 = self.style_to_adain(1, styles[1])
        x = modulate(x, g2, b2)
        return torch.sigmoid(self.to_rgb(x))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)

    def parameter_checksum(self) -> str:
        return checksum(dict(self.named_parameters()))

    def trainable_tensors(self, prefix: str = "decoder") -> dict[str, torch.Tensor]:
        return {f"{prefix}/{name}": p for name, p in self.named_parameters()}


class StyleAdapters(nn.Module):
    """One 2-layer MLP per AdaIN site, adapting a style embedding to style space."""

    def __init__(self, embed_dim: int = 32, width: int = 64, style_dim: int = 64,
                 sites: int = NUM_SITES, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.sites = sites
        mods = []
        for s in range(sites):
            g = generator(seed * 131 + s)
            lin1 = nn.Linear(embed_dim, width, dtype=dtype)
            lin2 = nn.Linear(width, style_dim, dtype=dtype)
            with torch.no_grad():
                lin1.weight.copy_((torch.rand(width, embed_dim, generator=g, dtype=dtype) * 2 - 1)
                                  * embed_dim ** -0.5)
                lin1.bias.zero_()
                lin2.weight.copy_((torch.rand(style_dim, width, generator=g, dtype=dtype) * 2 - 1)
                                  * width ** -0.5)
                lin2.bias.zero_()
            mods.append(nn.Sequential(lin1, nn.LeakyReLU(0.2), lin2))
        self.adapters = nn.ModuleList(mods)

    def forward(self, site: int, z_s: torch.Tensor) -> torch.Tensor:
        if not 0 <= site < self.sites:
            raise NumericError(f"adapter site {site} out of range")
        return self.adapters[site](z_s)

    def trainable_tensors(self, prefix: str = "adapters") -> dict[str, torch.Tensor]:
        return {f"{prefix}/{name}": p for name, p in self.named_parameters()}


def mix_style(w_r: torch.Tensor, z_s: torch.Tensor | None, adapters: StyleAdapters | None,
              site: int, weight: float) -> torch.Tensor:
    """Blend instance code with the adapted style code: (1-w)*w_R + w*T(z_S)."""
    if z_s is None or adapters is None:
        return w_r
    adapted = adapters(site, z_s)
    return (1.0 - weight) * w_r + weight * adapted


def decode(net: DecoderNet, features: torch.Tensor, w_r: torch.Tensor,
           z_s: torch.Tensor | None = None, adapters: StyleAdapters | None = None,
           weight: float = 0.0) -> torch.Tensor:
    """Decode one feature image (H, W, C) to RGB (2H, 2W, 3).

    ``z_s`` and ``adapters`` must be supplied together; without them this is
    pure real-space decoding and the mix weight is forced to zero.
    """
    if (z_s is None) != (adapters is None):
        raise NumericError("style embedding and adapters must be supplied together")
    if z_s is None:
        weight = 0.0
    if not 0.0 <= weight <= 1.0:
        raise NumericError("mix weight must lie in [0, 1]")
    fmap = features.permute(2, 0, 1)[None]
    styles = [mix_style(w_r, z_s, adapters, site, weight) for site in range(NUM_SITES)]
    rgb = net(fmap, [s[None] for s in styles])
    return rgb[0].permute(1, 2, 0)
