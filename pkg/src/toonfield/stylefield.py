"""Conditional 3D deformation field.

A mapping network consumes (instance code ++ learned style embedding) and
emits per-layer FiLM modulation signals that drive a 4-layer sine trunk; a
zero-initialized linear head turns trunk features into a residual offset, so
an untrained field is exactly the identity deformation.

The trunk layer rule is f_{i+1} = act(omega_i * gamma_i * (W_i f_i + b_i) +
beta_i) with sine activation and omega = (30, 1, 1, 1) by default; the
``relu-mlp`` backbone swaps the activation for ReLU with unit frequencies and
is otherwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .numcore import NumericError, generator

BACKBONES = ("siren", "relu-mlp")


@dataclass
class FiLMParams:
    gammas: torch.Tensor  # (layers, width)
    betas: torch.Tensor   # (layers, width)


def _linear(in_dim: int, out_dim: int, seed: int, dtype: torch.dtype,
            scale: float | None = None, weight_gain: float = 1.0) -> nn.Linear:
    lin = nn.Linear(in_dim, out_dim, dtype=dtype)
    g = generator(seed)
    bound = scale if scale is not None else in_dim ** -0.5
    with torch.no_grad():
        lin.weight.copy_((torch.rand(out_dim, in_dim, generator=g, dtype=dtype) * 2 - 1)
                         * bound * weight_gain)
        lin.bias.zero_()
    return lin


def _trunk_apply(x, weights, biases, gammas, betas, head_w, head_b, omegas, use_sine: bool):
    f = x
    for i in range(len(weights)):
        z = f @ weights[i].T + biases[i]
        z = omegas[i] * gammas[i] * z + betas[i]
        f = torch.sin(z) if use_sine else torch.relu(z)
    return f @ head_w.T + head_b


_compiled_trunk = None


def _get_trunk_fn(compile_mode: bool):
    global _compiled_trunk
    if not compile_mode:
        return _trunk_apply
    if _compiled_trunk is None:
        _compiled_trunk = torch.compile(_trunk_apply, dynamic=True)
    return _compiled_trunk


class StyleFieldNet(nn.Module):
    """Deformation network H mapping styled-space points to residual offsets."""

    def __init__(self, num_styles: int, *, instance_dim: int = 64, embed_dim: int = 32,
                 hidden: int = 128, layers: int = 4, mapping_width: int = 128,
                 mapping_layers: int = 4, omega_first: float = 30.0,
                 backbone: str = "siren", condition_on_instance: bool = True,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if num_styles < 1:
            raise NumericError("need at least one style")
        if backbone not in BACKBONES:
            raise NumericError(f"unknown backbone {backbone!r}")
        self.num_styles = num_styles
        self.instance_dim = instance_dim
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.layers = layers
        self.backbone = backbone
        self.condition_on_instance = condition_on_instance
        self.omegas = (omega_first,) + (1.0,) * (layers - 1) if backbone == "siren" \
            else (1.0,) * layers
        self.compile_trunk = False

        g = generator(seed)
        self.style_embeddings = nn.Parameter(
            torch.randn(num_styles, embed_dim, generator=g, dtype=dtype))

        # Mapping net: dense layers at mapping_width, last layer projects to
        # the 2 * layers * hidden modulation signals. Small final scale keeps
        # gamma near 1 and beta near 0 at init, but distinct per style.
        dims = [instance_dim + embed_dim] + [mapping_width] * (mapping_layers - 1)
        blocks = []
        for i in range(mapping_layers - 1):
            blocks.append(_linear(dims[i], dims[i + 1], seed * 31 + 11 + i, dtype))
        self.mapping = nn.ModuleList(blocks)
        self.film_head = _linear(mapping_width, 2 * layers * hidden,
                                 seed * 31 + 97, dtype, weight_gain=0.1)

        trunk = []
        for i in range(layers):
            in_dim = 3 if i == 0 else hidden
            if backbone == "siren" and i == 0:
                lin = _linear(in_dim, hidden, seed * 31 + 201, dtype, scale=1.0 / in_dim)
            else:
                lin = _linear(in_dim, hidden, seed * 31 + 201 + i, dtype,
                              scale=(6.0 / in_dim) ** 0.5)
            trunk.append(lin)
        self.trunk = nn.ModuleList(trunk)
        self.head = nn.Linear(hidden, 3, dtype=dtype)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    # -- conditioning ------------------------------------------------------

    def _check_style(self, style_index: int):
        if not 0 <= style_index < self.num_styles:
            raise NumericError(f"style index {style_index} out of range [0, {self.num_styles})")

    def map_conditions(self, w_r: torch.Tensor, style_index: int) -> FiLMParams:
        """FiLM signals for one (instance, style) condition pair."""
        self._check_style(style_index)
        z_s = self.style_embeddings[style_index]
        if not self.condition_on_instance:
            w_r = torch.zeros_like(w_r)
        h = torch.cat([w_r.to(z_s.dtype), z_s])
        for lin in self.mapping:
            h = torch.nn.functional.leaky_relu(lin(h), 0.2)
        raw = self.film_head(h)
        half = self.layers * self.hidden
        gammas = 1.0 + raw[:half].reshape(self.layers, self.hidden)
        betas = raw[half:].reshape(self.layers, self.hidden)
        return FiLMParams(gammas, betas)

    # -- evaluation --------------------------------------------------------

    def deform(self, x: torch.Tensor, w_r: torch.Tensor, style_index: int,
               film: FiLMParams | None = None) -> torch.Tensor:
        """Residual offset at styled-space points ``x`` (..., 3)."""
        if film is None:
            film = self.map_conditions(w_r, style_index)
        fn = _get_trunk_fn(self.compile_trunk)
        flat = x.reshape(-1, 3)
        out = fn(flat,
                 [l.weight for l in self.trunk], [l.bias for l in self.trunk],
                 [film.gammas[i] for i in range(self.layers)],
                 [film.betas[i] for i in range(self.layers)],
                 self.head.weight, self.head.bias,
                 self.omegas, self.backbone == "siren")
        return out.reshape(x.shape)

    def jacobian(self, x: torch.Tensor, w_r: torch.Tensor, style_index: int,
                 create_graph: bool = False,
                 film: FiLMParams | None = None) -> torch.Tensor:
        """Exact offset Jacobian d offset / d x, via one reverse pass per
        output component. Returns (..., 3, 3) with [k, j] = d off_k / d x_j."""
        flat = x.detach().reshape(-1, 3).requires_grad_(True)
        compiled = self.compile_trunk
        self.compile_trunk = False  # double backprop needs the eager trunk
        try:
            off = self.deform(flat, w_r, style_index, film=film)
            rows = []
            for k in range(3):
                grad_k = torch.autograd.grad(off[:, k].sum(), flat,
                                             create_graph=create_graph, retain_graph=True)[0]
                rows.append(grad_k)
        finally:
            self.compile_trunk = compiled
        jac = torch.stack(rows, dim=1)
        return jac.reshape(x.shape[:-1] + (3, 3))

    def jacobian_fd(self, x: torch.Tensor, w_r: torch.Tensor, style_index: int,
                    step: float = 1e-3) -> torch.Tensor:
        """Central-difference Jacobian, the self-consistency oracle."""
        film = self.map_conditions(w_r, style_index)
        flat = x.reshape(-1, 3)
        cols = []
        with torch.no_grad():
            for j in range(3):
                e = torch.zeros_like(flat)
                e[:, j] = step
                hi = self.deform(flat + e, w_r, style_index, film=film)
                lo = self.deform(flat - e, w_r, style_index, film=film)
                cols.append((hi - lo) / (2.0 * step))
        jac = torch.stack(cols, dim=2)
        return jac.reshape(x.shape[:-1] + (3, 3))

    def trainable_tensors(self, prefix: str = "stylefield") -> dict[str, torch.Tensor]:
        return {f"{prefix}/{name}": p for name, p in self.named_parameters()}
