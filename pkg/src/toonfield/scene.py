"""Frozen real-space scene: procedural SDF + feature field, and style oracles.

The generator stand-in is a deterministic family of blobby shapes: one
ellipsoid smoothly unioned with up to three offset spheres, all derived from a
64-d instance code through fixed random projections. It exposes read-only
evaluation only; nothing in the training stack can mutate it.

Style oracles supply the ground-truth geometry warp (style space to real
space) and a global affine recolor. They stand in for an external 2D
stylizer, which makes the learned deformation directly checkable against the
analytic warp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .numcore import NumericError, check_finite, np_generator

INSTANCE_DIM = 64
FEATURE_DIM = 8
NUM_BLOBS = 3
SMOOTH_UNION_K = 0.1
SHAPE_RADIUS = 0.5  # nominal radius used to normalize deformation errors

_FAMILY_SEED = 20240611
_PE_FREQS = (2.0, 3.0, 4.5, 6.0, 8.0)
_PE_BASE_DIRS = np.array(
    [[1.0, 0.0, 0.0],
     [0.0, 1.0, 0.0],
     [0.0, 0.0, 1.0],
     [1.0, 1.0, 0.0],
     [0.0, 1.0, 1.0]]
)


def _family_projections() -> dict[str, np.ndarray]:
    """Fixed projections mapping an instance code to primitive parameters."""
    rng = np_generator(_FAMILY_SEED)
    scale = 1.0 / math.sqrt(INSTANCE_DIM)

    def proj(*shape):
        return rng.standard_normal(shape + (INSTANCE_DIM,)) * scale

    return {
        "axes": proj(3),
        "blob_centers": proj(NUM_BLOBS, 3),
        "blob_radii": proj(NUM_BLOBS),
        "palette_base": proj(3),
        "palette_grad": proj(3, 3),
        "pe_dirs": proj(len(_PE_FREQS), 3),
        "pe_phases": proj(len(_PE_FREQS)),
    }


_PROJ = _family_projections()


def sample_instance_code(seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard-normal instance code with a recorded seed."""
    w = np_generator(seed).standard_normal(INSTANCE_DIM)
    return torch.from_numpy(w).to(dtype)


@dataclass(frozen=True)
class InstanceCode:
    values: torch.Tensor
    seed: int | None = None

    def __post_init__(self):
        if self.values.shape != (INSTANCE_DIM,):
            raise NumericError(f"instance code must have shape ({INSTANCE_DIM},)")
        check_finite(self.values, "instance code")

    @classmethod
    def sample(cls, seed: int, dtype: torch.dtype = torch.float32) -> "InstanceCode":
        return cls(sample_instance_code(seed, dtype), seed=seed)


@dataclass(frozen=True)
class ScenePrimitives:
    """Derived, frozen shape/texture parameters of one instance."""
    semi_axes: torch.Tensor       # (3,)
    blob_centers: torch.Tensor    # (NUM_BLOBS, 3)
    blob_radii: torch.Tensor      # (NUM_BLOBS,)
    palette_logits: torch.Tensor  # (3,)
    palette_grad: torch.Tensor    # (3, 3)
    pe_dirs: torch.Tensor         # (5, 3) unit rows
    pe_phases: torch.Tensor       # (5,)
    pe_freqs: torch.Tensor        # (5,)


def _derive_primitives(w: torch.Tensor, dtype: torch.dtype) -> ScenePrimitives:
    w64 = w.detach().to(torch.float64).numpy()

    def z(name):
        return _PROJ[name] @ w64

    semi_axes = 0.5 * (1.0 + 0.3 * np.tanh(z("axes")))
    centers = 0.5 * np.tanh(z("blob_centers"))
    radii = 0.2 * np.abs(np.tanh(z("blob_radii")))
    logits = np.tanh(z("palette_base")) * 1.2
    grad = 0.9 * z("palette_grad")
    dirs = z("pe_dirs") + 0.5 * _PE_BASE_DIRS
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    phases = math.pi * np.tanh(z("pe_phases"))

    def t(a):
        return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)

    return ScenePrimitives(
        semi_axes=t(semi_axes),
        blob_centers=t(centers),
        blob_radii=t(radii),
        palette_logits=t(logits),
        palette_grad=t(grad),
        pe_dirs=t(dirs),
        pe_phases=t(phases),
        pe_freqs=torch.tensor(_PE_FREQS, dtype=dtype),
    )


class SceneField:
    """Instance-conditioned SDF + feature field. Read-only by construction."""

    def __init__(self, code: InstanceCode, dtype: torch.dtype = torch.float32,
                 primitives: ScenePrimitives | None = None,
                 smooth_k: float = SMOOTH_UNION_K):
        self.code = code
        self.dtype = dtype
        self.smooth_k = float(smooth_k)
        self.primitives = primitives if primitives is not None else _derive_primitives(code.values, dtype)
        radii = self.primitives.blob_radii
        self._active_blobs = [j for j in range(radii.shape[0]) if float(radii[j]) > 1e-6]

    @classmethod
    def from_seed(cls, seed: int, dtype: torch.dtype = torch.float32) -> "SceneField":
        return cls(InstanceCode.sample(seed, dtype), dtype=dtype)

    def with_constant_palette(self, color: torch.Tensor) -> "SceneField":
        """Variant whose RGB channels equal ``color`` everywhere (test hook)."""
        color = color.to(self.dtype).clamp(1e-6, 1.0 - 1e-6)
        p = self.primitives
        prims = ScenePrimitives(
            semi_axes=p.semi_axes, blob_centers=p.blob_centers, blob_radii=p.blob_radii,
            palette_logits=torch.log(color / (1.0 - color)),
            palette_grad=torch.zeros_like(p.palette_grad),
            pe_dirs=p.pe_dirs, pe_phases=p.pe_phases, pe_freqs=p.pe_freqs,
        )
        return SceneField(self.code, self.dtype, primitives=prims, smooth_k=self.smooth_k)

    def _smooth_min(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        # Stabilized exponential smooth union; gradient is a softmax blend of
        # the operand gradients, so the 1-Lipschitz bound survives.
        k = self.smooth_k
        m = torch.minimum(a, b)
        return m - k * torch.log(torch.exp(-(a - m) / k) + torch.exp(-(b - m) / k))

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        """Signed distance, negative inside. ``x``: (..., 3)."""
        p = self.primitives
        u = x / p.semi_axes
        n = torch.sqrt((u * u).sum(-1) + 1e-12)
        d = (n - 1.0) * p.semi_axes.min()
        for j in self._active_blobs:
            diff = x - p.blob_centers[j]
            dist = torch.sqrt((diff * diff).sum(-1) + 1e-12)
            d = self._smooth_min(d, dist - p.blob_radii[j])
        return d

    def feature(self, x: torch.Tensor) -> torch.Tensor:
        """d_f-channel emission; channels 0..2 are the RGB preview in [0,1]."""
        p = self.primitives
        rgb = torch.sigmoid(p.palette_logits + x @ p.palette_grad.T)
        pe = torch.sin(p.pe_freqs * (x @ p.pe_dirs.T) + p.pe_phases)
        return torch.cat([rgb, pe], dim=-1)

    def inside_primitives(self, x: torch.Tensor) -> torch.Tensor:
        """Brute-force boolean membership (hard union), the sign oracle."""
        p = self.primitives
        u = x / p.semi_axes
        inside = (u * u).sum(-1) <= 1.0
        for j in self._active_blobs:
            diff = x - p.blob_centers[j]
            inside = inside | ((diff * diff).sum(-1) <= p.blob_radii[j] ** 2)
        return inside


def sdf_to_density(d: torch.Tensor, alpha: float) -> torch.Tensor:
    """Logistic density transform: sigma = sigmoid(-d / alpha) / alpha."""
    if alpha <= 0:
        raise NumericError("alpha must be positive")
    return torch.sigmoid(-d / alpha) / alpha


# ---------------------------------------------------------------------------
# style oracles
# ---------------------------------------------------------------------------

WARP_KINDS = ("identity", "anisotropic-scale", "twist", "radial-bulge")


@dataclass(frozen=True)
class StyleOracle:
    """Analytic style: a bijective warp (style space -> real space) + recolor."""
    style_index: int
    kind: str
    params: tuple[float, ...]
    recolor_matrix: torch.Tensor = dc_field(default_factory=lambda: torch.eye(3, dtype=torch.float64))
    recolor_bias: torch.Tensor = dc_field(default_factory=lambda: torch.zeros(3, dtype=torch.float64))

    def __post_init__(self):
        if self.kind not in WARP_KINDS:
            raise NumericError(f"unknown warp kind {self.kind!r}")
        n_expected = {"identity": 0, "anisotropic-scale": 3, "twist": 1, "radial-bulge": 2}[self.kind]
        if len(self.params) != n_expected:
            raise NumericError(f"{self.kind} warp expects {n_expected} parameters")

    def warp(self, x: torch.Tensor) -> torch.Tensor:
        """Map a styled-space point to its real-space counterpart."""
        if self.kind == "identity":
            return x
        if self.kind == "anisotropic-scale":
            s = torch.tensor(self.params, dtype=x.dtype)
            return x / s
        if self.kind == "twist":
            k = self.params[0]
            phi = -k * x[..., 1]
            c, s = torch.cos(phi), torch.sin(phi)
            x0 = x[..., 0] * c + x[..., 2] * s
            x2 = -x[..., 0] * s + x[..., 2] * c
            return torch.stack([x0, x[..., 1], x2], dim=-1)
        # radial bulge: styled space is inflated near the origin
        b, width = self.params
        r2 = (x * x).sum(-1, keepdim=True)
        factor = 1.0 - b * torch.exp(-r2 / (width * width))
        return x * factor

    def warp_inv(self, x: torch.Tensor) -> torch.Tensor:
        """Real-space point back to styled space (bulge inverts numerically)."""
        if self.kind == "identity":
            return x
        if self.kind == "anisotropic-scale":
            s = torch.tensor(self.params, dtype=x.dtype)
            return x * s
        if self.kind == "twist":
            k = self.params[0]
            phi = k * x[..., 1]
            c, s = torch.cos(phi), torch.sin(phi)
            x0 = x[..., 0] * c + x[..., 2] * s
            x2 = -x[..., 0] * s + x[..., 2] * c
            return torch.stack([x0, x[..., 1], x2], dim=-1)
        b, width = self.params
        r_real = torch.sqrt((x * x).sum(-1, keepdim=True) + 1e-18)
        r = r_real.clone()
        for _ in range(30):  # Newton on r * (1 - b exp(-r^2/w^2)) = r_real
            e = torch.exp(-(r * r) / (width * width))
            f = r * (1.0 - b * e) - r_real
            fp = 1.0 - b * e * (1.0 - 2.0 * r * r / (width * width))
            r = r - f / fp
        return x * (r / r_real)

    def recolor(self, rgb: torch.Tensor) -> torch.Tensor:
        m = self.recolor_matrix.to(rgb.dtype)
        b = self.recolor_bias.to(rgb.dtype)
        return (rgb @ m.T + b).clamp(0.0, 1.0)

    @property
    def is_identity_warp(self) -> bool:
        if self.kind == "identity":
            return True
        if self.kind == "anisotropic-scale":
            return all(p == 1.0 for p in self.params)
        if self.kind == "twist":
            return self.params[0] == 0.0
        return self.params[0] == 0.0

    @property
    def is_identity_recolor(self) -> bool:
        return bool(torch.equal(self.recolor_matrix, torch.eye(3, dtype=self.recolor_matrix.dtype))
                    and torch.equal(self.recolor_bias, torch.zeros_like(self.recolor_bias)))

    def deformation_target(self, x_styled: torch.Tensor) -> torch.Tensor:
        """Ground-truth residual offset the deformation field should learn."""
        return self.warp(x_styled) - x_styled


def identity_oracle(style_index: int = 0) -> StyleOracle:
    return StyleOracle(style_index, "identity", ())
