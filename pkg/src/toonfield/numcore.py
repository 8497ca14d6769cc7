"""Dense-tensor math contract shared by every trainable module.

Tensors are plain ``torch.Tensor`` values on CPU. This module pins down the
project-wide conventions on top of them:

* two precision modes: float64 for tests/verification, float32 for training
  (finite-difference checks are unreliable at 32-bit);
* randomness only through explicitly seeded generators, never the ambient
  global RNG;
* finiteness is a contract: NaN/Inf surfacing from an evaluation is an error;
* reverse-mode gradients of named parameters, plus the central
  finite-difference oracle used to verify them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

TEST_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32

_DTYPE_NAMES = {
    "float32": torch.float32,
    "float64": torch.float64,
}


class NumericError(RuntimeError):
    """A numeric contract violation (non-finite value, shape mismatch)."""


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    try:
        return _DTYPE_NAMES[name]
    except KeyError:
        raise NumericError(f"unsupported dtype {name!r}; use float32 or float64")


def derive_seed(base: int, *keys) -> int:
    """Stateless per-purpose seed derivation.

    Hashing (base, keys...) gives every stochastic operation its own stream,
    so resuming a run at step t replays the exact randomness of step t without
    carrying generator state around.
    """
    payload = repr((int(base),) + tuple(keys)).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little") & 0x7FFF_FFFF_FFFF


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def np_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def rand_uniform(shape, lo: float, hi: float, seed: int, dtype: torch.dtype) -> torch.Tensor:
    g = generator(seed)
    return torch.rand(shape, generator=g, dtype=dtype) * (hi - lo) + lo


def rand_normal(shape, seed: int, dtype: torch.dtype, std: float = 1.0) -> torch.Tensor:
    g = generator(seed)
    return torch.randn(shape, generator=g, dtype=dtype) * std


# ---------------------------------------------------------------------------
# evaluate / backprop on named-tensor graphs
# ---------------------------------------------------------------------------

Graph = Callable[..., torch.Tensor]


def evaluate(graph: Graph, inputs: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Evaluate a composed differentiable expression on named inputs.

    Deterministic: same inputs give bitwise-identical output at fixed
    precision. Raises on non-finite results.
    """
    out = graph(**dict(inputs))
    return check_finite(out, "graph output")


def backprop(
    graph: Graph,
    inputs: Mapping[str, torch.Tensor],
    wrt: Iterable[str] | None = None,
    output_cotangent: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``graph`` with respect to named inputs.

    ``wrt`` defaults to every input that already requires grad. A non-scalar
    output needs an explicit cotangent.
    """
    tracked = {k: v for k, v in inputs.items()}
    if wrt is None:
        names = [k for k, v in tracked.items() if v.requires_grad]
    else:
        names = list(wrt)
        for k in names:
            if not tracked[k].requires_grad:
                tracked[k] = tracked[k].detach().clone().requires_grad_(True)
    out = graph(**tracked)
    check_finite(out, "graph output")
    if output_cotangent is None:
        if out.numel() != 1:
            raise NumericError("non-scalar output requires an explicit cotangent")
        cotangent = torch.ones_like(out)
    else:
        if output_cotangent.shape != out.shape:
            raise NumericError("cotangent shape does not match output shape")
        cotangent = output_cotangent
    grads = torch.autograd.grad(out, [tracked[k] for k in names], grad_outputs=cotangent,
                                allow_unused=True)
    result = {}
    for name, g in zip(names, grads):
        g = torch.zeros_like(tracked[name]) if g is None else g
        result[name] = check_finite(g, f"gradient of {name}")
    return result


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if e.passed else 'FAIL'}  {e.name:<40s} max_rel_err={e.max_rel_error:.3e}"
            for e in self.entries
        ]


def finite_difference_check(
    graph: Callable[[], torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    label: str = "",
) -> GradCheckReport:
    """Central finite differences against reverse-mode gradients.

    ``graph`` is a scalar-valued thunk closing over the live tensors named in
    ``inputs`` (plain tensors or module parameters); each one is perturbed
    element by element, so keep the graphs small. Only meaningful at float64.
    """
    names = list(inputs)
    leaves = [inputs[k] for k in names]
    for t in leaves:
        t.requires_grad_(True)

    out = graph()
    if out.numel() != 1:
        raise NumericError("finite_difference_check needs a scalar-valued graph")
    check_finite(out, "graph output")
    grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)
    analytic = {k: (torch.zeros_like(inputs[k]) if g is None else g)
                for k, g in zip(names, grads)}

    report = GradCheckReport()
    prefix = f"{label}:" if label else ""
    with torch.no_grad():
        for name in names:
            t = inputs[name]
            fd = torch.zeros_like(t)
            flat = t.data.reshape(-1)
            fd_flat = fd.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = graph().item()
                flat[i] = orig - step
                lo = graph().item()
                flat[i] = orig
                fd_flat[i] = (hi - lo) / (2.0 * step)
            a = analytic[name]
            denom = torch.maximum(torch.maximum(a.abs(), fd.abs()),
                                  torch.full_like(fd, 1e-3))
            rel = ((a - fd).abs() / denom).max().item()
            report.entries.append(GradCheckEntry(prefix + name, rel, rel <= tolerance))
    return report


def parameter_count(tensors: Mapping[str, torch.Tensor]) -> int:
    return sum(int(t.numel()) for t in tensors.values())


def checksum(tensors: Mapping[str, torch.Tensor]) -> str:
    """Order-independent digest of named tensors, for freeze contracts."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().to(torch.float32).numpy().tobytes())
    return h.hexdigest()
