"""Synthetic paired-data pipeline, losses, optimizer loop, and checkpointing.

Stage 0 pretrains the decoder to reconstruct real renders, then freezes it.
Stage 1 trains the deformation field, the style embeddings, and the AdaIN
adapters against oracle-styled targets with a reconstruction loss, an elastic
Jacobian penalty, and (optionally, late in training) a non-saturating
adversarial loss from an index-conditioned patch discriminator.

Everything is deterministic given the run config: per-step randomness derives
from (seed, step), so a resumed run replays an uninterrupted one bitwise.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import ppm
from .config import RunConfig, StyleConfig, config_from_dict
from .decoder import DecoderNet, StyleAdapters, mix_style
from .numcore import (NumericError, check_finite, derive_seed, generator,
                      np_generator, parameter_count)
from .renderer import CameraPose, render_deformed, render_real, render_styled_oracle
from .scene import InstanceCode, SceneField, StyleOracle
from .stylefield import StyleFieldNet


class TrainingDiverged(RuntimeError):
    """Aborted on a non-finite loss; message carries the per-term diagnostics."""


class CheckpointError(RuntimeError):
    """Corrupt checkpoint file or config digest mismatch."""


class PhaseError(RuntimeError):
    """Adversarial loss requested outside the adversarial phase."""


def oracle_from_style(cfg: StyleConfig, index: int) -> StyleOracle:
    return StyleOracle(
        style_index=index,
        kind=cfg.kind,
        params=tuple(float(p) for p in cfg.params),
        recolor_matrix=torch.tensor(cfg.recolor_matrix, dtype=torch.float64),
        recolor_bias=torch.tensor(cfg.recolor_bias, dtype=torch.float64),
    )


def oracles_from_config(cfg: RunConfig) -> list[StyleOracle]:
    return [oracle_from_style(s, i) for i, s in enumerate(cfg.styles)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def pixel_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise NumericError("image shape mismatch in reconstruction loss")
    return ((pred - target) ** 2).mean()


class PerceptualProxy:
    """Fixed seeded random convolution responses at two scales.

    Stands in for a pretrained perceptual feature extractor: the filters are
    frozen random projections, spatially sensitive but training-free.
    """

    def __init__(self, kind: str, seed: int, dtype: torch.dtype, filters: int = 12):
        if kind not in ("identity", "random-features"):
            raise NumericError(f"unknown perceptual proxy {kind!r}")
        self.kind = kind
        if kind == "random-features":
            g = generator(seed)
            w = torch.randn(filters, 3, 3, 3, generator=g, dtype=dtype)
            self.filters = w / (27.0 ** 0.5)
        else:
            self.filters = None

    def _responses(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = img if img.dim() == 4 else img[None]
        full = F.conv2d(x, self.filters, padding=1)
        half = F.conv2d(F.avg_pool2d(x, 2), self.filters, padding=1)
        return full, half

    def loss(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Reconstruction loss between (..., 3, H, W) images in [0,1]."""
        if pred.shape != target.shape:
            raise NumericError("image shape mismatch in reconstruction loss")
        if self.kind == "identity":
            return pixel_mse(pred, target)
        pf, ph = self._responses(pred)
        tf, th = self._responses(target)
        return (pixel_mse(pf, tf) + pixel_mse(ph, th)) + 0.1 * pixel_mse(pred, target)


def loss_rec(pred: torch.Tensor, target: torch.Tensor, proxy: PerceptualProxy) -> torch.Tensor:
    """Reconstruction loss on (B, 3, H, W) or (3, H, W) images."""
    return proxy.loss(pred, target)


def loss_elastic(net_like, points: torch.Tensor, w_r: torch.Tensor, style_index: int,
                 eps: float, create_graph: bool = False) -> torch.Tensor:
    """Mean over points of ReLU(||J||_F^2 - eps), J the offset Jacobian."""
    jac = net_like.jacobian(points, w_r, style_index, create_graph=create_graph)
    frob2 = (jac ** 2).sum(dim=(-2, -1))
    return torch.relu(frob2 - eps).mean()


class Discriminator(nn.Module):
    """Strided conv patch classifier on RGB + constant style one-hot planes."""

    def __init__(self, num_styles: int, width: int = 32, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.num_styles = num_styles
        chans = [3 + num_styles, width, 2 * width, 4 * width]
        g = generator(seed)
        convs = []
        for i in range(3):
            conv = nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1, dtype=dtype)
            self._init(conv, g, dtype)
            convs.append(conv)
        final = nn.Conv2d(chans[-1], 1, 3, stride=1, padding=1, dtype=dtype)
        self._init(final, g, dtype)
        convs.append(final)
        self.convs = nn.ModuleList(convs)

    @staticmethod
    def _init(conv: nn.Conv2d, g: torch.Generator, dtype: torch.dtype):
        fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
        with torch.no_grad():
            conv.weight.copy_((torch.rand(conv.weight.shape, generator=g, dtype=dtype) * 2 - 1)
                              * fan_in ** -0.5)
            conv.bias.zero_()

    def forward(self, images: torch.Tensor, style_indices: list[int]) -> torch.Tensor:
        b, _, h, w = images.shape
        onehot = torch.zeros(b, self.num_styles, h, w, dtype=images.dtype)
        for i, s in enumerate(style_indices):
            onehot[i, s] = 1.0
        x = torch.cat([images, onehot], dim=1)
        for conv in self.convs[:-1]:
            x = F.leaky_relu(conv(x), 0.2)
        return self.convs[-1](x)

    def trainable_tensors(self, prefix: str = "discriminator") -> dict[str, torch.Tensor]:
        return {f"{prefix}/{name}": p for name, p in self.named_parameters()}


def loss_adv(disc: Discriminator, images: torch.Tensor, style_indices: list[int],
             role: str, real_images: torch.Tensor | None = None) -> torch.Tensor:
    """Non-saturating adversarial loss.

    generator role: mean softplus(-D(fake)); discriminator role:
    mean softplus(D(fake)) + mean softplus(-D(real)).
    """
    if role == "generator":
        return F.softplus(-disc(images, style_indices)).mean()
    if role == "discriminator":
        if real_images is None:
            raise NumericError("discriminator role needs real images")
        fake_term = F.softplus(disc(images.detach(), style_indices)).mean()
        real_term = F.softplus(-disc(real_images, style_indices)).mean()
        return fake_term + real_term
    raise NumericError("role must be 'generator' or 'discriminator'")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Plain Adam with persisted moments, deterministic and checkpointable."""

    def __init__(self, params: dict[str, torch.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        with torch.no_grad():
            for name, p in self.params.items():
                g = p.grad if p.grad is not None else torch.zeros_like(p)
                self.m[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                self.v[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                denom = (self.v[name] / bc2).sqrt_().add_(self.eps)
                p.addcdiv_(self.m[name] / bc1, denom, value=-self.lr)
                p.grad = None

    def state_tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load_state(self, prefix: str, tensors: dict[str, torch.Tensor], t: int):
        for k in self.params:
            self.m[k] = tensors[f"{prefix}/m/{k}"].to(self.m[k].dtype).clone()
            self.v[k] = tensors[f"{prefix}/v/{k}"].to(self.v[k].dtype).clone()
        self.t = t


# ---------------------------------------------------------------------------
# checkpoint wire format
# ---------------------------------------------------------------------------

MAGIC = b"DT3D"
VERSION = 1


def write_checkpoint(tensors: dict[str, torch.Tensor], path) -> None:
    """Named-tensor container: magic, version u16, count u32, then per entry
    name (u16 length + UTF-8), rank u8, extents u32 each, f32 LE values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        t = tensors[name].detach().to(torch.float32).contiguous()
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("B", t.dim())
        for e in t.shape:
            blob += struct.pack("<I", e)
        blob += t.numpy().astype("<f4").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def read_checkpoint(path) -> dict[str, torch.Tensor]:
    blob = Path(path).read_bytes()
    try:
        if blob[:4] != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        pos = 4
        (version,) = struct.unpack_from("<H", blob, pos); pos += 2
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack_from("<I", blob, pos); pos += 4
        out: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos); pos += 2
            name = blob[pos:pos + nlen].decode("utf-8"); pos += nlen
            if len(blob) < pos + 1:
                raise CheckpointError(f"{path}: truncated at entry {name!r}")
            rank = blob[pos]; pos += 1
            extents = struct.unpack_from(f"<{rank}I", blob, pos); pos += 4 * rank
            n = int(np.prod(extents)) if rank else 1
            raw = blob[pos:pos + 4 * n]
            if len(raw) != 4 * n:
                raise CheckpointError(f"{path}: truncated values for {name!r}")
            pos += 4 * n
            arr = np.frombuffer(raw, dtype="<f4").reshape(extents)
            out[name] = torch.from_numpy(arr.copy())
        if pos != len(blob):
            raise CheckpointError(f"{path}: trailing bytes after last entry")
        return out
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})")


def _text_tensor(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32))


def _tensor_text(t: torch.Tensor) -> str:
    return bytes(t.numpy().astype(np.uint8)).decode("utf-8")


def meta_tensors(kind: str, step: int, config_text: str, adam_t: int = 0,
                 adam_t_disc: int = 0) -> dict[str, torch.Tensor]:
    digest = sha256(config_text.encode()).digest()
    return {
        "meta/kind_utf8": _text_tensor(kind),
        "meta/step": torch.tensor([float(step)]),
        "meta/adam_t": torch.tensor([float(adam_t)]),
        "meta/adam_t_disc": torch.tensor([float(adam_t_disc)]),
        "meta/config_utf8": _text_tensor(config_text),
        "meta/config_sha256": torch.from_numpy(
            np.frombuffer(digest, dtype=np.uint8).astype(np.float32)),
    }


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    kind: str
    step: int
    adam_t: int
    adam_t_disc: int
    config_text: str


def load_checkpoint(path, expect_digest: str | None = None, force: bool = False) -> Checkpoint:
    tensors = read_checkpoint(path)
    try:
        config_text = _tensor_text(tensors["meta/config_utf8"])
        stored = bytes(tensors["meta/config_sha256"].numpy().astype(np.uint8))
        kind = _tensor_text(tensors["meta/kind_utf8"])
        step = int(tensors["meta/step"].item())
        adam_t = int(tensors["meta/adam_t"].item())
        adam_t_disc = int(tensors["meta/adam_t_disc"].item())
    except KeyError as e:
        raise CheckpointError(f"{path}: missing metadata entry {e}")
    if sha256(config_text.encode()).digest() != stored:
        raise CheckpointError(f"{path}: embedded config does not match its digest")
    if expect_digest is not None and not force:
        if sha256(config_text.encode()).hexdigest() != expect_digest:
            raise CheckpointError(
                f"{path}: config digest mismatch; pass force=True to load anyway")
    return Checkpoint(tensors, kind, step, adam_t, adam_t_disc, config_text)


def checkpoint_config(ckpt: Checkpoint) -> RunConfig:
    import sys
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    return config_from_dict(tomllib.loads(ckpt.config_text))


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------


@dataclass
class TrainSample:
    index: int
    instance_seed: int
    style_index: int
    azimuth: float
    elevation: float
    image_real: torch.Tensor    # (H, W, 3) in [0,1]
    image_styled: torch.Tensor  # (H, W, 3) in [0,1]


def sample_pose(cfg: RunConfig, seed: int) -> CameraPose:
    rng = np_generator(seed)
    az = float(rng.uniform(*cfg.camera.azimuth_range))
    el = float(rng.uniform(*cfg.camera.elevation_range))
    return CameraPose(az, el, cfg.camera.radius, cfg.camera.fov)


def synthesize_dataset(cfg: RunConfig, out_dir, seed: int | None = None) -> Path:
    """Render N x K x P paired samples to ``out_dir``; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.data.seed if seed is None else seed
    oracles = oracles_from_config(cfg)
    records = []
    index = 0
    for i in range(cfg.data.num_instances):
        inst_seed = derive_seed(seed, "instance", i)
        field = SceneField.from_seed(inst_seed)
        for p in range(cfg.data.poses_per_instance):
            pose = sample_pose(cfg, derive_seed(seed, "pose", i, p))
            kw = dict(samples=cfg.render.samples_per_ray, alpha=cfg.scene.alpha,
                      t_near=cfg.camera.t_near, t_far=cfg.camera.t_far)
            real = render_real(field, pose, cfg.render.image_resolution, **kw).rgb
            for s, oracle in enumerate(oracles):
                styled = render_styled_oracle(field, oracle, pose,
                                              cfg.render.image_resolution, **kw).rgb
                base = f"sample_{index:05d}"
                ppm.encode_image(real, out / f"{base}.real.ppm")
                ppm.encode_image(styled, out / f"{base}.styled.ppm")
                meta = "\n".join([
                    f"index={index}",
                    f"instance_seed={inst_seed}",
                    f"style_index={s}",
                    f"azimuth={pose.azimuth!r}",
                    f"elevation={pose.elevation!r}",
                ]) + "\n"
                (out / f"{base}.meta.txt").write_text(meta)
                records.append(base)
                index += 1
    lines = [f"count={index}"]
    for base in records:
        h = sha256()
        for suffix in (".real.ppm", ".styled.ppm", ".meta.txt"):
            h.update((out / f"{base}{suffix}").read_bytes())
        lines.append(f"{base} {h.hexdigest()}")
    digest = sha256("\n".join(lines).encode()).hexdigest()
    lines.append(f"digest={digest}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(data_dir) -> list[TrainSample]:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt under {data_dir}")
    samples = []
    for line in manifest.read_text().splitlines():
        if "=" in line or not line.strip():
            continue
        base = line.split()[0]
        meta = {}
        for row in (data_dir / f"{base}.meta.txt").read_text().splitlines():
            k, v = row.split("=", 1)
            meta[k] = v
        samples.append(TrainSample(
            index=int(meta["index"]),
            instance_seed=int(meta["instance_seed"]),
            style_index=int(meta["style_index"]),
            azimuth=float(meta["azimuth"]),
            elevation=float(meta["elevation"]),
            image_real=ppm.decode_image(data_dir / f"{base}.real.ppm"),
            image_styled=ppm.decode_image(data_dir / f"{base}.styled.ppm"),
        ))
    samples.sort(key=lambda s: s.index)
    return samples


# ---------------------------------------------------------------------------
# decoder pretraining (stage 0)
# ---------------------------------------------------------------------------


@dataclass
class PretrainPair:
    features: torch.Tensor  # (feature_res, feature_res, d_f)
    target: torch.Tensor    # (image_res, image_res, 3)
    w_r: torch.Tensor       # (64,)


def _pretrain_pairs(cfg: RunConfig, tag: str, count: int, poses: int) -> list[PretrainPair]:
    pairs = []
    kw = dict(samples=cfg.render.samples_per_ray, alpha=cfg.scene.alpha,
              t_near=cfg.camera.t_near, t_far=cfg.camera.t_far)
    for i in range(count):
        inst_seed = derive_seed(cfg.pretrain.seed, tag, "instance", i)
        code = InstanceCode.sample(inst_seed)
        field = SceneField(code)
        for p in range(poses):
            pose = sample_pose(cfg, derive_seed(cfg.pretrain.seed, tag, "pose", i, p))
            feat = render_real(field, pose, cfg.render.feature_resolution, **kw).values
            target = render_real(field, pose, cfg.render.image_resolution, **kw).rgb
            pairs.append(PretrainPair(feat, target, code.values))
    return pairs


def _decoder_forward_batch(decoder: DecoderNet, pairs: list[PretrainPair],
                           idx: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    feats = torch.stack([pairs[j].features for j in idx]).permute(0, 3, 1, 2)
    targets = torch.stack([pairs[j].target for j in idx]).permute(0, 3, 1, 2)
    styles = torch.stack([pairs[j].w_r for j in idx])
    pred = decoder(feats, [styles, styles])
    return pred, targets


def holdout_mse(decoder: DecoderNet, pairs: list[PretrainPair]) -> float:
    with torch.no_grad():
        idx = np.arange(len(pairs))
        pred, targets = _decoder_forward_batch(decoder, pairs, idx)
        return float(pixel_mse(pred, targets))


def pretrain_decoder(cfg: RunConfig, out_path=None, resume=None,
                     steps: int | None = None, log_lines: list | None = None):
    """Stage 0: fit the decoder to real renders, then report held-out MSE.

    Returns (decoder, report dict). With ``out_path`` the final state is
    written as a checkpoint; ``resume`` continues from a saved state with
    optimizer moments intact.
    """
    decoder = DecoderNet(cfg.scene.feature_dim, cfg.decoder.channels,
                         seed=cfg.decoder.seed)
    decoder.compile_modulate = cfg.train.compile
    proxy = PerceptualProxy(cfg.train.perceptual_proxy, cfg.train.proxy_seed, torch.float32)
    params = decoder.trainable_tensors()
    opt = Adam(params, cfg.pretrain.learning_rate)
    start_step = 0
    if resume is not None:
        ck = load_checkpoint(resume, expect_digest=cfg.digest())
        if ck.kind != "pretrain":
            raise CheckpointError(f"{resume}: expected a pretrain checkpoint, got {ck.kind!r}")
        for name, p in params.items():
            p.data.copy_(ck.tensors[name])
        opt.load_state("optim", ck.tensors, ck.adam_t)
        start_step = ck.step

    train_pairs = _pretrain_pairs(cfg, "train", cfg.pretrain.num_instances,
                                  cfg.pretrain.poses_per_instance)
    hold_pairs = _pretrain_pairs(cfg, "holdout", cfg.pretrain.holdout_instances,
                                 cfg.pretrain.holdout_poses)
    total = cfg.pretrain.steps if steps is None else steps
    batch = cfg.pretrain.batch_size
    for step in range(start_step, total):
        rng = np_generator(derive_seed(cfg.pretrain.seed, "batch", step))
        idx = rng.integers(0, len(train_pairs), size=batch)
        pred, targets = _decoder_forward_batch(decoder, train_pairs, idx)
        loss = pixel_mse(pred, targets)
        if proxy.kind != "identity":
            loss = loss + proxy.loss(pred, targets)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"pretrain loss non-finite at step {step}")
        loss.backward()
        opt.step()
        if log_lines is not None:
            log_lines.append(f"{step}\t{float(loss)!r}")

    mse = holdout_mse(decoder, hold_pairs)
    report = {"steps": total, "holdout_mse": mse,
              "parameters": parameter_count(params)}
    if out_path is not None:
        tensors = {k: v.data for k, v in params.items()}
        tensors.update(opt.state_tensors("optim"))
        tensors.update(meta_tensors("pretrain", total, cfg.echo(), adam_t=opt.t))
        write_checkpoint(tensors, out_path)
    return decoder, report


# ---------------------------------------------------------------------------
# stage 1: toonification training
# ---------------------------------------------------------------------------


@dataclass
class StepReport:
    step: int
    loss_total: float
    loss_rec: float
    loss_elastic: float
    loss_adv: float
    wall_ms: float

    def log_row(self) -> str:
        return "\t".join([str(self.step), repr(self.loss_total), repr(self.loss_rec),
                          repr(self.loss_elastic), repr(self.loss_adv),
                          f"{self.wall_ms:.1f}"])

    LOG_HEADER = "step\tloss_total\tloss_rec\tloss_elastic\tloss_adv\twall_ms"


class ToonifyTrainer:
    """Owns stage-1 mutable state: StyleField, adapters, optional critic."""

    def __init__(self, cfg: RunConfig, dataset: list[TrainSample],
                 decoder: DecoderNet, quiet: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.decoder = decoder
        decoder.freeze()
        self.decoder_checksum = decoder.parameter_checksum()

        self.stylefield = StyleFieldNet(
            cfg.num_styles, embed_dim=cfg.stylefield.embed_dim,
            hidden=cfg.stylefield.hidden, layers=cfg.stylefield.layers,
            mapping_width=cfg.stylefield.mapping_width,
            mapping_layers=cfg.stylefield.mapping_layers,
            omega_first=cfg.stylefield.omega_first,
            backbone=cfg.stylefield.backbone,
            condition_on_instance=cfg.stylefield.condition_on_instance,
            seed=cfg.stylefield.seed)
        self.stylefield.compile_trunk = cfg.train.compile
        self.adapters = StyleAdapters(cfg.stylefield.embed_dim, cfg.decoder.adapter_width,
                                      seed=cfg.decoder.seed + 1)
        self.proxy = PerceptualProxy(cfg.train.perceptual_proxy, cfg.train.proxy_seed,
                                     torch.float32)
        self.discriminator = Discriminator(cfg.num_styles, seed=cfg.train.seed + 5) \
            if cfg.train.adversarial else None

        decoder.compile_modulate = cfg.train.compile
        self._decoder_fn = decoder

        self.params = {}
        self.params.update(self.stylefield.trainable_tensors())
        self.params.update(self.adapters.trainable_tensors())
        self.opt = Adam(self.params, cfg.train.learning_rate,
                        cfg.train.adam_beta1, cfg.train.adam_beta2)
        self.opt_disc = Adam(self.discriminator.trainable_tensors(),
                             cfg.train.learning_rate, cfg.train.adam_beta1,
                             cfg.train.adam_beta2) if self.discriminator else None
        self.step = 0
        self.quiet = quiet

        self._fields: dict[int, SceneField] = {}
        self._codes: dict[int, torch.Tensor] = {}
        self._by_style: dict[int, list[int]] = {}
        for i, s in enumerate(dataset):
            self._by_style.setdefault(s.style_index, []).append(i)
        missing = set(range(cfg.num_styles)) - set(self._by_style)
        if missing:
            raise NumericError(f"dataset has no samples for style(s) {sorted(missing)}")

    # -- helpers -----------------------------------------------------------

    def _field(self, inst_seed: int) -> SceneField:
        if inst_seed not in self._fields:
            code = InstanceCode.sample(inst_seed)
            self._fields[inst_seed] = SceneField(code)
            self._codes[inst_seed] = code.values
        return self._fields[inst_seed]

    @property
    def adversarial_active(self) -> bool:
        if self.discriminator is None:
            return False
        return self.step >= self.cfg.train.adversarial_start_fraction * self.cfg.train.steps

    def adversarial_loss(self, images, style_indices, role, real_images=None):
        if not self.adversarial_active:
            raise PhaseError("adversarial loss requested outside the adversarial phase")
        return loss_adv(self.discriminator, images, style_indices, role, real_images)

    def trainable_parameter_count(self) -> int:
        return parameter_count(self.params)

    def total_parameter_count(self) -> int:
        total = self.trainable_parameter_count()
        total += parameter_count(dict(self.decoder.named_parameters()))
        if self.discriminator is not None:
            total += parameter_count(dict(self.discriminator.named_parameters()))
        return total

    # -- one optimization step ----------------------------------------------

    def train_step(self) -> StepReport:
        t0 = time.perf_counter()
        cfg = self.cfg
        step = self.step
        rng = np_generator(derive_seed(cfg.train.seed, "batch", step))
        batch_size = cfg.train.batch_size

        feats, styles0, styles1, targets, style_ids = [], [], [], [], []
        elastic_terms = []
        # The elastic term rotates over a subset of the batch each step; with
        # styles drawn round-robin every style is regularized equally often.
        n_el = max(1, min(cfg.train.elastic_batch_samples, batch_size))
        elastic_rows = {(step + j) % batch_size for j in range(n_el)}
        per_style_points = cfg.train.elastic_points // n_el
        for i in range(batch_size):
            style = (step * batch_size + i) % cfg.num_styles
            group = self._by_style[style]
            sample = self.dataset[group[int(rng.integers(0, len(group)))]]
            field = self._field(sample.instance_seed)
            w_r = self._codes[sample.instance_seed]
            pose = CameraPose(sample.azimuth, sample.elevation,
                              cfg.camera.radius, cfg.camera.fov)
            feat_img, kept = render_deformed(
                field, self.stylefield, w_r, style, 1.0, pose,
                cfg.render.feature_resolution, samples=cfg.render.samples_per_ray,
                alpha=cfg.scene.alpha, t_near=cfg.camera.t_near, t_far=cfg.camera.t_far,
                stratify_seed=derive_seed(cfg.train.seed, "jitter", step, i),
                collect_points=True)
            z_s = self.stylefield.style_embeddings[style]
            feats.append(feat_img.values)
            styles0.append(mix_style(w_r, z_s, self.adapters, 0, 1.0))
            styles1.append(mix_style(w_r, z_s, self.adapters, 1, 1.0))
            targets.append(sample.image_styled.permute(2, 0, 1))
            style_ids.append(style)

            if i in elastic_rows:
                pts = self._elastic_points(kept, per_style_points, step, i)
                if pts is not None:
                    jac = self.stylefield.jacobian(pts, w_r, style, create_graph=True)
                    frob2 = (jac ** 2).sum(dim=(-2, -1))
                    elastic_terms.append(torch.relu(frob2 - cfg.train.elastic_eps))

        pred_b = self._decoder_fn(torch.stack(feats).permute(0, 3, 1, 2),
                                  [torch.stack(styles0), torch.stack(styles1)])
        target_b = torch.stack(targets)
        l_rec = loss_rec(pred_b, target_b, self.proxy)
        l_elastic = torch.cat(elastic_terms).mean() if elastic_terms \
            else torch.zeros((), dtype=pred_b.dtype)
        total = l_rec + cfg.train.lambda_elastic * l_elastic
        l_g = torch.zeros((), dtype=pred_b.dtype)
        if self.adversarial_active:
            l_g = self.adversarial_loss(pred_b, style_ids, "generator")
            total = total + cfg.train.lambda_adv * l_g

        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: rec={float(l_rec)!r} "
                f"elastic={float(l_elastic)!r} adv={float(l_g)!r}")
        total.backward()
        self.opt.step()

        if self.adversarial_active:
            for p in self.discriminator.parameters():
                p.grad = None
            d_loss = self.adversarial_loss(pred_b.detach(), style_ids,
                                           "discriminator", real_images=target_b)
            d_loss.backward()
            self.opt_disc.step()

        self.step += 1
        return StepReport(step, float(total.detach()), float(l_rec.detach()),
                          float(l_elastic.detach()), float(l_g.detach()),
                          (time.perf_counter() - t0) * 1e3)

    def _elastic_points(self, kept: torch.Tensor, count: int, step: int, i: int):
        cfg = self.cfg
        if count <= 0:
            return None
        rng = np_generator(derive_seed(cfg.train.seed, "elastic", step, i))
        if cfg.train.elastic_uniform or kept.numel() == 0:
            pts = rng.uniform(-1.0, 1.0, size=(count, 3))
            return torch.from_numpy(pts).to(torch.float32)
        take = min(count, kept.shape[0])
        idx = rng.choice(kept.shape[0], size=take, replace=False)
        return kept.detach()[torch.from_numpy(idx)]

    # -- state persistence ---------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {k: v.data for k, v in self.params.items()}
        tensors.update({k: v.data for k, v in self.decoder.trainable_tensors().items()})
        tensors.update(self.opt.state_tensors("optim"))
        if self.discriminator is not None:
            tensors.update({k: v.data for k, v
                            in self.discriminator.trainable_tensors().items()})
            tensors.update(self.opt_disc.state_tensors("optim_disc"))
        tensors.update(meta_tensors("toonify", self.step, self.cfg.echo(),
                                    adam_t=self.opt.t,
                                    adam_t_disc=self.opt_disc.t if self.opt_disc else 0))
        return tensors

    def save(self, path):
        write_checkpoint(self.state_tensors(), path)

    def load_state(self, ckpt: Checkpoint):
        if ckpt.kind != "toonify":
            raise CheckpointError(f"expected a toonify checkpoint, got {ckpt.kind!r}")
        for name, p in self.params.items():
            p.data.copy_(ckpt.tensors[name])
        for name, p in self.decoder.trainable_tensors().items():
            p.data.copy_(ckpt.tensors[name])
        self.decoder_checksum = self.decoder.parameter_checksum()
        self.opt.load_state("optim", ckpt.tensors, ckpt.adam_t)
        if self.discriminator is not None and "optim_disc/m/discriminator/convs.0.weight" \
                in ckpt.tensors:
            for name, p in self.discriminator.trainable_tensors().items():
                p.data.copy_(ckpt.tensors[name])
            self.opt_disc.load_state("optim_disc", ckpt.tensors, ckpt.adam_t_disc)
        self.step = ckpt.step

    def run(self, out_dir, steps: int | None = None) -> list[StepReport]:
        """Train to ``steps`` (default: config total), logging and checkpointing."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.toml").write_text(self.cfg.echo())
        target = self.cfg.train.steps if steps is None else steps
        log_path = out / "loss_log.tsv"
        new_log = not log_path.exists() or self.step == 0
        reports = []
        with open(log_path, "w" if new_log else "a") as log:
            if new_log:
                log.write(StepReport.LOG_HEADER + "\n")
            while self.step < target:
                report = self.train_step()
                reports.append(report)
                log.write(report.log_row() + "\n")
                log.flush()
                if not self.quiet and report.step % 25 == 0:
                    print(f"[train] {report.log_row()}", flush=True)
                if self.step % self.cfg.train.checkpoint_every == 0 or self.step == target:
                    self.save(out / f"ckpt_{self.step:06d}.dt3d")
        self.save(out / "final.dt3d")
        return reports
