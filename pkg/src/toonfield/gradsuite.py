"""Gradient verification suite: every trainable module and every loss term,
checked against the central finite-difference oracle at float64.

Networks here are miniature instances of the real classes (small widths, few
pixels) so that perturbing every element stays fast; the code paths are the
shipped ones.
"""

from __future__ import annotations

import torch

from .decoder import DecoderNet, StyleAdapters, decode, mix_style
from .numcore import GradCheckReport, finite_difference_check, rand_normal, rand_uniform
from .renderer import CameraPose, render_deformed
from .scene import InstanceCode, SceneField, sample_instance_code
from .stylefield import StyleFieldNet
from .training import Discriminator, PerceptualProxy, loss_adv, loss_elastic, loss_rec

F64 = torch.float64


def _merge(target: GradCheckReport, part: GradCheckReport):
    target.entries.extend(part.entries)


def _tiny_stylefield(seed: int, backbone: str = "siren", randomize_head: bool = False,
                     num_styles: int = 2) -> StyleFieldNet:
    net = StyleFieldNet(num_styles, instance_dim=6, embed_dim=4, hidden=8, layers=4,
                        mapping_width=8, mapping_layers=4, backbone=backbone,
                        seed=seed, dtype=F64)
    if randomize_head:
        with torch.no_grad():
            net.head.weight.copy_(rand_normal(net.head.weight.shape, seed + 7, F64, 0.3))
            net.head.bias.copy_(rand_normal(net.head.bias.shape, seed + 8, F64, 0.1))
    return net


def check_primitives(seed: int, step: float, tol: float) -> GradCheckReport:
    """Every primitive used in training, as small scalar graphs."""
    report = GradCheckReport()

    def case(name, build_inputs, graph_of):
        inputs = build_inputs()
        _merge(report, finite_difference_check(lambda: graph_of(inputs), inputs,
                                               step, tol, label=name))

    case("matmul",
         lambda: {"a": rand_normal((3, 4), seed, F64), "b": rand_normal((4, 2), seed + 1, F64)},
         lambda i: (i["a"] @ i["b"]).pow(2).sum())
    case("add_multiply",
         lambda: {"a": rand_normal((5,), seed + 2, F64), "b": rand_normal((5,), seed + 3, F64)},
         lambda i: ((i["a"] + i["b"]) * i["a"]).sum())
    case("sin",
         lambda: {"x": rand_normal((6,), seed + 4, F64)},
         lambda i: torch.sin(i["x"]).sum())
    case("sigmoid_exp",
         lambda: {"x": rand_normal((6,), seed + 5, F64)},
         lambda i: (torch.sigmoid(i["x"]) + torch.exp(0.3 * i["x"])).sum())
    # keep ReLU inputs away from the kink so central differences are valid
    case("relu",
         lambda: {"x": rand_normal((8,), seed + 6, F64) + torch.where(
             rand_normal((8,), seed + 6, F64) >= 0, 0.05, -0.05)},
         lambda i: torch.relu(i["x"]).pow(2).sum())
    case("mean_sum",
         lambda: {"x": rand_normal((3, 4), seed + 7, F64)},
         lambda i: i["x"].mean() + 0.5 * i["x"].sum())
    case("broadcast",
         lambda: {"a": rand_normal((3, 1), seed + 8, F64), "b": rand_normal((1, 4), seed + 9, F64)},
         lambda i: (i["a"] * i["b"] + i["a"]).sum())
    case("transpose",
         lambda: {"x": rand_normal((3, 4), seed + 10, F64)},
         lambda i: (i["x"].T @ i["x"]).trace())
    case("per_channel_mean_std",
         lambda: {"x": rand_normal((2, 3, 4, 4), seed + 11, F64)},
         lambda i: (i["x"].mean(dim=(2, 3)).sum()
                    + i["x"].var(dim=(2, 3), unbiased=False).sqrt().sum()))
    return report


def check_stylefield(seed: int, step: float, tol: float, backbone: str) -> GradCheckReport:
    net = _tiny_stylefield(seed, backbone=backbone)
    x = rand_uniform((5, 3), -1.0, 1.0, seed + 20, F64)
    w_r = rand_normal((6,), seed + 21, F64)

    def graph():
        off = net.deform(x, w_r, 1)
        return (off ** 2).sum() + off.sum()

    inputs = {f"{backbone}/{k}": v for k, v in net.named_parameters()}
    inputs[f"{backbone}/x"] = x
    inputs[f"{backbone}/w_r"] = w_r
    return finite_difference_check(graph, inputs, step, tol, label="stylefield")


def check_decoder_and_adapters(seed: int, step: float, tol: float) -> GradCheckReport:
    report = GradCheckReport()
    dec = DecoderNet(feature_dim=3, channels=5, style_dim=6, seed=seed, dtype=F64)
    adapters = StyleAdapters(embed_dim=4, width=5, style_dim=6, seed=seed, dtype=F64)
    feats = rand_uniform((4, 4, 3), 0.0, 1.0, seed + 30, F64)
    w_r = rand_normal((6,), seed + 31, F64)
    z_s = rand_normal((4,), seed + 32, F64)

    # pretraining mode: decoder parameters receive gradients
    def pretrain_graph():
        rgb = decode(dec, feats, w_r)
        return (rgb ** 2).mean()

    _merge(report, finite_difference_check(
        pretrain_graph, dict(dec.named_parameters()), step, tol, label="decoder_pretrain"))

    # toonify mode: frozen decoder, gradients flow to features/adapters/embedding
    dec.freeze()

    def mix_graph():
        rgb = decode(dec, feats, w_r, z_s, adapters, weight=0.7)
        return (rgb ** 2).mean()

    inputs = {f"adapters/{k}": v for k, v in adapters.named_parameters()}
    inputs["features"] = feats
    inputs["z_s"] = z_s
    _merge(report, finite_difference_check(mix_graph, inputs, step, tol, label="style_mix"))
    return report


def check_discriminator(seed: int, step: float, tol: float) -> GradCheckReport:
    report = GradCheckReport()
    disc = Discriminator(num_styles=2, width=3, seed=seed, dtype=F64)
    fake = rand_uniform((2, 3, 8, 8), 0.0, 1.0, seed + 40, F64)
    real = rand_uniform((2, 3, 8, 8), 0.0, 1.0, seed + 41, F64)

    def d_graph():
        return loss_adv(disc, fake, [0, 1], "discriminator", real_images=real)

    _merge(report, finite_difference_check(
        d_graph, dict(disc.named_parameters()), step, tol, label="disc_loss"))

    def g_graph():
        return loss_adv(disc, fake, [0, 1], "generator")

    _merge(report, finite_difference_check(g_graph, {"fake": fake}, step, tol,
                                           label="gen_loss"))
    return report


def check_losses(seed: int, step: float, tol: float) -> GradCheckReport:
    report = GradCheckReport()
    pred = rand_uniform((3, 6, 6), 0.1, 0.9, seed + 50, F64)
    target = rand_uniform((3, 6, 6), 0.1, 0.9, seed + 51, F64)
    for kind in ("identity", "random-features"):
        proxy = PerceptualProxy(kind, seed + 52, F64)
        _merge(report, finite_difference_check(
            lambda: loss_rec(pred, target, proxy), {"pred": pred},
            step, tol, label=f"loss_rec[{kind}]"))

    # elastic loss differentiates through the Jacobian (double backprop)
    net = _tiny_stylefield(seed + 60, randomize_head=True)
    pts = rand_uniform((6, 3), -1.0, 1.0, seed + 61, F64)
    w_r = rand_normal((6,), seed + 62, F64)

    def elastic_graph():
        return loss_elastic(net, pts, w_r, 0, eps=0.01, create_graph=True)

    _merge(report, finite_difference_check(
        elastic_graph, dict(net.named_parameters()), step, tol, label="loss_elastic"))
    return report


def check_render_pipeline(seed: int, step: float, tol: float) -> GradCheckReport:
    """End-to-end: deformed render -> decode -> reconstruction + elastic loss.

    Uses the exact (cull-free) render path; checks a representative subset of
    trainables so the oracle stays fast.
    """
    code = InstanceCode(rand_normal((64,), seed + 70, F64) * 0.5)
    field = SceneField(code, dtype=F64)
    net = StyleFieldNet(2, instance_dim=64, embed_dim=4, hidden=8, layers=4,
                        mapping_width=8, mapping_layers=4, seed=seed, dtype=F64)
    with torch.no_grad():
        net.head.weight.copy_(rand_normal(net.head.weight.shape, seed + 71, F64, 0.2))
    dec = DecoderNet(feature_dim=8, channels=4, style_dim=64, seed=seed, dtype=F64)
    dec.freeze()
    adapters = StyleAdapters(embed_dim=4, width=4, style_dim=64, seed=seed, dtype=F64)
    proxy = PerceptualProxy("random-features", seed + 72, F64)
    pose = CameraPose(0.2, -0.1)
    target = rand_uniform((3, 8, 8), 0.0, 1.0, seed + 73, F64)
    w_r = code.values

    def graph():
        feat, kept = render_deformed(field, net, w_r, 1, 1.0, pose, 4, samples=6,
                                     cull=False, collect_points=True)
        z_s = net.style_embeddings[1]
        styles = [mix_style(w_r, z_s, adapters, site, 1.0) for site in (0, 1)]
        rgb = dec(feat.values.permute(2, 0, 1)[None], [s[None] for s in styles])[0]
        rec = loss_rec(rgb, target, proxy)
        ela = loss_elastic(net, kept.detach()[:4], w_r, 1, eps=0.01, create_graph=True)
        return rec + 0.01 * ela

    inputs = {
        "head.weight": net.head.weight,
        "trunk.2.weight": net.trunk[2].weight,
        "trunk.0.bias": net.trunk[0].bias,
        "film_head.bias": net.film_head.bias,
        "style_embeddings": net.style_embeddings,
        "adapters.site1.out": adapters.adapters[1][2].weight,
    }
    return finite_difference_check(graph, inputs, step, tol, label="render_pipeline")


def run_gradient_suite(seed: int = 3, step: float = 1e-5,
                       tolerance: float = 1e-4, rounds: int = 3) -> GradCheckReport:
    """Full suite over ``rounds`` seeded random inputs per check."""
    report = GradCheckReport()
    for r in range(rounds):
        s = seed + 1000 * r
        _merge(report, check_primitives(s, step, tolerance))
        _merge(report, check_stylefield(s, step, tolerance, "siren"))
        _merge(report, check_stylefield(s, step, tolerance, "relu-mlp"))
        _merge(report, check_decoder_and_adapters(s, step, tolerance))
        _merge(report, check_discriminator(s, step, tolerance))
        _merge(report, check_losses(s, step, tolerance))
    _merge(report, check_render_pipeline(seed, step, tolerance))
    return report
