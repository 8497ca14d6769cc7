"""Geometry/texture-decomposed 3D toonification at desk scale.

A frozen procedural SDF scene is warped into styled geometry by a conditional
deformation field, and retextured by adaptive style mixing in a frozen
upsampling decoder; training runs entirely on synthetic pairs produced by
analytic style oracles.
"""

from .config import RunConfig, default_config, load_config
from .control import ToonifyModel, ToonifyRequest, degree_sweep, toonify
from .decoder import DecoderNet, StyleAdapters, adain, decode, mix_style
from .metrics import MetricsReport, evaluate_model, psnr
from .renderer import CameraPose, FeatureImage, RayBatch, generate_rays, integrate, \
    render_deformed, render_real, render_styled_oracle
from .scene import InstanceCode, SceneField, StyleOracle, sdf_to_density
from .stylefield import StyleFieldNet
from .training import (Checkpoint, Discriminator, ToonifyTrainer, load_checkpoint,
                       load_dataset, pretrain_decoder, synthesize_dataset,
                       write_checkpoint)

__version__ = "0.1.0"
