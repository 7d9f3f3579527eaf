"""Unified 4D hand-motion synthesis: a joint VAE aligning motion and
condition streams in one latent space, and a latent diffusion denoiser
sampling motion from heterogeneous, possibly incomplete conditions.

Subpackages split along the pipeline: geometry and the differentiable hand
model, the joint VAE, the vision hand perceptron, the latent denoiser and
samplers, synthetic scene generation, evaluation metrics, and the two-stage
trainer with its CLI.
"""

from .config import ModelConfig, desk_config, paper_config, preset
from .datagen import GenSpec, SyntheticScene, gen_scene, load_scene, save_scene
from .diffusion import (Denoiser, NoiseSchedule, SamplerConfig,
                        cosine_schedule, sample_ddim, sample_ddpm)
from .geometry import BinaryMask, CameraIntrinsics, RigidTransform
from .hand_model import (HandPose, HandSkeleton, Joints3D, default_skeleton,
                         forward_kinematics)
from .joint_vae import (ConditionSignal, JointVae, MotionSequence,
                        VaeLossWeights, vae_loss)
from .metrics import (acc_err, auc_j, f_scores, g_mpjpe, ga_mpjpe, pa_mpjpe,
                      procrustes, sequence_metrics)
from .perceptron import FeatureGrid, HandPerceptron, synthetic_feature_provider
from .trainer import (Checkpoint, TrainConfig, evaluate, infer, load_models,
                      train_stage1_vae, train_stage2_diffusion)

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "CameraIntrinsics", "Checkpoint", "ConditionSignal",
    "Denoiser", "FeatureGrid", "GenSpec", "HandPerceptron", "HandPose",
    "HandSkeleton", "Joints3D", "JointVae", "ModelConfig", "MotionSequence",
    "NoiseSchedule", "RigidTransform", "SamplerConfig", "SyntheticScene",
    "TrainConfig", "VaeLossWeights", "acc_err", "auc_j", "cosine_schedule",
    "default_skeleton", "desk_config", "evaluate", "f_scores",
    "forward_kinematics", "g_mpjpe", "ga_mpjpe", "gen_scene", "infer",
    "load_models", "load_scene", "pa_mpjpe", "paper_config", "preset",
    "procrustes", "sample_ddim", "sample_ddpm", "save_scene",
    "sequence_metrics", "synthetic_feature_provider", "train_stage1_vae",
    "train_stage2_diffusion", "vae_loss",
]
