"""Two-stage training driver, hand-rolled AdamW, checkpointing, inference,
and evaluation.

Stage 1 fits the motion VAE with condition alignment; stage 2 freezes every
VAE parameter (asserted byte-identical afterwards) and fits the denoiser,
the hand perceptron, and the unconditional tokens. All loops are plain
single-writer Python over explicit parameter dicts so a fixed seed with one
thread reproduces runs bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import hashlib
import json
import math
import os

import numpy as np
import torch
import yaml

from .config import ModelConfig, preset as preset_cfg
from .container import read_container, write_container
from .datagen import (BUCKET_LABELS, SyntheticScene, load_split,
                      occlusion_bucket, window_scene)
from .diffusion import (Denoiser, DiffLossWeights, SamplerConfig,
                        cfg_combine, condition_dropout, cosine_schedule,
                        denoiser_loss, sample_ddim, sample_ddpm)
from .errors import (MissingCheckpoint, NonFiniteLoss, ShapeMismatch)
from .hand_model import HandPose, HandSkeleton, default_skeleton, fk_tensor
from .joint_vae import (CONDITION_KINDS, JointVae, MotionSequence,
                        VaeLossWeights, pad_frames, vae_loss)
from .metrics import sequence_metrics, write_reports
from .perceptron import HandPerceptron

CHECKPOINT_VERSION = 1
SEED_ENV_VAR = "HAND4D_SEED"


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """One training run. Field names match the config-file keys one to one."""

    stage: str
    data_dir: str
    out_dir: str
    preset: str = "desk"
    lr: float = 1e-4
    warmup_iters: int = 100
    total_iters: int = 400
    batch_size: int = 8
    seed: int = 0
    window: int = 48
    dropout_p: float = 0.1
    threads: int = 1
    log_every: int = 50
    vae_checkpoint: Optional[str] = None
    vae_weights: VaeLossWeights = field(default_factory=VaeLossWeights)
    diff_weights: DiffLossWeights = field(default_factory=DiffLossWeights)

    def __post_init__(self):
        if self.stage not in ("vae", "diffusion"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValueError("need 0 <= warmup_iters <= total_iters")
        if self.batch_size < 1 or self.window < 1:
            raise ValueError("batch_size and window must be positive")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0,1]")


def seed_with_env(seed: int) -> int:
    """Config seed, unless the HAND4D_SEED env var overrides it."""
    raw = os.environ.get(SEED_ENV_VAR)
    return int(raw) if raw else seed


def load_train_config(path, **overrides) -> TrainConfig:
    """Parse a YAML config file whose keys mirror TrainConfig fields."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "vae_weights" in raw:
        raw["vae_weights"] = VaeLossWeights(**raw["vae_weights"])
    if "diff_weights" in raw:
        raw["diff_weights"] = DiffLossWeights(**raw["diff_weights"])
    raw.update(overrides)
    cfg = TrainConfig(**raw)
    return replace(cfg, seed=seed_with_env(cfg.seed))


# -- optimizer ----------------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimState:
    """First/second moment estimates plus the shared step counter."""

    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]
    step: int = 0

    @staticmethod
    def zeros(params: Dict[str, torch.Tensor]) -> "OptimState":
        return OptimState({k: torch.zeros_like(p) for k, p in params.items()},
                          {k: torch.zeros_like(p) for k, p in params.items()})


def adamw_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
               state: OptimState, hyper: AdamHyper) -> OptimState:
    """One decoupled-weight-decay Adam update, in place.

    Parameters without a gradient entry still receive weight decay (grad 0),
    matching the reference update p <- p - lr (m_hat / (sqrt(v_hat) + eps)
    + decay * p).
    """
    state.step += 1
    bc1 = 1.0 - hyper.beta1 ** state.step
    bc2 = 1.0 - hyper.beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ShapeMismatch(f"grad shape for {name} differs from param")
            m = state.m[name]
            v = state.v[name]
            m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
            denom = (v / bc2).sqrt_().add_(hyper.eps)
            p.add_(-hyper.lr * ((m / bc1) / denom + hyper.weight_decay * p))
    return state


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> lr over warmup, then linear decay to 0 at total."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    w, total = config.warmup_iters, config.total_iters
    if w > 0 and iteration <= w:
        return config.lr * iteration / w
    if iteration >= total:
        return 0.0
    return config.lr * (total - iteration) / (total - w)


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume or run a stage: parameters, optimizer
    moments, rng states, and the model preset."""

    version: int
    stage: str
    iteration: int
    model_cfg: ModelConfig
    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    opt_step: int
    torch_rng: np.ndarray
    extra: Optional[dict] = None    # numpy rng state, loss telemetry


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {"torch_rng": ckpt.torch_rng.astype(np.uint8)}
    for name, arr in ckpt.params.items():
        arrays[f"param/{name}"] = arr
    for name, arr in ckpt.m.items():
        arrays[f"m/{name}"] = arr
    for name, arr in ckpt.v.items():
        arrays[f"v/{name}"] = arr
    meta = {
        "version": ckpt.version,
        "stage": ckpt.stage,
        "iteration": ckpt.iteration,
        "opt_step": ckpt.opt_step,
        "model_cfg": ckpt.model_cfg.to_dict(),
        "extra": ckpt.extra,
    }
    write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    if not Path(path).exists():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    kind, meta, arrays = read_container(path)
    if kind != "checkpoint":
        raise MissingCheckpoint(f"{path} is not a checkpoint (kind {kind!r})")
    split = {"param": {}, "m": {}, "v": {}}
    for key, arr in arrays.items():
        if "/" in key:
            group, name = key.split("/", 1)
            split[group][name] = arr
    return Checkpoint(meta["version"], meta["stage"], meta["iteration"],
                      ModelConfig.from_dict(meta["model_cfg"]),
                      split["param"], split["m"], split["v"],
                      meta["opt_step"], arrays["torch_rng"],
                      meta.get("extra"))


def _rng_state_json(rng: np.random.Generator) -> dict:
    """Bit-generator state as plain JSON types (Python ints are unbounded)."""
    return json.loads(json.dumps(rng.bit_generator.state))


def params_to_arrays(params: Dict[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    return {k: p.detach().cpu().numpy().copy() for k, p in params.items()}


def load_params_into(module: torch.nn.Module, arrays: Dict[str, np.ndarray],
                     prefix: str = "") -> None:
    """Copy checkpoint arrays into a module's parameters, name for name."""
    own = dict(module.named_parameters())
    for name, p in own.items():
        key = prefix + name
        if key not in arrays:
            raise MissingCheckpoint(f"checkpoint lacks parameter {key}")
        src = torch.as_tensor(arrays[key], dtype=p.dtype)
        if src.shape != p.shape:
            raise ShapeMismatch(f"checkpoint {key} has shape {tuple(src.shape)}, "
                                f"model expects {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(src)


def vae_param_digest(vae: JointVae) -> str:
    """SHA-256 over every parameter's bytes, iterated in name order."""
    h = hashlib.sha256()
    for name, p in sorted(vae.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# -- batch assembly ------------------------------------------------------------


@dataclass
class SceneBundle:
    """Per-scene tensors in model dtype, ready to stack into batches."""

    x: torch.Tensor
    cond_data: Dict[str, torch.Tensor]
    cond_mask: Dict[str, torch.Tensor]
    vision_mask: torch.Tensor
    features: torch.Tensor
    scene_id: str
    r_occ: float


def bundle_scene(scene: SyntheticScene) -> SceneBundle:
    cond_data = {}
    cond_mask = {}
    for kind in CONDITION_KINDS:
        sig = scene.conditions[kind]
        cond_data[kind] = torch.as_tensor(sig.flat_data(), dtype=torch.float32)
        cond_mask[kind] = torch.as_tensor(sig.mask.astype(np.bool_))
    return SceneBundle(
        x=torch.as_tensor(scene.motion.params, dtype=torch.float32),
        cond_data=cond_data,
        cond_mask=cond_mask,
        vision_mask=torch.as_tensor(scene.condition_masks["vision"].astype(np.bool_)),
        features=torch.as_tensor(scene.features.tokens, dtype=torch.float32),
        scene_id=scene.scene_id,
        r_occ=float(scene.occlusion.mean()),
    )


def draw_bundle(scenes: Sequence[SyntheticScene], cache: Dict[int, SceneBundle],
                idx: int, window: int, rng: np.random.Generator) -> SceneBundle:
    """Bundle for one training draw; longer scenes get a random
    re-canonicalized window, exact-length scenes come from the cache."""
    n = scenes[idx].n_frames
    if n < window:
        raise ShapeMismatch(f"scene {idx} has {n} frames, window needs {window}")
    if n == window:
        if idx not in cache:
            cache[idx] = bundle_scene(scenes[idx])
        return cache[idx]
    start = int(rng.integers(0, n - window + 1))
    return bundle_scene(window_scene(scenes[idx], start, window))


def stack_bundles(bundles: List[SceneBundle], with_features: bool = True):
    x = torch.stack([b.x for b in bundles])
    cond_data = {k: torch.stack([b.cond_data[k] for b in bundles])
                 for k in CONDITION_KINDS}
    cond_mask = {k: torch.stack([b.cond_mask[k] for b in bundles])
                 for k in CONDITION_KINDS}
    vision_mask = torch.stack([b.vision_mask for b in bundles])
    feats = torch.stack([b.features for b in bundles]) if with_features else None
    return x, cond_data, cond_mask, vision_mask, feats


def _require_finite(total: torch.Tensor, iteration: int, parts: Dict[str, float]):
    if not torch.isfinite(total):
        raise NonFiniteLoss(
            f"non-finite loss at iteration {iteration}: total={float(total)} parts={parts}")


# -- stage 1 -------------------------------------------------------------------

ALIGN_KINDS = ("keypoints2d", "keypoints3d")


def train_stage1_vae(config: TrainConfig, scenes: Sequence[SyntheticScene],
                     skel: Optional[HandSkeleton] = None) -> Checkpoint:
    """Fit the joint VAE: reconstruction, KL, latent alignment, and auxiliary
    decoding for the 2D/3D keypoint encoders (the three decode streams run as
    one stacked batch).

    Returns the final Checkpoint; also writes ``out_dir/vae.ckpt``.
    """
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    np_rng = np.random.default_rng(config.seed)
    skel = skel or default_skeleton()

    mcfg = preset_cfg(config.preset)
    model = JointVae(mcfg)
    model.train()
    params = dict(model.named_parameters())
    state = OptimState.zeros(params)

    cache: Dict[int, SceneBundle] = {}
    losses = []
    for it in range(1, config.total_iters + 1):
        idx = np_rng.integers(0, len(scenes), size=config.batch_size)
        bundles = [draw_bundle(scenes, cache, int(i), config.window, np_rng)
                   for i in idx]
        x, cond_data, cond_mask, _, _ = stack_bundles(bundles, with_features=False)
        b, n, _ = x.shape

        eps = torch.randn(b, mcfg.d_model)
        z, g = model.encode_motion(x, eps=eps, sample=True)
        z_c = {k: model.encode_condition_tensors(k, cond_data[k], cond_mask[k])
               for k in ALIGN_KINDS}

        streams = torch.cat([z] + [z_c[k] for k in ALIGN_KINDS], dim=0)
        g_rep = g.sample.repeat(1 + len(ALIGN_KINDS), 1)
        ff_rep = x[:, 0].repeat(1 + len(ALIGN_KINDS), 1)
        decoded = model.decode(streams, g_rep, ff_rep)
        x_hat = decoded[:b]
        x_hat_c = {k: decoded[(j + 1) * b:(j + 2) * b]
                   for j, k in enumerate(ALIGN_KINDS)}

        total, parts = vae_loss(x, x_hat, x_hat_c, z, z_c, g,
                                config.vae_weights, skel)
        _require_finite(total, it, parts)
        losses.append(float(total.detach()))

        for p in params.values():
            p.grad = None
        total.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adamw_step(params, grads, state, AdamHyper(lr=lr_at(it, config)))

    ckpt = Checkpoint(CHECKPOINT_VERSION, "vae", config.total_iters, mcfg,
                      params_to_arrays(params),
                      params_to_arrays(state.m), params_to_arrays(state.v),
                      state.step, torch.get_rng_state().numpy(),
                      {"numpy_rng": _rng_state_json(np_rng),
                       "losses_head": losses[:10], "losses_tail": losses[-10:]})
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "vae.ckpt")
    return ckpt


# -- stage 2 -------------------------------------------------------------------


@dataclass
class EncodedScene:
    """Frozen-VAE encodings cached once so the stage-2 loop never re-runs
    the encoders."""

    z0_full: torch.Tensor               # (N+1, d); slot N is g (= mu)
    z_c: Dict[str, torch.Tensor]        # kind -> (N, d)
    cond_mask: Dict[str, torch.Tensor]  # kind -> (N,)
    vision_mask: torch.Tensor
    features: torch.Tensor
    first_frame: torch.Tensor           # (61,)
    x: torch.Tensor                     # (N, 61)


def build_vae(ckpt: Checkpoint) -> JointVae:
    vae = JointVae(ckpt.model_cfg)
    load_params_into(vae, ckpt.params)
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    return vae


def encode_scene(vae: JointVae, bundle: SceneBundle) -> EncodedScene:
    with torch.no_grad():
        z, g = vae.encode_motion(bundle.x[None], sample=False)
        z_c = {k: vae.encode_condition_tensors(
            k, bundle.cond_data[k][None], bundle.cond_mask[k][None])[0]
            for k in CONDITION_KINDS}
    z0_full = torch.cat([z[0], g.sample], dim=0)
    return EncodedScene(z0_full, z_c, bundle.cond_mask, bundle.vision_mask,
                        bundle.features, bundle.x[0], bundle.x)


def train_stage2_diffusion(config: TrainConfig,
                           scenes: Sequence[SyntheticScene],
                           vae_ckpt_path=None,
                           skel: Optional[HandSkeleton] = None) -> Checkpoint:
    """Fit the denoiser, hand perceptron, and unconditional tokens against a
    frozen VAE (parameter digest asserted unchanged).

    Per iteration: per-sample timestep, forward diffusion of the cached clean
    latents, whole-sequence condition dropout, and the latent MSE plus the
    reconstruction loss through the frozen decoder.
    """
    torch.set_num_threads(config.threads)
    vae_path = vae_ckpt_path or config.vae_checkpoint
    if vae_path is None:
        raise MissingCheckpoint("stage 2 needs a stage-1 checkpoint path")
    vae_ckpt = load_checkpoint(vae_path)
    if vae_ckpt.stage != "vae":
        raise MissingCheckpoint(f"{vae_path} holds stage {vae_ckpt.stage!r}, not vae")

    torch.manual_seed(config.seed)
    np_rng = np.random.default_rng(config.seed)
    drop_rng = torch.Generator().manual_seed(config.seed + 1)
    skel = skel or default_skeleton()

    mcfg = vae_ckpt.model_cfg
    vae = build_vae(vae_ckpt)
    digest_before = vae_param_digest(vae)

    denoiser = Denoiser(mcfg)
    perceptron = HandPerceptron(mcfg.d_model, mcfg.vision_dim,
                                mcfg.perceptron_heads, mcfg.max_frames)
    denoiser.train()
    perceptron.train()
    params = {f"denoiser.{k}": p for k, p in denoiser.named_parameters()}
    params.update({f"perceptron.{k}": p for k, p in perceptron.named_parameters()})
    state = OptimState.zeros(params)
    sched = cosine_schedule(mcfg.diffusion_steps)
    ab = torch.tensor([sched.alpha_bar(t) for t in range(sched.n_steps + 1)],
                      dtype=torch.float32)

    if any(s.n_frames != config.window for s in scenes):
        encoded = None    # windowed scenes are re-encoded per draw
    else:
        encoded = [encode_scene(vae, bundle_scene(s)) for s in scenes]
    cache: Dict[int, SceneBundle] = {}

    losses = []
    for it in range(1, config.total_iters + 1):
        idx = [int(i) for i in np_rng.integers(0, len(scenes), size=config.batch_size)]
        if encoded is not None:
            enc = [encoded[i] for i in idx]
        else:
            enc = [encode_scene(vae, draw_bundle(scenes, cache, i,
                                                 config.window, np_rng))
                   for i in idx]
        b = len(enc)
        n = enc[0].x.shape[0]
        z0 = torch.stack([e.z0_full for e in enc])
        x = torch.stack([e.x for e in enc])
        ff = torch.stack([e.first_frame for e in enc])

        t = torch.randint(1, sched.n_steps + 1, (b,))
        eps = torch.randn_like(z0)
        ab_t = ab[t][:, None, None]
        z_t = torch.sqrt(ab_t) * z0 + torch.sqrt(1.0 - ab_t) * eps

        conditions = {}
        for kind in CONDITION_KINDS:
            z_c = torch.stack([e.z_c[kind] for e in enc])
            z_c = condition_dropout(z_c, denoiser.uncond[kind],
                                    config.dropout_p, drop_rng)
            mask = torch.stack([e.cond_mask[kind] for e in enc])
            conditions[kind] = (z_c, mask)

        feats = torch.stack([e.features for e in enc])
        with torch.no_grad():
            a1 = vae.anchor_linear(ff)
        hand = perceptron(feats, a1)
        hand = condition_dropout(hand, denoiser.uncond["vision"],
                                 config.dropout_p, drop_rng)
        vision_mask = torch.stack([e.vision_mask for e in enc])

        z0_hat = denoiser(z_t, t, conditions, hand, vision_mask)
        x_hat = vae.decode(z0_hat[:, :n], z0_hat[:, n], ff)
        total, parts = denoiser_loss(z0, z0_hat, x, x_hat, config.diff_weights,
                                     config.vae_weights.w_joint_rec, skel)
        _require_finite(total, it, parts)
        losses.append(float(total.detach()))

        for p in params.values():
            p.grad = None
        total.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adamw_step(params, grads, state, AdamHyper(lr=lr_at(it, config)))

    if vae_param_digest(vae) != digest_before:
        raise AssertionError("frozen VAE parameters changed during stage 2")

    ckpt = Checkpoint(CHECKPOINT_VERSION, "diffusion", config.total_iters, mcfg,
                      params_to_arrays(params),
                      params_to_arrays(state.m), params_to_arrays(state.v),
                      state.step, torch.get_rng_state().numpy(),
                      {"numpy_rng": _rng_state_json(np_rng),
                       "losses_head": losses[:10], "losses_tail": losses[-10:]})
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "diffusion.ckpt")
    return ckpt


# -- inference -----------------------------------------------------------------


def load_models(vae_ckpt_path, diff_ckpt_path):
    """(vae, denoiser, perceptron, model_cfg) in eval mode from checkpoints."""
    vae_ckpt = load_checkpoint(vae_ckpt_path)
    diff_ckpt = load_checkpoint(diff_ckpt_path)
    if diff_ckpt.stage != "diffusion":
        raise MissingCheckpoint(
            f"{diff_ckpt_path} holds stage {diff_ckpt.stage!r}, not diffusion")
    vae = build_vae(vae_ckpt)
    mcfg = diff_ckpt.model_cfg
    denoiser = Denoiser(mcfg)
    perceptron = HandPerceptron(mcfg.d_model, mcfg.vision_dim,
                                mcfg.perceptron_heads, mcfg.max_frames)
    load_params_into(denoiser, diff_ckpt.params, prefix="denoiser.")
    load_params_into(perceptron, diff_ckpt.params, prefix="perceptron.")
    denoiser.eval()
    perceptron.eval()
    return vae, denoiser, perceptron, mcfg


def infer(models, scene: SyntheticScene, kinds: Sequence[str],
          sampler: SamplerConfig, seed: int = 0,
          first_frame: Optional[HandPose] = None,
          frame_mask: Optional[np.ndarray] = None
          ) -> Tuple[MotionSequence, torch.Tensor]:
    """Sample one motion for a scene from the requested condition subset.

    Modalities outside ``kinds`` run on their unconditional tokens, matching
    the dropout state seen in training. ``frame_mask`` (N bools) zeroes every
    condition, vision included, on its 0 frames; it composes with the scene's
    own per-modality masks. The first-frame pose comes from the scene's
    ground truth unless an external pose is supplied.

    Args:
        models: (vae, denoiser, perceptron, model_cfg) from load_models.
        scene: conditions source; its ground-truth motion is used only for
            the first frame.
        kinds: subset of {keypoints2d, keypoints3d, mano, vision}; empty
            means fully unconditional.
        sampler: method, steps, guidance scale, eta.
        seed: drives the start noise and any stochastic sampler steps.

    Returns:
        (motion truncated to the scene length, full (1, N_pad+1, d) latents).
    """
    vae, denoiser, perceptron, mcfg = models
    for kind in kinds:
        if kind not in CONDITION_KINDS + ("vision",):
            raise ValueError(f"unknown condition kind {kind!r}")
    n = scene.n_frames
    seg = mcfg.segment_len
    bundle = bundle_scene(scene)

    fm = torch.ones(n, dtype=torch.bool) if frame_mask is None \
        else torch.as_tensor(np.asarray(frame_mask).astype(np.bool_))
    if fm.shape != (n,):
        raise ShapeMismatch(f"frame_mask must be ({n},), got {tuple(fm.shape)}")

    def pad(t: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(pad_frames(t.numpy(), seg))

    n_pad = int(math.ceil(n / seg) * seg)
    conditions = {}
    with torch.no_grad():
        for kind in CONDITION_KINDS:
            if kind in kinds:
                mask = pad(bundle.cond_mask[kind] & fm)
                data = pad(bundle.cond_data[kind])
                z_c = vae.encode_condition_tensors(kind, data[None], mask[None])
                conditions[kind] = (z_c, mask[None])
            else:
                conditions[kind] = (torch.zeros(1, n_pad, mcfg.d_model),
                                    torch.zeros(1, n_pad, dtype=torch.bool))

        if first_frame is None:
            ff = bundle.x[0][None]
        else:
            ff = torch.as_tensor(first_frame.to_vector(), dtype=torch.float32)[None]

        hand = None
        vision_mask = None
        if "vision" in kinds:
            feats = pad(bundle.features)
            a1 = vae.anchor_linear(ff)
            hand = perceptron(feats[None], a1)
            vision_mask = pad(bundle.vision_mask & fm)[None]

        uncond = {k: (z, torch.zeros_like(m)) for k, (z, m) in conditions.items()}

        def predict(z_t: torch.Tensor, t: int) -> torch.Tensor:
            tt = torch.full((z_t.shape[0],), t, dtype=torch.long)
            out_c = denoiser(z_t, tt, conditions, hand, vision_mask)
            if sampler.cfg_scale == 1.0:
                return out_c
            out_u = denoiser(z_t, tt, uncond, None, None)
            return cfg_combine(out_u, out_c, sampler.cfg_scale)

        sched = cosine_schedule(mcfg.diffusion_steps)
        rng = torch.Generator().manual_seed(seed)
        shape = (1, n_pad + 1, mcfg.d_model)
        if sampler.method == "ddim":
            z = sample_ddim(predict, shape, sched, sampler.steps, sampler.eta, rng)
        else:
            z = sample_ddpm(predict, shape, sched, rng)

        x_hat = vae.decode(z[:, :n_pad], z[:, n_pad], ff)
    motion = MotionSequence(x_hat[0, :n].double().numpy())
    return motion, z


# -- evaluation ----------------------------------------------------------------


def evaluate(models, scenes: Sequence[SyntheticScene], csv_path, json_path,
             sampler: SamplerConfig, kinds: Sequence[str], seed: int = 0,
             use_gt: bool = False,
             skel: Optional[HandSkeleton] = None) -> dict:
    """Run inference per scene, score all metrics, and write both reports.

    ``use_gt`` scores the ground truth against itself (the self-check mode:
    all error metrics 0, AUC and F-scores 1).
    """
    skel = skel or default_skeleton()
    rows = []
    buckets: Dict[str, List[dict]] = {label: [] for label in BUCKET_LABELS}
    for i, scene in enumerate(scenes):
        gt = fk_tensor(torch.as_tensor(scene.motion.params, dtype=torch.float64),
                       skel).numpy()
        if use_gt:
            pred = gt
        else:
            motion, _ = infer(models, scene, kinds, sampler, seed=seed + i)
            pred = fk_tensor(torch.as_tensor(motion.params, dtype=torch.float64),
                             skel).numpy()
        r_occ = float(scene.occlusion.mean())
        row = {"scene_id": scene.scene_id, "n_frames": scene.n_frames,
               "occlusion": r_occ, "bucket": occlusion_bucket(r_occ)}
        row.update(sequence_metrics(pred, gt))
        rows.append(row)
        buckets[row["bucket"]].append(row)

    write_reports(rows, buckets, csv_path, json_path)
    with open(json_path) as f:
        return json.load(f)


def load_scenes(data_dir) -> List[SyntheticScene]:
    """Manifest-driven split loader (thin alias kept for the CLI)."""
    return load_split(data_dir)
