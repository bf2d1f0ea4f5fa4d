"""Training loop: Adam with per-group schedules, densification, evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import minimum_filter

from .fog import FogParams
from .losses import (LOSS_TERMS, LossReport, LossWeights, depth_loss, depth_weighted_recon, log_interp,
                     psnr, reconstruction_loss, ssim, total_loss)
from .priors import MattingLaplacian, PriorMaps, bcp_loss, compute_prior_maps, dcp_loss
from .raster import render, render_backward
from .scene import Camera, GaussianCloud, logit, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)

PRESETS = {"synthetic": 30000, "real": 3000}
CLOUD_GROUPS = ("positions", "log_scales", "rotations", "opacity_latents", "color_coeffs")
FOG_GROUPS = ("beta_weight", "atmos_latent")


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class TrainConfig:
    iterations: int = PRESETS["synthetic"]
    preset: str = "synthetic"
    seed: int = 0
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_atmos: float = 1e-3
    lr_beta: float = 1e-7
    beta_lr_decay: float = 0.1
    beta_l2: float = 0.0
    spatial_lr_scale: float | None = None  # None: derived from the camera extent
    densify: bool = True
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int | None = None  # None: iterations // 2
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 5e-3
    percent_dense: float = 0.01
    max_gaussians: int = 0  # 0: unlimited
    use_fog: bool = True
    use_sigmoid: bool = True
    literal_dcp: bool = False
    dcp_reduction: str = "mean"  # "sum": as written; "mean": divided by the pixel count
    depth_normalize: bool = True  # rendered depth divided by the view's Gaussian depth span
    prior_airlight: str = "learned"  # "learned": current A; "estimate": dark-channel estimate
    beta_init: float = 0.1
    beta_from_prior: bool = True
    airlight_init: float = 0.8
    sh_degree: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 0
    losses: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.losses, dict):
            self.losses = LossWeights(**self.losses)
        self.background = tuple(float(v) for v in self.background)
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        for name in ("lr_position", "lr_position_final", "lr_scale", "lr_rotation", "lr_opacity",
                     "lr_color", "lr_atmos", "lr_beta", "beta_lr_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.densify_interval <= 0:
            raise ValueError("densify_interval must be > 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.dcp_reduction not in ("sum", "mean"):
            raise ValueError(f"dcp_reduction must be 'sum' or 'mean', got {self.dcp_reduction!r}")
        if self.prior_airlight not in ("learned", "estimate"):
            raise ValueError(f"prior_airlight must be 'learned' or 'estimate', got {self.prior_airlight!r}")

    @classmethod
    def from_preset(cls, name: str = "synthetic", **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        overrides.setdefault("iterations", PRESETS[name])
        return cls(preset=name, **overrides)

    @property
    def densify_until(self) -> int:
        return self.iterations // 2 if self.densify_stop is None else self.densify_stop

    def beta_lr(self, iteration: int) -> float:
        return log_interp(iteration, self.iterations, self.lr_beta, self.lr_beta * self.beta_lr_decay)

    def position_lr(self, iteration: int) -> float:
        return log_interp(iteration, self.iterations, self.lr_position, self.lr_position_final)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["losses"] = LossWeights(**d.get("losses", {}))
        return cls(**d)


@dataclass
class TrainState:
    iteration: int
    seed: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    steps: dict[str, int]
    lrs: dict[str, float]
    grad_accum: np.ndarray
    grad_count: np.ndarray
    config: TrainConfig | None = None
    cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, cloud: GaussianCloud, fog: FogParams | None, config: TrainConfig) -> "TrainState":
        params = dict(cloud.params())
        if fog is not None:
            params.update(fog.params())
        n = len(cloud)
        return cls(0, config.seed,
                   {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()},
                   {k: 0 for k in params}, {}, np.zeros(n), np.zeros(n), config)

    def check(self, cloud: GaussianCloud, fog: FogParams | None = None) -> None:
        params = dict(cloud.params())
        if fog is not None:
            params.update(fog.params())
        for k, p in params.items():
            if self.m[k].shape != p.shape or self.v[k].shape != p.shape:
                raise RuntimeError(f"optimizer moments for {k} have shape {self.m[k].shape}, "
                                   f"parameters {p.shape}")
        if self.grad_accum.shape != (len(cloud),):
            raise RuntimeError("densification accumulators do not match the scene size")


def adam_step(params: dict, grads: dict, state: TrainState, lrs: dict, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-15) -> list[str]:
    """Bias-corrected Adam, in place, one step per group. Returns skipped groups."""
    skipped = []
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in group %s; skipping its update", name)
            skipped.append(name)
            continue
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        state.steps[name] += 1
        t = state.steps[name]
        step = lrs[name] / (1.0 - beta1 ** t)
        denom = np.sqrt(v) / math.sqrt(1.0 - beta2 ** t) + eps
        p -= step * m / denom
    return skipped


def camera_extent(cameras) -> float:
    """Radius of the camera-centre cloud, padded by 10 percent."""
    centers = np.array([c.center for c in cameras])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return 1.1 * max(radius, 1e-6)


def group_lrs(config: TrainConfig, iteration: int, extent: float) -> dict[str, float]:
    scale = extent if config.spatial_lr_scale is None else config.spatial_lr_scale
    return {"positions": config.position_lr(iteration) * scale, "log_scales": config.lr_scale,
            "rotations": config.lr_rotation, "opacity_latents": config.lr_opacity,
            "color_coeffs": config.lr_color, "atmos_latent": config.lr_atmos,
            "beta_weight": config.beta_lr(iteration)}


def view_order(seed: int, epoch: int, n_views: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_views)


def _replace_cloud(cloud: GaussianCloud, new: GaussianCloud) -> None:
    for k, v in new.params().items():
        setattr(cloud, k, v)


def _prior(cache: dict, view: int, image, airlight=None) -> PriorMaps:
    if airlight is not None:
        # tracks the learned airlight, so it cannot be cached
        return compute_prior_maps(image, airlight=airlight)
    key = ("prior", view)
    if key not in cache:
        cache[key] = compute_prior_maps(image)
    return cache[key]


def _laplacian(cache: dict, view: int, image) -> MattingLaplacian:
    key = ("laplacian", view)
    if key not in cache:
        cache[key] = MattingLaplacian(image)
    return cache[key]


def _needs_prior(config: TrainConfig) -> bool:
    e = config.losses.enabled
    return config.use_fog and (e["dcp"] or e["bcp"])


@dataclass
class Frozen:
    """Values the loss treats as constants (no gradient flows through them)."""

    d_norm: np.ndarray | None = None        # per-Gaussian normalized depth, full cloud length
    depth_span: float = 1.0                  # depth-loss unit
    depth_align: tuple | None = None         # (scale, shift) of the pseudo-depth fit
    weight_depth: np.ndarray | None = None   # depth map weighting the reconstruction term
    prior: PriorMaps | None = None


@dataclass
class ViewLoss:
    report: LossReport
    out: object
    g_color: np.ndarray
    g_depth: np.ndarray
    g_t: np.ndarray
    frozen: Frozen


def view_loss(cloud: GaussianCloud, fog: FogParams | None, camera: Camera, target, pseudo_depth,
              config: TrainConfig, iteration: int, *, prior: PriorMaps | None = None,
              laplacian: MattingLaplacian | None = None, frozen: Frozen | None = None) -> ViewLoss:
    """Total loss of one view and its gradients w.r.t. the rendered maps.

    With ``frozen`` given, every stop-gradient quantity is taken from it
    instead of being recomputed, which makes the loss a smooth function of
    the parameters for finite-difference checks.
    """
    use_fog = fog is not None
    d_override = None if frozen is None else frozen.d_norm
    out = render(cloud, camera, fog if use_fog else None, "foggy" if use_fog else "clear",
                 background=config.background, d_norm_override=d_override)
    fz = Frozen() if frozen is None else dataclasses.replace(frozen)
    if fz.d_norm is None:
        fz.d_norm = np.zeros(len(cloud))
        fz.d_norm[out.ctx.proj.index] = out.ctx.d_norm
    w = config.losses.term_weights(iteration, config.iterations)
    comps = {}
    g_color, g_t, g_depth = np.zeros_like(out.color), np.zeros_like(out.transmission), np.zeros_like(out.depth)

    comps["rec"], g = reconstruction_loss(out.color, target, config.losses.lambda_ssim)
    g_color += g
    if use_fog and (w["dcp"] > 0 or w["bcp"] > 0):
        if fz.prior is None:
            fz.prior = prior if prior is not None else compute_prior_maps(target)
    if use_fog and w["dcp"] > 0:
        lap = laplacian if laplacian is not None else MattingLaplacian(target)
        comps["dcp"], g = dcp_loss(out.transmission, fz.prior.t_dcp, lambda_smooth=config.losses.lambda_smooth,
                                   laplacian=lap, literal=config.literal_dcp)
        if config.dcp_reduction == "mean":
            comps["dcp"] /= g.size
            g = g / g.size
        g_t += w["dcp"] * g
    if use_fog and w["bcp"] > 0:
        comps["bcp"], g = bcp_loss(out.transmission, fz.prior.t_bcp)
        g_t += w["bcp"] * g
    if w["depth"] > 0 and pseudo_depth is not None:
        # rendered depth in units of the view's Gaussian depth range (a detached constant),
        # so the term's scale does not depend on the scene's metric units
        if frozen is None:
            z = out.ctx.proj.depths
            span = float(z.max() - z.min()) if config.depth_normalize and len(z) > 1 else 1.0
            fz.depth_span = span if span > 0 else 1.0
        comps["depth"], g, fz.depth_align = depth_loss(out.depth / fz.depth_span, pseudo_depth,
                                                       align=fz.depth_align)
        g_depth += w["depth"] * g / fz.depth_span
    if w["dweighted"] > 0:
        if fz.weight_depth is None:
            fz.weight_depth = out.depth.copy()
        comps["dweighted"], g = depth_weighted_recon(out.color, target, fz.weight_depth)
        g_color += w["dweighted"] * g
    report = total_loss(comps, config.losses, iteration, config.iterations)
    return ViewLoss(report, out, g_color, g_depth, g_t, fz)


def train_iteration(cloud: GaussianCloud, fog: FogParams | None, cameras, images, pseudo_depths,
                    state: TrainState, config: TrainConfig) -> LossReport:
    """One optimization step on one view. Updates ``cloud``, ``fog`` and ``state`` in place."""
    if not cameras:
        raise ValueError("training needs at least one view")
    it = state.iteration
    epoch, k = divmod(it, len(cameras))
    vi = int(view_order(state.seed, epoch, len(cameras))[k])
    cam, target = cameras[vi], images[vi]
    use_fog = fog is not None
    w = config.losses.term_weights(it, config.iterations)
    prior = lap = None
    if use_fog and (w["dcp"] > 0 or w["bcp"] > 0):
        prior_A = fog.airlight if config.prior_airlight == "learned" else None
        prior = _prior(state.cache, vi, target, prior_A)
    if use_fog and w["dcp"] > 0:
        lap = _laplacian(state.cache, vi, target)
    pseudo = pseudo_depths[vi] if pseudo_depths is not None else None
    vl = view_loss(cloud, fog, cam, target, pseudo, config, it, prior=prior, laplacian=lap)
    report, out = vl.report, vl.out
    if not math.isfinite(report.total):
        dump = {"iteration": it, "view": cam.name, "components": report.components,
                "num_gaussians": len(cloud),
                "nonfinite_params": [k for k, p in cloud.params().items() if not np.all(np.isfinite(p))]}
        raise NumericalAbort(f"non-finite total loss at iteration {it} (view {cam.name})", dump)

    grads = render_backward(out, vl.g_color, vl.g_depth, vl.g_t)
    # screen-space gradient norms in NDC units, the scale the threshold is defined in
    ndc = grads.means2d * np.array([cam.width / 2.0, cam.height / 2.0])
    state.grad_accum[grads.visible] += np.linalg.norm(ndc[grads.visible], axis=1)
    state.grad_count[grads.visible] += 1

    extent = state.cache.setdefault("extent", camera_extent(cameras))
    lrs = group_lrs(config, it, extent)
    state.lrs = lrs
    params = dict(cloud.params())
    all_grads = dict(grads.cloud)
    if use_fog:
        params.update(fog.params())
        g_fog = dict(grads.fog)
        if config.beta_l2 > 0:
            g_fog["beta_weight"] = g_fog["beta_weight"] + 2.0 * config.beta_l2 * fog.beta_weight
        all_grads.update(g_fog)
    adam_step(params, all_grads, state, lrs)
    state.iteration += 1

    if (config.densify and config.densify_start < state.iteration <= config.densify_until
            and state.iteration % config.densify_interval == 0):
        densify_and_prune(cloud, state, config, extent)
    return report


@dataclass
class DensifyReport:
    before: int
    clones: int
    splits: int
    pruned: int
    after: int


def densify_and_prune(cloud: GaussianCloud, state: TrainState, config: TrainConfig,
                      extent: float = 1.0) -> DensifyReport:
    """Clone small and split large high-gradient Gaussians, then prune transparent ones.

    ``splits`` counts the net additions of splitting (two children replace
    one parent), so ``after == before + clones + splits - pruned``.
    """
    n = len(cloud)
    avg = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    hot = avg >= config.densify_grad_threshold
    if config.max_gaussians:
        # every clone or split adds one primitive; keep the hottest that fit under the cap
        room = max(config.max_gaussians - n, 0)
        if hot.sum() > room:
            order = np.argsort(-np.where(hot, avg, -np.inf), kind="stable")
            hot[:] = False
            hot[order[:room]] = True
    big = np.max(np.exp(cloud.log_scales), axis=1) > config.percent_dense * extent
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)
    rng = np.random.default_rng([state.seed, state.iteration, 1])

    parts = [cloud]
    if len(clone_idx):
        parts.append(cloud.subset(clone_idx))
    if len(split_idx):
        children = cloud.subset(np.repeat(split_idx, 2))
        std = np.exp(children.log_scales)
        R = quat_to_rotmat(children.rotations / np.linalg.norm(children.rotations, axis=1, keepdims=True))
        offs = np.einsum("nij,nj->ni", R, rng.normal(size=std.shape) * std)
        children.positions = children.positions + offs
        children.log_scales = children.log_scales - math.log(1.6)
        parts.append(children)
    new = GaussianCloud.concat(parts) if len(parts) > 1 else cloud.copy()
    keep = np.ones(len(new), dtype=bool)
    keep[split_idx] = False  # split parents are replaced by their children
    keep &= sigmoid(new.opacity_latents) >= config.prune_opacity
    src = np.concatenate([np.arange(n), clone_idx, np.repeat(split_idx, 2)])
    born = np.concatenate([np.zeros(n, bool), np.ones(len(clone_idx) + 2 * len(split_idx), bool)])
    pruned = int(n + len(clone_idx) + 2 * len(split_idx) - len(split_idx) - keep.sum())

    for name in CLOUD_GROUPS:
        for moments in (state.m, state.v):
            old = moments[name]
            fresh = old[src].copy()
            fresh[born] = 0.0
            moments[name] = fresh[keep]
    _replace_cloud(cloud, new.subset(keep))
    state.grad_accum = np.zeros(len(cloud))
    state.grad_count = np.zeros(len(cloud))
    return DensifyReport(n, len(clone_idx), len(split_idx), pruned, len(cloud))


# ---------------------------------------------------------------- initialization and evaluation

def pixel_normalized_depth(cloud: GaussianCloud, camera: Camera):
    """Per-pixel depth on the same min-max scale as the per-Gaussian normalized depth."""
    out = render(cloud, camera, None, "clear")
    z = out.ctx.proj.depths
    if len(z) == 0:
        return None, out.alpha
    lo, hi = float(z.min()), float(z.max())
    zp = out.depth / np.maximum(out.alpha, 1e-8)
    return (zp - lo) / max(hi - lo, 1e-12), out.alpha


def fit_beta(cloud: GaussianCloud, cameras, priors: list[PriorMaps], use_sigmoid: bool,
             which=("dcp", "bcp"), min_alpha: float = 0.5, min_depth: float = 0.05) -> float | None:
    """Least-squares slope of -log(prior transmission) against normalized depth.

    Both priors take a patch extremum that picks the clearest pixel in the
    patch, so they are compared with the patch-minimum depth rather than the
    pixel depth; the DCP map is first corrected for its haze-retention
    factor omega. The sigmoid-squashed model is inverted before taking the
    log. Returns None when no usable pixels exist.
    """
    num = den = 0.0
    for cam, pm in zip(cameras, priors):
        dn, alpha = pixel_normalized_depth(cloud, cam)
        if dn is None:
            continue
        dn_patch = minimum_filter(dn, size=pm.patch_size, mode="nearest")
        mask = (alpha > min_alpha) & (dn_patch > min_depth)
        x = dn_patch[mask]
        for name in which:
            if name == "dcp":
                t = 1.0 - (1.0 - pm.t_dcp[mask]) / pm.omega
            else:
                t = pm.t_bcp[mask]
            if use_sigmoid:
                # t = sigmoid(exp(-x)) -> exp(-x) = logit(t), valid for t in (0.5, sigmoid(1))
                t = np.asarray(logit(np.clip(t, 0.5 + 1e-6, float(sigmoid(1.0)) - 1e-6)))
            y = -np.log(np.clip(t, 1e-6, 1.0))
            num += float(np.dot(x, y))
            den += float(np.dot(x, x))
    if den <= 0:
        return None
    return max(num / den, 0.0)


def init_fog(cloud: GaussianCloud, cameras, images, config: TrainConfig, cache: dict | None = None):
    """Initial FogParams; the scattering coefficient comes from the priors when enabled."""
    if not config.use_fog:
        return None
    beta = config.beta_init
    if config.beta_from_prior and _needs_prior(config):
        e = config.losses.enabled
        which = tuple(k for k in ("dcp", "bcp") if e[k])
        cache = {} if cache is None else cache
        A0 = np.full(3, config.airlight_init) if config.prior_airlight == "learned" else None
        priors = [_prior(cache, i, img, A0) for i, img in enumerate(images)]
        fitted = fit_beta(cloud, cameras, priors, config.use_sigmoid, which)
        if fitted is not None:
            log.info("scattering coefficient initialized from %s priors: %.4f", "+".join(which), fitted)
            beta = fitted
    fog = FogParams.initial(beta, config.airlight_init, use_sigmoid=config.use_sigmoid)
    fog.beta_lr, fog.beta_lr_decay = config.lr_beta, config.beta_lr_decay
    return fog


@dataclass
class EvalResult:
    names: list[str]
    psnr: list[float]
    ssim: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_tsv(self) -> str:
        rows = ["view\tpsnr\tssim"]
        rows += [f"{n}\t{p:.6f}\t{s:.6f}" for n, p, s in zip(self.names, self.psnr, self.ssim)]
        rows.append(f"mean\t{self.mean_psnr:.6f}\t{self.mean_ssim:.6f}")
        return "\n".join(rows) + "\n"


def evaluate(cloud: GaussianCloud, fog: FogParams | None, cameras, gt_clear_images, *,
             crop: int = 0, background=None) -> EvalResult:
    """Clear-mode renders scored against ground-truth clear views."""
    if len(gt_clear_images) != len(cameras) or any(g is None for g in gt_clear_images):
        raise ValueError("evaluation needs a ground-truth clear image for every camera")
    names, ps, ss = [], [], []
    for cam, gt in zip(cameras, gt_clear_images):
        img = render(cloud, cam, fog, "clear", background=background).color
        img = np.clip(img, 0.0, 1.0)
        if crop:
            img, gt = img[crop:-crop, crop:-crop], np.asarray(gt)[crop:-crop, crop:-crop]
        names.append(cam.name)
        ps.append(psnr(img, gt))
        ss.append(ssim(img, gt))
    return EvalResult(names, ps, ss)


# ---------------------------------------------------------------- driver

def train(bundle, config: TrainConfig, out_dir, *, progress_every: int = 0) -> tuple:
    """Full run on a loaded scene. Writes ``loss.jsonl`` and ``final.ply``/``final.json``."""
    from .io import save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cloud = GaussianCloud.from_points(bundle.points, bundle.point_colors, sh_degree=config.sh_degree)
    cache = {}
    fog = init_fog(cloud, bundle.cameras, bundle.images, config, cache)
    state = TrainState.create(cloud, fog, config)
    state.cache = cache
    depths = bundle.depths if bundle.depths else None
    with open(out_dir / "loss.jsonl", "w") as logf:
        while state.iteration < config.iterations:
            try:
                report = train_iteration(cloud, fog, bundle.cameras, bundle.images, depths, state, config)
            except NumericalAbort as exc:
                (out_dir / "abort_dump.json").write_text(json.dumps(exc.dump, indent=1, default=str))
                raise
            logf.write(json.dumps(report.to_json(), sort_keys=True) + "\n")
            if progress_every and state.iteration % progress_every == 0:
                log.info("iter %d loss %.6f gaussians %d", state.iteration, report.total, len(cloud))
            if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(cloud, fog, state, out_dir / f"ckpt_{state.iteration:06d}.ply",
                                cameras=bundle.cameras)
    save_checkpoint(cloud, fog, state, out_dir / "final.ply", cameras=bundle.cameras)
    return cloud, fog, state


__all__ = ["TrainConfig", "TrainState", "adam_step", "train_iteration", "densify_and_prune", "evaluate",
           "init_fog", "fit_beta", "view_loss", "Frozen", "train", "NumericalAbort", "EvalResult", "PRESETS", "LOSS_TERMS"]
