"""Full optimization loop: render, mask, backprop, densify, prune, appearance.

Method presets: 'vanilla' (no masking), 'filter' (residual-quantile robust
filter), 'agg' (cluster-vote masking over precomputed feature clusters), and
'mlp' (self-supervised per-pixel classifier), all sharing the warm-up
Bernoulli sampling, histogram residual tracking, and utilization pruning.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .appearance import AppearanceModel
from .classifier import LabelPair, MaskClassifier, make_labels
from .core import Camera, SplatCloud, inverse_sigmoid, num_sh_coeffs, quat_to_rot, sigmoid
from .features import (bilinear_upsample, cached_cluster, load_feature_map,
                       positional_encoding, standardize_channels,
                       synthetic_features)
from .io import Dataset
from .optim import AdamGroup
from .rasterizer import GradientSet, RenderAux, render, render_backward
from .robust import (ResidualHistogram, WarmupSchedule, cluster_vote_mask,
                     residual, robust_filter_mask, scheduled_sample)

METHODS = ('vanilla', 'filter', 'agg', 'mlp')


@dataclass
class TrainConfig:
    method: str = 'vanilla'
    iterations: int = 30_000
    seed: int = 0
    sh_degree: int = 1
    # robust mask
    tau: float = 0.5
    warmup: bool = True
    warmup_beta1: float = 3e-4
    warmup_beta2: float = 1.5
    # utilization pruning
    use_ubp: bool = True
    kappa: float = 1e-8
    ubp_period: int = 100
    ubp_window: int = 100
    ubp_start: int = 500
    ubp_end: int = 15_000
    opacity_reset: bool = False        # classic alternative, ablation only
    opacity_reset_interval: int = 3000
    # densification
    densify_start: int = 500
    densify_end: int = 15_000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    min_opacity: float = 0.005
    max_splats: int = 500_000
    # SH reset
    sh_reset_step: int = 8000
    sh_reset_value: float = 1e-3
    # appearance
    appearance: bool = True
    latent_dim: int = 64
    appearance_lr: float = 1e-3
    # classifier / clustering
    classifier_lr: float = 1e-3
    lambda_reg: float = 0.5
    clusters: int = 100
    posenc_degree: int = 20
    feature_source: str = 'oracle'     # 'oracle' | 'synth'
    # splat learning rates (released-codebase defaults)
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 2.5e-3 / 20.0
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    init_random_fraction: float = 0.10
    init_opacity: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        for name in ('ubp_period', 'ubp_window', 'densify_interval',
                     'opacity_reset_interval'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


class TrainDiverged(RuntimeError):
    def __init__(self, step, report):
        super().__init__(f"non-finite loss at iteration {step}")
        self.report = report


@dataclass
class TrainReport:
    rows: List[dict] = field(default_factory=list)
    events: List[str] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)

    def log(self, **kw):
        self.rows.append(kw)

    def to_csv(self, path) -> None:
        lines = ['iteration,loss,splat_count,mask_inlier_fraction,alpha']
        for r in self.rows:
            lines.append(f"{r['iteration']},{r['loss']:.8f},{r['splat_count']},"
                         f"{r['mask_inlier_fraction']:.6f},{r['alpha']:.8f}")
        Path(path).write_text('\n'.join(lines) + '\n')


class UtilizationTracker:
    """Per-splat accumulated masked screen-gradient energy over the trailing
    window of processed images."""

    def __init__(self, n: int):
        self.u = np.zeros(n)
        self.count = 0

    def add(self, aux: RenderAux) -> None:
        self.u += aux.screen_grad_energy
        self.count += 1

    def reset(self) -> None:
        self.u[:] = 0.0
        self.count = 0

    def keep_rows(self, keep) -> None:
        self.u = self.u[keep]

    def extend_rows(self, n_new: int) -> None:
        self.u = np.concatenate([self.u, np.zeros(n_new)])


def accumulate_utilization(tracker: UtilizationTracker,
                           aux: RenderAux) -> UtilizationTracker:
    tracker.add(aux)
    return tracker


def ubp_prune(cloud: SplatCloud, tracker: UtilizationTracker, kappa: float):
    """Remove splats whose utilization fell below kappa; resets the tracker."""
    keep = tracker.u >= kappa
    if not keep.any():
        raise RuntimeError(
            f"utilization pruning would remove all {len(cloud)} splats "
            f"(kappa={kappa}); threshold is degenerate for this scene")
    removed = np.nonzero(~keep)[0]
    pruned = cloud.select(keep)
    tracker.reset()
    return pruned, removed, keep


def sh_reset(cloud: SplatCloud, value: float = 1e-3) -> SplatCloud:
    """Set every non-diffuse SH coefficient to `value`; DC stays untouched."""
    if cloud.sh.shape[2] > 1:
        cloud.sh[:, :, 1:] = value
    return cloud


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @staticmethod
    def zeros(n):
        return DensifyStats(np.zeros(n), np.zeros(n))

    def add(self, grads: GradientSet, width: int, height: int) -> None:
        # screen-position gradients in half-image (NDC-like) units, matching
        # the released-codebase densification threshold convention
        g = grads.screen_pos * np.array([width / 2.0, height / 2.0])
        norms = np.linalg.norm(g, axis=1)
        self.grad_accum[grads.visible] += norms[grads.visible]
        self.count[grads.visible] += 1

    def keep_rows(self, keep) -> None:
        self.grad_accum = self.grad_accum[keep]
        self.count = self.count[keep]

    def extend_rows(self, n_new: int) -> None:
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n_new)])
        self.count = np.concatenate([self.count, np.zeros(n_new)])

    def reset(self) -> None:
        self.grad_accum[:] = 0.0
        self.count[:] = 0.0


def densify(cloud: SplatCloud, stats: DensifyStats, config: TrainConfig,
            extent: float, rng: np.random.Generator):
    """Clone small / split large high-gradient splats, drop near-transparent
    ones. Returns (cloud', keep_mask, n_new)."""
    n = len(cloud)
    avg = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1), 0.0)
    hi = avg > config.densify_grad_threshold
    max_scale = np.exp(cloud.log_scale).max(axis=1)
    small = max_scale < config.percent_dense * extent
    clone_mask = hi & small
    split_mask = hi & ~small

    n_new = int(clone_mask.sum()) + 2 * int(split_mask.sum())
    if n + n_new > config.max_splats:
        clone_mask[:] = False
        split_mask[:] = False
        n_new = 0

    keep = (sigmoid(cloud.opacity_logit) >= config.min_opacity) & ~split_mask
    parts = [cloud.select(keep)]
    if clone_mask.any():
        parts.append(cloud.select(clone_mask))
    if split_mask.any():
        src = cloud.select(split_mask)
        children = []
        for _ in range(2):
            child = src.copy()
            scales = np.exp(src.log_scale)
            local = rng.standard_normal((len(src), 3)) * scales
            R = quat_to_rot(src.rot / np.linalg.norm(src.rot, axis=1, keepdims=True))
            child.mu = src.mu + np.einsum('nij,nj->ni', R, local)
            child.log_scale = np.log(scales / config.split_factor)
            children.append(child)
        parts.extend(children)
    merged = SplatCloud.concat(parts)
    n_appended = len(merged) - int(keep.sum())
    return merged, keep, n_appended


class SplatOptimizer:
    """Per-group Adam over the cloud's parameter arrays."""

    FIELDS = ('mu', 'log_scale', 'rot', 'opacity_logit', 'sh_dc', 'sh_rest')

    def __init__(self, cloud: SplatCloud, config: TrainConfig, extent: float):
        self.config = config
        self.extent = extent
        self.groups = {
            'mu': AdamGroup.like(cloud.mu),
            'log_scale': AdamGroup.like(cloud.log_scale),
            'rot': AdamGroup.like(cloud.rot),
            'opacity_logit': AdamGroup.like(cloud.opacity_logit),
            'sh_dc': AdamGroup.like(cloud.sh[:, :, 0]),
            'sh_rest': AdamGroup.like(cloud.sh[:, :, 1:]),
        }

    def position_lr(self, step: int) -> float:
        cfg = self.config
        t = min(max(step / cfg.iterations, 0.0), 1.0)
        return self.extent * cfg.lr_position * \
            (cfg.lr_position_final / cfg.lr_position) ** t

    def step(self, cloud: SplatCloud, grads: GradientSet, step: int) -> None:
        cfg = self.config
        self.groups['mu'].update(cloud.mu, grads.mu, self.position_lr(step))
        self.groups['log_scale'].update(cloud.log_scale, grads.log_scale, cfg.lr_scale)
        self.groups['rot'].update(cloud.rot, grads.rot, cfg.lr_rotation)
        self.groups['opacity_logit'].update(cloud.opacity_logit,
                                            grads.opacity_logit, cfg.lr_opacity)
        dc = cloud.sh[:, :, 0].copy()
        self.groups['sh_dc'].update(dc, grads.sh[:, :, 0], cfg.lr_sh_dc)
        cloud.sh[:, :, 0] = dc
        if cloud.sh.shape[2] > 1:
            rest = cloud.sh[:, :, 1:].copy()
            self.groups['sh_rest'].update(rest, grads.sh[:, :, 1:], cfg.lr_sh_rest)
            cloud.sh[:, :, 1:] = rest
        cloud.renormalize_rotations()

    def keep_rows(self, keep) -> None:
        for g in self.groups.values():
            g.keep_rows(keep)

    def extend_rows(self, n_new: int) -> None:
        for g in self.groups.values():
            g.extend_rows(n_new)

    def reset_sh_rest_moments(self) -> None:
        self.groups['sh_rest'].m[:] = 0.0
        self.groups['sh_rest'].v[:] = 0.0

    def reset_opacity_moments(self) -> None:
        self.groups['opacity_logit'].m[:] = 0.0
        self.groups['opacity_logit'].v[:] = 0.0


def scene_extent(cams: List[Camera]) -> float:
    centers = np.stack([c.center for c in cams])
    mid = centers.mean(axis=0)
    return 1.1 * float(np.linalg.norm(centers - mid, axis=1).max())


def init_cloud(dataset: Dataset, config: TrainConfig,
               rng: np.random.Generator) -> SplatCloud:
    """Splats at the sparse surface samples plus uniform box fill; colors from
    nearest-view pixel lookup; scales from 3-NN distances."""
    if dataset.points is None or len(dataset.points) == 0:
        raise ValueError("dataset has no initialization points")
    pts = np.asarray(dataset.points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    margin = 0.1 * (hi - lo)
    n_rand = int(round(config.init_random_fraction * len(pts)))
    randoms = rng.uniform(lo - margin, hi + margin, size=(n_rand, 3))
    pts = np.concatenate([pts, randoms])
    n = len(pts)

    colors = np.full((n, 3), 0.5)
    centers = np.stack([c.center for c in dataset.train_cams])
    order_by_cam = np.argsort(
        np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2), axis=1)
    for i in range(n):
        for ci in order_by_cam[i]:
            cam = dataset.train_cams[ci]
            pc = cam.R @ pts[i] + cam.t
            if pc[2] <= 0.01:
                continue
            u = cam.fx * pc[0] / pc[2] + cam.cx
            v = cam.fy * pc[1] / pc[2] + cam.cy
            col = int(u)
            row = int(v)
            if 0 <= col < cam.width and 0 <= row < cam.height:
                colors[i] = dataset.train_images[ci][row, col]
                break

    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=4)
    mean_dist = np.maximum(dist[:, 1:].mean(axis=1), 1e-4)
    log_scale = np.tile(np.log(mean_dist)[:, None], (1, 3))

    k = num_sh_coeffs(config.sh_degree)
    sh = np.zeros((n, 3, k))
    sh[:, :, 0] = (colors - 0.5) / 0.28209479177387814
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return SplatCloud(mu=pts, log_scale=log_scale, rot=rot,
                      opacity_logit=np.full(n, inverse_sigmoid(config.init_opacity)),
                      sh=sh)


class Trainer:
    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.extent = scene_extent(dataset.train_cams)
        self.cloud = init_cloud(dataset, config, self.rng)
        self.optimizer = SplatOptimizer(self.cloud, config, self.extent)
        self.hist = ResidualHistogram()
        self.schedule = WarmupSchedule(beta1=config.warmup_beta1,
                                       beta2=config.warmup_beta2)
        self.tracker = UtilizationTracker(len(self.cloud))
        self.densify_stats = DensifyStats.zeros(len(self.cloud))
        self.report = TrainReport()

        n_train = len(dataset.train_images)
        self.appearance = AppearanceModel(
            n_images=n_train, latent_dim=config.latent_dim,
            lr=config.appearance_lr,
            rng=np.random.default_rng(config.seed + 2)) if config.appearance else None

        self.classifier: Optional[MaskClassifier] = None
        self._clusters = {}
        self._clf_inputs = {}
        self._raw_features = {}
        if config.method in ('agg', 'mlp'):
            self._prepare_features()

    # --- feature plumbing -------------------------------------------------
    def _frame_features(self, idx: int) -> np.ndarray:
        """Raw feature channels at image resolution (float32)."""
        if idx not in self._raw_features:
            h, w = self.dataset.train_images[idx].shape[:2]
            if self.config.feature_source == 'oracle':
                if not self.dataset.feature_paths:
                    raise FileNotFoundError(
                        "dataset has no feature maps; regenerate them or run "
                        "with the synthetic feature source")
                fmap = load_feature_map(self.dataset.feature_paths[idx])
                feats = bilinear_upsample(fmap.data, h, w)
            elif self.config.feature_source == 'synth':
                feats = synthetic_features(self.dataset.train_images[idx]).data
            else:
                raise ValueError(
                    f"unknown feature source {self.config.feature_source!r}")
            self._raw_features[idx] = np.asarray(feats, dtype=np.float32)
        return self._raw_features[idx]

    def _prepare_features(self):
        d = self._frame_features(0).shape[2]
        if self.config.method == 'mlp':
            in_dim = d + 4 * self.config.posenc_degree
            self.classifier = MaskClassifier(
                in_dim=in_dim, rng=np.random.default_rng(self.config.seed + 1),
                lr=self.config.classifier_lr)

    def _classifier_input(self, idx: int) -> np.ndarray:
        if idx not in self._clf_inputs:
            feats = standardize_channels(self._frame_features(idx))
            h, w = feats.shape[:2]
            yy, xx = np.mgrid[0:h, 0:w]
            coords = np.stack([xx / max(w - 1, 1), yy / max(h - 1, 1)], axis=-1)
            pe = positional_encoding(coords, self.config.posenc_degree)
            self._clf_inputs[idx] = np.concatenate(
                [feats, pe], axis=2).astype(np.float32)
        return self._clf_inputs[idx]

    def _frame_clusters(self, idx: int) -> np.ndarray:
        if idx not in self._clusters:
            cache = self.dataset.root / 'cache' / \
                f'clusters-{self.config.feature_source}-{self.config.clusters}'
            assignment = cached_cluster(self._frame_features(idx),
                                        self.config.clusters, cache_dir=cache)
            self._clusters[idx] = assignment.labels
        return self._clusters[idx]

    # --- masking -----------------------------------------------------------
    def method_mask(self, idx: int, res: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.method == 'vanilla':
            return np.ones_like(res)
        if cfg.method == 'mlp':
            prob = self.classifier.forward(self._classifier_input(idx))
            return (prob >= 0.5).astype(np.float64)
        rho = self.hist.quantile(cfg.tau)
        if rho is None:
            return np.ones_like(res)
        base = robust_filter_mask(res, rho)
        if cfg.method == 'filter':
            return base
        return cluster_vote_mask(self._frame_clusters(idx), base)

    # --- the loop ----------------------------------------------------------
    def run(self, log_every: int = 100) -> TrainReport:
        cfg = self.config
        n_train = len(self.dataset.train_images)
        order = self.rng.permutation(n_train)
        cursor = 0

        for step in range(1, cfg.iterations + 1):
            if cursor == n_train:
                order = self.rng.permutation(n_train)
                cursor = 0
            idx = int(order[cursor])
            cursor += 1

            cam = self.dataset.train_cams[idx]
            target = self.dataset.train_images[idx]
            ab = self.appearance.transform(idx) if self.appearance else None

            img, fwd_aux = render(self.cloud, cam, appearance=ab)
            res = residual(img, target)
            if not np.all(np.isfinite(res)):
                raise TrainDiverged(step, self.report)
            self.hist.update(res)

            if cfg.method == 'mlp':
                labels = make_labels(res, self.hist)
                pred, _ = self.classifier.step_and_predict(
                    self._classifier_input(idx), labels, lam=cfg.lambda_reg)
                mask = (pred >= 0.5).astype(np.float64)
            else:
                mask = self.method_mask(idx, res)

            alpha = self.schedule.alpha(step - 1) if cfg.warmup else 0.0
            sampled = scheduled_sample(mask, alpha, self.rng)

            h, w = target.shape[:2]
            norm = h * w * 3
            loss = float(np.sum(sampled[:, :, None] * np.abs(img - target)) / norm)
            if not np.isfinite(loss):
                raise TrainDiverged(step, self.report)
            loss_grad = np.sign(img - target) / norm
            grads, aux = render_backward(self.cloud, cam, loss_grad, sampled,
                                         appearance=ab, aux=fwd_aux)

            self.optimizer.step(self.cloud, grads, step)
            if self.appearance is not None:
                self.appearance.step(idx, grads.color_scale, grads.color_offset)

            accumulate_utilization(self.tracker, aux)
            self.densify_stats.add(grads, w, h)

            self._periodic_maintenance(step)

            if step % log_every == 0 or step == cfg.iterations:
                self.report.log(iteration=step, loss=loss,
                                splat_count=len(self.cloud),
                                mask_inlier_fraction=float(sampled.mean()),
                                alpha=alpha)
        self._check_finite()
        return self.report

    def _periodic_maintenance(self, step: int) -> None:
        cfg = self.config
        # fresh utilization window right before pruning becomes active
        if cfg.use_ubp and step == cfg.ubp_start - cfg.ubp_window:
            self.tracker.reset()

        if (cfg.use_ubp and step % cfg.ubp_period == 0
                and cfg.ubp_start <= step <= cfg.ubp_end
                and self.tracker.count >= min(cfg.ubp_window, step)):
            self.cloud, removed, keep = ubp_prune(self.cloud, self.tracker, cfg.kappa)
            if removed.size:
                self.report.events.append(f'{step}:ubp_pruned={removed.size}')
            self.optimizer.keep_rows(keep)
            self.densify_stats.keep_rows(keep)
            self.tracker.u = np.zeros(len(self.cloud))

        if (step % cfg.densify_interval == 0
                and cfg.densify_start <= step <= cfg.densify_end):
            n_before = len(self.cloud)
            self.cloud, keep, n_new = densify(self.cloud, self.densify_stats,
                                              cfg, self.extent, self.rng)
            self.optimizer.keep_rows(keep)
            self.optimizer.extend_rows(n_new)
            self.tracker.keep_rows(keep)
            self.tracker.extend_rows(n_new)
            self.densify_stats.keep_rows(keep)
            self.densify_stats.extend_rows(n_new)
            self.densify_stats.reset()
            if len(self.cloud) != n_before:
                self.report.events.append(
                    f'{step}:densify {n_before}->{len(self.cloud)}')

        if (cfg.opacity_reset and step % cfg.opacity_reset_interval == 0
                and step <= cfg.densify_end):
            opacity = sigmoid(self.cloud.opacity_logit)
            self.cloud.opacity_logit = inverse_sigmoid(
                np.minimum(opacity, 0.01))
            self.optimizer.reset_opacity_moments()
            self.report.events.append(f'{step}:opacity_reset')

        if step == cfg.sh_reset_step and self.cloud.sh.shape[2] > 1:
            sh_reset(self.cloud, cfg.sh_reset_value)
            self.optimizer.reset_sh_rest_moments()
            self.report.events.append(f'{step}:sh_reset')

    def _check_finite(self):
        if not self.cloud.all_finite():
            raise RuntimeError("non-finite splat parameters after training")

    # --- outputs -----------------------------------------------------------
    def final_masks(self) -> List[np.ndarray]:
        """Deterministic per-train-view masks from the final model state
        (no warm-up sampling)."""
        masks = []
        for idx, cam in enumerate(self.dataset.train_cams):
            ab = self.appearance.transform(idx) if self.appearance else None
            img, _ = render(self.cloud, cam, appearance=ab)
            res = residual(img, self.dataset.train_images[idx])
            masks.append(self.method_mask(idx, res))
        return masks

    def evaluate(self):
        from .datagen import metrics
        out = []
        ab = self.appearance.mean_transform() if self.appearance else None
        for img, cam in zip(self.dataset.test_images, self.dataset.test_cams):
            rendered, _ = render(self.cloud, cam, appearance=ab)
            psnr, ssim = metrics(rendered, img)
            out.append({'psnr': psnr, 'ssim': ssim})
        return out


def train(dataset: Dataset, config: TrainConfig):
    """Run the full loop; returns (cloud, appearance, classifier, report)."""
    t = Trainer(dataset, config)
    report = t.run()
    results = t.evaluate()
    if results:
        report.final_metrics = {
            'psnr': float(np.mean([r['psnr'] for r in results])),
            'ssim': float(np.mean([r['ssim'] for r in results])),
        }
    return t.cloud, t.appearance, t.classifier, report
