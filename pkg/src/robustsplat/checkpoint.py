"""Checkpoint directory layout: splat PLY, classifier and appearance blobs,
plain-text manifest, progress CSV, and optional final mask dumps."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .appearance import AppearanceModel
from .classifier import MaskClassifier
from .core import SplatCloud
from .ply import load_ply, save_ply
from .trainer import TrainConfig, TrainReport

SPLATS_FILE = 'splats.ply'
CLASSIFIER_FILE = 'classifier.bin'
APPEARANCE_FILE = 'appearance.bin'
MANIFEST_FILE = 'manifest.txt'
PROGRESS_FILE = 'progress.csv'


def save_checkpoint(out_dir, cloud: SplatCloud,
                    appearance: Optional[AppearanceModel],
                    classifier: Optional[MaskClassifier],
                    config: TrainConfig, report: TrainReport,
                    extra_manifest: Optional[dict] = None,
                    masks=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(cloud, out / SPLATS_FILE)
    if classifier is not None:
        classifier.save(out / CLASSIFIER_FILE)
    if appearance is not None:
        appearance.save(out / APPEARANCE_FILE)
    report.to_csv(out / PROGRESS_FILE)
    manifest = {f'config.{k}': v for k, v in asdict(config).items()}
    manifest['tool_version'] = '0.1.0'
    for k, v in report.final_metrics.items():
        manifest[f'final.{k}'] = f'{v:.6f}'
    if extra_manifest:
        manifest.update(extra_manifest)
    io.write_manifest(out / MANIFEST_FILE, manifest)
    if masks is not None:
        mask_dir = out / 'masks'
        mask_dir.mkdir(exist_ok=True)
        for i, m in enumerate(masks):
            io.write_mask_png(mask_dir / f'{i:04d}.png', m)
    return out


def load_checkpoint(ckpt_dir):
    """Returns (cloud, appearance | None, classifier | None, manifest dict)."""
    ckpt = Path(ckpt_dir)
    ply_path = ckpt / SPLATS_FILE
    if not ply_path.exists():
        raise FileNotFoundError(f"{ckpt}: no {SPLATS_FILE} found")
    cloud = load_ply(ply_path)
    appearance = AppearanceModel.load(ckpt / APPEARANCE_FILE) \
        if (ckpt / APPEARANCE_FILE).exists() else None
    classifier = MaskClassifier.load(ckpt / CLASSIFIER_FILE) \
        if (ckpt / CLASSIFIER_FILE).exists() else None
    manifest = io.read_manifest(ckpt / MANIFEST_FILE) \
        if (ckpt / MANIFEST_FILE).exists() else {}
    return cloud, appearance, classifier, manifest


def load_dumped_masks(ckpt_dir):
    mask_dir = Path(ckpt_dir) / 'masks'
    if not mask_dir.is_dir():
        return None
    paths = sorted(mask_dir.glob('*.png'))
    return [io.read_mask_png(p) for p in paths] if paths else None
