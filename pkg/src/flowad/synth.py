"""Desk-scale synthetic embedding datasets.

Fabricates frozen-encoder output directly in feature space: each category
gets a seeded "texture" direction for normal patches, anomalous images plant
a rectangular footprint shifted along a dataset-wide anomaly direction, and
the class token is the mean patch plus a label-correlated shift. Train and
test use disjoint category sets, so evaluation is always on unseen classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .records import EmbeddingRecord, ManifestEntry, write_manifest, write_pgm, write_record
from .rng import Rng


@dataclass
class SyntheticGenConfig:
    seed: int = 0
    train_categories: int = 5
    test_categories: int = 3
    images_per_category: int = 40
    grid: int = 16  # patch grid is grid x grid
    raw_dim: int = 32  # encoder width D_raw
    joint_dim: int = 16  # joint space width stamped into headers
    n_layers: int = 4
    footprint_min: int = 3
    footprint_max: int = 6
    shift: float = 1.4  # chord of the planted rotation toward the anomaly direction
    cls_shift: float = 2.0  # class-token offset for anomalous images
    noise: float = 0.05
    val_frac: float = 0.2
    pixel_scale: int = 4  # mask/map resolution = grid * pixel_scale

    def __post_init__(self):
        for name in ("train_categories", "test_categories", "images_per_category",
                     "grid", "raw_dim", "joint_dim", "n_layers", "footprint_min",
                     "footprint_max", "pixel_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.footprint_max > self.grid:
            raise ConfigError("anomaly footprint cannot exceed the grid")
        if self.footprint_min > self.footprint_max:
            raise ConfigError("footprint_min > footprint_max")


def _unit(v):
    return v / np.linalg.norm(v)


def _rotate_toward(v, direction, chord):
    """Rotate `v` toward `direction` so the displacement norm is exactly `chord`.

    The result keeps |v|: anomalies change feature direction, not energy,
    which mirrors frozen-encoder behaviour and keeps the planted offset
    magnitude equal to the configured shift.
    """
    n = np.linalg.norm(v)
    vhat = v / n
    rel = chord / n
    if rel >= 2.0:
        raise ConfigError(f"shift {chord} exceeds the rotation range for norm {n}")
    kappa = 1.0 - rel * rel / 2.0
    s = rel * math.sqrt(max(1.0 - rel * rel / 4.0, 0.0))
    gperp = direction - (direction @ vhat) * vhat
    gperp = gperp / np.linalg.norm(gperp)
    return n * (kappa * vhat + s * gperp)


def generate_synthetic(config, out_dir):
    """Write records/, masks/, and manifest.json under out_dir; returns the manifest path."""
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    root = Rng(config.seed, path=(2024,))

    d = config.raw_dim
    anomaly_dir = _unit(root.child(0).normal((d,)))
    # independent class-token direction: image- and pixel-level cues occupy
    # separate subspaces, so the classification and segmentation objectives
    # shape different components of the prompt split
    cls_dir = _unit(root.child(1).normal((d,)))
    # independent per-layer mixing (stand-in for depth): layer-specific views
    # keep any image-level leakage decorrelated across layers, so averaging
    # the per-layer maps suppresses it
    mixers = [np.linalg.qr(root.child(2, l).normal((d, d)))[0] for l in range(config.n_layers)]

    n_cats = config.train_categories + config.test_categories
    res = config.grid * config.pixel_scale
    entries = []
    for ci in range(n_cats):
        name = f"cat{ci:02d}"
        held_out = ci >= config.train_categories
        crng = root.child(10 + ci)
        # textures are drawn orthogonal to the anomaly and class directions:
        # at realistic encoder widths random directions are near-orthogonal
        # anyway; D_raw=32 needs the projection to reproduce that regime
        raw_tex = crng.child(0).normal((d,))
        raw_tex -= (raw_tex @ anomaly_dir) * anomaly_dir
        raw_tex -= (raw_tex @ cls_dir) * cls_dir / (cls_dir @ cls_dir)
        texture = _unit(raw_tex)

        n = config.images_per_category
        labels = np.zeros(n, dtype=int)
        labels[n // 2 :] = 1
        labels = labels[crng.child(1).permutation(n)]
        if held_out:
            splits = ["test"] * n
        else:
            n_val = int(round(config.val_frac * n))
            splits = ["train"] * (n - n_val) + ["val"] * n_val
            order = crng.child(2).permutation(n)
            splits = [splits[i] for i in np.argsort(order)]

        for ii in range(n):
            irng = crng.child(100 + ii)
            label = int(labels[ii])
            base = texture[None, :] + irng.child(0).normal(
                (config.grid * config.grid, d), config.noise
            )
            grid_mask = np.zeros((config.grid, config.grid), dtype=np.uint8)
            if label:
                fh = int(irng.child(1).integers(config.footprint_min, config.footprint_max + 1))
                fw = int(irng.child(2).integers(config.footprint_min, config.footprint_max + 1))
                y0 = int(irng.child(3).integers(0, config.grid - fh + 1))
                x0 = int(irng.child(4).integers(0, config.grid - fw + 1))
                grid_mask[y0 : y0 + fh, x0 : x0 + fw] = 1
                flat = grid_mask.reshape(-1).astype(bool)
                # norm-preserving rotation: defects change feature direction,
                # not energy, so the planted offset never rescales cosines
                planted = _rotate_toward(texture, anomaly_dir, config.shift)
                base[flat] += planted - texture

            layers = np.stack(
                [
                    (base @ mixers[l]) + irng.child(10 + l).normal(base.shape, 0.05)
                    for l in range(config.n_layers)
                ]
            )
            x_cls = base.mean(axis=0) + label * config.cls_shift * cls_dir

            rec = EmbeddingRecord(
                joint_dim=config.joint_dim,
                grid_h=config.grid,
                grid_w=config.grid,
                raw_dim=d,
                x_cls=x_cls.astype("<f4"),
                layers=layers.astype("<f4"),
            )
            rec_rel = f"records/{name}_{ii:03d}.pfle"
            write_record(out / rec_rel, rec)

            mask_rel = None
            if label:
                pixel_mask = np.kron(grid_mask, np.ones((config.pixel_scale, config.pixel_scale), dtype=np.uint8))
                mask_rel = f"masks/{name}_{ii:03d}.pgm"
                write_pgm(out / mask_rel, pixel_mask * 255)

            entries.append(
                ManifestEntry(
                    category=name,
                    split=splits[ii],
                    record=rec_rel,
                    label=label,
                    mask=mask_rel,
                    height=res,
                    width=res,
                )
            )

    manifest_path = out / "manifest.json"
    write_manifest(manifest_path, entries)
    return manifest_path
