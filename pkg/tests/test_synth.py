import hashlib
from pathlib import Path

import numpy as np
import pytest

from flowad.errors import ConfigError
from flowad.records import load_manifest, read_mask, read_record, validate_manifest
from flowad.synth import SyntheticGenConfig, generate_synthetic

SMALL = dict(
    train_categories=2,
    test_categories=1,
    images_per_category=8,
    grid=8,
    raw_dim=12,
    joint_dim=6,
    footprint_min=2,
    footprint_max=4,
    pixel_scale=2,
)


def tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def test_generation_is_byte_deterministic(tmp_path):
    generate_synthetic(SyntheticGenConfig(seed=3, **SMALL), tmp_path / "a")
    generate_synthetic(SyntheticGenConfig(seed=3, **SMALL), tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    generate_synthetic(SyntheticGenConfig(seed=4, **SMALL), tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_manifest_contract(tmp_path):
    mpath = generate_synthetic(SyntheticGenConfig(seed=0, **SMALL), tmp_path)
    man = load_manifest(mpath)
    assert validate_manifest(man)
    # disjoint category sets between train and test splits
    train_cats = set(man.categories("train"))
    assert train_cats == set(man.categories("val"))
    assert not train_cats & set(man.categories("test"))
    # normal images carry no mask entry
    for e in man.entries:
        if e.label == 0:
            assert e.mask is None
        else:
            mask = read_mask(man.mask_path(e))
            assert mask.any()
            assert mask.shape == (e.height, e.width)


def test_split_sizes_and_balance(tmp_path):
    cfg = SyntheticGenConfig(seed=1, **SMALL)
    man = load_manifest(generate_synthetic(cfg, tmp_path))
    n_train = len(man.split("train"))
    n_val = len(man.split("val"))
    n_test = len(man.split("test"))
    assert n_train + n_val == cfg.train_categories * cfg.images_per_category
    assert n_val == round(cfg.val_frac * cfg.images_per_category) * cfg.train_categories
    assert n_test == cfg.test_categories * cfg.images_per_category
    labels = [e.label for e in man.split("test")]
    assert sum(labels) == len(labels) // 2  # half anomalous


def test_planted_shift_statistics(tmp_path):
    cfg = SyntheticGenConfig(seed=2, train_categories=1, test_categories=1,
                             images_per_category=24, grid=8, raw_dim=12, joint_dim=6,
                             footprint_min=3, footprint_max=5, pixel_scale=2)
    man = load_manifest(generate_synthetic(cfg, tmp_path))
    diffs = []
    for e in man.entries:
        if e.label != 1:
            continue
        rec = read_record(man.record_path(e))
        mask = read_mask(man.mask_path(e))
        grid_mask = mask[:: cfg.pixel_scale, :: cfg.pixel_scale].reshape(-1).astype(bool)
        # undo the anomaly on layer 0 by comparing mean planted vs clean patches
        layer = rec.layers[0].astype(np.float64)
        diffs.append(np.linalg.norm(layer[grid_mask].mean(0) - layer[~grid_mask].mean(0)))
    diffs = np.array(diffs)
    # planted offset magnitude is `shift` (2.0) up to noise; mixing is orthogonal
    assert abs(diffs.mean() - cfg.shift) < 0.15
    assert (np.abs(diffs - cfg.shift) < 0.5).all()


def test_footprint_bounds_respected(tmp_path):
    cfg = SyntheticGenConfig(seed=5, **SMALL)
    man = load_manifest(generate_synthetic(cfg, tmp_path))
    for e in man.split("test"):
        if e.label != 1:
            continue
        mask = read_mask(man.mask_path(e))
        grid_mask = mask[:: cfg.pixel_scale, :: cfg.pixel_scale]
        ys, xs = np.nonzero(grid_mask)
        assert cfg.footprint_min <= ys.max() - ys.min() + 1 <= cfg.footprint_max
        assert cfg.footprint_min <= xs.max() - xs.min() + 1 <= cfg.footprint_max


def test_config_validation():
    with pytest.raises(ConfigError):
        SyntheticGenConfig(footprint_max=99, grid=8)
    with pytest.raises(ConfigError):
        SyntheticGenConfig(footprint_min=5, footprint_max=3)
    with pytest.raises(ConfigError):
        SyntheticGenConfig(images_per_category=0)
