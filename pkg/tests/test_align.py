import math

import numpy as np
import pytest

from flowad import align as A
from flowad.errors import DataError
from flowad.rng import Rng
from flowad.tensor import Parameter, Tensor, check_gradients, tsum


def test_project_identity_weight():
    proj = A.PatchProjection(1, 3, 3, rng=Rng(0))
    proj.weights[0].data[...] = np.eye(3)
    raw = np.random.default_rng(0).normal(size=(5, 3))
    out = A.project_patches(Tensor(raw), proj, 0)
    assert np.allclose(out.data, raw, atol=1e-15)


def test_project_shape_and_oracle():
    rng = np.random.default_rng(1)
    proj = A.PatchProjection(2, 6, 4, rng=Rng(1))
    raw = rng.normal(size=(37 * 37, 6))
    out = A.project_patches(Tensor(raw), proj, 1)
    assert out.shape == (1369, 4)  # 518/14 = 37 -> 37^2 patches
    assert np.abs(out.data - raw @ proj.weights[1].data).max() < 1e-12


def test_project_width_mismatch():
    proj = A.PatchProjection(1, 6, 4, rng=Rng(2))
    with pytest.raises(DataError) as exc:
        A.project_patches(Tensor(np.zeros((10, 5))), proj, 0)
    assert exc.value.code == "shape_mismatch"


def test_rca_zero_weight_gives_column_mean():
    rng = np.random.default_rng(3)
    rca = A.RcaWeights(4, rng=Rng(3))
    rca.W.data[...] = 0.0
    zt = rng.normal(size=(2, 4))
    f_img = rng.normal(size=(7, 4))
    out = A.rca_refine(Tensor(zt), Tensor(f_img), rca)
    assert np.abs(out.data - (zt + f_img.mean(axis=0))).max() < 1e-12


def test_rca_identical_rows_passthrough():
    rng = np.random.default_rng(4)
    rca = A.RcaWeights(4, rng=Rng(4))
    zt = rng.normal(size=(2, 4))
    v = rng.normal(size=4)
    f_img = np.tile(v, (9, 1))
    out = A.rca_refine(Tensor(zt), Tensor(f_img), rca)
    assert np.abs(out.data - (zt + v)).max() < 1e-12


def test_rca_three_step_oracle():
    rng = np.random.default_rng(5)
    rca = A.RcaWeights(4, rng=Rng(5))
    zt = rng.normal(size=(2, 4))
    f_img = rng.normal(size=(3, 4))
    q = zt @ rca.W.data
    logits = q @ f_img.T / math.sqrt(4)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    expected = zt + attn @ f_img
    out = A.rca_refine(Tensor(zt), Tensor(f_img), rca)
    assert np.abs(out.data - expected).max() < 1e-12


def test_rca_constant_row_shift_passes_through():
    rng = np.random.default_rng(6)
    rca = A.RcaWeights(5, rng=Rng(6))
    zt = rng.normal(size=(2, 5))
    f_img = rng.normal(size=(8, 5))
    v = rng.normal(size=5)
    base = A.rca_refine(Tensor(zt), Tensor(f_img), rca).data
    shifted = A.rca_refine(Tensor(zt), Tensor(f_img + v), rca).data
    assert np.abs(shifted - (base + v)).max() < 1e-10


def test_anomaly_map_symmetric_patch():
    # patch equally similar to both embeddings -> probability one half
    f_img = np.tile(np.array([1.0, 1.0, 0.0, 0.0]), (4, 1))
    f_txt = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    out = A.layer_anomaly_map(Tensor(f_img), Tensor(f_txt), 2, 2, grid_h=2, grid_w=2)
    assert np.abs(out.data - 0.5).max() < 1e-12


def test_anomaly_map_saturates_on_aligned_patch():
    f_img = np.tile(np.array([0.0, 1.0, 0.0]), (4, 1))
    f_txt = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])  # abnormal row = patch direction
    out = A.layer_anomaly_map(Tensor(f_img), Tensor(f_txt), 2, 2, grid_h=2, grid_w=2,
                              logit_scale=100.0)
    expected = 1.0 / (1.0 + math.exp(-100.0))
    assert np.abs(out.data - expected).max() < 1e-12


def test_anomaly_map_corner_logits_preserved():
    rng = np.random.default_rng(7)
    f_img = rng.normal(size=(4, 3))
    f_txt = rng.normal(size=(2, 3))
    small = A.layer_anomaly_map(Tensor(f_img), Tensor(f_txt), 2, 2, grid_h=2, grid_w=2)
    big = A.layer_anomaly_map(Tensor(f_img), Tensor(f_txt), 4, 4, grid_h=2, grid_w=2)
    # align-corners keeps corner logits exact, softmax is pointwise
    for (yo, xo), (yi, xi) in [((0, 0), (0, 0)), ((0, 3), (0, 1)), ((3, 0), (1, 0)), ((3, 3), (1, 1))]:
        assert abs(big.data[yo, xo] - small.data[yi, xi]) < 1e-12


def test_anomaly_map_row_rescaling_invariance():
    rng = np.random.default_rng(8)
    f_img = rng.normal(size=(9, 5))
    f_txt = rng.normal(size=(2, 5))
    base = A.layer_anomaly_map(Tensor(f_img), Tensor(f_txt), 6, 6, grid_h=3, grid_w=3).data
    f_img2 = f_img.copy()
    f_img2[4] *= 3.0
    f_txt2 = f_txt.copy()
    f_txt2[1] *= 3.0
    scaled = A.layer_anomaly_map(Tensor(f_img2), Tensor(f_txt2), 6, 6, grid_h=3, grid_w=3).data
    assert np.abs(scaled - base).max() < 1e-12


def test_aggregate_examples():
    ones = Tensor(np.ones((2, 2)))
    zeros = Tensor(np.zeros((2, 2)))
    assert np.allclose(A.aggregate([ones, zeros]).data, 0.5)
    assert np.allclose(A.aggregate([ones, ones, ones]).data, 1.0)
    with pytest.raises(ValueError):
        A.aggregate([])


def test_aggregate_divisor_and_permutation_invariance():
    rng = np.random.default_rng(9)
    maps = [Tensor(rng.uniform(size=(3, 3))) for _ in range(120)]  # L*B*R = 4*3*10
    mean = A.aggregate(maps).data
    stacked = np.stack([m.data for m in maps])
    assert np.abs(mean - stacked.sum(axis=0) / 120.0).max() < 1e-12
    perm = np.random.default_rng(10).permutation(120)
    assert np.abs(A.aggregate([maps[i] for i in perm]).data - mean).max() < 1e-12


def test_global_embedding_zero_patches():
    x_cls = np.array([0.5, -0.25, 1.0])
    layers = [Tensor(np.zeros((4, 3))) for _ in range(2)]
    fusion = Parameter(np.random.default_rng(11).normal(size=(6, 3)), name="fusion")
    ge = A.global_embedding(Tensor(x_cls), layers, fusion)
    assert np.allclose(ge.x_patch.data, 0.0)
    assert np.allclose(ge.x.data, x_cls)
    assert ge.x.shape == (3,)


def test_global_embedding_pool_then_matmul_oracle():
    rng = np.random.default_rng(12)
    layers = [rng.normal(size=(6, 3)) for _ in range(2)]
    fusion = rng.normal(size=(6, 3))
    ge = A.global_embedding(
        Tensor(np.zeros(3)), [Tensor(x) for x in layers], Tensor(fusion)
    )
    pooled = np.concatenate([x.mean(axis=0) for x in layers])
    assert np.abs(ge.x_patch.data - pooled @ fusion).max() < 1e-12


def test_image_score_constant_map_and_symmetry():
    x = np.array([1.0, 1.0, 0.0, 0.0])
    zt = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    amap = Tensor(np.full((4, 4), 0.25))
    s, s_text, s_img = A.image_score(Tensor(x), [Tensor(zt)], amap)
    assert abs(float(s_img.data) - 0.25) < 1e-12
    assert abs(float(s_text.data) - 0.5) < 1e-12  # equidistant from both rows
    assert abs(float(s.data) - 0.75) < 1e-12


def test_image_score_single_pair_hand_value():
    x = np.array([1.0, 0.0])
    zt = np.array([[1.0, 0.0], [0.0, 1.0]])
    amap = Tensor(np.full((2, 2), 0.125))
    scale = 10.0
    s, s_text, s_img = A.image_score(Tensor(x), [Tensor(zt)], amap, logit_scale=scale)
    expected_text = math.exp(0.0) / (math.exp(0.0) + math.exp(scale))
    assert abs(float(s_text.data) - expected_text) < 1e-12
    assert abs(float(s.data) - (expected_text + 0.125)) < 1e-12
    with pytest.raises(ValueError):
        A.image_score(Tensor(x), [], amap)


def test_alignment_gradients_end_to_end():
    rng = np.random.default_rng(13)
    proj = A.PatchProjection(2, 5, 4, rng=Rng(14))
    rca = A.RcaWeights(4, rng=Rng(15))
    fusion = Parameter(rng.normal(size=(8, 4)), name="fusion")
    raw = [rng.normal(size=(9, 5)) for _ in range(2)]
    zt = Tensor(rng.normal(size=(2, 4)))
    x_cls = Tensor(rng.normal(size=4))
    mask = (rng.uniform(size=(6, 6)) > 0.7).astype(float)

    def objective():
        projected = [A.project_patches(Tensor(r), proj, i) for i, r in enumerate(raw)]
        ge = A.global_embedding(x_cls, projected, fusion)
        maps = []
        for f in projected:
            ft = A.rca_refine(zt, f, rca)
            maps.append(A.layer_anomaly_map(f, ft, 6, 6, grid_h=3, grid_w=3, logit_scale=10.0))
        m = A.aggregate(maps)
        probs = A.text_image_probs(ge.x, zt, logit_scale=10.0)
        return tsum(m * Tensor(mask)) + probs[1]

    params = proj.parameters() + rca.parameters() + [fusion]
    err = check_gradients(objective, params, h=1e-5, max_entries=6, seed=3)
    assert err < 1e-4
