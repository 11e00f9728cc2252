"""Rigid estimators: closed-form fits, robust fitting under outliers, salient
matching, the dense sweep, the refinement regressor, and the MI baseline."""

import numpy as np
import pytest

from xmodal import encoder as enc_mod
from xmodal import nn, registration, rigid
from xmodal.encoder import FeatureMap
from xmodal.phantom import GeneratorConfig, render_pair, sample_subject
from xmodal.registration import (CorrespondenceSet, MIConfig, PerturbConfig,
                                 Refiner, RegistrationError, RobustFitConfig,
                                 fit_rigid_procrustes, fit_rigid_robust,
                                 match_salient, register_mi)
from xmodal.rigid import RigidTransform2D


def apply_points(t, pts):
    m = t.matrix()
    return pts @ m[:2, :2].T + m[:2, 2]


def transform_close(a, b, tol_px=1e-6, tol_deg=1e-6, probe=20.0):
    """Compare two transforms by their action on a probe square."""
    pts = np.array([[0, 0], [probe, 0], [0, probe], [probe, probe]], dtype=float)
    return np.abs(apply_points(a, pts) - apply_points(b, pts)).max() < tol_px


# ---------------------------------------------------------------------------
# Closed-form fit
# ---------------------------------------------------------------------------


def test_procrustes_recovers_exact_transform():
    rng = np.random.default_rng(0)
    for _ in range(25):
        gt = RigidTransform2D(tx=rng.uniform(-20, 20), ty=rng.uniform(-20, 20),
                              theta=rng.uniform(-90, 90))
        src = rng.uniform(-30, 30, size=(12, 2))
        tgt = apply_points(gt, src)
        fit = fit_rigid_procrustes(src, tgt, frame="pixel")
        assert transform_close(fit, gt, tol_px=1e-8)


def test_procrustes_two_points_is_exact():
    gt = RigidTransform2D(tx=3.0, ty=-2.0, theta=30.0)
    src = np.array([[0.0, 0.0], [5.0, 1.0]])
    fit = fit_rigid_procrustes(src, apply_points(gt, src), frame="pixel")
    assert transform_close(fit, gt, tol_px=1e-9)


def test_procrustes_noise_monte_carlo():
    rng = np.random.default_rng(7)
    errs = []
    for _ in range(50):
        gt = RigidTransform2D(tx=rng.uniform(-10, 10), ty=rng.uniform(-10, 10),
                              theta=rng.uniform(-30, 30))
        src = rng.uniform(-25, 25, size=(60, 2))
        tgt = apply_points(gt, src) + rng.normal(0, 0.3, size=(60, 2))
        fit = fit_rigid_procrustes(src, tgt, frame="pixel")
        pts = rng.uniform(-25, 25, size=(10, 2))
        errs.append(np.abs(apply_points(fit, pts) - apply_points(gt, pts)).max())
    assert np.mean(errs) < 0.3
    assert np.max(errs) < 1.0


def test_procrustes_rejects_degenerate_input():
    with pytest.raises(RegistrationError):
        fit_rigid_procrustes(np.zeros((1, 2)), np.zeros((1, 2)))
    same = np.full((5, 2), 3.0)
    with pytest.raises(RegistrationError):
        fit_rigid_procrustes(same, same + 1.0)


# ---------------------------------------------------------------------------
# Robust fit
# ---------------------------------------------------------------------------


def contaminated_set(rng, gt, n_in=70, n_out=30):
    src_in = rng.uniform(0, 40, size=(n_in, 2))
    tgt_in = apply_points(gt, src_in)
    src_out = rng.uniform(0, 40, size=(n_out, 2))
    tgt_out = rng.uniform(-40, 80, size=(n_out, 2))
    src = np.concatenate([src_in, src_out])
    tgt = np.concatenate([tgt_in, tgt_out])
    ones = np.ones(len(src))
    return CorrespondenceSet(src=src, tgt=tgt, first_sim=ones, second_sim=0.5 * ones)


def test_robust_fit_survives_thirty_percent_outliers():
    failures = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        gt = RigidTransform2D(tx=rng.uniform(-8, 8), ty=rng.uniform(-8, 8),
                              theta=rng.uniform(-15, 15))
        corr = contaminated_set(rng, gt)
        fit = fit_rigid_robust(corr, RobustFitConfig(seed=seed), frame="pixel")
        ok = (abs(fit.theta - gt.theta) < 0.5
              and transform_close(fit, gt, tol_px=0.5, probe=40.0))
        failures += not ok
    assert failures == 0


def test_robust_fit_is_permutation_invariant():
    rng = np.random.default_rng(3)
    gt = RigidTransform2D(tx=4.0, ty=-3.0, theta=9.0)
    corr = contaminated_set(rng, gt)
    perm = rng.permutation(len(corr.src))
    shuffled = CorrespondenceSet(src=corr.src[perm], tgt=corr.tgt[perm],
                                 first_sim=corr.first_sim[perm],
                                 second_sim=corr.second_sim[perm])
    a = fit_rigid_robust(corr, RobustFitConfig(seed=0), frame="pixel")
    b = fit_rigid_robust(shuffled, RobustFitConfig(seed=0), frame="pixel")
    assert transform_close(a, b, tol_px=1e-6, probe=40.0)


def test_robust_fit_rejects_tiny_input():
    corr = CorrespondenceSet(src=np.zeros((1, 2)), tgt=np.zeros((1, 2)),
                             first_sim=np.ones(1), second_sim=np.ones(1))
    with pytest.raises(RegistrationError):
        fit_rigid_robust(corr)


# ---------------------------------------------------------------------------
# Salient matching
# ---------------------------------------------------------------------------


def distinct_feature_map(rng, c, h, w, modality="A"):
    """Feature map whose locations are mutually near-orthogonal, so each
    location's best match in a copy of itself is unambiguous."""
    vals = rng.standard_normal((c, h, w)).astype(np.float32)
    return FeatureMap(nn.l2_normalize_locations(vals), modality,
                      (h * 8, w * 8), normalized=True)


def test_match_salient_identity_on_identical_maps():
    rng = np.random.default_rng(5)
    fa = distinct_feature_map(rng, 64, 8, 8, "A")
    fb = FeatureMap(fa.values.copy(), "B", fa.source_shape, normalized=True)
    corr = match_salient(fa, fb, ratio=0.8)
    assert len(corr) == 64
    np.testing.assert_allclose(corr.src, corr.tgt)
    assert (corr.second_sim < 0.8 * corr.first_sim).all()


def test_match_salient_directions_partition_locations():
    rng = np.random.default_rng(6)
    fa = distinct_feature_map(rng, 16, 6, 6, "A")
    fb = distinct_feature_map(rng, 16, 6, 6, "B")
    std = match_salient(fa, fb, ratio=0.8, direction="standard")
    inv = match_salient(fa, fb, ratio=0.8, direction="inverted")
    # each source location passes exactly one of the two opposite tests
    # (boundary ties aside)
    assert len(std) + len(inv) == 36
    std_src = {tuple(p) for p in std.src}
    inv_src = {tuple(p) for p in inv.src}
    assert not std_src & inv_src


def test_match_salient_validates_arguments():
    rng = np.random.default_rng(0)
    fa = distinct_feature_map(rng, 8, 4, 4)
    with pytest.raises(RegistrationError):
        match_salient(fa, fa, ratio=0.0)
    raw = FeatureMap(fa.values, "A", fa.source_shape, normalized=False)
    with pytest.raises(RegistrationError):
        match_salient(raw, fa)


def test_estimate_salient_recovers_planted_crop():
    rng = np.random.default_rng(8)
    fa = distinct_feature_map(rng, 64, 14, 14, "A")
    dy, dx = 3, 5
    crop = fa.values[:, dy:dy + 7, dx:dx + 7]
    fb = FeatureMap(crop.copy(), "B", (56, 56), normalized=True)
    t = registration.estimate_salient(fa, fb, subcell=False)
    assert t.frame == "pixel"
    # feature offset (dy, dx) maps to 8x that in pixels
    pts = np.array([[0.0, 0.0], [40.0, 40.0]])
    expect = pts + np.array([dx * 8, dy * 8])
    assert np.abs(apply_points(t, pts) - expect).max() < 1e-6
    assert abs(t.theta) < 1e-6


# ---------------------------------------------------------------------------
# Dense sweep
# ---------------------------------------------------------------------------


def test_estimate_dense_recovers_planted_offset():
    rng = np.random.default_rng(10)
    fa = distinct_feature_map(rng, 32, 16, 12, "A")
    dy, dx = 4, 2
    crop = fa.values[:, dy:dy + 8, dx:dx + 8]
    fb = FeatureMap(crop.copy(), "B", (64, 64), normalized=True)
    t = registration.estimate_dense(fa, fb, angle_range=0, subcell=False)
    assert t.frame == "feature"
    assert abs(t.tx - dx) < 1e-6 and abs(t.ty - dy) < 1e-6
    assert t.theta == 0.0


def test_estimate_dense_subcell_stays_within_half_cell():
    rng = np.random.default_rng(11)
    fa = distinct_feature_map(rng, 32, 16, 12, "A")
    crop = fa.values[:, 4:12, 2:10]
    fb = FeatureMap(crop.copy(), "B", (64, 64), normalized=True)
    t = registration.estimate_dense(fa, fb, angle_range=2.0, angle_step=1.0,
                                    subcell=True)
    assert abs(t.tx - 2) <= 0.5 and abs(t.ty - 4) <= 0.5
    assert abs(t.theta) <= 1.0


def test_estimate_dense_reports_score():
    rng = np.random.default_rng(12)
    fa = distinct_feature_map(rng, 16, 10, 10, "A")
    fb = FeatureMap(fa.values.copy(), "B", fa.source_shape, normalized=True)
    t, score = registration.estimate_dense(fa, fb, angle_range=0,
                                           return_score=True)
    assert score == pytest.approx(1.0, abs=1e-4)
    assert abs(t.tx) < 1e-6 and abs(t.ty) < 1e-6


def test_estimate_dense_requires_normalized_maps():
    rng = np.random.default_rng(0)
    fa = distinct_feature_map(rng, 8, 6, 6)
    raw = FeatureMap(fa.values, "B", fa.source_shape, normalized=False)
    with pytest.raises(RegistrationError):
        registration.estimate_dense(fa, raw)


# ---------------------------------------------------------------------------
# MI baseline
# ---------------------------------------------------------------------------


def smooth_image(rng, h, w):
    from scipy import ndimage
    return ndimage.gaussian_filter(rng.standard_normal((h, w)), 3.0)


def test_register_mi_recovers_shift_under_intensity_remap():
    rng = np.random.default_rng(20)
    img_a = smooth_image(rng, 90, 90)
    dy, dx = 7, -5
    # crop B out of A at a known offset, then remap intensities so only a
    # statistical (not linear) relation remains
    crop = img_a[30 + dy:30 + dy + 30, 30 + dx:30 + dx + 30]
    img_b = np.exp(-2.0 * crop)
    res = register_mi(img_a, img_b, MIConfig(trans_range=12.0))
    assert not res.low_confidence
    pts = np.array([[0.0, 0.0], [29.0, 29.0]])
    expect = pts + np.array([30 + dx, 30 + dy])
    assert np.abs(apply_points(res.transform, pts) - expect).max() < 1.0


def test_register_mi_identity_for_centered_crop():
    rng = np.random.default_rng(21)
    img_a = smooth_image(rng, 80, 80)
    img_b = img_a[25:55, 25:55].copy()
    res = register_mi(img_a, img_b, MIConfig(trans_range=9.0))
    pts = np.array([[0.0, 0.0], [29.0, 29.0]])
    assert np.abs(apply_points(res.transform, pts) - (pts + 25.0)).max() < 1.0


def test_register_mi_flags_unrelated_images():
    rng = np.random.default_rng(22)
    img_a = rng.standard_normal((70, 70))
    img_b = rng.standard_normal((28, 28))
    res = register_mi(img_a, img_b)
    assert res.low_confidence


# ---------------------------------------------------------------------------
# Refinement regressor
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_model():
    cfg = enc_mod.EncoderConfig(channels_a=("bone",), channels_b=("fat",),
                                embed_dim=8, widths=(4, 4, 8))
    return enc_mod.init_params(cfg, seed=1)


def test_refiner_forward_shape_and_param_grad_alignment():
    net = Refiner(in_channels=4, seed=0)
    out = net.forward(np.random.default_rng(0).standard_normal(
        (2, 4, 9, 9)).astype(np.float32), "eval")
    assert out.shape == (2, 3)
    for (_, p), (_, g) in zip(net.params(), net.grads()):
        assert p.shape == g.shape


def test_refine_correction_respects_perturbation_bounds(tiny_model):
    pair = render_pair(sample_subject(0), config=GeneratorConfig(), record_seed=0)
    net = Refiner(in_channels=2 * 8, seed=3,
                  perturb=PerturbConfig(max_shift_px=10.0, max_rot_deg=3.0))
    initial = pair.gt_transform
    result = registration.refine(initial, pair.scan_a, pair.scan_b, tiny_model, net)
    assert result.frame == "pixel"
    delta = rigid.compose(result, rigid.invert(initial))
    assert abs(delta.theta) <= 3.0 + 1e-6
    # with the rotation within bounds, the displacement of the image center
    # is bounded by the shift clamp plus the rotational sweep of the center
    ca = rigid.image_center(pair.scan_a.image.shape[1:])
    moved = apply_points(delta, np.array([ca]))[0]
    lever = np.hypot(*ca) * np.deg2rad(3.0)
    assert np.hypot(*(moved - ca)) <= np.hypot(10.0, 10.0) + lever + 1e-6


def test_refine_requires_pixel_frame(tiny_model):
    pair = render_pair(sample_subject(1), config=GeneratorConfig(), record_seed=0)
    net = Refiner(in_channels=2 * 8, seed=0)
    feat = RigidTransform2D(frame="feature")
    with pytest.raises(rigid.FrameError):
        registration.refine(feat, pair.scan_a, pair.scan_b, tiny_model, net)


def test_refiner_checkpoint_round_trip(tmp_path):
    net = Refiner(in_channels=6, seed=5,
                  perturb=PerturbConfig(max_shift_px=7.0, max_rot_deg=2.0, copies=4))
    registration.save_refiner(str(tmp_path / "ref"), net)
    loaded = registration.load_refiner(str(tmp_path / "ref"))
    assert loaded.in_channels == 6
    assert loaded.perturb == net.perturb
    for (na, a), (nb, b) in zip(net.params(), loaded.params()):
        assert na == nb
        np.testing.assert_array_equal(a, b)
    with pytest.raises(enc_mod.CheckpointError):
        registration.load_refiner(str(tmp_path / "missing"))


def test_train_refiner_fits_synthetic_perturbations(tiny_model):
    pair = render_pair(sample_subject(2), config=GeneratorConfig(), record_seed=0)
    aligned = [(pair.scan_a, pair.scan_b, pair.gt_transform)]
    perturb = PerturbConfig(max_shift_px=8.0, max_rot_deg=2.0, copies=8)
    net, losses = registration.train_refiner(aligned, tiny_model, perturb=perturb,
                                             seed=0, steps=60, lr=1e-3, batch_size=8)
    assert len(losses) == 60
    # normalized targets are uniform in [-1, 1]; fitting the training set
    # should beat the predict-zero loss of E[u^2] = 1/3
    assert np.mean(losses[-10:]) < np.mean(losses[:5])
    assert np.mean(losses[-10:]) < 1.0 / 3.0
