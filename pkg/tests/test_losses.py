import numpy as np
import pytest
from oracles import disparity_loss_loop, recon_loss_loop

from madis_stereo.losses import SupervisionBundle, disparity_loss, recon_loss, total_loss
from madis_stereo.model import DisparityPrediction, PatchMask
from madis_stereo.tensor import DomainError, Tensor


def _pred(d, sigma, grad=False):
    return DisparityPrediction(Tensor(np.asarray(d, float), requires_grad=grad), Tensor(np.asarray(sigma, float)))


def test_single_pixel_value():
    loss = disparity_loss(_pred([[[2.0]]], [[[1.0]]]), SupervisionBundle([[[3.0]]], [[[True]]]))
    assert loss.item() == 1.0


def test_perfect_prediction_with_unit_sigma_is_zero():
    gt = np.array([[[1.0, 2.0], [0.0, 0.0]]])
    pgt = np.array([[[9.0, 9.0], [4.0, 5.0]]])
    valid = np.array([[[True, True], [False, False]]])
    d = np.where(valid, gt, pgt)
    assert disparity_loss(_pred(d, np.ones_like(d)), SupervisionBundle(gt, valid, pgt)).item() == 0.0


def test_two_by_two_mixed_matches_loop():
    d = [[1.5, -0.5], [2.0, 3.25]]
    sigma = [[0.5, 2.0], [1.5, 0.75]]
    gt = [[1.0, 0.0], [7.0, 7.0]]
    valid = [[True, True], [False, False]]
    pgt = [[5.0, 5.0], [2.5, 3.0]]
    got = disparity_loss(_pred([d], [sigma]), SupervisionBundle([gt], [valid], [pgt])).item()
    assert abs(got - disparity_loss_loop(d, sigma, gt, valid, pgt)) < 1e-12


@pytest.mark.parametrize("seed", range(50))
def test_disparity_loss_matches_loop_8x8(seed):
    r = np.random.default_rng(seed)
    d, gt, pgt = r.uniform(0, 10, (3, 8, 8))
    sigma = r.uniform(0.1, 3.0, (8, 8))
    valid = r.random((8, 8)) < 0.4
    got = disparity_loss(_pred(d[None], sigma[None]), SupervisionBundle(gt[None], valid[None], pgt[None])).item()
    ref = disparity_loss_loop(d.tolist(), sigma.tolist(), gt.tolist(), valid.tolist(), pgt.tolist())
    assert abs(got - ref) < 1e-12
    no_teacher = disparity_loss(_pred(d[None], sigma[None]), SupervisionBundle(gt[None], valid[None])).item()
    assert abs(no_teacher - disparity_loss_loop(d.tolist(), sigma.tolist(), gt.tolist(), valid.tolist(), None)) < 1e-12
    flipped = disparity_loss(
        _pred(d[None], sigma[None]), SupervisionBundle(gt[None], valid[None], pgt[None]), paper_sign_log_term=True
    ).item()
    ref_flip = disparity_loss_loop(d.tolist(), sigma.tolist(), gt.tolist(), valid.tolist(), pgt.tolist(), sign=-2.0)
    assert abs(flipped - ref_flip) < 1e-12


def test_partition_property(rng):
    d, gt, pgt = rng.uniform(0, 10, (3, 1, 6, 6))
    sigma = rng.uniform(0.5, 2.0, (1, 6, 6))
    valid = rng.random((1, 6, 6)) < 0.5
    base = disparity_loss(_pred(d, sigma), SupervisionBundle(gt, valid, pgt)).item()
    pgt2 = np.where(valid, pgt + rng.normal(size=pgt.shape) * 100, pgt)
    gt2 = np.where(valid, gt, gt + rng.normal(size=gt.shape) * 100)
    assert disparity_loss(_pred(d, sigma), SupervisionBundle(gt, valid, pgt2)).item() == base
    assert disparity_loss(_pred(d, sigma), SupervisionBundle(gt2, valid, pgt)).item() == base


def test_pseudo_label_gradient_gated_on_gt_pixels(rng):
    d, gt, pgt = rng.uniform(0, 10, (3, 1, 5, 5))
    sigma = rng.uniform(0.5, 2.0, (1, 5, 5))
    valid = rng.random((1, 5, 5)) < 0.5
    eps = 1e-5
    for idx in zip(*np.nonzero(valid)):
        up, dn = pgt.copy(), pgt.copy()
        up[idx] += eps
        dn[idx] -= eps
        lu = disparity_loss(_pred(d, sigma), SupervisionBundle(gt, valid, up)).item()
        ld = disparity_loss(_pred(d, sigma), SupervisionBundle(gt, valid, dn)).item()
        assert abs(lu - ld) / (2 * eps) < 1e-12


def test_sigma_must_be_positive():
    with pytest.raises(DomainError):
        disparity_loss(_pred([[[1.0]]], [[[0.0]]]), SupervisionBundle([[[1.0]]], [[[True]]]))


def test_empty_pixel_set():
    with pytest.raises(DomainError):
        disparity_loss(_pred(np.zeros((1, 0, 4)), np.ones((1, 0, 4))), SupervisionBundle(np.zeros((1, 0, 4)), np.zeros((1, 0, 4), bool)))


def test_gradient_reaches_prediction(rng):
    pred = _pred(rng.normal(size=(1, 4, 4)), np.ones((1, 4, 4)), grad=True)
    disparity_loss(pred, SupervisionBundle(np.zeros((1, 4, 4)), np.ones((1, 4, 4), bool))).backward()
    np.testing.assert_allclose(pred.d.grad, np.sign(pred.d.data) / 16)


# -- reconstruction ---------------------------------------------------------------


def test_recon_identity_is_zero(rng):
    img = rng.random((4, 4, 3))
    assert recon_loss(Tensor(img), img, PatchMask(np.array([True, False, True, False])), 2).item() == 0.0


def test_recon_one_masked_patch_constant_error():
    img = np.zeros((4, 4, 1))
    recon = Tensor(np.full((4, 4, 1), 0.5))
    mask = PatchMask(np.array([False, True, False, False]))
    assert recon_loss(recon, img, mask, 2).item() == 0.25


def test_recon_ignores_unmasked_pixels(rng):
    img = rng.random((4, 4, 3))
    recon = rng.random((4, 4, 3))
    mask = PatchMask(np.array([True, False, False, True]))
    pix = mask.pixel_mask(2, 2, 2)
    noisy = np.where(pix[:, :, None], recon, recon + 10.0)
    assert recon_loss(Tensor(recon), img, mask, 2).item() == recon_loss(Tensor(noisy), img, mask, 2).item()


def test_recon_no_masked_pixels_is_zero(rng):
    img = rng.random((4, 4, 3))
    assert recon_loss(Tensor(img + 1), img, PatchMask.empty(4), 2).item() == 0.0


@pytest.mark.parametrize("seed", range(50))
def test_recon_matches_loop_8x8(seed):
    r = np.random.default_rng(seed)
    img, recon = r.random((2, 8, 8, 3))
    flags = r.random(16) < 0.5
    flags[seed % 16] = True
    mask = PatchMask(flags)
    got = recon_loss(Tensor(recon), img, mask, 2).item()
    ref = recon_loss_loop(recon.tolist(), img.tolist(), mask.pixel_mask(2, 4, 4).tolist())
    assert abs(got - ref) < 1e-12


def test_total_loss():
    assert total_loss(3.0, 1.0, 2.0) == 6.0
    assert total_loss(3.0, 1.0, 2.0, disp_weight=0.5) == 4.5
    assert total_loss(3.0, 1.0, 2.0, disp_weight=0.0) == 3.0
