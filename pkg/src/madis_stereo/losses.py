"""Training objectives: gated Laplacian disparity NLL, masked reconstruction, total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DisparityPrediction, PatchMask
from .tensor import DomainError, ShapeError, Tensor


@dataclass
class SupervisionBundle:
    """Targets for one batch, all (B, H, W).

    ``gt_valid`` is the set of pixels with ground truth; every other pixel
    falls back to the teacher's pseudo label ``d_pgt``.  ``d_pgt`` may be
    ``None`` when no teacher is used, in which case only the ground-truth
    term contributes (still normalized by the full pixel count).
    """

    d_gt: np.ndarray
    gt_valid: np.ndarray
    d_pgt: np.ndarray | None = None

    def __post_init__(self):
        self.d_gt = np.asarray(self.d_gt, dtype=np.float64)
        self.gt_valid = np.asarray(self.gt_valid, dtype=bool)
        if self.d_gt.shape != self.gt_valid.shape:
            raise ShapeError("SupervisionBundle", self.d_gt.shape, self.gt_valid.shape)
        if not np.all(np.isfinite(self.d_gt[self.gt_valid])):
            raise ValueError("ground truth must be finite on its valid set")
        if self.d_pgt is not None:
            self.d_pgt = np.asarray(self.d_pgt, dtype=np.float64)
            if self.d_pgt.shape != self.d_gt.shape:
                raise ShapeError("SupervisionBundle d_pgt", self.d_gt.shape, self.d_pgt.shape)

    def target(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel target and weight (1 where some label applies, else 0)."""
        if self.d_pgt is None:
            target = np.where(self.gt_valid, self.d_gt, 0.0)
            return target, self.gt_valid.astype(np.float64)
        # never mix: ground truth wins wherever it exists
        target = np.where(self.gt_valid, self.d_gt, self.d_pgt)
        return target, np.ones(target.shape)


def disparity_loss(pred: DisparityPrediction, sup: SupervisionBundle, paper_sign_log_term: bool = False) -> Tensor:
    """Laplacian negative log-likelihood averaged over all pixels.

    Per pixel ``|d - target| / sigma + 2 log sigma``, where the target is the
    ground truth on its valid set and the pseudo label elsewhere.  With
    ``paper_sign_log_term`` the log term enters with a minus sign instead
    (unbounded below in sigma; for literal comparisons only).
    """
    d, sigma = pred.d, pred.sigma
    if d.shape != sup.d_gt.shape or sigma.shape != d.shape:
        raise ShapeError("disparity_loss", d.shape, sigma.shape, sup.d_gt.shape)
    if d.size == 0:
        raise DomainError("disparity_loss: empty pixel set")
    if np.any(sigma.data <= 0):
        raise DomainError("disparity_loss: sigma must be strictly positive")
    target, weight = sup.target()
    log_coef = -2.0 if paper_sign_log_term else 2.0
    per_pixel = (d - target).abs() / sigma + log_coef * sigma.log()
    return (per_pixel * weight).sum() * (1.0 / d.size)


def recon_loss(
    recon: Tensor,
    image: np.ndarray,
    masks: list[PatchMask] | PatchMask,
    patch_size: int,
    absolute: bool = False,
) -> Tensor:
    """Squared error summed over channels, averaged over masked pixels only.

    Returns 0 when no pixel is masked.  ``absolute`` switches to per-channel
    absolute error.
    """
    image = np.asarray(image, dtype=np.float64)
    if recon.shape != image.shape:
        raise ShapeError("recon_loss", recon.shape, image.shape)
    if isinstance(masks, PatchMask):
        masks = [masks]
    if recon.ndim == 3:
        recon = recon.reshape(1, *recon.shape)
        image = image[None]
    b, h, w, _ = image.shape
    gh, gw = h // patch_size, w // patch_size
    pix = np.stack([m.pixel_mask(patch_size, gh, gw) for m in masks]).astype(np.float64)
    n_masked = pix.sum()
    if n_masked == 0:
        return Tensor(0.0)
    diff = recon - image
    err = diff.abs() if absolute else diff * diff
    return (err.sum(axis=-1) * pix).sum() * (1.0 / n_masked)


def total_loss(l_disp, l_img_left, l_img_right, disp_weight: float = 1.0):
    # a zero weight drops the disparity branch from the graph altogether
    if disp_weight == 0:
        return l_img_left + l_img_right
    return l_img_left + l_img_right + disp_weight * l_disp
