"""EMA teacher and the teacher-student training step."""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict

import numpy as np

from .losses import SupervisionBundle, disparity_loss, recon_loss, total_loss
from .model import Encoder, MaDisStereo, sample_mask
from .tensor import ShapeError

DEFAULT_EMA = 0.9999


@dataclass
class TeacherState:
    encoder: Encoder
    alpha: float = DEFAULT_EMA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"EMA coefficient {self.alpha} outside [0, 1]")


def init_teacher(model: MaDisStereo, alpha: float = DEFAULT_EMA) -> TeacherState:
    """Deep copy of the student encoder; decoder and heads stay shared."""
    encoder = copy.deepcopy(model.encoder)
    for p in encoder.parameters():
        p.requires_grad = False
        p.grad = None
    return TeacherState(encoder, alpha)


def ema_update(teacher: TeacherState, student_encoder: Encoder) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, for every encoder parameter."""
    a = teacher.alpha
    t_params = dict(teacher.encoder.named_parameters())
    s_params = dict(student_encoder.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ShapeError("ema_update (parameter sets differ)", (len(t_params),), (len(s_params),))
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ShapeError(f"ema_update[{name}]", t.shape, s.shape)
        t.data[...] = a * t.data + (1.0 - a) * s.data


@dataclass
class StepReport:
    step: int
    loss_total: float
    loss_disp: float
    loss_img_left: float
    loss_img_right: float
    grad_norm: float
    lr: float

    def as_dict(self) -> dict:
        return asdict(self)


def make_masks(num_patches: int, ratio: float, batch_size: int, seed: int):
    """Independent left and right masks for every sample of a batch."""
    rng = np.random.default_rng(seed)
    left = [sample_mask(num_patches, ratio, rng) for _ in range(batch_size)]
    right = [sample_mask(num_patches, ratio, rng) for _ in range(batch_size)]
    return left, right


def pseudo_labels(model: MaDisStereo, teacher: TeacherState, left, right) -> np.ndarray:
    return model.forward_teacher(left, right, teacher.encoder).d.data.copy()


def training_step(
    batch: dict,
    model: MaDisStereo,
    teacher: TeacherState | None,
    optimizer,
    mask_ratio: float,
    disp_weight: float,
    seed: int,
    lr: float,
    step: int = 0,
    use_pseudo_labels: bool = True,
    pseudo_override: np.ndarray | None = None,
    paper_sign_log_term: bool = False,
    recon_absolute: bool = False,
) -> StepReport:
    """One optimization step of the full teacher-student system.

    Order: teacher pseudo labels (no graph) -> masks -> student forward ->
    losses -> backward -> optimizer step -> EMA update.  ``teacher=None``
    trains the student alone on ground truth.  ``pseudo_override`` injects
    precomputed pseudo labels instead of running the teacher.
    """
    left, right = batch["left"], batch["right"]
    cfg = model.cfg
    d_pgt = None
    if pseudo_override is not None:
        d_pgt = np.asarray(pseudo_override, dtype=np.float64)
    elif teacher is not None and use_pseudo_labels:
        d_pgt = pseudo_labels(model, teacher, left, right)

    left_masks, right_masks = make_masks(cfg.num_patches, mask_ratio, left.shape[0], seed)
    out = model.forward_student(left, right, left_masks, right_masks)
    sup = SupervisionBundle(batch["d_gt"], batch["valid"], d_pgt)
    l_disp = disparity_loss(out.prediction, sup, paper_sign_log_term)
    l_img_l = recon_loss(out.recon_left, left, left_masks, cfg.patch_size, recon_absolute)
    l_img_r = recon_loss(out.recon_right, right, right_masks, cfg.patch_size, recon_absolute)
    loss = total_loss(l_disp, l_img_l, l_img_r, disp_weight)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(
            f"non-finite loss at step {step}: total={loss.item()} disp={l_disp.item()} "
            f"img_l={l_img_l.item()} img_r={l_img_r.item()}"
        )

    model.zero_grad()
    if loss.requires_grad:
        loss.backward()
    params = model.parameters()
    grad_norm = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))
    optimizer.step(lr)
    if teacher is not None:
        ema_update(teacher, model.encoder)
    return StepReport(step, loss.item(), l_disp.item(), l_img_l.item(), l_img_r.item(), grad_norm, lr)
