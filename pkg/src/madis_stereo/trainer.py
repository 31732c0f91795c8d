"""Optimization loop, checkpoints, evaluation and ablation harnesses."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .data import StereoSample, stack_batch
from .distillation import StepReport, TeacherState, init_teacher, training_step
from .model import MaDisStereo, ModelConfig
from .nn import Module
from .tensor import no_grad

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 0.05
    warmup_epochs: float = 1.0
    epochs: int = 10
    batch_size: int = 4
    mask_ratio: float = 0.4
    disp_weight: float = 1.0
    ema_alpha: float = 0.9999
    seed: int = 0
    use_teacher: bool = True
    pseudo_label_start_step: int = 0
    eval_every: int = 0
    eval_path: str = "teacher"
    checkpoint_every: int = 0
    paper_sign_log_term: bool = False
    recon_absolute: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.eval_path not in ("teacher", "student"):
            raise ValueError("eval_path must be 'teacher' or 'student'")


# -- optimizer ------------------------------------------------------------------


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float | Sequence[float] = 0.0,
) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay.

    ``state`` holds ``m`` and ``v`` (lists of arrays, zero-initialized) and
    the step counter ``t``.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("adamw_step: non-finite gradient")
    b1, b2 = betas
    state["t"] = t = state.get("t", 0) + 1
    decays = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * len(params)
    bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
    for p, g, m, v, wd in zip(params, grads, state["m"], state["v"], decays):
        p *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class AdamW:
    """AdamW over a module's parameters; 1-D tensors (biases, norms) skip decay."""

    def __init__(self, named_params, weight_decay: float = 0.05, betas=(0.9, 0.999), eps: float = 1e-8):
        self.named = list(named_params)
        self.betas = betas
        self.eps = eps
        self.decay = [weight_decay if p.ndim >= 2 else 0.0 for _, p in self.named]
        self.state = {
            "t": 0,
            "m": [np.zeros_like(p.data) for _, p in self.named],
            "v": [np.zeros_like(p.data) for _, p in self.named],
        }

    def step(self, lr: float) -> None:
        """Update every parameter that received a gradient; the others are left untouched."""
        live = [i for i, (_, p) in enumerate(self.named) if p.grad is not None]
        sub = {"t": self.state["t"], "m": [self.state["m"][i] for i in live], "v": [self.state["v"][i] for i in live]}
        params = [self.named[i][1] for i in live]
        adamw_step([p.data for p in params], [p.grad for p in params], sub, lr, self.betas, self.eps,
                   [self.decay[i] for i in live])
        self.state["t"] = sub["t"]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.state["t"])}
        for (name, _), m, v in zip(self.named, self.state["m"], self.state["v"]):
            out[f"m/{name}"] = m
            out[f"v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state["t"] = int(arrays["t"])
        for i, (name, _) in enumerate(self.named):
            self.state["m"][i][...] = arrays[f"m/{name}"]
            self.state["v"][i][...] = arrays[f"v/{name}"]


def cosine_lr(step: float, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup from 0 to ``lr_max``, then half-cosine decay to 0 at ``total_steps``."""
    if not total_steps > warmup_steps >= 0:
        raise ValueError("need total_steps > warmup_steps >= 0")
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


# -- evaluation -------------------------------------------------------------------


def predict_dataset(model: MaDisStereo, samples: Sequence[StereoSample], encoder=None, batch_size: int = 4):
    preds = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            batch = stack_batch(list(samples[i : i + batch_size]))
            preds.append(model.predict(batch["left"], batch["right"], encoder).d.data)
    return np.concatenate(preds)


def evaluate_predictions(preds, samples: Sequence[StereoSample]) -> dict[str, float]:
    """Six-column metric row pooled over every valid pixel of every sample."""
    d = np.concatenate([np.asarray(p).reshape(-1) for p in preds])
    gt = np.concatenate([s.d_gt_dense.reshape(-1) for s in samples])
    valid = np.concatenate([s.valid.reshape(-1) for s in samples])
    return metrics.evaluate(d, gt, valid)


def masked_recon_mse(model: MaDisStereo, samples: Sequence[StereoSample], mask_ratio: float, seed: int) -> float:
    """Reconstruction loss (left + right averaged) on fixed masks; no graph recorded."""
    from .distillation import make_masks
    from .losses import recon_loss

    batch = stack_batch(list(samples))
    lm, rm = make_masks(model.cfg.num_patches, mask_ratio, len(samples), seed)
    with no_grad():
        out = model.forward_student(batch["left"], batch["right"], lm, rm)
        p = model.cfg.patch_size
        return 0.5 * (recon_loss(out.recon_left, batch["left"], lm, p).item()
                      + recon_loss(out.recon_right, batch["right"], rm, p).item())


# -- training loop ----------------------------------------------------------------


@dataclass
class Trainer:
    """Holds every piece of mutable training state.

    A checkpoint written by :meth:`save` restores the exact trajectory:
    batch order and masks are derived from ``(seed, epoch)`` and
    ``(seed, step)`` only.
    """

    config: TrainConfig
    model_config: ModelConfig
    dataset: Sequence[StereoSample]
    model: MaDisStereo = None
    teacher: TeacherState | None = None
    optimizer: AdamW = None
    step: int = 0
    reports: list[StepReport] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.model is None:
            self.model = MaDisStereo(self.model_config, seed=self.config.seed)
        if self.teacher is None and self.config.use_teacher:
            self.teacher = init_teacher(self.model, self.config.ema_alpha)
        if self.optimizer is None:
            self.optimizer = AdamW(self.model.named_parameters(), weight_decay=self.config.weight_decay)
        if not len(self.dataset):
            raise ValueError("empty training set")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.dataset) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.epochs

    @property
    def warmup_steps(self) -> int:
        return min(int(round(self.config.warmup_epochs * self.steps_per_epoch)), self.total_steps - 1)

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.dataset))
        bs = self.config.batch_size
        return order[k * bs : (k + 1) * bs]

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.total_steps, self.warmup_steps, self.config.lr)

    def train_step(self) -> StepReport:
        cfg = self.config
        batch = stack_batch([self.dataset[i] for i in self.batch_indices(self.step)])
        report = training_step(
            batch,
            self.model,
            self.teacher,
            self.optimizer,
            mask_ratio=cfg.mask_ratio,
            disp_weight=cfg.disp_weight,
            seed=step_seed(cfg.seed, self.step),
            lr=self.lr_at(self.step),
            step=self.step,
            use_pseudo_labels=self.step >= cfg.pseudo_label_start_step,
            paper_sign_log_term=cfg.paper_sign_log_term,
            recon_absolute=cfg.recon_absolute,
        )
        self.reports.append(report)
        self.step += 1
        return report

    def eval_encoder(self):
        if self.config.eval_path == "teacher" and self.teacher is not None:
            return self.teacher.encoder
        return self.model.encoder

    def evaluate(self, samples: Sequence[StereoSample], encoder=None) -> dict[str, float]:
        encoder = self.eval_encoder() if encoder is None else encoder
        preds = predict_dataset(self.model, samples, encoder, self.config.batch_size)
        return evaluate_predictions(preds, samples)

    def run(
        self,
        num_steps: int | None = None,
        eval_set: Sequence[StereoSample] | None = None,
        out_dir=None,
        callback: Callable[[StepReport], None] | None = None,
    ) -> list[StepReport]:
        cfg = self.config
        end = self.total_steps if num_steps is None else min(self.step + num_steps, self.total_steps)
        out = Path(out_dir) if out_dir else None
        log_file = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_file = open(out / "train.log", "a")
        try:
            while self.step < end:
                r = self.train_step()
                line = (
                    f"step={r.step} loss_total={r.loss_total:.6g} loss_disp={r.loss_disp:.6g} "
                    f"loss_img_left={r.loss_img_left:.6g} loss_img_right={r.loss_img_right:.6g} "
                    f"lr={r.lr:.6g} grad_norm={r.grad_norm:.6g}"
                )
                log.debug(line)
                if log_file:
                    log_file.write(line + "\n")
                if callback:
                    callback(r)
                if cfg.eval_every and self.step % cfg.eval_every == 0:
                    row = {"step": self.step, **self.evaluate(eval_set if eval_set is not None else self.dataset)}
                    self.evals.append(row)
                    if log_file:
                        log_file.write("eval " + " ".join(f"{k}={v:.6g}" for k, v in row.items()) + "\n")
                if out is not None and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(out / f"checkpoint_{self.step:07d}.npz")
        finally:
            if log_file:
                log_file.close()
        if out is not None:
            self.save(out / "checkpoint_last.npz")
        return self.reports

    # -- checkpoints -------------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "format": "madis-stereo-checkpoint",
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "model_config": self.model_config.to_dict(),
            "train_config": asdict(self.config),
            "has_teacher": self.teacher is not None,
        }
        arrays = {"meta": np.array(json.dumps(meta))}
        arrays.update({f"model/{k}": v for k, v in self.model.state_dict().items()})
        if self.teacher is not None:
            arrays.update({f"teacher/{k}": v for k, v in self.teacher.encoder.state_dict().items()})
            arrays["teacher_alpha"] = np.array(self.teacher.alpha)
        arrays.update({f"optim/{k}": v for k, v in self.optimizer.state_arrays().items()})
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path, dataset: Sequence[StereoSample], config: TrainConfig | None = None) -> "Trainer":
        """Restore a trainer; ``config`` overrides the stored training config."""
        arrays, meta = read_checkpoint(path)
        model_cfg = ModelConfig(**meta["model_config"])
        train_cfg = config or TrainConfig(**meta["train_config"])
        trainer = cls(train_cfg, model_cfg, dataset)
        trainer.model.load_state_dict(_prefixed(arrays, "model/"))
        if trainer.teacher is not None and meta["has_teacher"]:
            trainer.teacher.encoder.load_state_dict(_prefixed(arrays, "teacher/"))
            trainer.teacher.alpha = float(arrays["teacher_alpha"])
        trainer.optimizer.load_state_arrays(_prefixed(arrays, "optim/"))
        trainer.step = int(meta["step"])
        return trainer


def _prefixed(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as f:
        arrays = {k: f[k] for k in f.files}
    if "meta" not in arrays:
        raise ValueError(f"{path}: not a checkpoint (no metadata)")
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("format") != "madis-stereo-checkpoint":
        raise ValueError(f"{path}: unknown checkpoint format")
    if meta.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported")
    return arrays, meta


def load_model(path) -> tuple[MaDisStereo, Module | None, dict]:
    """Model, teacher encoder (or None) and metadata from a checkpoint file."""
    arrays, meta = read_checkpoint(path)
    model = MaDisStereo(ModelConfig(**meta["model_config"]))
    model.load_state_dict(_prefixed(arrays, "model/"))
    teacher = None
    if meta["has_teacher"]:
        teacher = init_teacher(model).encoder
        teacher.load_state_dict(_prefixed(arrays, "teacher/"))
    return model, teacher, meta


def train(
    config: TrainConfig,
    dataset: Sequence[StereoSample],
    model_config: ModelConfig | None = None,
    eval_set: Sequence[StereoSample] | None = None,
    out_dir=None,
) -> Trainer:
    trainer = Trainer(config, model_config or ModelConfig(mask_ratio=config.mask_ratio), dataset)
    trainer.run(eval_set=eval_set, out_dir=out_dir)
    return trainer


# -- ablations -----------------------------------------------------------------

ABLATION_MODES = ("mask_ratio_sweep", "ema_toggle", "loss_weight_sweep")
MASK_RATIOS = tuple(round(0.1 * k, 1) for k in range(1, 10))
LOSS_WEIGHTS = (0.1, 0.3, 0.5, 0.7, 1.0)


def ablation_arms(mode: str, config: TrainConfig) -> list[tuple[str, TrainConfig]]:
    from dataclasses import replace

    if mode == "mask_ratio_sweep":
        return [(f"{int(round(r * 100))}", replace(config, mask_ratio=r)) for r in MASK_RATIOS]
    if mode == "ema_toggle":
        return [("off", replace(config, use_teacher=False)), ("on", replace(config, use_teacher=True))]
    if mode == "loss_weight_sweep":
        return [(f"1/{w:g}", replace(config, disp_weight=w)) for w in LOSS_WEIGHTS]
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


def ablate(
    mode: str,
    config: TrainConfig,
    dataset: Sequence[StereoSample],
    model_config: ModelConfig | None = None,
    eval_set: Sequence[StereoSample] | None = None,
    csv_path=None,
    arms: Sequence[str] | None = None,
) -> list[dict]:
    """Train every arm from the same seeds and tabulate the six metrics.

    ``arms`` restricts the run to a subset of arm labels.
    """
    model_config = model_config or ModelConfig()
    rows = []
    for label, arm_cfg in ablation_arms(mode, config):
        if arms is not None and label not in arms:
            continue
        mcfg = ModelConfig(**{**model_config.to_dict(), "mask_ratio": arm_cfg.mask_ratio})
        trainer = Trainer(arm_cfg, mcfg, dataset)
        trainer.run()
        row = {"arm": label, **trainer.evaluate(eval_set if eval_set is not None else dataset)}
        log.info("ablation %s arm %s: %s", mode, label, row)
        rows.append(row)
    if csv_path is not None:
        Path(csv_path).write_text(rows_to_csv(rows))
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("arm",) + metrics.METRIC_COLUMNS)
    for row in rows:
        writer.writerow([row["arm"]] + [f"{row[c]:.6f}" for c in metrics.METRIC_COLUMNS])
    return buf.getvalue()
