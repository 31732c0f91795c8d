"""
Training with masked views and an EMA teacher
=============================================

The student sees both views with 40% of the patches removed.  It has to
reconstruct the missing patches and predict disparity; the teacher sees
the intact views and fills in labels where ground truth is missing.
This script trains a small model for a few minutes on CPU.
"""

import tempfile
from pathlib import Path

import numpy as np

from madis_stereo.data import sparsify_gt, synth_generate
from madis_stereo.model import ModelConfig
from madis_stereo.trainer import TrainConfig, Trainer, masked_recon_mse, load_model

# Eight training pairs with only half of the ground truth kept, so the
# teacher's pseudo labels matter; four held-out pairs for evaluation.
train = [sparsify_gt(synth_generate(s, 64, 128), 0.5, s) for s in range(8)]
held_out = [synth_generate(100 + s, 64, 128) for s in range(4)]

config = TrainConfig(lr=5e-4, epochs=150, batch_size=4, mask_ratio=0.4, ema_alpha=0.999, eval_every=100)
trainer = Trainer(config, ModelConfig(), train)
n_params = sum(p.data.size for p in trainer.model.parameters())
print(f"{n_params} parameters, {trainer.total_steps} steps")

recon_start = masked_recon_mse(trainer.model, train, 0.4, seed=0)
out = Path(tempfile.mkdtemp())


def show(report):
    if report.step % 50 == 0:
        print(f"step {report.step:4d}  total {report.loss_total:7.3f}  disp {report.loss_disp:7.3f}  "
              f"img {report.loss_img_left:.4f}/{report.loss_img_right:.4f}  lr {report.lr:.2e}")


trainer.run(eval_set=held_out, out_dir=out, callback=show)

print("masked reconstruction error vs start:", masked_recon_mse(trainer.model, train, 0.4, seed=0) / recon_start)
for name, encoder in (("student", trainer.model.encoder), ("teacher", trainer.teacher.encoder)):
    row = trainer.evaluate(held_out, encoder)
    print(name, " ".join(f"{k}={v:.3f}" for k, v in row.items()))

# The checkpoint holds everything needed to resume or evaluate later.
model, teacher_encoder, meta = load_model(out / "checkpoint_last.npz")
print("checkpoint at step", meta["step"], "| teacher stored:", teacher_encoder is not None)
pred = model.predict(held_out[0].left[None], held_out[0].right[None], teacher_encoder)
print("predicted sigma range:", np.round([pred.sigma.data.min(), pred.sigma.data.max()], 3))
