"""
How far does cross-attention look?
==================================

For every decoder layer and head we measure the attention-weighted mean
pixel distance between a query patch and the patches it attends to.
Local attention gives small numbers; uniform attention over the grid
gives the mean pairwise patch distance.
"""

import tempfile
from pathlib import Path

import numpy as np

from madis_stereo import analysis
from madis_stereo.data import synth_generate
from madis_stereo.model import MaDisStereo, ModelConfig

# Reference points on a 4x8 grid of 16-pixel patches.
n = 32
uniform = analysis.AttentionRecord(1, 0, np.full((n, n), 1 / n), 4, 8, 16)
identity = analysis.AttentionRecord(1, 0, np.eye(n), 4, 8, 16)
print(f"identity attention: {analysis.attention_distance(identity):.2f} px")
print(f"uniform attention:  {analysis.attention_distance(uniform):.2f} px")

# An untrained model on a few scenes; swap in a checkpoint via trainer.load_model.
model = MaDisStereo(ModelConfig(), seed=0)
samples = [synth_generate(s, 64, 128) for s in range(4)]
path = Path(tempfile.mkdtemp()) / "attention.csv"
rows = analysis.collect_and_emit(model, samples, path, kind="cross")
print(path.read_text().splitlines()[0], f"... {len(rows)} rows")
for layer, value in analysis.layer_means(rows).items():
    print(f"layer {layer}: {value:6.2f} px")
