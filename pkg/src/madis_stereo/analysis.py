"""Attention distance: how far, in pixels, each head looks on average.

For a query token q the distance is ``sum_k w[q, k] * |center(q) - center(k)|``
with patch centers on the token grid scaled by the patch size; a head's
value is the mean over queries.  Cross-attention keys live on the other
view's grid, which has the same geometry, so distances are measured in the
query view's pixel frame.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import StereoSample, stack_batch

CSV_HEADER = ("layer", "head", "mean_distance_px")


@dataclass
class AttentionRecord:
    layer: int
    head: int
    weights: np.ndarray  # (T_q, T_k), rows sum to 1
    grid_h: int
    grid_w: int
    patch_size: int
    key_grid: tuple[int, int] | None = None  # defaults to the query grid

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        kh, kw = self.key_grid or (self.grid_h, self.grid_w)
        if self.weights.shape != (self.grid_h * self.grid_w, kh * kw):
            raise ValueError(
                f"attention weights {self.weights.shape} do not match grids "
                f"{self.grid_h}x{self.grid_w} -> {kh}x{kw}"
            )


def token_centers(grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """(N, 2) pixel coordinates (row, col) of patch centers, row-major."""
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return (np.stack([rows.ravel(), cols.ravel()], axis=1) + 0.5) * patch_size


def pairwise_distances(grid_h: int, grid_w: int, patch_size: int, key_grid=None) -> np.ndarray:
    q = token_centers(grid_h, grid_w, patch_size)
    k = token_centers(*(key_grid or (grid_h, grid_w)), patch_size)
    return np.sqrt(((q[:, None, :] - k[None, :, :]) ** 2).sum(axis=-1))


def attention_distance(rec: AttentionRecord) -> float:
    dist = pairwise_distances(rec.grid_h, rec.grid_w, rec.patch_size, rec.key_grid)
    return float((rec.weights * dist).sum(axis=1).mean())


def records_from_weights(weights: np.ndarray, layer: int, grid_h: int, grid_w: int, patch_size: int):
    """Split a (B, heads, T, T) weight array into per-sample, per-head records."""
    for b in range(weights.shape[0]):
        for h in range(weights.shape[1]):
            yield AttentionRecord(layer, h, weights[b, h], grid_h, grid_w, patch_size)


def layer_head_distances(model, samples: Sequence[StereoSample], kind: str = "cross", encoder=None, batch_size: int = 4):
    """Mean attention distance per (layer, head) over all samples, layers numbered from 1."""
    if kind not in ("cross", "self"):
        raise ValueError("kind must be 'cross' or 'self'")
    cfg = model.cfg
    sums: dict[tuple[int, int], float] = defaultdict(float)
    count = 0
    for i in range(0, len(samples), batch_size):
        batch = stack_batch(list(samples[i : i + batch_size]))
        log = model.attention_maps(batch["left"], batch["right"], encoder)
        per_layer = log.cross_attn if kind == "cross" else log.self_attn
        for layer, weights in enumerate(per_layer, start=1):
            for rec in records_from_weights(weights, layer, cfg.grid_h, cfg.grid_w, cfg.patch_size):
                sums[(layer, rec.head)] += attention_distance(rec)
        count += batch["left"].shape[0]
    return {key: total / count for key, total in sorted(sums.items())}


def collect_and_emit(model, samples: Sequence[StereoSample], path, kind: str = "cross", encoder=None) -> list[tuple]:
    """Write ``layer,head,mean_distance_px`` rows, one per decoder layer and head."""
    table = layer_head_distances(model, samples, kind, encoder)
    rows = [(layer, head, value) for (layer, head), value in table.items()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for layer, head, value in rows:
            writer.writerow([layer, head, repr(float(value))])
    return rows


def read_distance_csv(path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [(int(a), int(b), float(c)) for a, b, c in reader]


def layer_means(rows) -> dict[int, float]:
    """Per-layer value: mean over heads."""
    acc: dict[int, list[float]] = defaultdict(list)
    for layer, _, value in rows:
        acc[layer].append(value)
    return {layer: float(np.mean(v)) for layer, v in sorted(acc.items())}
