"""Synthetic stereo pairs with exact disparity, plus disparity/image file I/O.

Scenes are stacks of fronto-parallel textured layers (a background plane
and a few rectangles/ellipses).  Each layer carries integer disparity, so
the right view is an exact horizontal shift of each layer's texture and
the ground truth is known at every pixel.  Pixels that fall outside the
right frame or are hidden behind a nearer layer in the right view are
marked invalid.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

KITTI_SCALE = 256.0


@dataclass
class StereoSample:
    left: np.ndarray  # (H, W, C) in [0, 1]
    right: np.ndarray
    d_gt_dense: np.ndarray  # (H, W) pixels
    valid: np.ndarray  # (H, W) bool
    seed: int = 0
    layer_ids: np.ndarray | None = None  # (H, W) index of the visible layer, 0 = background

    @property
    def shape(self) -> tuple[int, int]:
        return self.d_gt_dense.shape


@dataclass
class Layer:
    """One scene layer in left-image coordinates.

    ``disparity`` is an int or a per-row integer array (slanted plane).
    ``kind`` is "plane" (covers everything), "rect" or "ellipse"; ``box``
    is (top, left, height, width) for the latter two.
    """

    disparity: int | np.ndarray
    kind: str = "plane"
    box: tuple[int, int, int, int] = (0, 0, 0, 0)
    texture: np.ndarray | None = None

    def row_disparity(self, height: int) -> np.ndarray:
        d = np.broadcast_to(np.asarray(self.disparity), (height,)).astype(np.int64)
        if np.any(d < 0):
            raise ValueError("disparity must be non-negative")
        return d

    def coverage(self, height: int, width: int) -> np.ndarray:
        if self.kind == "plane":
            return np.ones((height, width), dtype=bool)
        top, left, h, w = self.box
        cov = np.zeros((height, width), dtype=bool)
        if self.kind == "rect":
            cov[top : top + h, left : left + w] = True
        elif self.kind == "ellipse":
            ys, xs = np.mgrid[0:height, 0:width]
            cy, cx = top + (h - 1) / 2, left + (w - 1) / 2
            cov = ((ys - cy) / (h / 2)) ** 2 + ((xs - cx) / (w / 2)) ** 2 <= 1.0
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        return cov


@dataclass
class SceneParams:
    num_objects: tuple[int, int] = (2, 4)
    background_disparity: tuple[int, int] = (1, 4)
    background_slope: tuple[int, int] = (0, 3)  # extra disparity gained from top to bottom row
    max_disparity: int = 14
    object_size: tuple[float, float] = (0.2, 0.5)  # fraction of image height/width
    ellipse_prob: float = 0.5
    texture_cell: tuple[int, int] = (2, 6)
    channels: int = 3


def make_texture(rng: np.random.Generator, height: int, width: int, channels: int, cell: int) -> np.ndarray:
    """Value-noise texture quantized to 8-bit levels (lossless through PNG)."""
    gh, gw = height // cell + 2, width // cell + 2
    coarse = rng.uniform(0.0, 1.0, size=(gh, gw, channels))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    smooth = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
    base = rng.uniform(0.2, 0.8, size=channels)
    tex = 0.5 * base + 0.4 * smooth + 0.1 * rng.uniform(0.0, 1.0, size=(height, width, channels))
    return np.round(np.clip(tex, 0.0, 1.0) * 255.0) / 255.0


def render_scene(layers: list[Layer], height: int, width: int, seed: int = 0, channels: int = 3) -> StereoSample:
    """Render left/right views and exact ground truth for a layer stack.

    Layers are painted far-to-near (ascending maximum disparity); the first
    layer must be a plane.  Missing textures are generated from ``seed``.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"invalid image size {height}x{width}")
    if not layers or layers[0].kind != "plane":
        raise ValueError("the first layer must be a background plane")
    rng = np.random.default_rng(seed)
    dmax = max(int(layer.row_disparity(height).max()) for layer in layers)
    order = sorted(range(len(layers)), key=lambda i: (int(layers[i].row_disparity(height).max()), i))
    if order[0] != 0:
        raise ValueError("background plane must be the farthest layer")

    left = np.zeros((height, width, channels))
    right = np.zeros((height, width, channels))
    d_gt = np.zeros((height, width))
    top_left = np.zeros((height, width), dtype=np.int64)
    top_right = np.full((height, width), -1, dtype=np.int64)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]

    for idx in order:
        layer = layers[idx]
        tex = layer.texture
        if tex is None:
            tex = make_texture(rng, height, width + dmax, channels, int(rng.integers(2, 7)))
        d_row = layer.row_disparity(height)[:, None]
        cov = layer.coverage(height, width)
        left[cov] = tex[:, :width][cov]
        d_gt[cov] = np.broadcast_to(d_row, (height, width))[cov]
        top_left[cov] = idx
        # right pixel x' shows this layer's point at left x = x' + d
        src = cols + d_row
        if layer.kind == "plane":
            cov_r = np.ones((height, width), dtype=bool)
        else:
            inside = src < width
            cov_r = np.zeros((height, width), dtype=bool)
            cov_r[inside] = cov[np.broadcast_to(rows, src.shape)[inside], src[inside]]
        yy = np.broadcast_to(rows, src.shape)
        right[cov_r] = tex[yy[cov_r], src[cov_r]]
        top_right[cov_r] = idx

    xr = cols - d_gt.astype(np.int64)
    in_frame = xr >= 0
    valid = np.zeros((height, width), dtype=bool)
    yy = np.broadcast_to(rows, xr.shape)
    valid[in_frame] = top_right[yy[in_frame], xr[in_frame]] == top_left[in_frame]
    return StereoSample(left, right, d_gt, valid, seed=seed, layer_ids=top_left)


def synth_generate(seed: int, height: int, width: int, params: SceneParams | None = None) -> StereoSample:
    """Random layered scene; bitwise deterministic for a given seed."""
    params = params or SceneParams()
    if height < 8 or width < 8:
        raise ValueError(f"invalid image size {height}x{width}")
    if params.max_disparity >= width / 4:
        raise ValueError(f"max_disparity {params.max_disparity} must be below width/4 = {width / 4}")
    rng = np.random.default_rng(seed)
    lo, hi = params.background_disparity
    bg0 = int(rng.integers(lo, hi + 1))
    slope = int(rng.integers(params.background_slope[0], params.background_slope[1] + 1))
    bg_rows = bg0 + np.floor(np.linspace(0, slope, height, endpoint=False) + 1e-9).astype(np.int64)
    bg_rows = np.minimum(bg_rows, params.max_disparity - 1)
    layers = [Layer(bg_rows, "plane")]
    n_obj = int(rng.integers(params.num_objects[0], params.num_objects[1] + 1))
    fg_lo = int(bg_rows.max()) + 1
    choices = np.arange(fg_lo, params.max_disparity + 1)
    disps = rng.choice(choices, size=min(n_obj, choices.size), replace=False)
    s_lo, s_hi = params.object_size
    for d in np.sort(disps):
        h = max(2, int(rng.uniform(s_lo, s_hi) * height))
        w = max(2, int(rng.uniform(s_lo, s_hi) * width))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        kind = "ellipse" if rng.uniform() < params.ellipse_prob else "rect"
        layers.append(Layer(int(d), kind, (top, left, h, w)))
    return render_scene(layers, height, width, seed=int(rng.integers(2**31)), channels=params.channels)


def sparsify_gt(sample: StereoSample, keep_fraction: float, seed: int) -> StereoSample:
    """Keep exactly ``round(keep_fraction * |valid|)`` uniformly chosen valid pixels."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    idx = np.flatnonzero(sample.valid)
    k = int(round(keep_fraction * idx.size))
    keep = np.random.default_rng(seed).choice(idx, size=k, replace=False)
    valid = np.zeros(sample.valid.size, dtype=bool)
    valid[keep] = True
    return replace(sample, valid=valid.reshape(sample.valid.shape))


def random_crop(sample: StereoSample, crop_h: int, crop_w: int, seed: int, patch_size: int | None = None) -> StereoSample:
    """Same window on both views and the ground truth; disparity values untouched."""
    h, w = sample.shape
    if crop_h > h or crop_w > w or crop_h <= 0 or crop_w <= 0:
        raise ValueError(f"crop {crop_h}x{crop_w} does not fit in {h}x{w}")
    if patch_size and (crop_h % patch_size or crop_w % patch_size):
        raise ValueError(f"crop {crop_h}x{crop_w} not divisible by patch size {patch_size}")
    rng = np.random.default_rng(seed)
    y = int(rng.integers(0, h - crop_h + 1))
    x = int(rng.integers(0, w - crop_w + 1))
    win = (slice(y, y + crop_h), slice(x, x + crop_w))
    return StereoSample(
        sample.left[win].copy(),
        sample.right[win].copy(),
        sample.d_gt_dense[win].copy(),
        sample.valid[win].copy(),
        seed=sample.seed,
        layer_ids=None if sample.layer_ids is None else sample.layer_ids[win].copy(),
    )


def warp_right_to_left(right: np.ndarray, disparity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``right(x - d, y)`` for integer disparities; also returns in-frame mask."""
    h, w = disparity.shape
    xs = np.arange(w)[None, :] - np.round(disparity).astype(np.int64)
    ok = xs >= 0
    ys = np.broadcast_to(np.arange(h)[:, None], xs.shape)
    out = np.zeros((h, w) + right.shape[2:])
    out[ok] = right[ys[ok], xs[ok]]
    return out, ok


# -- file formats -------------------------------------------------------------


class DisparityFormatError(ValueError):
    """Malformed disparity file or a value that cannot be encoded."""


def write_pfm(path, data: np.ndarray, little_endian: bool = True) -> None:
    """Write a (H, W) or (H, W, 3) float map; rows stored bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise DisparityFormatError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    scale = -1.0 if little_endian else 1.0
    dtype = "<f4" if little_endian else ">f4"
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n{scale}\n".encode("ascii"))
        f.write(np.flipud(data).astype(dtype).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", "replace").strip()
        if header not in ("PF", "Pf"):
            raise DisparityFormatError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().decode("ascii", "replace")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise DisparityFormatError(f"{path}: malformed PFM dimensions {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        try:
            scale = float(f.readline().decode("ascii", "replace").strip())
        except ValueError:
            raise DisparityFormatError(f"{path}: malformed PFM scale line") from None
        if scale == 0:
            raise DisparityFormatError(f"{path}: PFM scale must be non-zero")
        chans = 3 if header == "PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read()
    count = w * h * chans
    if len(raw) < 4 * count:
        raise DisparityFormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw[: 4 * count], dtype=dtype).reshape((h, w, 3) if chans == 3 else (h, w))
    return np.flipud(data).astype(np.float64)


def encode_kitti(disparity: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """uint16 KITTI encoding: round(d * 256); 0 marks an invalid pixel."""
    disparity = np.asarray(disparity, dtype=np.float64)
    valid = np.isfinite(disparity) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(disparity)
    d = np.where(valid, disparity, 0.0)
    if np.any(d < 0):
        raise DisparityFormatError("negative disparity cannot be encoded")
    stored = np.round(d * KITTI_SCALE)
    if np.any(stored > np.iinfo(np.uint16).max):
        raise DisparityFormatError("disparity >= 256 px overflows 16-bit KITTI encoding")
    return stored.astype(np.uint16)


def decode_kitti(stored: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    stored = np.asarray(stored)
    return stored.astype(np.float64) / KITTI_SCALE, stored > 0


def write_disparity_png(path, disparity: np.ndarray, valid: np.ndarray | None = None) -> None:
    Image.fromarray(encode_kitti(disparity, valid)).save(path, format="PNG")


def read_disparity_png(path) -> tuple[np.ndarray, np.ndarray]:
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I"):
            raise DisparityFormatError(f"{path}: expected a 16-bit PNG, got mode {img.mode}")
        stored = np.array(img)
    if stored.max(initial=0) > np.iinfo(np.uint16).max or stored.min(initial=0) < 0:
        raise DisparityFormatError(f"{path}: values outside 16-bit range")
    return decode_kitti(stored.astype(np.uint16))


def write_image(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def read_image(path) -> np.ndarray:
    """8-bit PNG/PPM to float in [0, 1], always (H, W, C)."""
    with Image.open(path) as img:
        arr = np.array(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
    arr = arr.astype(np.float64) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def save_dataset(samples: list[StereoSample], root, split: str = "train") -> Path:
    """Write ``{split}/{idx}_left.png, {idx}_right.png, {idx}_disp.png``."""
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_image(out / f"{i:06d}_left.png", s.left)
        write_image(out / f"{i:06d}_right.png", s.right)
        write_disparity_png(out / f"{i:06d}_disp.png", s.d_gt_dense, s.valid)
    return out


def load_dataset(root, split: str = "train") -> list[StereoSample]:
    folder = Path(root) / split
    if not folder.is_dir():
        raise FileNotFoundError(f"no split directory {folder}")
    ids = sorted(p.name[: -len("_left.png")] for p in folder.glob("*_left.png"))
    samples = []
    for idx in ids:
        disp, valid = read_disparity_png(folder / f"{idx}_disp.png")
        samples.append(
            StereoSample(
                read_image(folder / f"{idx}_left.png"),
                read_image(folder / f"{idx}_right.png"),
                disp,
                valid,
                seed=int(idx) if idx.isdigit() else 0,
            )
        )
    return samples


def stack_batch(samples: list[StereoSample]) -> dict[str, np.ndarray]:
    return {
        "left": np.stack([s.left for s in samples]),
        "right": np.stack([s.right for s in samples]),
        "d_gt": np.stack([s.d_gt_dense for s in samples]),
        "valid": np.stack([s.valid for s in samples]),
    }
