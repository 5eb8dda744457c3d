"""Dataset ingestion (DSB-2018 layout), preprocessing, augmentation, and
a synthetic blob generator for desk-scale experiments.

Images are grayscale float arrays in [0,1]; masks are strictly binary
{0,1} after every transform (resampled masks are re-thresholded at 0.5).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "SamplePair", "AugmentConfig", "GeometricParams", "IngestError",
    "GenerationError", "merge_masks", "load_dsb2018", "save_dsb2018",
    "augment", "apply_geometric", "synth_blobs", "make_split",
    "write_manifest", "read_manifest", "load_image_png", "save_mask_png",
    "resize_image", "resize_mask",
]

# luminance weights for RGB -> gray (ITU-R 601-2, what PIL "L" uses)
_LUMA = np.array([0.299, 0.587, 0.114])


class IngestError(IOError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class SamplePair:
    image: np.ndarray   # (1,1,H,W) float in [0,1]
    mask: np.ndarray    # (1,1,H,W) {0,1}
    id: str


@dataclass
class AugmentConfig:
    flip_h: float = 0.5
    flip_v: float = 0.5
    rotate: float = 30.0      # max degrees
    shift: float = 0.1        # max fraction of width/height
    zoom: tuple = (0.9, 1.1)
    shear: float = 10.0       # max degrees
    elastic: bool = False     # off by default
    elastic_alpha: float = 8.0
    elastic_sigma: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.flip_h <= 1 and 0 <= self.flip_v <= 1):
            raise ValueError("flip probabilities must be in [0,1]")


@dataclass
class GeometricParams:
    flip_h: bool = False
    flip_v: bool = False
    angle: float = 0.0
    shift_x: float = 0.0      # pixels
    shift_y: float = 0.0
    zoom: float = 1.0
    shear: float = 0.0


def _to_pil(a2d):
    return Image.fromarray(np.ascontiguousarray(a2d, dtype=np.float32), mode="F")


def load_image_png(path) -> np.ndarray:
    """8/16-bit PNG -> grayscale float (H,W) in [0,1]; alpha ignored."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise IngestError(f"unreadable PNG {path}: {exc}") from exc
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[..., :3].astype(float) @ _LUMA
    else:
        arr = arr.astype(float)
    scale = 65535.0 if np.asarray(img).dtype == np.uint16 else 255.0
    return np.clip(arr / scale, 0.0, 1.0)


def save_mask_png(path, mask2d):
    """Binary mask -> 8-bit grayscale PNG, foreground = 255."""
    out = (np.asarray(mask2d) > 0).astype(np.uint8) * 255
    Image.fromarray(out, mode="L").save(path)


def save_image_png(path, image2d):
    out = np.clip(np.asarray(image2d) * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(out, mode="L").save(path)


def resize_image(a2d, size) -> np.ndarray:
    return np.asarray(_to_pil(a2d).resize((size, size), Image.BILINEAR),
                      dtype=float)


def resize_mask(m2d, size) -> np.ndarray:
    # bilinear then threshold keeps the mask binary
    soft = np.asarray(_to_pil(m2d.astype(float)).resize((size, size),
                                                        Image.BILINEAR))
    return (soft >= 0.5).astype(float)


def merge_masks(masks) -> np.ndarray:
    masks = list(masks)
    if not masks:
        raise ValueError("merge_masks needs at least one mask")
    shape = np.asarray(masks[0]).shape
    merged = np.zeros(shape, dtype=bool)
    for m in masks:
        m = np.asarray(m)
        if m.shape != shape:
            raise ValueError(f"mask shape mismatch {m.shape} vs {shape}")
        merged |= m > 0.5
    return merged.astype(float)


def load_dsb2018(root_dir, size=256) -> list:
    """`<id>/images/<id>.png` + `<id>/masks/*.png` -> list of SamplePair.

    Per-nucleus masks are OR-merged before the resize; the merged mask is
    re-binarized at 0.5 after bilinear resampling.
    """
    root = Path(root_dir)
    samples = []
    for sample_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        sid = sample_dir.name
        image_path = sample_dir / "images" / f"{sid}.png"
        masks_dir = sample_dir / "masks"
        if not image_path.exists():
            raise IngestError(f"sample {sid}: missing image {image_path}")
        if not masks_dir.is_dir():
            raise IngestError(f"sample {sid}: missing masks directory")
        mask_files = sorted(masks_dir.glob("*.png"))
        if not mask_files:
            raise IngestError(f"sample {sid}: no mask files")
        image = resize_image(load_image_png(image_path), size)
        merged = merge_masks([load_image_png(p) for p in mask_files])
        mask = resize_mask(merged, size)
        samples.append(SamplePair(image=image[None, None],
                                  mask=mask[None, None], id=sid))
    if not samples:
        raise IngestError(f"no samples found under {root}")
    return samples


def save_dsb2018(samples, root_dir):
    root = Path(root_dir)
    for s in samples:
        d = root / s.id
        (d / "images").mkdir(parents=True, exist_ok=True)
        (d / "masks").mkdir(parents=True, exist_ok=True)
        save_image_png(d / "images" / f"{s.id}.png", s.image[0, 0])
        save_mask_png(d / "masks" / f"{s.id}.png", s.mask[0, 0])


# ---------------------------------------------------------------------------
# augmentation


def _affine_matrix(p: GeometricParams, h, w):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(p.angle)
    sh = math.tan(math.radians(p.shear))
    m = np.eye(3)
    if p.flip_h:
        m = np.array([[-1, 0, 0], [0, 1, 0], [0, 0, 1.0]]) @ m
    if p.flip_v:
        m = np.array([[1, 0, 0], [0, -1, 0], [0, 0, 1.0]]) @ m
    m = np.array([[1, sh, 0], [0, 1, 0], [0, 0, 1.0]]) @ m
    m = np.array([[p.zoom, 0, 0], [0, p.zoom, 0], [0, 0, 1.0]]) @ m
    m = np.array([[math.cos(t), -math.sin(t), 0],
                  [math.sin(t), math.cos(t), 0], [0, 0, 1.0]]) @ m
    # conjugate by the center shift, then translate
    center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    uncenter = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    shift = np.array([[1, 0, p.shift_x], [0, 1, p.shift_y], [0, 0, 1.0]])
    return shift @ center @ m @ uncenter


def _warp(a2d, matrix):
    h, w = a2d.shape
    inv = np.linalg.inv(matrix)
    coeffs = (inv[0, 0], inv[0, 1], inv[0, 2], inv[1, 0], inv[1, 1], inv[1, 2])
    return np.asarray(_to_pil(a2d).transform((w, h), Image.AFFINE, coeffs,
                                             resample=Image.BILINEAR),
                      dtype=float)


def _is_grid_exact(p: GeometricParams):
    return (p.angle % 90 == 0 and p.shift_x == 0 and p.shift_y == 0
            and p.zoom == 1.0 and p.shear == 0.0)


def apply_geometric(a2d, p: GeometricParams, is_mask=False) -> np.ndarray:
    """Apply one geometric transform to a 2-D array.  Pure flips and
    90-degree rotations use exact grid operations; everything else goes
    through bilinear resampling (masks are re-thresholded at 0.5)."""
    out = np.asarray(a2d, dtype=float)
    if _is_grid_exact(p):
        if p.flip_h:
            out = out[:, ::-1]
        if p.flip_v:
            out = out[::-1, :]
        k = int(p.angle // 90) % 4
        if k:
            out = np.rot90(out, k)
        return np.ascontiguousarray(out)
    out = _warp(out, _affine_matrix(p, *out.shape))
    if is_mask:
        out = (out >= 0.5).astype(float)
    else:
        out = np.clip(out, 0.0, 1.0)
    return out


def _elastic_fields(shape, alpha, sigma, rng):
    from scipy.ndimage import gaussian_filter
    dx = gaussian_filter(rng.uniform(-1, 1, shape), sigma) * alpha
    dy = gaussian_filter(rng.uniform(-1, 1, shape), sigma) * alpha
    return dx, dy


def _elastic(a2d, dx, dy, is_mask):
    from scipy.ndimage import map_coordinates
    h, w = a2d.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = map_coordinates(a2d, [yy + dy, xx + dx], order=1, mode="reflect")
    return (out >= 0.5).astype(float) if is_mask else np.clip(out, 0.0, 1.0)


def sample_rng(global_seed, sample_id, epoch=0):
    """Order-independent per-sample RNG keyed by (seed, id, epoch)."""
    digest = hashlib.sha256(f"{global_seed}/{sample_id}/{epoch}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def augment(s: SamplePair, cfg: AugmentConfig, rng=None) -> SamplePair:
    """Identical geometric transform applied to image and mask."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    p = GeometricParams(
        flip_h=bool(rng.random() < cfg.flip_h),
        flip_v=bool(rng.random() < cfg.flip_v),
        angle=float(rng.uniform(-cfg.rotate, cfg.rotate)) if cfg.rotate else 0.0,
        shift_x=float(rng.uniform(-cfg.shift, cfg.shift) * s.image.shape[-1]) if cfg.shift else 0.0,
        shift_y=float(rng.uniform(-cfg.shift, cfg.shift) * s.image.shape[-2]) if cfg.shift else 0.0,
        zoom=float(rng.uniform(*cfg.zoom)) if cfg.zoom != (1.0, 1.0) else 1.0,
        shear=float(rng.uniform(-cfg.shear, cfg.shear)) if cfg.shear else 0.0,
    )
    image = apply_geometric(s.image[0, 0], p, is_mask=False)
    mask = apply_geometric(s.mask[0, 0], p, is_mask=True)
    if cfg.elastic:
        dx, dy = _elastic_fields(image.shape, cfg.elastic_alpha,
                                 cfg.elastic_sigma, rng)
        image = _elastic(image, dx, dy, is_mask=False)
        mask = _elastic(mask, dx, dy, is_mask=True)
    return SamplePair(image=image[None, None], mask=mask[None, None], id=s.id)


# ---------------------------------------------------------------------------
# synthetic blobs


def synth_blobs(n_samples, image_size=64, blob_count_range=(2, 12),
                blob_radius_range=(2.0, 5.0), noise_level=0.05,
                imbalance_target=0.08, seed=0) -> list:
    """Bright soft-edged blobs on a dark noisy background with exact masks.

    Blobs are added until the foreground fraction reaches the imbalance
    target (or the blob budget runs out).
    """
    if not 0 < imbalance_target < 0.5:
        raise ValueError("imbalance_target must be in (0, 0.5)")
    rmin, rmax = blob_radius_range
    cmin, cmax = blob_count_range
    if rmin <= 0 or rmax < rmin or cmin < 1 or cmax < cmin:
        raise ValueError("invalid blob ranges")
    max_frac = cmax * math.pi * rmax ** 2 / image_size ** 2
    if max_frac < 0.7 * imbalance_target:
        raise GenerationError(
            f"blob budget can reach at most {max_frac:.3f} foreground, "
            f"target is {imbalance_target}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size),
                         indexing="ij")
    samples = []
    for i in range(n_samples):
        profile = np.zeros((image_size, image_size))
        count = 0
        while count < cmax:
            r = rng.uniform(rmin, rmax)
            cy = rng.uniform(r, image_size - r)
            cx = rng.uniform(r, image_size - r)
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            profile = np.maximum(profile, np.exp(-(d2 / r ** 2) ** 2))
            count += 1
            frac = float((profile >= math.exp(-1)).mean())
            if count >= cmin and frac >= imbalance_target:
                break
        mask = (profile >= math.exp(-1)).astype(float)
        image = 0.1 + 0.8 * profile
        if noise_level > 0:
            image = image + rng.normal(0, noise_level, profile.shape)
        image = np.clip(image, 0.0, 1.0)
        samples.append(SamplePair(image=image[None, None],
                                  mask=mask[None, None], id=f"blob_{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# splits and manifests


def make_split(ids, val_fraction=0.15, seed=0):
    """Deterministic disjoint train/val split by sample id."""
    ids = sorted(ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    n_val = max(1, int(round(len(ids) * val_fraction)))
    val = {ids[i] for i in perm[:n_val]}
    return {sid: ("val" if sid in val else "train") for sid in ids}


def write_manifest(path, split_by_id):
    entries = [{"id": sid, "split": split_by_id[sid]}
               for sid in sorted(split_by_id)]
    Path(path).write_text(json.dumps(entries, indent=1))


def read_manifest(path):
    entries = json.loads(Path(path).read_text())
    return {e["id"]: e["split"] for e in entries}
