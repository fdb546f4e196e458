"""Synthetic camouflage data and mask/score image I/O."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .loss import binarize_mask

TEXTURE_STD = 0.1
MIN_FG, MAX_FG = 0.02, 0.60
CONTRAST_RANGE = (0.02, 0.08)


class DataError(Exception):
    """Unreadable, missing or inconsistent data."""


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    contrast: float


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((3, h, w))
    smooth = np.stack([ndimage.gaussian_filter(ch, sigma, mode="wrap") for ch in noise])
    smooth -= smooth.mean(axis=(1, 2), keepdims=True)
    smooth /= smooth.std(axis=(1, 2), keepdims=True)
    return smooth * TEXTURE_STD


def _blob(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        ry = rng.uniform(0.08, 0.25) * h
        rx = rng.uniform(0.08, 0.25) * w
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return mask


def synth_sample(rng: np.random.Generator, h: int, w: int) -> SyntheticSample:
    """One camouflaged blob on a smoothed-noise background.

    The foreground reuses the background's texture family (different grain,
    same base colour) and its per-channel mean sits exactly ``contrast``
    away from the background mean.
    """
    while True:
        mask = _blob(rng, h, w)
        frac = mask.mean()
        if MIN_FG <= frac <= MAX_FG:
            break
    base = rng.uniform(0.35, 0.65, size=(3, 1, 1))
    bg = base + _texture(rng, h, w, rng.uniform(2.0, 3.5))
    fg = base + _texture(rng, h, w, rng.uniform(0.8, 1.5))
    contrast = float(rng.uniform(*CONTRAST_RANGE))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    bg_mean = bg[:, ~mask].mean(axis=1)[:, None, None]
    fg_mean = fg[:, mask].mean(axis=1)[:, None, None]
    fg = fg - fg_mean + bg_mean + sign * contrast
    image = np.clip(np.where(mask[None], fg, bg), 0.0, 1.0)
    return SyntheticSample(image, mask.astype(np.float64), contrast)


def gen_synthetic(count: int, h: int, w: int, seed: int, patch_size: int = 16) -> list[SyntheticSample]:
    """``count`` samples, bit-identical for a given seed."""
    if count <= 0:
        raise ValueError("count must be positive")
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    # one child stream per sample keeps results independent of fan-out
    seeds = np.random.SeedSequence(seed).spawn(count)
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    threads = int(os.environ.get("FSPNET_THREADS", "1") or 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda r: synth_sample(r, h, w), rngs))
    return [synth_sample(r, h, w) for r in rngs]


# -- image I/O -----------------------------------------------------------------------


def quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval with '#' comments
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P2":
        values = np.array(raw[pos:].split()[: w * h], dtype=np.int64)
    elif magic == b"P5":
        pos += 1
        dtype = np.uint8 if maxval < 256 else ">u2"
        values = np.frombuffer(raw[pos:], dtype=dtype, count=w * h).astype(np.int64)
    else:
        raise DataError(f"{path}: not a PGM file")
    if values.size != w * h:
        raise DataError(f"{path}: truncated PGM data")
    return (values.reshape(h, w) * (255.0 / maxval)).round().astype(np.uint8)


def read_gray(path: str) -> np.ndarray:
    """8-bit grayscale (PNG or PGM) as floats in [0, 1]."""
    try:
        if path.lower().endswith(".pgm"):
            arr = _read_pgm(path)
        else:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("L"))
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def write_gray(path: str, values: np.ndarray) -> None:
    """Write a [0, 1] map as 8-bit PNG, or plain (ASCII) PGM for a .pgm path."""
    q = quantize(values)
    if path.lower().endswith(".pgm"):
        h, w = q.shape
        rows = "\n".join(" ".join(str(v) for v in row) for row in q)
        with open(path, "w") as fh:
            fh.write(f"P2\n{w} {h}\n255\n{rows}\n")
    else:
        Image.fromarray(q).save(path, format="PNG")


def read_rgb(path: str) -> np.ndarray:
    """(3, H, W) floats in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_rgb(path: str, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(quantize(image.transpose(1, 2, 0)))).save(path, format="PNG")


# -- dataset directories ----------------------------------------------------------------

IMAGE_DIR = "images"
MASK_DIR = "masks"


def save_dataset(samples: list[SyntheticSample], out_dir: str) -> list[str]:
    os.makedirs(os.path.join(out_dir, IMAGE_DIR), exist_ok=True)
    os.makedirs(os.path.join(out_dir, MASK_DIR), exist_ok=True)
    names = []
    for i, s in enumerate(samples):
        name = f"{i:04d}"
        write_rgb(os.path.join(out_dir, IMAGE_DIR, name + ".png"), s.image)
        write_gray(os.path.join(out_dir, MASK_DIR, name + ".png"), s.mask)
        names.append(name)
    return names


def _stems(folder: str) -> dict[str, str]:
    if not os.path.isdir(folder):
        raise DataError(f"missing directory {folder}")
    out = {}
    for fname in sorted(os.listdir(folder)):
        stem, ext = os.path.splitext(fname)
        if ext.lower() in (".png", ".pgm"):
            out[stem] = os.path.join(folder, fname)
    return out


@dataclass
class Dataset:
    names: list[str]
    images: np.ndarray  # (N, 3, H, W)
    masks: np.ndarray  # (N, H, W), binary

    def __len__(self) -> int:
        return len(self.names)


def load_images(folder: str) -> tuple[list[str], np.ndarray]:
    files = _stems(folder)
    if not files:
        raise DataError(f"no images in {folder}")
    names = list(files)
    images = [read_rgb(files[n]) for n in names]
    if len({im.shape for im in images}) != 1:
        raise DataError(f"images in {folder} have differing sizes")
    return names, np.stack(images)


def load_dataset(root: str, with_masks: bool = True) -> Dataset:
    names, images = load_images(os.path.join(root, IMAGE_DIR))
    if not with_masks:
        return Dataset(names, images, np.zeros((len(names),) + images.shape[2:]))
    mask_files = _stems(os.path.join(root, MASK_DIR))
    missing = [n for n in names if n not in mask_files]
    if missing:
        raise DataError(f"masks missing for {missing[:5]}")
    masks = np.stack([binarize_mask(read_gray(mask_files[n])) for n in names])
    if masks.shape[1:] != images.shape[2:]:
        raise DataError("mask and image sizes differ")
    return Dataset(names, images, masks)


def from_samples(samples: list[SyntheticSample]) -> Dataset:
    """In-memory dataset with the same 8-bit quantization as a saved one."""
    images = np.stack([quantize(s.image).astype(np.float64) / 255.0 for s in samples])
    masks = np.stack([s.mask for s in samples])
    return Dataset([f"{i:04d}" for i in range(len(samples))], images, masks)
