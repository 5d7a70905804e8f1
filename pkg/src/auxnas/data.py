"""Deterministic synthetic multi-task scenes plus the binary tensor format.

Each scene is a sloped background depth plane with 1..4 raised rectangles
or disks; segmentation classes, depth offsets, and albedos attach to the
same geometry so the three tasks stay correlated. Generation is a pure
function of (seed, index).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .autodiff import bilinear_resize_array

IGNORE_LABEL = 255

_MAGIC = b"TNSR"
_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int32): 3}


class FormatError(Exception):
    """Malformed tensor file: bad magic, version, dtype, or payload size."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    head = _MAGIC + struct.pack("<IBB", _VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(_DTYPE_CODES[code], copy=False).tobytes()


def write_tensor_file(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor_stream(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    raw = fh.read(6)
    if len(raw) != 6:
        raise FormatError("truncated header")
    version, code, ndim = struct.unpack("<IBB", raw)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    raw = fh.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise FormatError("truncated dims")
    shape = struct.unpack(f"<{ndim}I", raw)
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def read_tensor_file(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor_stream(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after payload")
    return arr


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def box_smooth3(depth: np.ndarray) -> np.ndarray:
    """3x3 box filter with replicated borders."""
    p = np.pad(depth, 1, mode="edge")
    acc = np.zeros_like(depth, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy:dy + depth.shape[0], dx:dx + depth.shape[1]]
    return (acc / 9.0).astype(depth.dtype)


def derive_normals(depth: np.ndarray) -> np.ndarray:
    """Surface normals (nx, ny, nz) ~ (-dd/dx, -dd/dy, 1), unit length.

    Central differences in per-pixel units with replicated borders.
    """
    d = depth.astype(np.float64)
    p = np.pad(d, 1, mode="edge")
    ddx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    ddy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    n = np.stack([-ddx, -ddy, np.ones_like(d)])
    n /= np.sqrt((n * n).sum(axis=0, keepdims=True))
    return n.astype(np.float32)


# class-tied albedo palette: appearance is what makes segmentation learnable
_CLASS_PALETTE = np.array([
    [0.85, 0.25, 0.25],
    [0.25, 0.80, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.75, 0.30, 0.80],
    [0.30, 0.80, 0.80],
    [0.85, 0.55, 0.25],
])


def generate_sample(seed: int, index: int, h: int, w: int, k: int) -> dict:
    """One synthetic scene; deterministic in (seed, index).

    Tasks correlate through shared structure: each class has a base color,
    shading encodes depth, and normals derive from the depth field.
    """
    if k - 1 > len(_CLASS_PALETTE):
        raise ValueError(f"at most {len(_CLASS_PALETTE) + 1} classes supported")
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d0 = rng.uniform(2.5, 3.5)
    gx, gy = rng.uniform(-0.045, 0.045, 2)
    plane = d0 + gx * (xx - w / 2) + gy * (yy - h / 2)
    depth = plane.copy()
    seg = np.zeros((h, w), dtype=np.int32)
    albedo = np.empty((3, h, w), dtype=np.float64)
    albedo[:] = rng.uniform(0.45, 0.62, 3)[:, None, None]  # grayish background
    for _ in range(int(rng.integers(1, 5))):
        cls = int(rng.integers(1, k))
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        if rng.random() < 0.5:
            sy = rng.uniform(0.14, 0.32) * h
            sx = rng.uniform(0.14, 0.32) * w
            mask = (np.abs(yy - cy) <= sy) & (np.abs(xx - cx) <= sx)
        else:
            r = rng.uniform(0.14, 0.32) * min(h, w)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        offset = rng.uniform(0.35, 1.1)
        depth[mask] = plane[mask] - offset
        seg[mask] = cls
        color = np.clip(_CLASS_PALETTE[cls - 1] + rng.uniform(-0.08, 0.08, 3), 0.05, 0.95)
        albedo[:, mask] = color[:, None]
    depth = np.maximum(box_smooth3(depth), 0.2)
    nrm = derive_normals(depth)
    shade = 2.3 / (depth + 1.0)
    img = albedo * shade[None] + rng.normal(0.0, 0.01, (3, h, w))
    return {
        "img": np.clip(img, 0.0, 1.0).astype(np.float32),
        "seg": seg,
        "dep": depth.astype(np.float32),
        "nrm": nrm,
    }


def _split_indices(n: int, val_n: int | None, test_n: int | None) -> dict:
    if val_n is None:
        val_n = n // 5
    if test_n is None:
        test_n = n // 10
    train_n = n - val_n - test_n
    if train_n < 1:
        raise ValueError(f"splits leave no training samples (n={n}, val={val_n}, test={test_n})")
    train = list(range(train_n))
    meta_cut = max(1, int(train_n * 0.8))
    return {
        "train": train,
        "meta_train": train[:meta_cut],
        "meta_val": train[meta_cut:],
        "val": list(range(train_n, train_n + val_n)),
        "test": list(range(train_n + val_n, n)),
    }


def sample_file_names(index: int) -> dict:
    return {m: f"{index}_{m}.tnsr" for m in ("img", "seg", "dep", "nrm")}


def gen_synthetic(out_dir: str, seed: int, n: int, h: int = 32, w: int = 32, k: int = 5,
                  val_n: int | None = None, test_n: int | None = None) -> dict:
    """Write a dataset directory (manifest.json + 4 tensor files per sample)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i in range(n):
        s = generate_sample(seed, i, h, w, k)
        names = sample_file_names(i)
        for m, name in names.items():
            write_tensor_file(os.path.join(out_dir, name), s[m])
        files.append(names)
    manifest = {
        "n": n, "H": h, "W": w, "K": k, "seed": seed,
        "splits": _split_indices(n, val_n, test_n),
        "files": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


class SyntheticDataset:
    """Eagerly loaded dataset directory; read-only after construction."""

    def __init__(self, root: str):
        self.root = root
        with open(os.path.join(root, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.n = self.manifest["n"]
        self.h = self.manifest["H"]
        self.w = self.manifest["W"]
        self.k = self.manifest["K"]
        self.splits = {name: list(idx) for name, idx in self.manifest["splits"].items()}
        self._samples = []
        for names in self.manifest["files"]:
            self._samples.append({m: read_tensor_file(os.path.join(root, f))
                                  for m, f in names.items()})

    def __len__(self):
        return self.n

    def sample(self, i: int) -> dict:
        return self._samples[i]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def flip_sample(s: dict) -> dict:
    """Horizontal flip of every modality; the normal x component negates."""
    nrm = s["nrm"][:, :, ::-1].copy()
    nrm[0] = -nrm[0]
    return {
        "img": s["img"][:, :, ::-1].copy(),
        "seg": s["seg"][:, ::-1].copy(),
        "dep": s["dep"][:, ::-1].copy(),
        "nrm": nrm,
    }


def _nearest_indices(size: int, out: int) -> np.ndarray:
    return np.clip(np.floor((np.arange(out) + 0.5) * size / out), 0, size - 1).astype(np.intp)


def rescale_sample(s: dict, scale: float) -> dict:
    """Spatial rescale; depth values divide by the scale so geometry stays
    consistent with the resized image (closer surfaces appear larger)."""
    h, w = s["dep"].shape
    oh = max(1, int(round(h * scale)))
    ow = max(1, int(round(w * scale)))
    ri = _nearest_indices(h, oh)
    ci = _nearest_indices(w, ow)
    nrm = bilinear_resize_array(s["nrm"][None], oh, ow)[0]
    nrm /= np.sqrt((nrm * nrm).sum(axis=0, keepdims=True) + 1e-12)
    return {
        "img": bilinear_resize_array(s["img"][None], oh, ow)[0].astype(np.float32),
        "seg": s["seg"][ri][:, ci].copy(),
        "dep": (bilinear_resize_array(s["dep"][None, None], oh, ow)[0, 0] / scale).astype(np.float32),
        "nrm": nrm.astype(np.float32),
    }


def crop_sample(s: dict, th: int, tw: int, oy: int, ox: int) -> dict:
    """Crop to (th, tw) at offset (oy, ox); pads bottom/right first when the
    sample is smaller (ignore label for seg, edge values elsewhere)."""
    h, w = s["dep"].shape
    py, px = max(0, th - h), max(0, tw - w)
    img, seg, dep, nrm = s["img"], s["seg"], s["dep"], s["nrm"]
    if py or px:
        img = np.pad(img, ((0, 0), (0, py), (0, px)), mode="edge")
        dep = np.pad(dep, ((0, py), (0, px)), mode="edge")
        nrm = np.pad(nrm, ((0, 0), (0, py), (0, px)), mode="edge")
        seg = np.pad(seg, ((0, py), (0, px)), constant_values=IGNORE_LABEL)
    return {
        "img": img[:, oy:oy + th, ox:ox + tw].copy(),
        "seg": seg[oy:oy + th, ox:ox + tw].copy(),
        "dep": dep[oy:oy + th, ox:ox + tw].copy(),
        "nrm": nrm[:, oy:oy + th, ox:ox + tw].copy(),
    }


def augment(s: dict, rng: np.random.Generator, crop_hw: tuple[int, int],
            scale_range: tuple[float, float] = (0.5, 2.1)) -> dict:
    """Random flip, random rescale with depth renormalization, random crop."""
    if rng.random() < 0.5:
        s = flip_sample(s)
    scale = rng.uniform(*scale_range)
    s = rescale_sample(s, scale)
    th, tw = crop_hw
    h, w = s["dep"].shape
    oy = int(rng.integers(0, max(h - th, 0) + 1))
    ox = int(rng.integers(0, max(w - tw, 0) + 1))
    return crop_sample(s, th, tw, oy, ox)


def collate(samples: list[dict]) -> dict:
    """Stack samples into NCHW training arrays (depth gains a channel axis)."""
    return {
        "img": np.stack([s["img"] for s in samples]),
        "seg": np.stack([s["seg"] for s in samples]),
        "dep": np.stack([s["dep"] for s in samples])[:, None],
        "nrm": np.stack([s["nrm"] for s in samples]),
    }
