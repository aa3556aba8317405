"""
Synthetic images with controllable ambiguity, and on-disk formats.

Each class is a Gaussian blob with a class-specific aspect ratio carrying a
sinusoidal texture of class-specific frequency, on a noisy background. An
``ambiguity`` level ``rho`` splits evenly into mixed-recipe samples (two
classes blended, labelled by the dominant one) and flipped training labels.

Tensor files (``.mftn``), little-endian::

    magic   4 bytes  b"MFTN"
    version u32      1
    dtype   u32      1 = f32, 2 = f64, 3 = u8
    rank    u32
    dims    u64 * rank
    payload row-major
"""

from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ContractError, FormatError, LoadError
from .tensor import Tensor, as_tensor

MAGIC = b"MFTN"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
DTYPE_CODES = {"f32": 1, "f64": 2, "u8": 3}
SPLITS = ("train", "val", "test")


# ------------------------------------------------------------ tensor files
def write_tensor(t, path, dtype: str = "f64") -> None:
    """Write ``t`` as a tensor file; ``dtype`` is ``f64``, ``f32`` or ``u8``."""
    if dtype not in DTYPE_CODES:
        raise ContractError(f"unknown dtype {dtype!r}")
    code = DTYPE_CODES[dtype]
    arr = as_tensor(t).data if not isinstance(t, np.ndarray) else t
    if dtype == "u8":
        arr = np.clip(np.round(arr), 0, 255)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    header = MAGIC + struct.pack("<III", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_tensor_array(path, normalize_u8: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: header truncated at offset {len(raw)} (need 16 bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {MAGIC!r}")
    version, code, rank = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if code not in DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 8")
    dims_end = 16 + 8 * rank
    if len(raw) < dims_end:
        raise FormatError(f"{path}: dims truncated at offset {len(raw)} (need {dims_end} bytes)")
    dims = struct.unpack_from(f"<{rank}Q", raw, 16)
    dt = DTYPES[code]
    expected = dt.itemsize * int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - dims_end
    if actual != expected:
        raise FormatError(f"{path}: payload at offset {dims_end} has {actual} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=dt, offset=dims_end).reshape(dims)
    if code == 3 and normalize_u8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def read_tensor(path, normalize_u8: bool = True) -> Tensor:
    """Load a tensor file as float64; 8-bit payloads are scaled to ``[0, 1]``."""
    return Tensor(read_tensor_array(path, normalize_u8))


def read_pgm(path) -> np.ndarray:
    """Binary 8-bit PGM (P5) scaled to ``[0, 1]``."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1
    data = raw[pos : pos + width * height]
    if len(data) != width * height:
        raise FormatError(f"{path}: payload at offset {pos} has {len(data)} bytes, expected {width * height}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).astype(np.float64) / maxval


def write_pgm(image: np.ndarray, path) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def load_image(path) -> np.ndarray:
    """Image file as ``C x H x W`` float64 (PGM or tensor file)."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing file: {path}")
    arr = read_pgm(path) if path.suffix.lower() == ".pgm" else read_tensor_array(path)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise LoadError(f"{path}: expected a 2-D or 3-D image, got shape {arr.shape}")
    return arr


# ----------------------------------------------------------------- datasets
@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray] = None
    has_mask: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Split":
        return Split(
            self.images[idx],
            self.labels[idx],
            None if self.masks is None else self.masks[idx],
            None if self.has_mask is None else self.has_mask[idx],
        )

    @property
    def any_mask(self) -> bool:
        return self.has_mask is not None and bool(self.has_mask.any())


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int

    def __getitem__(self, name: str) -> Split:
        return getattr(self, name)


@dataclass
class SyntheticSpec:
    classes: int = 3
    train: int = 800
    val: int = 200
    test: int = 200
    image_size: int = 32
    ambiguity: float = 0.25
    mask_fraction: float = 0.5
    noise: float = 0.25
    class_weights: List[float] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise ContractError(f"need at least 2 classes, got {self.classes}")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ContractError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ContractError(f"mask_fraction must lie in [0, 1], got {self.mask_fraction}")
        if self.image_size % 4 or self.image_size < 8:
            raise ContractError(f"image_size must be a multiple of 4 and >= 8, got {self.image_size}")
        if self.class_weights and len(self.class_weights) != self.classes:
            raise ContractError("class_weights needs one entry per class")

    def to_dict(self) -> dict:
        return asdict(self)


def class_recipe(num_classes: int, image_size: int):
    """Per-class ``(sigma_x, sigma_y, frequency)`` for the blob and texture."""
    t = np.linspace(0.0, 1.0, num_classes)
    aspect = np.exp(np.log(2.2) * (2.0 * t - 1.0))
    s0 = 0.14 * image_size
    return s0 / np.sqrt(aspect), s0 * np.sqrt(aspect), 0.08 + 0.17 * t


def _render(cls: int, center, phase: float, recipe, grid) -> Tuple[np.ndarray, np.ndarray]:
    sx, sy, freq = recipe
    yy, xx = grid
    dx, dy = xx - center[1], yy - center[0]
    blob = np.exp(-0.5 * ((dx / sx[cls]) ** 2 + (dy / sy[cls]) ** 2))
    texture = np.sin(2.0 * np.pi * freq[cls] * xx + phase)
    return blob * (1.0 + 0.6 * texture), blob


def _generate_split(spec: SyntheticSpec, n: int, rng: np.random.Generator, noisy_labels: bool) -> Split:
    C, S = spec.classes, spec.image_size
    recipe = class_recipe(C, S)
    grid = np.mgrid[0:S, 0:S].astype(np.float64)
    if spec.class_weights:
        w = np.asarray(spec.class_weights, dtype=np.float64)
        labels = rng.choice(C, size=n, p=w / w.sum())
    else:
        labels = rng.permutation(np.arange(n) % C)
    images = np.empty((n, 1, S, S))
    masks = np.empty((n, S, S))
    kind = rng.random(n)
    rho = spec.ambiguity
    for i in range(n):
        c = labels[i]
        center = S / 2.0 - 0.5 + rng.uniform(-3.0, 3.0, size=2)
        img, blob = _render(c, center, rng.uniform(0, 2 * np.pi), recipe, grid)
        if kind[i] < rho / 2:
            other = (c + rng.integers(1, C)) % C
            w = rng.uniform(0.5, 0.8)
            img2, blob2 = _render(other, center, rng.uniform(0, 2 * np.pi), recipe, grid)
            img, blob = w * img + (1 - w) * img2, w * blob + (1 - w) * blob2
        images[i, 0] = img + spec.noise * rng.normal(size=(S, S))
        masks[i] = blob >= 0.5 * blob.max()
    flip = (kind >= rho / 2) & (kind < rho)
    out_labels = labels.copy()
    if noisy_labels and flip.any():
        out_labels[flip] = (labels[flip] + rng.integers(1, C, size=flip.sum())) % C
    has_mask = np.zeros(n, dtype=bool)
    has_mask[rng.permutation(n)[: int(round(spec.mask_fraction * n))]] = True
    masks[~has_mask] = 0.0
    return Split(images, out_labels.astype(np.int64), masks, has_mask)


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic train/val/test splits for ``spec``.

    Label flips apply to train and val only; test labels are the generating
    class (mixed samples keep their dominant class).
    """
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(3)
    sizes = {"train": spec.train, "val": spec.val, "test": spec.test}
    splits = {
        name: _generate_split(spec, sizes[name], np.random.default_rng(ss), noisy_labels=name != "test")
        for name, ss in zip(SPLITS, streams)
    }
    return Dataset(num_classes=spec.classes, **splits)


# -------------------------------------------------------------- manifests
def write_split(split: Split, directory) -> None:
    """Per-sample tensor files plus ``manifest.csv`` (``file,label,mask_file``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(split)):
        name = f"img_{i:05d}.mftn"
        write_tensor(split.images[i], directory / name)
        mask_name = ""
        if split.has_mask is not None and split.has_mask[i]:
            mask_name = f"mask_{i:05d}.mftn"
            write_tensor(split.masks[i] * 255.0, directory / mask_name, dtype="u8")
        rows.append((name, int(split.labels[i]), mask_name))
    with open(directory / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", "label", "mask_file"])
        writer.writerows(rows)


def _resample_nearest(mask: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = mask.shape
    if (h, w) == (H, W):
        return mask
    rows = np.minimum(((np.arange(H) + 0.5) * h / H).astype(int), h - 1)
    cols = np.minimum(((np.arange(W) + 0.5) * w / W).astype(int), w - 1)
    return mask[rows][:, cols]


def load_image_dir(path, manifest: str = "manifest.csv", num_classes: Optional[int] = None) -> Tuple[Split, Dict]:
    """Load images listed in a manifest CSV.

    Labels already in ``[0, num_classes)`` are kept; otherwise the distinct
    label values are remapped to ``0..K-1`` in sorted order and the mapping is
    reported under ``"remap"``.

    Returns:
        ``(split, report)``.
    """
    path = Path(path)
    mpath = path / manifest
    if not mpath.exists():
        raise LoadError(f"missing manifest: {mpath}")
    with open(mpath, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"file", "label"} <= set(reader.fieldnames):
            raise LoadError(f"{mpath}: header must contain file,label[,mask_file]")
        rows = list(reader)
    if not rows:
        raise LoadError(f"{mpath}: no samples listed")
    images, raw_labels, masks, has_mask = [], [], [], []
    shape = None
    for row in rows:
        img = load_image(path / row["file"])
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise LoadError(f"{row['file']}: shape {img.shape} differs from {shape} of the first image")
        images.append(img)
        try:
            raw_labels.append(int(row["label"]))
        except ValueError:
            raise LoadError(f"{row['file']}: label {row['label']!r} is not an integer") from None
        mfile = (row.get("mask_file") or "").strip()
        if mfile:
            m = load_image(path / mfile)[0]
            masks.append((_resample_nearest(m, shape[1], shape[2]) > 0.5).astype(np.float64))
            has_mask.append(True)
        else:
            masks.append(np.zeros(shape[1:]))
            has_mask.append(False)
    raw = np.asarray(raw_labels)
    report: Dict = {"samples": len(rows), "remap": None}
    if num_classes is not None and raw.min() >= 0 and raw.max() < num_classes:
        labels = raw
    else:
        classes = np.unique(raw)
        if num_classes is None and np.array_equal(classes, np.arange(len(classes))):
            labels = raw
        else:
            lookup = {int(c): i for i, c in enumerate(classes)}
            labels = np.array([lookup[int(v)] for v in raw])
            report["remap"] = lookup
    split = Split(np.stack(images), labels.astype(np.int64), np.stack(masks), np.asarray(has_mask))
    return split, report


def save_dataset(ds: Dataset, directory) -> None:
    for name in SPLITS:
        write_split(ds[name], Path(directory) / name)


def load_dataset(directory, num_classes: Optional[int] = None) -> Dataset:
    directory = Path(directory)
    splits = {}
    for name in SPLITS:
        splits[name], _ = load_image_dir(directory / name, num_classes=num_classes)
    if num_classes is None:
        num_classes = int(max(int(s.labels.max()) for s in splits.values())) + 1
    return Dataset(num_classes=num_classes, **splits)
