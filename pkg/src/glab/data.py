"""Synthetic datasets and their on-disk formats.

Two generators: a ring of 2-D Gaussian modes (points), and small grayscale
images made of a class-positioned bump plus a class-oriented grating.  Both
quantize to their storage precision at generation time, so a save/load
round trip reproduces the tensors exactly.

Storage: point datasets are a single CSV; image datasets are a directory of
binary graymap (P5) files with a tab-separated label index.  Every dataset
directory carries a meta.json describing how it was generated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, InvalidConfig, IoError, ShapeMismatch
from .rng import SeededRng


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) == 0:
            raise EmptyDataset("dataset has no samples")
        if len(self.samples) != len(self.labels):
            raise ShapeMismatch(
                f"{len(self.samples)} samples but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]

    def shuffled(self, seed: int) -> "Dataset":
        """A reordered copy; the order is a pure function of the seed."""
        perm = SeededRng(seed).stream("shuffle").generator().permutation(len(self))
        return Dataset(self.samples[perm], self.labels[perm], dict(self.meta))


def mode_centers(n_modes: int) -> np.ndarray:
    """Unit-circle mode centers, mode j at angle 2*pi*j / n_modes."""
    ang = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gen_gaussian_mixture(n_modes: int, n_per_mode: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs centered on the unit circle.

    Each mode draws from its own substream, so adding a mode never changes
    the points of the others.  Labels are the mode index, mode-major order.
    """
    if n_modes < 1 or n_per_mode < 1:
        raise InvalidConfig(f"need n_modes >= 1 and n_per_mode >= 1, got {n_modes}, {n_per_mode}")
    if not (spread >= 0):
        raise InvalidConfig(f"spread must be >= 0, got {spread}")
    centers = mode_centers(n_modes)
    root = SeededRng(seed).stream("gmm")
    chunks = []
    for j in range(n_modes):
        noise = root.stream(j).generator().standard_normal((n_per_mode, 2))
        chunks.append(centers[j] + spread * noise)
    samples = np.concatenate(chunks)
    labels = np.repeat(np.arange(n_modes), n_per_mode)
    meta = {"kind": "gaussian_mixture", "n_modes": n_modes, "n_per_mode": n_per_mode,
            "spread": spread, "seed": seed, "n_classes": n_modes}
    return Dataset(samples, labels, meta)


def quantize_unit(x: np.ndarray) -> np.ndarray:
    """Snap values in [-1, 1] to the 256-level grid used by 8-bit storage."""
    q = np.clip(np.round((x + 1.0) * 0.5 * 255.0), 0, 255)
    return q / 255.0 * 2.0 - 1.0


def gen_bump_images(n_classes: int, n_per_class: int, size: int = 16, seed: int = 0) -> Dataset:
    """Grayscale toy images: one bright bump and one faint grating per class.

    The bump sits on a ring at a class-specific angle (with per-sample
    jitter) and the grating is oriented along the same angle, so classes
    differ in both low- and mid-frequency content.  Values live in [-1, 1]
    and are quantized to the 8-bit storage grid.
    """
    if n_classes < 1 or n_per_class < 1:
        raise InvalidConfig(f"need n_classes >= 1 and n_per_class >= 1, got {n_classes}, {n_per_class}")
    if size < 4:
        raise InvalidConfig(f"image size must be >= 4, got {size}")
    root = SeededRng(seed).stream("bumps")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mid = (size - 1) / 2.0
    ring = size * 0.3
    sigma_b = size * 0.16
    chunks = []
    for cls in range(n_classes):
        ang = 2.0 * np.pi * cls / n_classes
        gen = root.stream(cls).generator()
        jitter = gen.uniform(-1.0, 1.0, size=(n_per_class, 2))
        phase = gen.uniform(0.0, 2.0 * np.pi, size=n_per_class)
        pix = gen.standard_normal((n_per_class, size, size))
        cy = mid + ring * np.sin(ang) + jitter[:, 0]
        cx = mid + ring * np.cos(ang) + jitter[:, 1]
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        bump = 1.6 * np.exp(-d2 / (2.0 * sigma_b * sigma_b))
        wave = 0.25 * np.cos(
            2.0 * np.pi * 4.0 * (xx * np.cos(ang) + yy * np.sin(ang)) / size
            + phase[:, None, None]
        )
        img = -0.8 + bump + wave + 0.05 * pix
        chunks.append(np.clip(img, -1.0, 1.0))
    samples = quantize_unit(np.concatenate(chunks))[..., None]
    labels = np.repeat(np.arange(n_classes), n_per_class)
    meta = {"kind": "bump_images", "n_classes": n_classes, "n_per_class": n_per_class,
            "size": size, "seed": seed}
    return Dataset(samples, labels, meta)


# ---------------------------------------------------------------------------
# binary graymap files

def write_pgm(path, img: np.ndarray) -> None:
    """Write one 2-D uint8 array as a binary graymap (P5)."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ShapeMismatch(f"expected a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary graymap (P5) into a 2-D uint8 array."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not blob.startswith(b"P5"):
        raise IoError(f"{path}: not a binary graymap (missing P5 magic)")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise IoError(f"{path}: malformed graymap header") from exc
    if maxval != 255:
        raise IoError(f"{path}: only 8-bit graymaps supported, maxval={maxval}")
    data = blob[pos:pos + w * h]
    if len(data) != w * h:
        raise IoError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def to_u8(img: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] float image (H, W) or (H, W, 1) to uint8."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ShapeMismatch(f"only single-channel images supported, got {img.shape}")
        img = img[:, :, 0]
    return np.clip(np.round((img + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)


def from_u8(img: np.ndarray) -> np.ndarray:
    """Inverse of to_u8 up to quantization; 0 -> -1.0, 255 -> +1.0."""
    return img.astype(np.float64) / 255.0 * 2.0 - 1.0


# ---------------------------------------------------------------------------
# dataset directories

def save_dataset(ds: Dataset, out_dir) -> None:
    """Write a dataset directory: payload files plus meta.json.

    Point datasets become points.csv; image datasets become one graymap per
    sample plus labels.tsv.  All content is byte-deterministic.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ds.samples.ndim == 2:
        lines = ["x,y,label"]
        for (x, y), lab in zip(ds.samples, ds.labels):
            # repr of a python float is the shortest lossless decimal form
            lines.append(f"{float(x)!r},{float(y)!r},{int(lab)}")
        (out / "points.csv").write_text("\n".join(lines) + "\n")
    elif ds.samples.ndim == 4:
        rows = []
        for i, (img, lab) in enumerate(zip(ds.samples, ds.labels)):
            name = f"img_{i:05d}.pgm"
            write_pgm(out / name, to_u8(img))
            rows.append(f"{name}\t{int(lab)}")
        (out / "labels.tsv").write_text("\n".join(rows) + "\n")
    else:
        raise ShapeMismatch(f"cannot store samples of shape {ds.samples.shape}")
    (out / "meta.json").write_text(json.dumps(ds.meta, sort_keys=True, indent=1) + "\n")


def load_points(path) -> Dataset:
    """Read a points.csv (header x,y,label) back into a dataset."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "x,y,label":
        raise IoError(f"{path}: expected header 'x,y,label'")
    xs, labs = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise IoError(f"{path}: malformed row {ln!r}")
        xs.append((float(parts[0]), float(parts[1])))
        labs.append(int(parts[2]))
    if not xs:
        raise EmptyDataset(f"{path}: no data rows")
    return Dataset(np.array(xs), np.array(labs))


def load_images(path, expected_shape: tuple[int, ...] | None = None) -> Dataset:
    """Read a graymap directory with labels.tsv back into a dataset."""
    root = Path(path)
    index = root / "labels.tsv"
    try:
        rows = [ln for ln in index.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise IoError(f"cannot read {index}: {exc}") from exc
    if not rows:
        raise EmptyDataset(f"{index}: empty label index")
    imgs, labs = [], []
    for ln in rows:
        parts = ln.split("\t")
        if len(parts) != 2:
            raise IoError(f"{index}: malformed row {ln!r}")
        img = from_u8(read_pgm(root / parts[0]))[..., None]
        if expected_shape is not None and img.shape != tuple(expected_shape):
            raise ShapeMismatch(
                f"{parts[0]}: shape {img.shape} != expected {tuple(expected_shape)}"
            )
        imgs.append(img)
        labs.append(int(parts[1]))
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise ShapeMismatch(f"inconsistent image shapes in {root}: {sorted(shapes)}")
    return Dataset(np.stack(imgs), np.array(labs))


def load_dataset(path) -> Dataset:
    """Load a dataset directory written by save_dataset, using its meta.json."""
    root = Path(path)
    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read {meta_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"{meta_path}: invalid JSON: {exc}") from exc
    if (root / "points.csv").exists():
        ds = load_points(root / "points.csv")
    else:
        ds = load_images(root)
    ds.meta = meta
    return ds
