"""Synthetic multi-label raster scenes, dataset manifests, and tensor files.

Scenes are composed of class-specific textures (stripes, checkers, blobs,
gradients, rings) with distinct colors, placed in bands of the canvas, plus
additive Gaussian noise. Labels mark exactly the classes whose texture was
placed, so they are learnable from pixel statistics by construction.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_TF_MAGIC = b"JCTF"
_TF_VERSION = 1

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    pass


# -- tensor file format ------------------------------------------------


def write_tensor_to(fh, name, array):
    arr = np.asarray(array, dtype="<f8")  # tobytes() below emits C order
    nm = name.encode("utf-8")
    fh.write(_TF_MAGIC)
    fh.write(struct.pack("<BI", _TF_VERSION, len(nm)))
    fh.write(nm)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor_from(fh):
    magic = fh.read(4)
    if magic == b"":
        raise EOFError("no tensor record")
    if magic != _TF_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, name_len = struct.unpack("<BI", _read_exact(fh, 5))
    if version != _TF_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, np.array(data, dtype=np.float64)


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor file")
    return buf


def write_tensor(path, name, array):
    with open(path, "wb") as fh:
        write_tensor_to(fh, name, array)


def read_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor_from(fh)


# -- synthetic scenes ---------------------------------------------------

_CLASS_COLORS = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.85, 0.30],
    [0.25, 0.40, 0.95],
    [0.90, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.20, 0.85, 0.90],
    [0.95, 0.55, 0.15],
    [0.70, 0.70, 0.70],
])


def _texture(cls, yy, xx, size):
    if cls == 0:
        return 0.5 + 0.5 * np.sin(2 * np.pi * 3 * yy / size)
    if cls == 1:
        return 0.5 + 0.5 * np.sin(2 * np.pi * 5 * xx / size)
    if cls == 2:
        return 0.5 + 0.5 * np.sin(2 * np.pi * 4 * (xx + yy) / (2 * size))
    if cls == 3:
        return ((yy // 4 + xx // 4) % 2).astype(np.float64)
    if cls == 4:
        cy, cx = yy % 8 - 3.5, xx % 8 - 3.5
        return np.exp(-(cy**2 + cx**2) / 6.0)
    if cls == 5:
        return xx / max(size - 1, 1)
    if cls == 6:
        r = np.sqrt((yy - size / 2) ** 2 + (xx - size / 2) ** 2)
        return 0.5 + 0.5 * np.sin(2 * np.pi * r / 6.0)
    if cls == 7:
        return ((yy // 2 + xx // 2) % 2).astype(np.float64)
    raise ValueError(f"no texture for class {cls}")


@dataclass
class SyntheticSceneConfig:
    size: int = 32
    channels: int = 3
    classes: int = 8
    labels_min: int = 1
    labels_max: int = 2
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.labels_min <= self.labels_max <= self.classes):
            raise ValueError("labels per image must satisfy 1 <= min <= max <= classes")
        if self.classes > len(_CLASS_COLORS):
            raise ValueError(f"at most {len(_CLASS_COLORS)} classes supported")


def generate_scene(config, rng):
    """One (image, label-vector) pair; image is HxWxC in [0,1]."""
    size, ch = config.size, config.channels
    k = int(rng.integers(config.labels_min, config.labels_max + 1))
    classes = np.sort(rng.choice(config.classes, size=k, replace=False))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    image = np.zeros((size, size, ch))
    horizontal = bool(rng.integers(2))
    cuts = np.linspace(0, size, k + 1).astype(int)
    for region, cls in enumerate(classes):
        tex = _texture(int(cls), yy, xx, size)
        color = _CLASS_COLORS[cls][:ch]
        tinted = (0.15 + 0.85 * tex)[:, :, None] * color[None, None, :]
        a, b = cuts[region], cuts[region + 1]
        if horizontal:
            image[a:b, :, :] = tinted[a:b, :, :]
        else:
            image[:, a:b, :] = tinted[:, a:b, :]
    if config.noise > 0:
        image = image + rng.normal(0.0, config.noise, size=image.shape)
    labels = np.zeros(config.classes, dtype=np.int64)
    labels[classes] = 1
    return np.clip(image, 0.0, 1.0), labels


# -- manifest & splits --------------------------------------------------


@dataclass
class ManifestEntry:
    image_id: int
    path: str
    split: str
    labels: np.ndarray


@dataclass
class DatasetManifest:
    classes: int
    entries: list = field(default_factory=list)
    root: Path = Path(".")

    def ids(self, split=None):
        return [e.image_id for e in self.entries if split is None or e.split == split]

    def entry(self, image_id):
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(f"image id {image_id} not in manifest")

    def labels_by_id(self, split=None):
        return {e.image_id: e.labels for e in self.entries if split is None or e.split == split}

    def load_image(self, image_id):
        _, arr = read_tensor(self.root / self.entry(image_id).path)
        return arr


def _split_rank(seed, image_id):
    digest = hashlib.sha256(f"{seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def assign_splits(ids, ratios, seed):
    """Deterministic split with exact counts: rank ids by a seeded hash, cut.

    Counts follow the largest-remainder rule, so each split matches its
    ratio to within one image.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(ids)
    exact = [r * n for r in ratios]
    counts = [int(np.floor(v)) for v in exact]
    remainders = sorted(range(len(ratios)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % len(ratios)]] += 1
    ranked = sorted(ids, key=lambda i: (_split_rank(seed, i), i))
    assignment = {}
    pos = 0
    for split, c in zip(SPLITS, counts):
        for i in ranked[pos:pos + c]:
            assignment[i] = split
        pos += c
    return assignment


def build_dataset(config, n, out_dir, ratios=(0.52, 0.24, 0.24)):
    """Generate n scenes, write image tensor files and the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ids = list(range(n))
    assignment = assign_splits(ids, ratios, config.seed)
    entries = []
    for i in ids:
        rng = np.random.default_rng([config.seed, i])
        image, labels = generate_scene(config, rng)
        rel = f"images/img_{i:06d}.jctf"
        write_tensor(out / rel, "image", image)
        entries.append(ManifestEntry(i, rel, assignment[i], labels))
    manifest = DatasetManifest(classes=config.classes, entries=entries, root=out)
    write_manifest(out / "manifest.txt", manifest)
    return manifest


def write_manifest(path, manifest):
    lines = []
    for e in manifest.entries:
        bits = "".join(str(int(v)) for v in e.labels)
        lines.append(f"{e.image_id},{e.path},{e.split},{bits}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path):
    path = Path(path)
    entries = []
    classes = None
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        image_id, rel, split, bits = line.split(",")
        if split not in SPLITS:
            raise FormatError(f"unknown split {split!r} in manifest")
        labels = np.array([int(c) for c in bits], dtype=np.int64)
        if classes is None:
            classes = len(labels)
        elif classes != len(labels):
            raise FormatError("inconsistent label width in manifest")
        entries.append(ManifestEntry(int(image_id), rel, split, labels))
    return DatasetManifest(classes=classes or 0, entries=entries, root=path.parent)
