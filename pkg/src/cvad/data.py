"""Synthetic ID/OOD image sets, image-folder ingestion and the manifest format.

The synthetic generator stands in for gated medical datasets and keeps the
same role structure: in-distribution images, an intra-class OOD set that
differs only by a small local lesion, and three inter-class OOD sets that
differ in global texture.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError

ROLES = ("id", "intra_ood", "inter_ood_1", "inter_ood_2", "inter_ood_3")
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["path", "split", "role", "label"]
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    n_id: int = 2000
    n_id_test: int = 500
    n_intra: int = 500
    n_inter_1: int = 500
    n_inter_2: int = 500
    n_inter_3: int = 500
    lesion_size: int = 14
    lesion_intensity: float = 0.6
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_id, self.n_intra, self.n_inter_1, self.n_inter_2, self.n_inter_3)
        if min(counts) < 1 or self.n_id_test < 0:
            raise ConfigError(f"role counts must be >= 1, got {counts}")
        if self.n_id < 2:
            raise ConfigError("need at least 2 ID images for an 80/20 split")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        # the smallest ellipse semi-axis is 0.12 * image_size
        if not 1 <= self.lesion_size < 0.24 * self.image_size:
            raise ConfigError(f"lesion_size {self.lesion_size} must be smaller than the main shape")
        if not 0 < self.lesion_intensity <= 1 or self.noise_std < 0:
            raise ConfigError("lesion_intensity must be in (0, 1] and noise_std >= 0")

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    role: str
    label: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    seed: int | None = None
    spec_hash: str | None = None

    def select(self, split=None, role=None):
        return [e for e in self.entries
                if (split is None or e.split == split) and (role is None or e.role == role)]

    def validate(self):
        for e in self.entries:
            if e.split not in SPLITS or e.role not in ROLES or e.label not in (0, 1):
                raise DatasetError(f"malformed manifest row: {e}")
            if e.role != "id" and (e.split != "test" or e.label != 1):
                raise DatasetError(f"OOD entry outside the test split or mislabelled: {e.path}")
            if e.role == "id" and e.label != 0:
                raise DatasetError(f"ID entry must carry label 0: {e.path}")


# ---------------------------------------------------------------------------
# manifest I/O


def write_manifest(manifest, path=None):
    path = Path(path) if path is not None else Path(manifest.root) / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            w.writerow([e.path, e.split, e.role, e.label])
    return path


def read_manifest(root):
    root = Path(root)
    path = root / "manifest.csv"
    if not path.is_file():
        raise DatasetError(f"no manifest.csv in {root}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DatasetError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        entries = [ManifestEntry(p, s, r, int(lab)) for p, s, r, lab in reader]
    seed = spec_hash = None
    meta = root / "synth_spec.json"
    if meta.is_file():
        info = json.loads(meta.read_text(encoding="utf-8"))
        seed, spec_hash = info["spec"]["seed"], info["spec_hash"]
    m = DatasetManifest(root, entries, seed, spec_hash)
    m.validate()
    return m


def split_train_val(ids, ratio=0.8, seed=0):
    """Seeded shuffle, then the first ``floor(ratio * n)`` items go to train."""
    ids = list(ids)
    if not ids:
        raise DatasetError("cannot split an empty list")
    perm = np.random.default_rng(seed).permutation(len(ids))
    k = math.floor(ratio * len(ids))
    return [ids[i] for i in perm[:k]], [ids[i] for i in perm[k:]]


# ---------------------------------------------------------------------------
# synthetic rendering (all renders are float images in [0, 1], shape HxW)


def _grid(n):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_id(rng, spec):
    """Smooth background, one filled ellipse, Gaussian pixel noise.

    Returns ``(image_uint8, ellipse)`` where ``ellipse`` is
    ``(cy, cx, ry, rx, theta)`` in pixels.
    """
    n = spec.image_size
    yy, xx = _grid(n)
    # a near-constant background keeps the per-image BCE entropy floor steady,
    # otherwise it swamps the local lesion signal
    base = rng.uniform(0.11, 0.13)
    slope = rng.uniform(0.0, 0.02)
    phi = rng.uniform(0, 2 * np.pi)
    img = base + slope * ((np.cos(phi) * xx + np.sin(phi) * yy) / n - 0.5)
    cy, cx = rng.uniform(0.35 * n, 0.65 * n, size=2)
    ry = rng.uniform(0.18, 0.3) * n
    rx = rng.uniform(0.12, 0.2) * n
    theta = rng.uniform(0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    img = np.where(inside, rng.uniform(0.25, 0.35), img)
    img = img + spec.noise_std * rng.standard_normal((n, n))
    return _quantize(img), (cy, cx, ry, rx, theta)


def render_intra(rng, spec):
    """An ID render plus one bright square lesion placed inside the ellipse.

    Returns ``(image_uint8, bbox)`` with ``bbox = (top, left, size)``.
    """
    img, (cy, cx, ry, rx, theta) = render_id(rng, spec)
    n, s = spec.image_size, spec.lesion_size
    r = rng.uniform(0, 0.5)
    a = rng.uniform(0, 2 * np.pi)
    u, v = r * rx * np.cos(a), r * ry * np.sin(a)
    px = cx + u * np.cos(theta) - v * np.sin(theta)
    py = cy + u * np.sin(theta) + v * np.cos(theta)
    top = int(np.clip(round(py - s / 2), 0, n - s))
    left = int(np.clip(round(px - s / 2), 0, n - s))
    out = img.astype(np.int32)
    out[top:top + s, left:left + s] += int(round(spec.lesion_intensity * 255))
    return np.clip(out, 0, 255).astype(np.uint8), (top, left, s)


def _two_levels(rng):
    return rng.uniform(0.0, 0.3), rng.uniform(0.7, 1.0)


def render_checkerboard(rng, spec):
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n]
    cell = int(rng.integers(4, 13))
    oy, ox = rng.integers(0, cell, size=2)
    lo, hi = _two_levels(rng)
    img = np.where(((yy + oy) // cell + (xx + ox) // cell) % 2 == 0, lo, hi)
    return _quantize(img + spec.noise_std * rng.standard_normal((n, n)))


def render_stripes(rng, spec):
    n = spec.image_size
    xx = np.mgrid[0:n, 0:n][1]
    period = int(rng.integers(4, 17))
    off = int(rng.integers(0, period))
    lo, hi = _two_levels(rng)
    img = np.where(((xx + off) % period) < period / 2, lo, hi)
    return _quantize(img + spec.noise_std * rng.standard_normal((n, n)))


def render_uniform_noise(rng, spec):
    n = spec.image_size
    return _quantize(rng.uniform(0.0, 1.0, size=(n, n)))


_RENDERERS = {
    "id": lambda rng, spec: render_id(rng, spec)[0],
    "intra_ood": lambda rng, spec: render_intra(rng, spec)[0],
    "inter_ood_1": render_checkerboard,
    "inter_ood_2": render_stripes,
    "inter_ood_3": render_uniform_noise,
}


def sample_rng(seed, role, index):
    """Independent, reproducible stream for one synthetic image."""
    return np.random.default_rng([seed, ROLES.index(role), index])


def synth_generate(spec, out_dir):
    """Render every role to ``out_dir/<role>/`` and write ``manifest.csv``.

    The parent of ``out_dir`` must exist.  ID images are split 80/20 into
    train/val; ``n_id_test`` further ID images and all OOD images form the
    test split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(exist_ok=True)
    counts = {
        "id": spec.n_id + spec.n_id_test,
        "intra_ood": spec.n_intra,
        "inter_ood_1": spec.n_inter_1,
        "inter_ood_2": spec.n_inter_2,
        "inter_ood_3": spec.n_inter_3,
    }
    paths = {}
    for role, count in counts.items():
        (out_dir / role).mkdir(exist_ok=True)
        paths[role] = []
        for i in range(count):
            rel = f"{role}/{role}_{i:05d}.png"
            img = _RENDERERS[role](sample_rng(spec.seed, role, i), spec)
            Image.fromarray(img, mode="L").save(out_dir / rel)
            paths[role].append(rel)

    train, val = split_train_val(paths["id"][:spec.n_id], 0.8, spec.seed)
    train_set = set(train)
    entries = []
    for rel in paths["id"][:spec.n_id]:
        entries.append(ManifestEntry(rel, "train" if rel in train_set else "val", "id", 0))
    entries += [ManifestEntry(rel, "test", "id", 0) for rel in paths["id"][spec.n_id:]]
    for role in ROLES[1:]:
        entries += [ManifestEntry(rel, "test", role, 1) for rel in paths[role]]

    manifest = DatasetManifest(out_dir, entries, spec.seed, spec.digest())
    manifest.validate()
    write_manifest(manifest)
    meta = {"spec": asdict(spec), "spec_hash": spec.digest()}
    (out_dir / "synth_spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# loading


def to_channels(img, channels):
    """Convert an HxWxC float image to ``channels`` (1 via ITU-R 601 luma, or 3)."""
    c = img.shape[2]
    if c == channels:
        return img
    if channels == 1 and c == 3:
        return (img @ LUMA)[:, :, None]
    if channels == 3 and c == 1:
        return np.repeat(img, 3, axis=2)
    raise DatasetError(f"cannot convert {c} channels to {channels}")


def _decode(path):
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            if im.mode in ("L", "LA", "RGB", "RGBA"):
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                raise DatasetError(f"{path}: unsupported image mode {im.mode}")
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] in (2, 4):
        arr = arr[:, :, :-1]
    return arr


def _resize(img, size):
    if img.shape[:2] == (size, size):
        return img
    chans = [
        np.asarray(Image.fromarray(img[:, :, k].astype(np.float32), mode="F")
                   .resize((size, size), Image.BILINEAR), dtype=np.float64)
        for k in range(img.shape[2])
    ]
    return np.stack(chans, axis=2)


def load_image(path, image_size, channels):
    """Decode, convert channels, bilinearly resize; returns C x H x W float32 in [0, 1]."""
    img = _resize(to_channels(_decode(path), channels), image_size)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def load_images(paths, image_size, channels):
    if not paths:
        return np.zeros((0, channels, image_size, image_size), np.float32)
    return np.stack([load_image(p, image_size, channels) for p in paths])


def list_images(folder):
    folder = Path(folder)
    if not folder.is_dir():
        raise DatasetError(f"{folder} is not a directory")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"{folder} contains no images")
    return files


def load_folder(path, image_size, channels, batch_size=64):
    """Yield ``(names, batch)`` pairs over the images of a directory, in name order."""
    files = list_images(path)
    for i in range(0, len(files), batch_size):
        chunk = files[i:i + batch_size]
        yield [p.name for p in chunk], load_images(chunk, image_size, channels)


def load_split(manifest, split, image_size, channels, role=None):
    """Load the images of one manifest split; returns ``(entries, batch)``."""
    entries = manifest.select(split, role)
    batch = load_images([Path(manifest.root) / e.path for e in entries], image_size, channels)
    return entries, batch
