"""Seeded synthetic segmentation corpus plus dataset IO.

Scenes are 1-3 shapes (ellipse, rectangle, blob) on a colored background;
a configurable fraction of images is rendered at deliberately low contrast
so the corpus contains genuinely ambiguous pixels.  Images go out as binary
PPM (P6), masks as binary PGM (P5) with values exactly {0, 255}.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .rng import RngStream

MANIFEST_MAGIC = "#ebm-seg-ssl-manifest v1"
SHAPE_KINDS = ("ellipse", "rectangle", "blob")


class DataError(Exception):
    pass


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    kinds: tuple = SHAPE_KINDS
    noise_amplitude: float = 0.03
    low_contrast_fraction: float = 0.25
    low_contrast_delta: float = 0.08

    def __post_init__(self):
        if self.size % 16:
            raise ValueError("image size must be divisible by 16")
        if not 0.0 <= self.low_contrast_fraction <= 1.0:
            raise ValueError("low_contrast_fraction must be in [0,1]")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: str
    mask_path: str
    split: str  # labeled | unlabeled | test


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    seed: int
    ratio: str
    root: str = "."

    def by_split(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def ids(self) -> list:
        return [e.image_id for e in self.entries]

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)


# ---------------------------------------------------------------------------
# PPM / PGM IO

def write_ppm(path: str, rgb: np.ndarray) -> None:
    """8-bit binary PPM from a [H,W,3] float image in [0,1]."""
    q = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = q.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def write_pgm(path: str, gray: np.ndarray) -> None:
    """8-bit binary PGM from a [H,W] uint8 array."""
    q = gray.astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def _read_netpbm(path: str, magic: bytes, channels: int) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not data.startswith(magic):
        raise DataError(f"{path}: bad magic, expected {magic.decode()}")
    # header: magic, width, height, maxval as whitespace-separated tokens
    pos, tokens = len(magic), []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit files supported")
    need = w * h * channels
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise DataError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm(path: str) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path: str) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# ---------------------------------------------------------------------------
# scene synthesis

def _shape_mask(kind: str, size: int, g: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = g.uniform(0.2, 0.8) * size
    cy = g.uniform(0.2, 0.8) * size
    theta = g.uniform(0.0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    a = g.uniform(0.09, 0.22) * size
    b = g.uniform(0.09, 0.22) * size
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if kind == "blob":
        ang = np.arctan2(v, u)
        r = np.hypot(u / a, v / b)
        wobble = 1.0
        for k in range(2, 5):
            wobble = wobble + g.uniform(-0.18, 0.18) * np.cos(
                k * ang + g.uniform(0.0, 2 * np.pi))
        return r <= np.maximum(wobble, 0.3)
    raise ValueError(f"unknown shape kind: {kind}")


def render_scene(spec: SceneSpec, g: np.random.Generator
                 ) -> tuple[np.ndarray, np.ndarray]:
    """One (rgb [H,W,3] in [0,1], binary mask [H,W] in {0,1}) pair."""
    size = spec.size
    n_shapes = int(g.integers(spec.min_shapes, spec.max_shapes + 1))
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_shapes):
        kind = spec.kinds[int(g.integers(len(spec.kinds)))]
        mask |= _shape_mask(kind, size, g)

    bg = g.uniform(0.15, 0.85, size=3)
    if g.uniform() < spec.low_contrast_fraction:
        delta = g.uniform(-spec.low_contrast_delta, spec.low_contrast_delta,
                          size=3)
        fg = np.clip(bg + delta, 0.0, 1.0)
    else:
        fg = g.uniform(0.0, 1.0, size=3)
        # push foreground away from the background color
        far = np.abs(fg - bg) < 0.25
        fg[far] = np.clip(bg[far] + np.sign(fg[far] - bg[far] + 1e-9) * 0.3,
                          0.0, 1.0)
    # mild vertical shading so the background is not constant
    shade = 1.0 + 0.1 * (np.linspace(-1, 1, size))[:, None]
    rgb = np.empty((size, size, 3))
    for c in range(3):
        rgb[:, :, c] = np.where(mask, fg[c], bg[c] * shade)
    rgb += g.normal(0.0, spec.noise_amplitude, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0), mask.astype(np.float64)


# ---------------------------------------------------------------------------
# corpus generation and manifests

def generate_corpus(spec: SceneSpec, out_dir: str, n_train: int, n_test: int,
                    seed: int) -> DatasetManifest:
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    stream = RngStream(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    entries = []
    for i in range(n_train + n_test):
        split = "labeled" if i < n_train else "test"
        image_id = f"{'train' if i < n_train else 'test'}_{i:05d}"
        g = stream.substream("scene", i)
        rgb, mask = render_scene(spec, g)
        image_path = os.path.join("images", image_id + ".ppm")
        mask_path = os.path.join("masks", image_id + ".pgm")
        write_ppm(os.path.join(out_dir, image_path), rgb)
        write_pgm(os.path.join(out_dir, mask_path),
                  (mask * 255).astype(np.uint8))
        entries.append(ManifestEntry(image_id, image_path, mask_path, split))
    manifest = DatasetManifest(tuple(entries), seed=seed, ratio="1/1",
                               root=out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    lines = [f"{MANIFEST_MAGIC} seed={manifest.seed} ratio={manifest.ratio}"]
    for e in manifest.entries:
        lines.append(f"{e.image_id}\t{e.image_path}\t{e.mask_path}\t{e.split}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_manifest(path: str) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or not lines[0].startswith(MANIFEST_MAGIC):
        raise DataError(f"{path}: not a corpus manifest")
    header = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    entries = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}: malformed record {ln!r}")
        entries.append(ManifestEntry(*parts))
    return DatasetManifest(tuple(entries), seed=int(header["seed"]),
                           ratio=header.get("ratio", "1/1"),
                           root=os.path.dirname(os.path.abspath(path)))


def parse_ratio(text) -> float:
    value = float(Fraction(str(text)))
    if not 0.0 < value <= 1.0:
        raise ValueError(f"labeled ratio {text} outside (0, 1]")
    return value


def split_labeled(manifest: DatasetManifest, ratio, split_seed: int
                  ) -> DatasetManifest:
    """Re-partition the train images into labeled/unlabeled subsets."""
    frac = parse_ratio(ratio)
    train = [e for e in manifest.entries if e.split in ("labeled", "unlabeled")]
    test = [e for e in manifest.entries if e.split == "test"]
    n_labeled = max(1, int(len(train) * frac))
    g = RngStream(split_seed).substream("labeled-split")
    order = g.permutation(len(train))
    chosen = set(order[:n_labeled].tolist())
    new_train = [
        ManifestEntry(e.image_id, e.image_path, e.mask_path,
                      "labeled" if i in chosen else "unlabeled")
        for i, e in enumerate(train)
    ]
    return DatasetManifest(tuple(new_train + test), seed=manifest.seed,
                           ratio=str(ratio), root=manifest.root)


def load_example(manifest: DatasetManifest, image_id: str
                 ) -> tuple[np.ndarray, np.ndarray]:
    """(image [3,H,W] in [0,1], mask [1,H,W] in {0,1})."""
    e = manifest.entry(image_id)
    rgb = read_ppm(os.path.join(manifest.root, e.image_path))
    mask = read_pgm(os.path.join(manifest.root, e.mask_path))
    if rgb.shape[:2] != mask.shape:
        raise DataError(f"{image_id}: image/mask size mismatch")
    bad = ~np.isin(mask, (0, 255))
    if bad.any():
        raise DataError(f"{image_id}: mask is not binary")
    x = rgb.astype(np.float64).transpose(2, 0, 1) / 255.0
    y = (mask == 255).astype(np.float64)[None]
    return x, y
