"""Synthetic small-target and crack datasets, and manifest-based loading of image/mask pairs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataLoadError, ParameterError

log = logging.getLogger(__name__)

KINDS = ("targets", "cracks")
SPLITS = ("train", "val", "test")
SPLIT_RATIO = (0.6, 0.2, 0.2)
MASK_FRACTION = 0.3  # mask = blob pixels above this fraction of the blob's peak


def _check_range(name: str, rng: tuple, low: float = -math.inf) -> tuple:
    if len(rng) != 2 or rng[0] > rng[1] or rng[0] < low:
        raise ParameterError(f"{name} must be an ordered (min, max) pair >= {low}, got {rng}")
    return tuple(rng)


@dataclass
class SyntheticConfig:
    kind: str = "targets"
    size: tuple = (64, 64)
    count: int = 20
    seed: int = 0
    divisor: int = 4  # images must be divisible by 2^(levels-1) of the intended network
    # targets
    targets_per_image: tuple = (1, 3)
    amplitude: tuple = (0.15, 0.4)
    psf_sigma: tuple = (0.5, 1.5)
    # background
    background_level: float = 0.3
    noise_std: float = 0.03
    noise_length: float = 1.0
    gradient_amplitude: float = 0.1
    clutter_count: tuple = (0, 3)
    clutter_amplitude: float = 0.1
    # cracks
    cracks_per_image: tuple = (1, 2)
    crack_width: tuple = (1.0, 3.0)
    crack_contrast: tuple = (0.15, 0.35)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.size = tuple(int(s) for s in self.size)
        if len(self.size) != 2 or min(self.size) < 8:
            raise ParameterError(f"size must be (h, w) with both >= 8, got {self.size}")
        if self.size[0] % self.divisor or self.size[1] % self.divisor:
            raise ParameterError(f"size {self.size} is not divisible by {self.divisor}")
        if self.count < 1:
            raise ParameterError(f"count must be >= 1, got {self.count}")
        self.targets_per_image = _check_range("targets_per_image", self.targets_per_image, 0)
        self.amplitude = _check_range("amplitude", self.amplitude, 0)
        self.psf_sigma = _check_range("psf_sigma", self.psf_sigma, 1e-3)
        self.clutter_count = _check_range("clutter_count", self.clutter_count, 0)
        self.cracks_per_image = _check_range("cracks_per_image", self.cracks_per_image, 0)
        self.crack_width = _check_range("crack_width", self.crack_width, 0.5)
        self.crack_contrast = _check_range("crack_contrast", self.crack_contrast, 0)
        if self.noise_std < 0 or self.noise_length < 0:
            raise ParameterError("noise_std and noise_length must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray  # (h, w) float64 in [0, 1]
    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    split: str = "train"
    name: str = ""


@dataclass
class Dataset:
    """In-memory image/mask pairs grouped by split."""

    samples: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def val(self) -> list:
        return self.split("val")

    @property
    def test(self) -> list:
        return self.split("test")

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _background(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.size
    noise = rng.standard_normal((h, w))
    if cfg.noise_length > 0:
        noise = ndimage.gaussian_filter(noise, cfg.noise_length, mode="reflect")
    std = noise.std()
    img = cfg.background_level + (cfg.noise_std * noise / std if std > 0 else 0.0)
    if cfg.gradient_amplitude:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(theta) * (xx / w - 0.5) + np.sin(theta) * (yy / h - 0.5))
        img = img + cfg.gradient_amplitude * ramp
    n_clutter = rng.integers(cfg.clutter_count[0], cfg.clutter_count[1] + 1)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_clutter):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(3.0, 6.0)
        amp = cfg.clutter_amplitude * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    return img


def gaussian_blob(shape: tuple, center: tuple, sigma: float, amplitude: float) -> tuple[np.ndarray, np.ndarray]:
    """Sampled blob and its mask (pixels above 30% of the continuous peak ``amplitude``)."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    blob = amplitude * np.exp(-((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2 * sigma**2))
    mask = blob > MASK_FRACTION * amplitude if amplitude > 0 else np.zeros(shape, dtype=bool)
    return blob, mask


def _targets(cfg: SyntheticConfig, rng: np.random.Generator, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.size
    mask = np.zeros((h, w), dtype=bool)
    n = rng.integers(cfg.targets_per_image[0], cfg.targets_per_image[1] + 1)
    centers = []
    margin = 4.0
    for _ in range(n):
        for _attempt in range(100):
            c = (rng.uniform(margin, h - 1 - margin), rng.uniform(margin, w - 1 - margin))
            if all(math.hypot(c[0] - o[0], c[1] - o[1]) >= 8.0 for o in centers):
                break
        else:
            continue
        centers.append(c)
        blob, m = gaussian_blob((h, w), c, rng.uniform(*cfg.psf_sigma), rng.uniform(*cfg.amplitude))
        img = img + blob
        mask |= m
    return img, mask


def _segment_distance(yy, xx, p, q) -> np.ndarray:
    d = q - p
    denom = float(d @ d)
    t = np.zeros_like(yy) if denom == 0 else np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / denom, 0, 1)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def _cracks(cfg: SyntheticConfig, rng: np.random.Generator, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.size
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    mask = np.zeros((h, w), dtype=bool)
    n = rng.integers(cfg.cracks_per_image[0], cfg.cracks_per_image[1] + 1)
    for _ in range(n):
        width = rng.uniform(*cfg.crack_width)
        contrast = rng.uniform(*cfg.crack_contrast)
        point = np.array([rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)])
        heading = rng.uniform(0, 2 * np.pi)
        dist = np.full((h, w), np.inf)
        for _step in range(int(rng.integers(15, 40))):
            heading += rng.normal(0.0, 0.35)
            nxt = point + 2.0 * np.array([np.sin(heading), np.cos(heading)])
            dist = np.minimum(dist, _segment_distance(yy, xx, point, nxt))
            point = nxt
        stroke = dist <= max(width / 2.0, 0.75)
        img = img - contrast * stroke
        mask |= stroke
    return img, mask


def synthesize(cfg: SyntheticConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Image (clipped to [0, 1]) and binary mask for one entry; deterministic in (seed, index)."""
    rng = _entry_rng(cfg.seed, index)
    img = _background(cfg, rng)
    img, mask = (_targets if cfg.kind == "targets" else _cracks)(cfg, rng, img)
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def split_assignment(count: int, seed: int) -> list:
    """60:20:20 split of ``count`` entries, shuffled deterministically."""
    n_train = int(round(SPLIT_RATIO[0] * count))
    n_val = int(round(SPLIT_RATIO[1] * count))
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (count - n_train - n_val))
    perm = np.random.default_rng(np.random.SeedSequence([seed, 2**31 - 1])).permutation(count)
    out = np.empty(count, dtype=object)
    out[perm] = labels
    return list(out)


def generate_samples(cfg: SyntheticConfig) -> Dataset:
    splits = split_assignment(cfg.count, cfg.seed)
    samples = []
    for i in range(cfg.count):
        img, mask = synthesize(cfg, i)
        samples.append(Sample(img, mask, splits[i], f"{cfg.kind}_{i:05d}"))
    return Dataset(samples)


def quantize16(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)


def generate(cfg: SyntheticConfig, out_dir) -> Path:
    """Write 16-bit PNG images, 8-bit 0/255 PNG masks and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    dataset = generate_samples(cfg)
    entries = []
    for s in dataset.samples:
        img_rel, mask_rel = f"images/{s.name}.png", f"masks/{s.name}.png"
        Image.fromarray(quantize16(s.image)).save(out / img_rel)
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(out / mask_rel)
        entries.append({"image": img_rel, "mask": mask_rel, "split": s.split})
    manifest = {"entries": entries, "size": list(cfg.size), "config": cfg.to_dict()}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d %s samples to %s", cfg.count, cfg.kind, out)
    return path


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: Path
    mask: Path
    split: str


@dataclass
class DatasetManifest:
    entries: list
    size: Optional[tuple] = None
    root: Optional[Path] = None


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataLoadError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise DataLoadError(f"manifest {path} has no 'entries' list")
    entries = []
    for i, e in enumerate(doc["entries"]):
        try:
            split = e.get("split", "train")
            if split not in SPLITS:
                raise DataLoadError(f"manifest entry {i}: unknown split {split!r}")
            entries.append(ManifestEntry(path.parent / e["image"], path.parent / e["mask"], split))
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataLoadError(f"manifest entry {i} is malformed: {e!r}") from exc
    size = tuple(doc["size"]) if "size" in doc else None
    return DatasetManifest(entries, size, path.parent)


def _read_pgm(path: Path) -> Optional[tuple[np.ndarray, int]]:
    """Binary (P5) PGM as raw samples plus maxval; None for any other file type.

    Decoded here rather than through Pillow because Pillow releases differ in
    whether they rescale samples with a maxval below 255/65535.
    """
    blob = path.read_bytes()
    if not blob.startswith(b"P5"):
        return None
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(blob[start:pos]))
    pos += 1  # the single whitespace byte that ends the header
    w, h, maxval = tokens
    if not 0 < maxval < 65536:
        raise DataLoadError(f"{path}: PGM maxval {maxval} out of range")
    dtype = ">u1" if maxval < 256 else ">u2"
    if len(blob) - pos < w * h * np.dtype(dtype).itemsize:
        raise DataLoadError(f"{path}: PGM pixel data is truncated")
    data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def read_gray(path) -> tuple[np.ndarray, int]:
    """Raw pixel array and the full-scale value used for normalization."""
    path = Path(path)
    try:
        pgm = _read_pgm(path)
    except ValueError as exc:
        raise DataLoadError(f"{path}: malformed PGM header: {exc}") from exc
    if pgm is not None:
        return pgm
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if arr.ndim != 2:
        raise DataLoadError(f"{path}: expected a single-channel image, got mode {mode}")
    return arr, 255 if mode in ("L", "P", "1") else 65535


def load_pair(entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
    """Image normalized to [0, 1] and mask in {0, 1}; errors name the offending files."""
    for p in (entry.image, entry.mask):
        if not Path(p).exists():
            raise DataLoadError(f"missing file {p}")
    try:
        raw, full = read_gray(entry.image)
        mraw, mfull = read_gray(entry.mask)
    except OSError as exc:
        raise DataLoadError(f"cannot decode {entry.image} / {entry.mask}: {exc}") from exc
    if raw.shape != mraw.shape:
        raise DataLoadError(f"dimension mismatch: {entry.image} is {raw.shape}, {entry.mask} is {mraw.shape}")
    values = np.unique(mraw)
    allowed = {0, 1, mfull}
    bad = [int(v) for v in values if int(v) not in allowed]
    if bad:
        raise DataLoadError(f"mask {entry.mask} is not binary: found values {bad[:5]}")
    image = raw.astype(np.float64) / float(full)
    mask = (mraw > 0).astype(np.uint8)
    return image, mask


def load_dataset(manifest_path) -> Dataset:
    manifest = load_manifest(manifest_path)
    samples = []
    for e in manifest.entries:
        img, mask = load_pair(e)
        samples.append(Sample(img, mask, e.split, Path(e.image).stem))
    return Dataset(samples)
