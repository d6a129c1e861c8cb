"""Procedural multi-domain image sets, PNG I/O and batching."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

SHAPES = ("disk", "square", "triangle")
TEXTURES = ("plain", "stripes", "dots")

# shared palette: colour is per-image content, not a domain cue
PALETTE = ((0.85, 0.25, 0.2), (0.2, 0.55, 0.85), (0.95, 0.8, 0.2))
BACKGROUND = (0.5, 0.5, 0.5)


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    shape_family: str
    texture: str
    palette: tuple = PALETTE
    position_jitter: float = 0.1
    scale_range: tuple = (0.22, 0.3)
    rotation_range: float = np.pi

    def __post_init__(self):
        if self.shape_family not in SHAPES:
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")


def default_domains(n=3):
    base = [
        DomainSpec("disk", "stripes"),
        DomainSpec("square", "dots"),
        DomainSpec("triangle", "plain"),
    ]
    if n <= 3:
        return base[:n]
    extra = [DomainSpec(s, t) for s in SHAPES for t in TEXTURES]
    extra = [d for d in extra if d not in base]
    return base + extra[: n - 3]


def _sdf(family, px, py, radius):
    if family == "disk":
        return np.hypot(px, py) - radius
    if family == "square":
        half = radius * 0.85
        qx, qy = np.abs(px) - half, np.abs(py) - half
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        return outside + np.minimum(np.maximum(qx, qy), 0)
    # equilateral triangle centred on its centroid, area close to the disk's
    r = radius * 1.15
    k = np.sqrt(3.0)
    qx = np.abs(px) - r
    qy = py + r / k
    flip = qx + k * qy > 0
    nx = np.where(flip, (qx - k * qy) / 2, qx)
    ny = np.where(flip, (-k * qx - qy) / 2, qy)
    nx = nx - np.clip(nx, -2 * r, 0)
    return -np.hypot(nx, ny) * np.sign(ny)


def generate_image(spec, size, seed, jitter=True):
    """Anti-aliased (3, size, size) float32 image in [-1, 1]."""
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    color = np.array(spec.palette[rng.integers(len(spec.palette)) if jitter else 0], dtype=np.float64)
    if jitter:
        color = np.clip(color + rng.uniform(-0.08, 0.08, 3), 0, 1)
        cx, cy = rng.uniform(-spec.position_jitter, spec.position_jitter, 2)
        radius = rng.uniform(*spec.scale_range)
        theta = rng.uniform(-spec.rotation_range, spec.rotation_range)
        phase = rng.uniform(0, 1, 2)
    else:
        cx = cy = 0.0
        radius = float(np.mean(spec.scale_range))
        theta = 0.0
        phase = np.zeros(2)
    # pixel centres in [-0.5, 0.5], y pointing down
    coords = (np.arange(size) + 0.5) / size - 0.5
    gx, gy = np.meshgrid(coords, coords)
    dx, dy = gx - cx, gy - cy
    c, s = np.cos(theta), np.sin(theta)
    px, py = c * dx + s * dy, -s * dx + c * dy
    aa = 1.0 / size
    dist = _sdf(spec.shape_family, px, py, radius)
    cover = np.clip(0.5 - dist / aa, 0.0, 1.0)
    fg = np.broadcast_to(color[:, None, None], (3, size, size)).copy()
    if spec.texture == "stripes":
        period = 0.16
        wave = np.sin(2 * np.pi * (px / period + phase[0]))
        band = np.clip(0.5 + wave / (2 * np.pi * aa / period), 0, 1)
        fg = fg * (1 - 0.6 * band)
    elif spec.texture == "dots":
        period = 0.14
        ux = (px / period + phase[0]) % 1.0 - 0.5
        uy = (py / period + phase[1]) % 1.0 - 0.5
        dot = np.clip(0.5 - (np.hypot(ux, uy) * period - 0.035) / aa, 0, 1)
        fg = fg * (1 - dot) + dot * 0.05
    bg = np.array(BACKGROUND)[:, None, None]
    img = cover * fg + (1 - cover) * bg
    return (img * 2.0 - 1.0).astype(np.float32)


class SyntheticDataset:
    """A fixed pool of ``per_domain`` procedurally drawn images per domain.

    Image ``j`` of domain ``d`` is drawn with seed (seed, d, j), so pools
    with different seeds are disjoint.
    """

    def __init__(self, domains=None, size=32, per_domain=256, seed=0):
        self.domains = list(domains) if domains is not None else default_domains()
        self.size = size
        self.per_domain = per_domain
        self.seed = seed
        self.images = np.stack([
            np.stack([generate_image(spec, size, image_seed(seed, d, j))
                      for j in range(per_domain)])
            for d, spec in enumerate(self.domains)
        ])

    @property
    def num_domains(self):
        return len(self.domains)

    def all(self):
        """(images (N*K, 3, S, S), labels) in domain-major order."""
        n, k = self.images.shape[:2]
        return self.images.reshape((n * k,) + self.images.shape[2:]), np.repeat(np.arange(n), k)

    def domain(self, d):
        return self.images[d]


def image_seed(seed, domain, index):
    base = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [int(domain), int(index)]


def make_batch(dataset, B=16, seed=0):
    """Uniform over domains, then uniform within the domain pool."""
    if B < 2:
        raise ValueError("batch size must be >= 2")
    rng = np.random.default_rng(seed)
    src = rng.integers(dataset.num_domains, size=B)
    idx = rng.integers(dataset.per_domain, size=B)
    return dataset.images[src, idx].copy(), src.astype(np.int64)


def permute_targets(src, seed):
    """Reorder ``src`` by a uniformly random permutation of batch positions."""
    src = np.asarray(src, dtype=np.int64)
    perm = np.random.default_rng(seed).permutation(len(src))
    return src[perm], perm


# ---------------------------------------------------------------------------
# PNG


def to_bytes(image):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {arr.shape}")
    if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [-1, 1]")
    return np.round((np.clip(arr, -1, 1) + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def save_png(image, path):
    Image.fromarray(to_bytes(image)).save(path, format="PNG")


def load_png(path):
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: not a PNG file ({im.format})")
            if im.mode not in ("RGB", "L", "P"):
                raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    return (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# on-disk datasets

MANIFEST = "manifest.tsv"


def write_dataset(out_dir, num_domains=3, per_domain=10, size=32, seed=0):
    """Write ``per_domain`` PNGs per domain plus a tab-separated manifest."""
    os.makedirs(out_dir, exist_ok=True)
    domains = default_domains(num_domains)
    lines = []
    index = 0
    for d, spec in enumerate(domains):
        for j in range(per_domain):
            s = seed * 1_000_003 + d * 100_003 + j
            save_png(generate_image(spec, size, s), os.path.join(out_dir, f"{index:06d}.png"))
            lines.append(f"{index}\t{d}\t{s}\n")
            index += 1
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        fh.writelines(lines)
    return index


def read_dataset(data_dir):
    """Load (images, labels) listed in a dataset directory's manifest."""
    path = os.path.join(data_dir, MANIFEST)
    images, labels = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected index<TAB>domain<TAB>seed")
            index, domain = int(parts[0]), int(parts[1])
            images.append(load_png(os.path.join(data_dir, f"{index:06d}.png")))
            labels.append(domain)
    if not images:
        raise ValueError(f"{path}: empty manifest")
    return np.stack(images), np.asarray(labels, dtype=np.int64)
