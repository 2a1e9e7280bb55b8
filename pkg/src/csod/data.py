"""Deterministic synthetic saliency data: textured backgrounds with 1-3
flat-colored shapes, exact masks, and morphological-gradient edge maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import read_image, write_image

MIN_SIZE = 16
FG_FRACTION = (0.05, 0.6)
PIXEL_NOISE = 0.02
BG_TEXTURE = 0.08  # amplitude of the background value noise
FG_MIN_DIST = 0.6  # min RGB distance between a shape color and the background mean
MANIFEST_NAME = "manifest.tsv"


@dataclass
class SampleRecord:
    image: np.ndarray  # (3, h, w)
    mask: np.ndarray  # (1, h, w), {0, 1}
    edge: np.ndarray  # (1, h, w), {0, 1}
    id: int = 0
    seed: int = 0


def sample_seed(base_seed, sample_id):
    """Independent per-sample seed derived from (base seed, id)."""
    return int(np.random.SeedSequence([int(base_seed), int(sample_id)]).generate_state(1, dtype=np.uint64)[0])


def _interp_matrix(coarse, size):
    pos = (np.arange(size) + 0.5) * (coarse - 1) / size
    lo = np.minimum(np.floor(pos).astype(int), coarse - 2)
    frac = pos - lo
    m = np.zeros((size, coarse))
    m[np.arange(size), lo] = 1.0 - frac
    m[np.arange(size), lo + 1] = frac
    return m


def value_noise(rng, size, coarse=5, channels=3):
    """Smooth noise in [-1, 1]: a coarse random grid bilinearly upsampled."""
    m = _interp_matrix(coarse, size)
    grid = rng.uniform(-1.0, 1.0, size=(channels, coarse, coarse))
    return np.einsum("ij,cjk,lk->cil", m, grid, m)


def _shape_mask(rng, size, yy, xx):
    kind = rng.integers(3)
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    r = rng.uniform(0.12, 0.3) * size
    angle = rng.uniform(0.0, np.pi)
    if kind == 0:  # ellipse
        a, b = r, r * rng.uniform(0.5, 1.0)
        u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == 1:  # rectangle
        a, b = r, r * rng.uniform(0.4, 1.0)
        u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    # triangle
    th = angle + np.array([0.0, 2.0, 4.0]) * np.pi / 3 + rng.uniform(-0.3, 0.3, size=3)
    px, py = cx + 1.2 * r * np.cos(th), cy + 1.2 * r * np.sin(th)
    inside_pos = np.ones_like(xx, dtype=bool)
    inside_neg = np.ones_like(xx, dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def _distinct_color(rng, reference, min_dist=FG_MIN_DIST):
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(c - reference) >= min_dist:
            return c


def generate_sample(seed, size, sample_id=0) -> SampleRecord:
    if size < MIN_SIZE:
        raise ValueError(f"sample size must be >= {MIN_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5

    bg_color = rng.uniform(0.3, 0.7, size=3)
    image = bg_color[:, None, None] + BG_TEXTURE * value_noise(rng, size)

    while True:
        shapes = [_shape_mask(rng, size, yy, xx) for _ in range(rng.integers(1, 4))]
        mask = np.logical_or.reduce(shapes)
        if FG_FRACTION[0] <= mask.mean() <= FG_FRACTION[1]:
            break

    for shape in shapes:
        color = _distinct_color(rng, bg_color)
        tex = color[:, None, None] + 0.05 * value_noise(rng, size)
        image = np.where(shape[None], tex, image)
    image = np.clip(image + rng.normal(0.0, PIXEL_NOISE, size=image.shape), 0.0, 1.0)

    mask = mask.astype(np.float64)[None]
    return SampleRecord(image, mask, edge_from_mask(mask), sample_id, seed)


def _morph(mask, reducer):
    h, w = mask.shape[-2:]
    padded = np.pad(mask, [(0, 0)] * (mask.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    windows = [padded[..., i:i + h, j:j + w] for i in range(3) for j in range(3)]
    return reducer(np.stack(windows), axis=0)


def dilate(mask):
    return _morph(mask, np.max)


def erode(mask):
    return _morph(mask, np.min)


def edge_from_mask(mask):
    """Morphological gradient (3x3 dilation minus erosion, replicate borders)."""
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("edge_from_mask needs a binary mask")
    return dilate(mask) - erode(mask)


# ---------------------------------------------------------------------------
# On-disk datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    size: int
    seed: int
    train_ids: list
    test_ids: list
    files: dict = field(default_factory=dict)  # id -> (img, msk, edg) names

    @property
    def count(self):
        return len(self.train_ids) + len(self.test_ids)

    def ids(self, split):
        if split == "train":
            return self.train_ids
        if split == "test":
            return self.test_ids
        raise ValueError(f"unknown split {split!r}; expected 'train' or 'test'")

    def paths(self, sample_id):
        return tuple(self.root / name for name in self.files[sample_id])


def _names(sample_id):
    return f"img_{sample_id:05d}.ppm", f"msk_{sample_id:05d}.pgm", f"edg_{sample_id:05d}.pgm"


def generate_dataset(seed, size, train_count, test_count, root) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root, size, seed, list(range(train_count)),
                               list(range(train_count, train_count + test_count)))
    lines = [f"# seed={seed} size={size} train={train_count} test={test_count}"]
    for sid in manifest.train_ids + manifest.test_ids:
        rec = generate_sample(sample_seed(seed, sid), size, sid)
        names = _names(sid)
        for name, tensor in zip(names, (rec.image, rec.mask, rec.edge)):
            write_image(root / name, tensor)
        manifest.files[sid] = names
        lines.append("\t".join([str(sid), *names]))
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    text = (root / MANIFEST_NAME).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{root / MANIFEST_NAME}: missing header line")
    meta = dict(item.split("=", 1) for item in lines[0][1:].split())
    train_count, test_count = int(meta["train"]), int(meta["test"])
    files = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        sid, img, msk, edg = line.split("\t")
        files[int(sid)] = (img, msk, edg)
    ids = sorted(files)
    if ids != list(range(train_count + test_count)):
        raise ValueError(f"{root / MANIFEST_NAME}: ids do not match header counts")
    return DatasetManifest(root, int(meta["size"]), int(meta["seed"]), ids[:train_count], ids[train_count:], files)


def load_sample(manifest: DatasetManifest, sample_id) -> SampleRecord:
    img, msk, edg = (read_image(p)[0] for p in manifest.paths(sample_id))
    return SampleRecord(img, msk, edg, sample_id, sample_seed(manifest.seed, sample_id))


def load_split(manifest: DatasetManifest, split):
    return [load_sample(manifest, sid) for sid in manifest.ids(split)]
