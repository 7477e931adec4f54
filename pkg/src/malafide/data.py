"""Synthetic face-like corpus, stratified partitioning and on-disk layout.

Bona fide images are procedural compositions (gradient background, elliptical
face, eyebrows, eyes, mouth, mild sensor noise). Each spoof is one bona fide
image passed through a synthetic manipulation that leaves a localized artifact:

``region_swap``
    the eye band is pasted from another bona fide image, bordered by a
    2-pixel darkened seam.
``texture_noise``
    high-frequency noise added inside the face ellipse.
``color_shift``
    a channel-wise affine colour change inside the inner face region.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pnm import load_image, quantize, save_image

ATTACKS = ("region_swap", "texture_noise", "color_shift")
BONA = "bona_fide"
SPOOF = "spoof"


@dataclass
class Corpus:
    """Bona fide images plus one spoof per bona fide image and attack.

    ``spoofs[a][i]`` is derived from ``bona_fide[i]``. ``eye_bands[i]`` holds
    the ``[start, stop)`` rows of the eye band of bona fide image ``i``.
    """

    bona_fide: np.ndarray
    spoofs: dict[str, np.ndarray]
    seed: int
    eye_bands: np.ndarray | None = None
    attack_ids: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        self.attack_ids = tuple(self.spoofs)
        shape = self.bona_fide.shape
        for a, imgs in self.spoofs.items():
            if imgs.shape != shape:
                raise ValueError(f"spoofs for {a!r} have shape {imgs.shape}, expected {shape}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.bona_fide.shape[1:])

    @property
    def n_bona(self) -> int:
        return len(self.bona_fide)

    def __len__(self) -> int:
        return self.n_bona * (1 + len(self.spoofs))

    def strata(self) -> list[str]:
        """Stratum key of every global index: bona fide first, then each attack."""
        keys = [BONA] * self.n_bona
        for a in self.attack_ids:
            keys += [a] * self.n_bona
        return keys

    def image(self, index: int) -> np.ndarray:
        block, i = divmod(int(index), self.n_bona)
        if block == 0:
            return self.bona_fide[i]
        return self.spoofs[self.attack_ids[block - 1]][i]

    def select(self, indices) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Split a set of global indices into bona fide images and per-attack spoofs."""
        idx = np.sort(np.asarray(indices, dtype=np.int64))
        block, local = np.divmod(idx, self.n_bona)
        bona = self.bona_fide[local[block == 0]]
        spoofs = {a: self.spoofs[a][local[block == k + 1]] for k, a in enumerate(self.attack_ids)}
        return bona, spoofs

    def subset(self, attack_ids) -> "Corpus":
        unknown = [a for a in attack_ids if a not in self.spoofs]
        if unknown:
            raise ValueError(f"attacks not in corpus: {unknown}")
        return Corpus(self.bona_fide, {a: self.spoofs[a] for a in attack_ids}, self.seed, self.eye_bands)


@dataclass(frozen=True)
class Partition:
    part1: np.ndarray
    part2: np.ndarray


# -- procedural generation -------------------------------------------------


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2


def _soft_mask(d, edge=0.08):
    # d is the squared normalized radius; 1 inside, 0 outside, linear rim
    return np.clip((1.0 + edge - d) / (2 * edge), 0.0, 1.0)


def _draw_face(rng: np.random.Generator, H: int, W: int):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.empty((H, W, 3))

    c0, c1 = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * (xx / W - 0.5) + np.sin(theta) * (yy / H - 0.5)) + 0.5
    t = np.clip(t, 0, 1)[..., None]
    img[:] = (1 - t) * c0 + t * c1

    cy = H * rng.uniform(0.47, 0.53)
    cx = W * rng.uniform(0.46, 0.54)
    ry = H * rng.uniform(0.36, 0.42)
    rx = W * rng.uniform(0.27, 0.33)
    palette = np.array([[0.93, 0.76, 0.64], [0.80, 0.60, 0.45], [0.62, 0.44, 0.31], [0.45, 0.31, 0.22]])
    skin = palette[rng.integers(len(palette))] + rng.uniform(-0.04, 0.04, 3)
    face_d = _ellipse(yy, xx, cy, cx, ry, rx)
    face = _soft_mask(face_d)[..., None]
    shade = 1.0 + 0.12 * ((yy - cy) / ry)[..., None] * -1.0
    img = (1 - face) * img + face * np.clip(skin * shade, 0, 1)

    eye_y = cy - ry * rng.uniform(0.22, 0.30)
    eye_dx = rx * rng.uniform(0.38, 0.48)
    eye_r = W * rng.uniform(0.035, 0.05)
    iris = rng.uniform(0.05, 0.35, 3)
    brow = skin * rng.uniform(0.2, 0.4)
    brow_y = eye_y - eye_r * rng.uniform(1.6, 2.2)
    for side in (-1, 1):
        ex = cx + side * eye_dx
        white = _soft_mask(_ellipse(yy, xx, eye_y, ex, eye_r * 0.75, eye_r * 1.3), 0.2)[..., None]
        img = (1 - white) * img + white * 0.92
        pupil = _soft_mask(_ellipse(yy, xx, eye_y, ex, eye_r * 0.6, eye_r * 0.6), 0.2)[..., None]
        img = (1 - pupil) * img + pupil * iris
        b = _soft_mask(_ellipse(yy, xx, brow_y, ex, eye_r * 0.35, eye_r * 1.6), 0.3)[..., None]
        img = (1 - b) * img + b * brow

    mouth_y = cy + ry * rng.uniform(0.45, 0.55)
    lips = np.array([0.65, 0.2, 0.25]) + rng.uniform(-0.08, 0.08, 3)
    m = _soft_mask(_ellipse(yy, xx, mouth_y, cx, H * rng.uniform(0.025, 0.04), rx * rng.uniform(0.3, 0.45)), 0.2)
    img = (1 - m[..., None]) * img + m[..., None] * lips

    img = np.clip(img + rng.normal(0.0, 0.01, img.shape), 0.0, 1.0)
    top = int(np.floor(brow_y - eye_r * 0.8))
    bottom = int(np.ceil(eye_y + eye_r * 1.4))
    band = (max(top, 0), min(bottom, H))
    return img, (cy, cx, ry, rx), band


def _region_swap(img, donor, geom, band, rng):
    cy, cx, ry, rx = geom
    H, W, _ = img.shape
    y0, y1 = band
    x0, x1 = max(int(cx - rx), 0), min(int(np.ceil(cx + rx)), W)
    # shift the donor band vertically so the pasted features misalign
    shift = int(rng.integers(2, 5)) * (1 if rng.random() < 0.5 else -1)
    src = np.roll(donor, shift, axis=0)
    out = img.copy()
    out[y0:y1, x0:x1] = src[y0:y1, x0:x1]
    seam = np.zeros((H, W), dtype=bool)
    seam[y0 : y0 + 2, x0:x1] = True
    seam[y1 - 2 : y1, x0:x1] = True
    seam[y0:y1, x0 : x0 + 2] = True
    seam[y0:y1, x1 - 2 : x1] = True
    out[seam] = 0.5 * (img[seam] + src[seam]) * 0.8
    return out


def _texture_noise(img, geom, rng):
    cy, cx, ry, rx = geom
    H, W, _ = img.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    inside = (_ellipse(yy, xx, cy, cx, ry, rx) <= 0.85)[..., None]
    noise = rng.normal(0.0, 0.07, (H, W, 1)) + rng.normal(0.0, 0.02, (H, W, 3))
    return np.clip(img + inside * noise, 0.0, 1.0)


def _color_shift(img, geom, rng):
    cy, cx, ry, rx = geom
    H, W, _ = img.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    inside = (_ellipse(yy, xx, cy, cx, ry * 0.82, rx * 0.82) <= 1.0)[..., None]
    gain = rng.uniform(0.8, 1.15, 3)
    # keep the offset off the skin-tone axis so it changes hue, not just brightness
    tone = np.median(img[inside[..., 0]], axis=0)
    tone /= np.linalg.norm(tone)
    offset = rng.uniform(-1.0, 1.0, 3)
    offset -= tone * np.dot(offset, tone)
    offset *= rng.uniform(0.2, 0.3) / np.linalg.norm(offset)
    return np.clip(np.where(inside, img * gain + offset, img), 0.0, 1.0)


def generate_corpus(seed: int, n_bona: int = 200, attack_ids=ATTACKS, height: int = 64, width: int = 64) -> Corpus:
    """Deterministically generate ``n_bona`` faces and one spoof per face and attack."""
    attack_ids = tuple(attack_ids)
    unknown = [a for a in attack_ids if a not in ATTACKS]
    if unknown:
        raise ValueError(f"unknown attack ids {unknown}; known: {list(ATTACKS)}")
    if len(set(attack_ids)) != len(attack_ids):
        raise ValueError("duplicate attack ids")
    if n_bona < 4:
        raise ValueError("n_bona must be at least 4")
    if height < 32 or width < 32:
        raise ValueError("height and width must be at least 32")

    face_rng = np.random.default_rng([seed, 0])
    bona = np.empty((n_bona, height, width, 3))
    geoms, bands = [], []
    for i in range(n_bona):
        bona[i], g, b = _draw_face(face_rng, height, width)
        geoms.append(g)
        bands.append(b)

    spoofs = {}
    for a in ATTACKS:
        # every attack gets its own stream so subsets of attacks agree with the full corpus
        rng = np.random.default_rng([seed, 1 + ATTACKS.index(a)])
        out = np.empty_like(bona)
        for i in range(n_bona):
            if a == "region_swap":
                donor = (i + 1 + int(rng.integers(n_bona - 1))) % n_bona
                out[i] = _region_swap(bona[i], bona[donor], geoms[i], bands[i], rng)
            elif a == "texture_noise":
                out[i] = _texture_noise(bona[i], geoms[i], rng)
            else:
                out[i] = _color_shift(bona[i], geoms[i], rng)
        if a in attack_ids:
            spoofs[a] = out
    # store exactly what the 8-bit files hold so disk and memory agree
    spoofs = {a: quantize(spoofs[a]) / 255.0 for a in attack_ids}
    return Corpus(quantize(bona) / 255.0, spoofs, seed, np.array(bands, dtype=np.int64))


# -- partitioning ----------------------------------------------------------


def stratified_split(strata, ratio: float, seed: int) -> Partition:
    """Shuffle each stratum with a seeded PRNG and cut it at ``round(ratio * n)``."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    strata = list(strata)
    rng = np.random.default_rng(seed)
    part1, part2 = [], []
    for key in dict.fromkeys(strata):
        members = np.array([i for i, s in enumerate(strata) if s == key], dtype=np.int64)
        if len(members) < 2:
            raise ValueError(f"stratum {key!r} has {len(members)} member(s); need at least 2")
        members = members[rng.permutation(len(members))]
        n1 = int(np.floor(ratio * len(members) + 0.5))
        part1.append(members[:n1])
        part2.append(members[n1:])
    return Partition(np.sort(np.concatenate(part1)), np.sort(np.concatenate(part2)))


def split_partition(corpus: Corpus, ratio: float = 0.7, seed: int = 0) -> Partition:
    return stratified_split(corpus.strata(), ratio, seed)


# -- on-disk layout --------------------------------------------------------

MANIFEST_FIELDS = ("path", "label", "attack_id", "partition")


def write_corpus(corpus: Corpus, partition: Partition, out_dir) -> Path:
    """Write every image as PPM plus ``manifest.csv`` and ``corpus.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    in_part1 = np.zeros(len(corpus), dtype=bool)
    in_part1[partition.part1] = True
    rows = []
    for idx, key in enumerate(corpus.strata()):
        local = idx % corpus.n_bona
        name = f"images/{key}_{local:05d}.ppm"
        save_image(corpus.image(idx), out / name)
        label = BONA if key == BONA else SPOOF
        rows.append((name, label, "" if key == BONA else key, "part1" if in_part1[idx] else "part2"))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    meta = {
        "seed": int(corpus.seed),
        "n_bona": corpus.n_bona,
        "attack_ids": list(corpus.attack_ids),
        "image_shape": list(corpus.image_shape),
        "eye_bands": None if corpus.eye_bands is None else corpus.eye_bands.tolist(),
    }
    with open(out / "corpus.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def read_corpus(data_dir) -> tuple[Corpus, Partition]:
    """Load a corpus written by :func:`write_corpus`."""
    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest at {manifest}")
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"manifest columns {reader.fieldnames}, expected {list(MANIFEST_FIELDS)}")
        rows = list(reader)
    bona, spoofs, parts = [], {}, {}
    for row in rows:
        key = BONA if row["label"] == BONA else row["attack_id"]
        img = load_image(root / row["path"])
        (bona if key == BONA else spoofs.setdefault(key, [])).append(img)
        parts.setdefault(key, []).append(row["partition"])
    seed, bands = 0, None
    meta_path = root / "corpus.json"
    if meta_path.is_file():
        with open(meta_path) as f:
            meta = json.load(f)
        seed = meta.get("seed", 0)
        if meta.get("eye_bands") is not None:
            bands = np.array(meta["eye_bands"], dtype=np.int64)
    corpus = Corpus(np.stack(bona), {a: np.stack(v) for a, v in spoofs.items()}, seed, bands)
    flags = np.array(parts[BONA] + [p for a in corpus.attack_ids for p in parts[a]])
    idx = np.arange(len(flags))
    return corpus, Partition(idx[flags == "part1"], idx[flags == "part2"])

