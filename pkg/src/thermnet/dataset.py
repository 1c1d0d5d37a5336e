"""Labelled corpora of quantized thermal images and a synthetic texture generator.

On disk a corpus is a directory with one sub-directory of DTIF frames per class
(directory name = class label), optionally with a ``manifest.tsv`` listing
``relative_path<TAB>class<TAB>condition_tag`` per frame.

The generator renders each frame as ambient offset + texture + sensor noise.
Temperatures are snapped to a fixed radiometric resolution so that a frame's
quantized image does not depend on the ambient offset at all, even after the
float32 round trip through DTIF.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CropTooLarge,
    EmptyClass,
    InvalidConfig,
    MixedFrameSizes,
    UnknownTag,
)
from .thermal import (
    QuantizationRange,
    QuantizedImage,
    ThermalFrame,
    center_crop,
    quantize,
    read_dtif,
    round_half_away,
    write_dtif,
)

MANIFEST_NAME = "manifest.tsv"


@dataclass(eq=False)
class LabeledDataset:
    samples: list
    labels: np.ndarray
    vocabulary: tuple
    condition_tags: tuple = ()
    sources: tuple = ()

    def __post_init__(self):
        self.samples = list(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.vocabulary = tuple(self.vocabulary)
        n = len(self.samples)
        if not self.condition_tags:
            self.condition_tags = ("",) * n
        self.condition_tags = tuple(self.condition_tags)
        self.sources = tuple(self.sources) if self.sources else ("",) * n
        if not (len(self.labels) == len(self.condition_tags) == len(self.sources) == n):
            raise ValueError("samples, labels and condition tags must have equal lengths")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.vocabulary)):
            raise ValueError("labels must index the vocabulary")
        if len({im.n for im in self.samples}) > 1:
            raise MixedFrameSizes("all images in a dataset must share one side length")

    def __len__(self):
        return len(self.samples)

    @property
    def side(self) -> int | None:
        return self.samples[0].n if self.samples else None

    def subset(self, indices) -> "LabeledDataset":
        indices = [int(i) for i in indices]
        return LabeledDataset(
            [self.samples[i] for i in indices],
            self.labels[indices] if indices else np.zeros(0, dtype=np.int64),
            self.vocabulary,
            tuple(self.condition_tags[i] for i in indices),
            tuple(self.sources[i] for i in indices),
        )

    def resized(self, side: int) -> "LabeledDataset":
        if self.side == side or not self.samples:
            return self
        return LabeledDataset(
            [resize_bilinear(im, side) for im in self.samples],
            self.labels,
            self.vocabulary,
            self.condition_tags,
            self.sources,
        )

    def inputs(self, side: int | None = None) -> np.ndarray:
        """Network input batch [N, 1, side, side] in float32, pixels / hi."""
        ds = self if side is None else self.resized(side)
        return to_input(ds.samples)


def to_input(images: Sequence[QuantizedImage]) -> np.ndarray:
    if not images:
        return np.zeros((0, 1, 0, 0), dtype=np.float32)
    arr = np.stack([im.pixels for im in images]).astype(np.float32)
    hi = np.array([im.hi for im in images], dtype=np.float32)[:, None, None]
    return (arr / hi)[:, None]


# --- resizing ---------------------------------------------------------------


def _resize_weights(n_src: int, n_dst: int):
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0, n_src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = pos - i0
    return i0, i1, frac


def resize_bilinear(image: QuantizedImage, target: int) -> QuantizedImage:
    """Bilinear resize with pixel-centre alignment; output rounded and clamped."""
    if target < 1:
        raise ValueError(f"target side must be >= 1, got {target}")
    if target == image.n:
        return QuantizedImage(image.pixels.copy(), image.dynamics, image.lo, image.hi)
    src = image.pixels.astype(np.float64)
    i0, i1, f = _resize_weights(image.n, target)
    rows = src[i0] * (1 - f)[:, None] + src[i1] * f[:, None]
    out = rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]
    pixels = np.clip(round_half_away(out), image.lo, image.hi).astype(np.int64)
    return QuantizedImage(pixels, image.dynamics, image.lo, image.hi)


# --- synthetic generator ----------------------------------------------------

FAMILY_KINDS = ("grating", "checker", "value_noise", "blobs", "stripes")


@dataclass(frozen=True)
class TextureFamily:
    """A texture family; ``length`` is the range of its characteristic spatial
    scale in pixels (period, cell size, blob sigma or stripe width)."""

    kind: str
    length: tuple

    def check(self):
        if self.kind not in FAMILY_KINDS:
            raise InvalidConfig(f"unknown texture family {self.kind!r}")
        lo, hi = self.length
        if not 0 < lo < hi:
            raise InvalidConfig(f"{self.kind}: length range must satisfy 0 < lo < hi, got {self.length}")


DEFAULT_FAMILIES = (
    TextureFamily("grating", (24.0, 40.0)),
    TextureFamily("checker", (8.0, 16.0)),
    TextureFamily("value_noise", (6.0, 12.0)),
    TextureFamily("blobs", (3.0, 5.0)),
    TextureFamily("stripes", (3.0, 7.0)),
)


@dataclass(frozen=True)
class Condition:
    """Capture condition; ``scale`` stretches every texture length, the other
    fields override the corpus-wide defaults when set."""

    tag: str = "base"
    scale: float = 1.0
    noise_sd: float | None = None
    amplitude: float | None = None


@dataclass(frozen=True)
class SynthConfig:
    families: tuple = DEFAULT_FAMILIES
    frames_per_class: int = 200
    ambient: tuple = (15.0, 35.0)
    amplitude: float = 1.0
    noise_sd: float = 0.05
    width: int = 160
    height: int = 120
    seed: int = 0
    conditions: tuple = (Condition(),)
    resolution: float = 2.0**-10  # degC per radiometric count

    def check(self):
        if self.frames_per_class < 1:
            raise InvalidConfig("frames_per_class must be >= 1")
        if self.noise_sd < 0 or self.amplitude <= 0:
            raise InvalidConfig("need noise_sd >= 0 and amplitude > 0")
        if not self.ambient[0] <= self.ambient[1]:
            raise InvalidConfig("ambient range must be ordered")
        if self.width < 1 or self.height < 1:
            raise InvalidConfig("frame size must be positive")
        if not self.families:
            raise InvalidConfig("need at least one texture family")
        if not self.conditions:
            raise InvalidConfig("need at least one condition")
        if len({f.kind for f in self.families}) != len(self.families):
            raise InvalidConfig("texture family kinds must be distinct")
        for fam in self.families:
            fam.check()
        for cond in self.conditions:
            if cond.scale <= 0 or "\t" in cond.tag or "\n" in cond.tag:
                raise InvalidConfig(f"invalid condition {cond}")
            if (cond.noise_sd is not None and cond.noise_sd < 0) or (
                cond.amplitude is not None and cond.amplitude <= 0
            ):
                raise InvalidConfig(f"invalid condition {cond}")

    @property
    def class_names(self) -> tuple:
        return tuple(f.kind for f in self.families)


def _rotated(h, w, rng):
    theta = rng.uniform(0, np.pi)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    x -= w / 2
    y -= h / 2
    u = x * np.cos(theta) + y * np.sin(theta)
    v = -x * np.sin(theta) + y * np.cos(theta)
    return u, v


def value_noise(h, w, cell, rng):
    """Bilinear interpolation of a random lattice with spacing ``cell`` pixels.

    Values lie in [-1, 1]. A random sub-cell shift plays the role of phase.
    """
    gh = int(np.ceil(h / cell)) + 2
    gw = int(np.ceil(w / cell)) + 2
    lattice = rng.uniform(-1, 1, size=(gh, gw))
    oy, ox = rng.uniform(0, 1, size=2)
    py = np.arange(h) / cell + oy
    px = np.arange(w) / cell + ox
    y0 = np.floor(py).astype(int)
    x0 = np.floor(px).astype(int)
    fy = (py - y0)[:, None]
    fx = (px - x0)[None, :]
    v00 = lattice[y0][:, x0]
    v01 = lattice[y0][:, x0 + 1]
    v10 = lattice[y0 + 1][:, x0]
    v11 = lattice[y0 + 1][:, x0 + 1]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def render_texture(kind: str, length: float, h: int, w: int, rng) -> np.ndarray:
    """Unit-amplitude texture of the given family (values within [-1, 1])."""
    if kind == "grating":
        u, _ = _rotated(h, w, rng)
        return np.sin(2 * np.pi * u / length + rng.uniform(0, 2 * np.pi))
    if kind == "checker":
        u, v = _rotated(h, w, rng)
        ou, ov = rng.uniform(0, 2 * length, size=2)
        cells = np.floor((u + ou) / length) + np.floor((v + ov) / length)
        return np.where(cells % 2 == 0, 1.0, -1.0)
    if kind == "value_noise":
        noise = value_noise(h, w, length, rng)
        return noise / max(np.abs(noise).max(), 1e-12)
    if kind == "blobs":
        # sparse warm spots on a flat background
        count = max(1, int(round(h * w / (8 * length) ** 2)))
        cy = rng.uniform(0, h, count)
        cx = rng.uniform(0, w, count)
        sigma = length * rng.uniform(0.8, 1.2, count)
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        field_ = np.zeros((h, w))
        for k in range(count):
            field_ += np.exp(-((y - cy[k]) ** 2 + (x - cx[k]) ** 2) / (2 * sigma[k] ** 2))
        return 2 * field_ / max(field_.max(), 1e-12) - 1
    if kind == "stripes":
        u, _ = _rotated(h, w, rng)
        span = np.hypot(h, w)
        widths = rng.uniform(0.5 * length, 1.5 * length, size=int(2 * span / (0.5 * length)) + 2)
        edges = np.cumsum(widths) - span - rng.uniform(0, length)
        band = np.searchsorted(edges, u)
        return np.where(band % 2 == 0, 1.0, -1.0)
    raise InvalidConfig(f"unknown texture family {kind!r}")


def synth_frame(config: SynthConfig, class_index: int, frame_index: int) -> tuple:
    """Render one frame; returns (ThermalFrame, condition_tag).

    Ambient offset and texture draw from separate seeded streams, so changing
    the ambient range leaves the texture (and its quantization) unchanged.
    """
    fam = config.families[class_index]
    cond = config.conditions[frame_index % len(config.conditions)]
    tex_rng = np.random.default_rng([config.seed, class_index, frame_index, 0])
    amb_rng = np.random.default_rng([config.seed, class_index, frame_index, 1])
    amplitude = cond.amplitude if cond.amplitude is not None else config.amplitude
    noise_sd = cond.noise_sd if cond.noise_sd is not None else config.noise_sd
    length = tex_rng.uniform(*fam.length) * cond.scale
    texture = amplitude * render_texture(fam.kind, length, config.height, config.width, tex_rng)
    if noise_sd > 0:
        texture = texture + tex_rng.normal(0, noise_sd, size=texture.shape)
    res = config.resolution
    ambient = np.round(amb_rng.uniform(*config.ambient) / res) * res
    temps = ambient + np.round(texture / res) * res
    meta = {"class": fam.kind, "condition": cond.tag}
    return ThermalFrame(temps.astype(np.float32), frame_index=frame_index, meta=meta), cond.tag


def generate_synthetic(config: SynthConfig, out_dir) -> Path:
    """Write a DTIF corpus plus manifest under ``out_dir``; returns the manifest path."""
    config.check()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for ci, name in enumerate(config.class_names):
        (out / name).mkdir(exist_ok=True)
        for j in range(config.frames_per_class):
            frame, tag = synth_frame(config, ci, j)
            rel = f"{name}/{name}_{j:04d}.dtif"
            write_dtif(out / rel, frame)
            lines.append(f"{rel}\t{name}\t{tag}\n")
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


# --- loading ----------------------------------------------------------------


@dataclass(frozen=True)
class CorpusEntry:
    path: Path
    label: str
    condition: str = ""


def list_corpus(root) -> list:
    """Corpus entries sorted by relative path."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    entries = []
    if manifest.exists():
        for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise InvalidConfig(f"{manifest}:{lineno}: expected 2 or 3 tab-separated fields")
            cond = parts[2] if len(parts) == 3 else ""
            entries.append(CorpusEntry(root / parts[0], parts[1], cond))
    else:
        if not root.is_dir():
            raise FileNotFoundError(f"corpus directory {root} does not exist")
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            files = sorted(sub.glob("*.dtif"))
            if not files:
                raise EmptyClass(f"class directory {sub} contains no frames")
            entries.extend(CorpusEntry(f, sub.name) for f in files)
    entries.sort(key=lambda e: e.path.relative_to(root).as_posix())
    return entries


def load_corpus(root, crop_n: int = 75, qrange: QuantizationRange = QuantizationRange()) -> LabeledDataset:
    root = Path(root)
    entries = list_corpus(root)
    vocabulary = tuple(sorted({e.label for e in entries}))
    index = {name: i for i, name in enumerate(vocabulary)}
    samples, labels, tags, sources = [], [], [], []
    for k, entry in enumerate(entries):
        frame = read_dtif(entry.path, frame_index=k)
        try:
            roi = center_crop(frame, crop_n)
        except CropTooLarge as exc:
            raise MixedFrameSizes(f"{entry.path}: {exc}") from None
        samples.append(quantize(frame, roi, qrange))
        labels.append(index[entry.label])
        tags.append(entry.condition)
        sources.append(entry.path.relative_to(root).as_posix())
    return LabeledDataset(samples, labels, vocabulary, tags, sources)


def split_by_condition(dataset: LabeledDataset, held_out_tags) -> tuple:
    """Split into (rest, held) by condition tag; both keep the full vocabulary."""
    held_out_tags = set(held_out_tags)
    unknown = held_out_tags - set(dataset.condition_tags)
    if unknown:
        raise UnknownTag(f"condition tags not in dataset: {sorted(unknown)}")
    held = [i for i, t in enumerate(dataset.condition_tags) if t in held_out_tags]
    rest = [i for i, t in enumerate(dataset.condition_tags) if t not in held_out_tags]
    return dataset.subset(rest), dataset.subset(held)
