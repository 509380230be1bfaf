"""Synthetic lesion-like segmentation data, non-IID partitioning and PGM I/O."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientData, InvalidSize, LabelOutOfRange, MalformedPgm, MissingPair

FG_MIN, FG_MAX = 0.05, 0.6


class Style(Enum):
    BLOB = "blob"
    RING = "ring"
    MULTIBLOB = "multiblob"


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    return (u / ay) ** 2 + (v / ax) ** 2


def _shape(rng, style: Style, size: int, yy, xx) -> tuple[np.ndarray, np.ndarray]:
    """Return (mask, radial field) for one random shape; field is 0 at centres."""
    if style is Style.MULTIBLOB:
        k = int(rng.integers(2, 4))
        region = np.zeros((size, size), bool)
        field_ = np.full((size, size), np.inf)
        for _ in range(k):
            r = _ellipse(yy, xx, *rng.uniform(0.2, 0.8, 2) * size,
                         *rng.uniform(0.08, 0.17, 2) * size, rng.uniform(0, np.pi))
            region |= r <= 1
            field_ = np.minimum(field_, r)
        return region, field_
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    ay, ax = rng.uniform(0.15, 0.32, 2) * size
    theta = rng.uniform(0, np.pi)
    r = _ellipse(yy, xx, cy, cx, ay, ax, theta)
    if style is Style.RING:
        inner = rng.uniform(0.35, 0.6)
        return (r <= 1) & (r >= inner ** 2), np.abs(np.sqrt(r) - (1 + inner) / 2) ** 2
    return r <= 1, r


def synth_one(rng: np.random.Generator, style: Style, size: int, noise_sd: float,
              contrast: tuple = (0.25, 0.5)) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    while True:
        region, radial = _shape(rng, style, size, yy, xx)
        frac = region.mean()
        if FG_MIN <= frac <= FG_MAX:
            break
    # smooth background ramp plus a foreground that fades towards its border
    g = rng.normal(size=2)
    g /= np.linalg.norm(g)
    ramp = ((yy * g[0] + xx * g[1]) / size) * rng.uniform(0.05, 0.2)
    base = rng.uniform(0.2, 0.4)
    amp = rng.uniform(*contrast)
    fg = amp * (1.0 - 0.5 * np.clip(radial, 0, 1))
    img = base + ramp + np.where(region, fg, 0.0)
    if noise_sd > 0:
        img = img + rng.normal(0.0, noise_sd, img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img.astype(np.float32), region.astype(np.uint8)


def generate_synthetic(n: int, size: int, style, noise_sd: float, seed: int,
                       contrast: tuple = (0.25, 0.5)) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` (image, mask) pairs of one style; images are 8-bit quantised in [0, 1]."""
    if size < 8 or size % 4:
        raise InvalidSize(f"size must be a multiple of 4 and >= 8, got {size}")
    style = Style(style)
    rng = np.random.default_rng(seed)
    return [synth_one(rng, style, size, noise_sd, contrast) for _ in range(n)]


def generate_mixed(n: int, size: int, styles: Sequence, noise_sd: float, seed: int,
                   contrast: tuple = (0.25, 0.5)) -> tuple[list, list[int]]:
    """``n`` pairs cycling through ``styles``; returns (data, style index per item)."""
    styles = [Style(s) for s in styles]
    if size < 8 or size % 4:
        raise InvalidSize(f"size must be a multiple of 4 and >= 8, got {size}")
    rng = np.random.default_rng(seed)
    groups = [i % len(styles) for i in range(n)]
    data = [synth_one(rng, styles[k], size, noise_sd, contrast) for k in groups]
    return data, groups


# -- partitioning ------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    public_count: int = 20
    client_counts: tuple = (10, 20, 40, 60)
    noniid_skew: float = 0.5
    ratios: tuple = (0.8, 0.1, 0.1)

    def validate(self) -> "PartitionSpec":
        if self.public_count < 1 or any(c < 1 for c in self.client_counts):
            raise ValueError("partition counts must be >= 1")
        if not 0.0 <= self.noniid_skew <= 1.0:
            raise ValueError("noniid_skew must be in [0, 1]")
        if abs(sum(self.ratios) - 1.0) > 1e-9 or len(self.ratios) != 3:
            raise ValueError("train/val/test ratios must be three values summing to 1")
        return self


@dataclass
class ClientSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)


@dataclass
class Partition:
    public: list
    clients: list
    public_idx: list
    client_idx: list  # per client: (train_idx, val_idx, test_idx)


def _split_sizes(n: int, ratios) -> tuple[int, int, int]:
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = n, 0, 0
    return n_train, n_val, n_test


def partition(data: Sequence, spec: PartitionSpec, seed: int,
              groups: Sequence[int] | None = None) -> Partition:
    """Disjoint public set plus per-client train/val/test splits.

    ``groups`` assigns each item a style id. Client ``k`` prefers style
    ``k mod K``; its items are drawn from the mixture
    ``(1 - skew)·uniform + skew·onehot(preferred)``.
    """
    spec.validate()
    if spec.public_count + sum(spec.client_counts) > len(data):
        raise InsufficientData(
            f"need {spec.public_count + sum(spec.client_counts)} items, have {len(data)}")
    groups = np.zeros(len(data), int) if groups is None else np.asarray(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    public_idx = sorted(order[:spec.public_count].tolist())
    styles = sorted(set(groups.tolist()))
    pools = {s: [i for i in order[spec.public_count:] if groups[i] == s] for s in styles}
    client_idx = []
    clients = []
    for k, count in enumerate(spec.client_counts):
        mix = np.full(len(styles), (1.0 - spec.noniid_skew) / len(styles))
        mix[k % len(styles)] += spec.noniid_skew
        picked = []
        for _ in range(count):
            avail = np.array([len(pools[s]) > 0 for s in styles], float)
            w = mix * avail
            if w.sum() == 0:
                w = avail
            if w.sum() == 0:
                raise InsufficientData("ran out of items while partitioning")
            s = styles[int(rng.choice(len(styles), p=w / w.sum()))]
            picked.append(int(pools[s].pop()))
        n_train, n_val, _ = _split_sizes(count, spec.ratios)
        tr, va, te = picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:]
        client_idx.append((tr, va, te))
        clients.append(ClientSplit([data[i] for i in tr], [data[i] for i in va],
                                   [data[i] for i in te]))
    return Partition([data[i] for i in public_idx], clients, public_idx, client_idx)


# -- PGM -----------------------------------------------------------------------

def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary P5 greymap with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("PGM payload must be 2-d")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise ValueError("PGM pixels must lie in [0, 255]")
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.astype(np.uint8).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (raw integer pixels, maxval) for a binary P5 file."""
    buf = Path(path).read_bytes()
    pos = 0
    tokens = []
    try:
        for _ in range(4):
            m = _TOKEN.match(buf, pos)
            if m is None:
                raise MalformedPgm(f"{path}: truncated header")
            tokens.append(m.group(1))
            pos = m.end()
        if tokens[0] != b"P5":
            raise MalformedPgm(f"{path}: not a binary PGM (magic {tokens[0]!r})")
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        if isinstance(exc, MalformedPgm):
            raise
        raise MalformedPgm(f"{path}: bad header ({exc})") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise MalformedPgm(f"{path}: bad dimensions or maxval")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedPgm(f"{path}: missing separator after header")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(buf) - pos != need:
        raise MalformedPgm(f"{path}: payload is {len(buf) - pos} bytes, expected {need}")
    pixels = np.frombuffer(buf, dtype=dtype, offset=pos).reshape(h, w).astype(np.int64)
    if pixels.max(initial=0) > maxval:
        raise MalformedPgm(f"{path}: pixel exceeds maxval")
    return pixels, maxval


def write_pgm_dataset(directory, data: Sequence, manifest: bool = True) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, (img, mask) in enumerate(data):
        write_pgm(d / f"img_{k}.pgm", np.round(np.asarray(img) * 255.0).astype(np.uint8))
        write_pgm(d / f"mask_{k}.pgm", np.asarray(mask).astype(np.uint8))
        lines.append(f"img_{k}.pgm mask_{k}.pgm")
    if manifest:
        (d / "manifest.txt").write_text("".join(line + "\n" for line in lines))
    return d


_IMG = re.compile(r"^img_(\d+)\.pgm$")
_MASK = re.compile(r"^mask_(\d+)\.pgm$")


def load_pgm_dataset(directory, num_classes: int = 2) -> list[tuple[np.ndarray, np.ndarray]]:
    d = Path(directory)
    imgs = {int(m.group(1)): p for p in d.iterdir() if (m := _IMG.match(p.name))}
    masks = {int(m.group(1)): p for p in d.iterdir() if (m := _MASK.match(p.name))}
    unpaired = sorted(set(imgs) ^ set(masks))
    if unpaired:
        raise MissingPair(f"{d}: unpaired index {unpaired[0]}")
    out = []
    for k in sorted(imgs):
        img, maxval = read_pgm(imgs[k])
        mask, _ = read_pgm(masks[k])
        if img.shape != mask.shape:
            raise MalformedPgm(f"{d}: image/mask {k} size mismatch")
        if mask.max(initial=0) >= num_classes:
            raise LabelOutOfRange(f"{masks[k]}: label {mask.max()} >= {num_classes}")
        out.append(((img / maxval).astype(np.float32), mask.astype(np.uint8)))
    return out
