"""Seeded synthetic FSCIL benchmarks and their binary container.

Each class owns a smooth random image (a coarse grid of uniform values
bilinearly upsampled); samples are that image plus clipped Gaussian noise.
Pixel values are rounded to float32 at generation time so that the on-disk
format round-trips exactly.

File layout (little-endian)::

    b"FSD1"
    u32 classes, u32 images
    u16 h, u16 w, u16 c
    u32 K, u32 N, u32 T, u32 N0
    images x (u16 label, h*w*c f32 pixels)

Images are stored as base-train, then each session in order, then queries,
each section sorted by label; the first label decrease marks the queries.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError

MAGIC = b"FSD1"
HEADER = struct.Struct("<4sIIHHHIIII")


@dataclass
class SyntheticSpec:
    n_base: int = 20
    n_way: int = 5
    k_shot: int = 5
    sessions: int = 4
    h: int = 8
    w: int = 8
    c: int = 1
    grid: int = 4
    noise_sigma: float = 0.15
    queries_per_class: int = 50
    base_per_class: int = 30
    seed: int = 0

    def validate(self) -> None:
        if not self.n_base >= self.n_way >= 2:
            raise ConfigurationError("need n_base >= n_way >= 2")
        if self.k_shot < 1 or self.sessions < 0:
            raise ConfigurationError("need k_shot >= 1 and sessions >= 0")
        if self.grid < 1 or self.h % self.grid or self.w % self.grid:
            raise ConfigurationError("h and w must be divisible by grid")
        if self.c < 1 or self.queries_per_class < 1 or self.base_per_class < self.k_shot:
            raise ConfigurationError("need c >= 1, queries_per_class >= 1, base_per_class >= k_shot")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")
        if self.n_base + self.sessions * self.n_way > 65535:
            raise ConfigurationError("labels must fit in u16")

    @property
    def n_classes(self) -> int:
        return self.n_base + self.sessions * self.n_way

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Benchmark:
    n_base: int
    n_way: int
    k_shot: int
    base_images: np.ndarray
    base_labels: np.ndarray
    session_images: list[np.ndarray] = field(default_factory=list)
    session_labels: list[np.ndarray] = field(default_factory=list)
    query_images: np.ndarray | None = None
    query_labels: np.ndarray | None = None

    @property
    def sessions(self) -> int:
        return len(self.session_images)

    @property
    def n_classes(self) -> int:
        return self.n_base + self.sessions * self.n_way

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.base_images.shape[1:])

    def n_seen(self, t: int) -> int:
        return self.n_base + t * self.n_way

    def session_classes(self, t: int) -> range:
        if t == 0:
            return range(self.n_base)
        return range(self.n_seen(t - 1), self.n_seen(t))

    def validate(self) -> None:
        """Check label ranges, session shapes and class disjointness."""
        if set(np.unique(self.base_labels)) != set(range(self.n_base)):
            raise DataError("base set must cover exactly classes 0..N0-1")
        seen: set[int] = set(range(self.n_base))
        for t, labels in enumerate(self.session_labels, start=1):
            classes = set(np.unique(labels).tolist())
            if classes & seen:
                raise DataError(f"session {t} reuses classes {sorted(classes & seen)}")
            if classes != set(self.session_classes(t)):
                raise DataError(f"session {t} must cover classes {self.session_classes(t)}")
            if np.any(np.bincount(labels - self.n_seen(t - 1), minlength=self.n_way) != self.k_shot):
                raise DataError(f"session {t} is not {self.n_way}-way {self.k_shot}-shot")
            seen |= classes
        if self.query_labels is None or set(np.unique(self.query_labels)) != set(range(self.n_classes)):
            raise DataError("queries must cover every class")

    def equals(self, other: "Benchmark") -> bool:
        return self.to_bytes() == other.to_bytes()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        save_to(self, buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _prototype(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    coarse = rng.random((spec.grid, spec.grid, spec.c))
    ys = np.linspace(0.0, spec.grid - 1, spec.h)
    xs = np.linspace(0.0, spec.grid - 1, spec.w)
    y0 = np.minimum(np.floor(ys).astype(int), spec.grid - 2) if spec.grid > 1 else np.zeros(spec.h, int)
    x0 = np.minimum(np.floor(xs).astype(int), spec.grid - 2) if spec.grid > 1 else np.zeros(spec.w, int)
    if spec.grid == 1:
        return np.broadcast_to(coarse, (spec.h, spec.w, spec.c)).copy()
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    top = c00 * (1 - fx) + c01 * fx
    bottom = c10 * (1 - fx) + c11 * fx
    return np.clip(top * (1 - fy) + bottom * fy, 0.0, 1.0)


def _samples(proto: np.ndarray, n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    x = proto[None] + rng.normal(0.0, sigma, size=(n,) + proto.shape) if sigma > 0 else np.repeat(proto[None], n, 0)
    return np.clip(x, 0.0, 1.0).astype(np.float32).astype(np.float64)


def class_prototypes(spec: SyntheticSpec, seed: int | None = None) -> np.ndarray:
    seed = spec.seed if seed is None else seed
    return np.stack([_prototype(np.random.default_rng([seed, c, 0]), spec) for c in range(spec.n_classes)])


def generate(spec: SyntheticSpec, seed: int | None = None) -> Benchmark:
    spec.validate()
    seed = spec.seed if seed is None else seed
    protos = class_prototypes(spec, seed)

    def split(classes, n, code):
        imgs = [_samples(protos[c], n, spec.noise_sigma, np.random.default_rng([seed, c, code])) for c in classes]
        return np.concatenate(imgs), np.repeat(np.asarray(list(classes), dtype=np.int64), n)

    base_x, base_y = split(range(spec.n_base), spec.base_per_class, 1)
    bench = Benchmark(spec.n_base, spec.n_way, spec.k_shot, base_x, base_y)
    for t in range(1, spec.sessions + 1):
        lo = spec.n_base + (t - 1) * spec.n_way
        x, y = split(range(lo, lo + spec.n_way), spec.k_shot, 1)
        bench.session_images.append(x)
        bench.session_labels.append(y)
    bench.query_images, bench.query_labels = split(range(spec.n_classes), spec.queries_per_class, 2)
    return bench


# --- container -----------------------------------------------------------

def _write_section(fh, images: np.ndarray, labels: np.ndarray) -> None:
    order = np.argsort(labels, kind="stable")
    for i in order:
        fh.write(struct.pack("<H", int(labels[i])))
        fh.write(images[i].astype("<f4").tobytes())


def save_to(bench: Benchmark, fh) -> None:
    h, w, c = bench.image_shape
    sections = [(bench.base_images, bench.base_labels)]
    sections += list(zip(bench.session_images, bench.session_labels))
    sections.append((bench.query_images, bench.query_labels))
    n_images = sum(len(lbl) for _, lbl in sections)
    fh.write(HEADER.pack(MAGIC, bench.n_classes, n_images, h, w, c,
                         bench.k_shot, bench.n_way, bench.sessions, bench.n_base))
    for images, labels in sections:
        _write_section(fh, images, labels)


def save(bench: Benchmark, path: str | Path) -> None:
    with open(path, "wb") as fh:
        save_to(bench, fh)


def file_size(bench: Benchmark) -> int:
    h, w, c = bench.image_shape
    n = len(bench.base_labels) + sum(len(lbl) for lbl in bench.session_labels) + len(bench.query_labels)
    return HEADER.size + n * (2 + 4 * h * w * c)


def from_bytes(data: bytes) -> Benchmark:
    if len(data) < HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, n_classes, n_images, h, w, c, k, n_way, sessions, n_base = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    record = 2 + 4 * h * w * c
    expected = HEADER.size + n_images * record
    if len(data) < expected:
        offset = HEADER.size + (len(data) - HEADER.size) // record * record
        raise FormatError(f"truncated: expected {expected} bytes, got {len(data)}", offset)
    if len(data) > expected:
        raise FormatError("trailing bytes after last image", expected)
    dt = np.dtype([("label", "<u2"), ("px", "<f4", (h, w, c))])
    recs = np.frombuffer(data, dtype=dt, count=n_images, offset=HEADER.size)
    labels = recs["label"].astype(np.int64)
    images = recs["px"].astype(np.float64)
    drops = np.nonzero(np.diff(labels) < 0)[0]
    if len(drops) == 0:
        raise FormatError("no query section found", HEADER.size)
    q0 = int(drops[0]) + 1
    train_y = labels[:q0]
    base_mask = train_y < n_base
    bench = Benchmark(n_base, n_way, k, images[:q0][base_mask], train_y[base_mask])
    for t in range(1, sessions + 1):
        lo = n_base + (t - 1) * n_way
        m = (train_y >= lo) & (train_y < lo + n_way)
        bench.session_images.append(images[:q0][m])
        bench.session_labels.append(train_y[m])
    bench.query_images, bench.query_labels = images[q0:], labels[q0:]
    if bench.n_classes != n_classes:
        raise FormatError(f"header says {n_classes} classes, sections imply {bench.n_classes}", 4)
    return bench


def load(path: str | Path) -> Benchmark:
    return from_bytes(Path(path).read_bytes())
