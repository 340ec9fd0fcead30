"""Procedural multi-domain retrieval benchmark.

Each identity is a seeded smooth color-blob template; images of an identity
are jittered, noisy copies. Domains own disjoint identity sets and differ
by a channel-wise affine color transform plus their noise level, so the
domain gap lives exactly in the channel statistics that stylization
manipulates. The held-out target domain's color transform sits outside the
convex hull of the source transforms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError

MAGIC = b"SYNDG1"
SCHEMA_VERSION = 1


@dataclass
class DomainStyle:
    gain: tuple[float, float, float]
    bias: tuple[float, float, float]
    noise_std: float

    def __post_init__(self):
        self.gain = tuple(float(g) for g in self.gain)
        self.bias = tuple(float(b) for b in self.bias)
        self.noise_std = float(self.noise_std)


@dataclass
class DatasetSpec:
    num_sources: int = 3
    ids_per_domain: int = 20
    images_per_id: int = 20
    height: int = 32
    width: int = 16
    jitter: int = 2
    seed: int = 7
    source_styles: Optional[list[DomainStyle]] = None
    target_style: Optional[DomainStyle] = None

    def resolved_styles(self) -> tuple[list[DomainStyle], DomainStyle]:
        sources = self.source_styles or default_source_styles(self.num_sources)
        if len(sources) != self.num_sources:
            raise ConfigurationError(
                f"expected {self.num_sources} source styles, got {len(sources)}")
        target = self.target_style or default_target_style(sources)
        return sources, target


def default_source_styles(num_sources: int) -> list[DomainStyle]:
    """Well-separated color transforms, one accent channel per domain."""
    styles = []
    for s in range(num_sources):
        gain = [0.85, 0.85, 0.85]
        bias = [-0.06, -0.06, -0.06]
        gain[s % 3] = 1.2
        bias[s % 3] = 0.18
        # small deterministic offset so domains beyond 3 stay distinct
        shift = 0.03 * (s // 3)
        styles.append(DomainStyle(
            gain=tuple(g + shift for g in gain),
            bias=tuple(b + shift for b in bias),
            noise_std=0.05 + 0.01 * (s % 3),
        ))
    return styles


def default_target_style(sources: list[DomainStyle]) -> DomainStyle:
    """A transform pushed outside the min-max box of the source transforms."""
    gains = np.array([s.gain for s in sources])
    biases = np.array([s.bias for s in sources])
    gain = gains.max(axis=0) + 0.25 * (gains.max(axis=0) - gains.min(axis=0) + 0.1)
    bias = biases.min(axis=0) - 0.5 * (biases.max(axis=0) - biases.min(axis=0) + 0.1)
    # alternate directions per channel so the shift is not a pure brightening
    gain[1] = gains.min(axis=0)[1] - 0.25 * (gains.max(axis=0)[1] - gains.min(axis=0)[1] + 0.1)
    bias[1] = biases.max(axis=0)[1] + 0.5 * (biases.max(axis=0)[1] - biases.min(axis=0)[1] + 0.1)
    return DomainStyle(gain=tuple(float(g) for g in gain),
                       bias=tuple(float(b) for b in bias),
                       noise_std=0.03)


@dataclass
class DomainData:
    name: str
    images: np.ndarray          # [N, 3, H, W] float32 in [0, 1]
    identity_ids: np.ndarray    # [N] global identity ids
    labels: np.ndarray          # [N] local class indices 0..K-1
    style: DomainStyle

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class SynthDataset:
    spec: DatasetSpec
    domains: list[DomainData] = field(default_factory=list)

    @property
    def sources(self) -> list[DomainData]:
        return [d for d in self.domains if d.name != "target"]

    @property
    def target(self) -> DomainData:
        for d in self.domains:
            if d.name == "target":
                return d
        raise ConfigurationError("dataset has no target domain")

    def domain(self, name: str) -> DomainData:
        for d in self.domains:
            if d.name == name:
                return d
        raise ConfigurationError(f"unknown domain {name!r}")


@dataclass
class DomainBatch:
    images: np.ndarray        # [P*K, 3, H, W]
    labels: np.ndarray        # [P*K] local class indices
    domain: str


def _identity_template(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth random color-blob pattern, the identity's visual signature.

    All identities share the same mid-gray base so no identity is
    recognizable from its global color statistics alone; what
    distinguishes identities is the spatial layout of the blobs.
    """
    canvas = np.full((3, h, w), 0.5, dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    for _ in range(5):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        radius = rng.uniform(1.5, 4.5)
        color = rng.uniform(-0.45, 0.45, size=3).astype(np.float32)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))
        canvas += color[:, None, None] * blob[None]
    return np.clip(canvas, 0.05, 0.95)


def _shift_image(img: np.ndarray, dy: int, dx: int, pad: int) -> np.ndarray:
    """Integer translation with edge replication."""
    if pad == 0:
        return img
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    h, w = img.shape[1:]
    return padded[:, pad + dy:pad + dy + h, pad + dx:pad + dx + w]


def generate(spec: DatasetSpec) -> SynthDataset:
    """Deterministically materialize all domains of the benchmark."""
    sources, target = spec.resolved_styles()
    styles = sources + [target]
    names = [f"source{i}" for i in range(spec.num_sources)] + ["target"]
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    n_imgs = spec.images_per_id
    domains = []
    next_id = 0
    for name, style in zip(names, styles):
        images = np.empty((spec.ids_per_domain * n_imgs, 3, h, w), dtype=np.float32)
        identity_ids = np.empty(spec.ids_per_domain * n_imgs, dtype=np.int64)
        labels = np.empty_like(identity_ids)
        gain = np.asarray(style.gain, dtype=np.float32)[:, None, None]
        bias = np.asarray(style.bias, dtype=np.float32)[:, None, None]
        for k in range(spec.ids_per_domain):
            template = _identity_template(rng, h, w)
            for n in range(n_imgs):
                row = k * n_imgs + n
                img = template
                if spec.jitter > 0:
                    dy = int(rng.integers(-spec.jitter, spec.jitter + 1))
                    dx = int(rng.integers(-spec.jitter, spec.jitter + 1))
                    img = _shift_image(img, dy, dx, spec.jitter)
                if style.noise_std > 0:
                    img = img + rng.standard_normal(img.shape).astype(np.float32) \
                        * style.noise_std
                images[row] = np.clip(gain * img + bias, 0.0, 1.0)
                identity_ids[row] = next_id + k
                labels[row] = k
        domains.append(DomainData(name=name, images=images,
                                  identity_ids=identity_ids, labels=labels,
                                  style=style))
        next_id += spec.ids_per_domain
    return SynthDataset(spec=spec, domains=domains)


def sample_batch(domain: DomainData, p: int, k: int,
                 rng: np.random.Generator, augment: bool = True,
                 crop_pad: int = 2) -> DomainBatch:
    """P identities x K images, with flip and crop-with-padding augmentation."""
    num_ids = domain.num_classes
    if p > num_ids:
        raise ConfigurationError(
            f"batch needs {p} identities but domain {domain.name} has {num_ids}")
    chosen = rng.choice(num_ids, size=p, replace=False)
    rows = []
    for cls in chosen:
        pool = np.flatnonzero(domain.labels == cls)
        replace = pool.size < k
        rows.append(rng.choice(pool, size=k, replace=replace))
    rows = np.concatenate(rows)
    images = domain.images[rows].copy()
    labels = domain.labels[rows].copy()
    if augment:
        h, w = images.shape[2:]
        for i in range(images.shape[0]):
            if rng.random() < 0.5:
                images[i] = images[i, :, :, ::-1]
            dy = int(rng.integers(0, 2 * crop_pad + 1))
            dx = int(rng.integers(0, 2 * crop_pad + 1))
            padded = np.pad(images[i], ((0, 0), (crop_pad, crop_pad),
                                        (crop_pad, crop_pad)), mode="edge")
            images[i] = padded[:, dy:dy + h, dx:dx + w]
    return DomainBatch(images=images, labels=labels, domain=domain.name)


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + data.bin
# data.bin: b"SYNDG1", u32 image count, u32 C, u32 H, u32 W, then per image
# u32 domain index, u32 identity id, C*H*W float32 pixels (little-endian).


def save_dataset(dataset: SynthDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "domains": [
            {
                "name": d.name,
                "identity_ids": sorted(int(i) for i in set(d.identity_ids.tolist())),
                "image_count": int(d.images.shape[0]),
                "style_params": asdict(d.style),
            }
            for d in dataset.domains
        ],
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    c, h, w = dataset.domains[0].images.shape[1:]
    total = sum(d.images.shape[0] for d in dataset.domains)
    with open(out / "data.bin", "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", total, c, h, w))
        for di, d in enumerate(dataset.domains):
            for img, ident in zip(d.images, d.identity_ids):
                fh.write(struct.pack("<2I", di, int(ident)))
                fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
    return out


def load_dataset(in_dir) -> SynthDataset:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"no manifest.json under {src}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(
            f"unsupported dataset schema {manifest.get('schema_version')!r}")
    with open(src / "data.bin", "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigurationError("data.bin has a bad magic header")
        total, c, h, w = struct.unpack("<4I", fh.read(16))
        pixels = c * h * w
        domain_idx = np.empty(total, dtype=np.int64)
        identity = np.empty(total, dtype=np.int64)
        images = np.empty((total, c, h, w), dtype=np.float32)
        for row in range(total):
            di, ident = struct.unpack("<2I", fh.read(8))
            domain_idx[row] = di
            identity[row] = ident
            images[row] = np.frombuffer(fh.read(4 * pixels),
                                        dtype="<f4").reshape(c, h, w)
    domains = []
    for di, entry in enumerate(manifest["domains"]):
        mask = domain_idx == di
        ids = identity[mask]
        ordered = {gid: k for k, gid in enumerate(entry["identity_ids"])}
        labels = np.array([ordered[int(g)] for g in ids], dtype=np.int64)
        style = DomainStyle(**entry["style_params"])
        domains.append(DomainData(name=entry["name"], images=images[mask],
                                  identity_ids=ids, labels=labels, style=style))
    num_sources = sum(1 for d in domains if d.name != "target")
    ids_per_domain = len(manifest["domains"][0]["identity_ids"])
    spec = DatasetSpec(num_sources=num_sources, ids_per_domain=ids_per_domain,
                       images_per_id=domains[0].images.shape[0] // ids_per_domain,
                       height=h, width=w)
    return SynthDataset(spec=spec, domains=domains)
