"""Synthetic multi-coil phantoms and the on-disk dataset format.

Sample file layout (all little-endian)::

    magic    8 bytes   b"NPBSMPL\\0"
    version  u8
    header   H u32, W u32, Nc u32, seed u64, noise_std f64, roi 4 x u32
    payload  float32 image [H, W, 2], smaps [Nc, H, W, 2], kspace [Nc, H, W, 2]
    checksum 8-byte BLAKE2b digest of everything above

The manifest next to the sample files is JSON.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .diffcore import is_power_of_two
from .mri import SamplingMask, apply_mask, forward_model, smaps_normalization_error

__all__ = [
    "PhantomSpec",
    "KSpaceSample",
    "DatasetManifest",
    "SampleFormatError",
    "HeaderError",
    "ChecksumError",
    "ShapeMismatchError",
    "ManifestError",
    "generate_phantom",
    "generate_smaps",
    "make_sample",
    "save_sample",
    "load_sample",
    "build_dataset",
    "load_manifest",
    "load_split",
]

MAGIC = b"NPBSMPL\x00"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = "npbrec-dataset/1"
_HEADER = struct.Struct("<IIIQd4I")
_CHECKSUM_BYTES = 8


class SampleFormatError(ValueError):
    """Base class for unreadable sample files."""


class HeaderError(SampleFormatError):
    pass


class ChecksumError(SampleFormatError):
    pass


class ShapeMismatchError(SampleFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    n_coils: int = 4
    n_ellipses: tuple = (3, 6)
    intensity: tuple = (0.2, 0.6)
    phase_scale: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not is_power_of_two(self.size) or self.size < 16:
            raise ValueError(f"phantom size must be a power of two >= 16, got {self.size}")
        if self.n_coils < 1:
            raise ValueError("need at least one coil")
        lo, hi = self.n_ellipses
        if lo < 1 or hi < lo:
            raise ValueError(f"bad ellipse count range {self.n_ellipses}")
        if not 0 <= self.intensity[0] <= self.intensity[1]:
            raise ValueError(f"bad intensity range {self.intensity}")
        object.__setattr__(self, "n_ellipses", (int(lo), int(hi)))
        object.__setattr__(self, "intensity", (float(self.intensity[0]), float(self.intensity[1])))


def _grid(n: int, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    m = n * supersample
    c = (np.arange(m) + 0.5) / m * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")


def _ellipses(spec: PhantomSpec, rng: np.random.Generator) -> list[dict]:
    count = int(rng.integers(spec.n_ellipses[0], spec.n_ellipses[1] + 1))
    out = []
    for _ in range(count):
        out.append(
            dict(
                cy=rng.uniform(-0.35, 0.35),
                cx=rng.uniform(-0.35, 0.35),
                a=rng.uniform(0.15, 0.6),
                b=rng.uniform(0.15, 0.6),
                theta=rng.uniform(0.0, np.pi),
                value=rng.uniform(*spec.intensity),
            )
        )
    return out


def _coverage(e: dict, n: int, supersample: int = 4) -> np.ndarray:
    yy, xx = _grid(n, supersample)
    c, s = np.cos(e["theta"]), np.sin(e["theta"])
    u = (xx - e["cx"]) * c + (yy - e["cy"]) * s
    v = -(xx - e["cx"]) * s + (yy - e["cy"]) * c
    inside = (u / e["a"]) ** 2 + (v / e["b"]) ** 2 <= 1.0
    return inside.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


def _phase_field(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(spec.size)
    phase = np.zeros_like(xx)
    for _ in range(3):
        fy, fx = rng.uniform(-0.5, 0.5, size=2)
        phase += rng.uniform(0.3, 1.0) * np.cos(np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return spec.phase_scale * phase / 3.0


def _phantom_and_roi(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, tuple]:
    rng = np.random.default_rng(seed)
    ellipses = _ellipses(spec, rng)
    mag = np.zeros((spec.size, spec.size))
    largest, largest_cov = -1.0, None
    for e in ellipses:
        cov = _coverage(e, spec.size)
        mag += e["value"] * cov
        if e["a"] * e["b"] > largest:
            largest, largest_cov = e["a"] * e["b"], cov
    phase = _phase_field(spec, rng)
    image = np.stack([mag * np.cos(phase), mag * np.sin(phase)], axis=-1)
    rows = np.flatnonzero(largest_cov.any(axis=1))
    cols = np.flatnonzero(largest_cov.any(axis=0))
    roi = (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)
    return image, roi


def generate_phantom(spec: PhantomSpec, seed: int) -> np.ndarray:
    """Complex ``[H, W, 2]`` phantom: anti-aliased ellipses times a smooth phase."""
    return _phantom_and_roi(spec, seed)[0]


def generate_smaps(spec: PhantomSpec, seed: int) -> np.ndarray:
    """Gaussian-bump coil profiles centered on the field-of-view border.

    Coils sit at equally spaced angles (random global rotation) on the
    inscribed circle, each with a random linear phase; the stack is
    normalized so ``sum_i |S_i|^2 == 1`` per pixel.
    """
    rng = np.random.default_rng(seed)
    n = spec.size
    yy, xx = _grid(n)
    start = rng.uniform(0, 2 * np.pi)
    maps = []
    for i in range(spec.n_coils):
        ang = start + 2 * np.pi * i / spec.n_coils
        cy, cx = np.sin(ang), np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.8**2))
        ph = rng.uniform(0, 2 * np.pi) + rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx
        maps.append(np.stack([mag * np.cos(ph), mag * np.sin(ph)], axis=-1))
    maps = np.stack(maps)
    norm = np.sqrt((maps**2).sum(axis=(0, -1)))
    return maps / norm[None, :, :, None]


def coil_centers(spec: PhantomSpec, seed: int) -> np.ndarray:
    """Pixel coordinates (row, col) of each coil's bump center."""
    rng = np.random.default_rng(seed)
    start = rng.uniform(0, 2 * np.pi)
    ang = start + 2 * np.pi * np.arange(spec.n_coils) / spec.n_coils
    half = spec.size / 2
    return np.stack([half + half * np.sin(ang), half + half * np.cos(ang)], axis=-1)


@dataclass
class KSpaceSample:
    kspace_full: np.ndarray
    image: np.ndarray
    smaps: np.ndarray
    roi: tuple
    seed: int
    noise_std: float = 0.0
    mask: Optional[SamplingMask] = None

    @property
    def image_gt(self) -> np.ndarray:
        return np.sqrt((self.image**2).sum(axis=-1))

    @property
    def shape(self) -> tuple:
        return self.kspace_full.shape[:3]

    def masked_kspace(self, mask: Optional[SamplingMask] = None) -> np.ndarray:
        mask = mask if mask is not None else self.mask
        if mask is None:
            raise ValueError("no sampling mask attached to the sample")
        return apply_mask(self.kspace_full, mask)


def make_sample(spec: PhantomSpec, seed: int) -> KSpaceSample:
    image, roi = _phantom_and_roi(spec, seed)
    smaps = generate_smaps(spec, seed + 1)
    kspace = forward_model(image, smaps, spec.noise_std, seed + 2)
    f32 = np.float32
    return KSpaceSample(kspace.astype(f32), image.astype(f32), smaps.astype(f32), roi, int(seed), spec.noise_std)


def _encode(sample: KSpaceSample) -> bytes:
    nc, h, w = sample.shape
    header = _HEADER.pack(h, w, nc, sample.seed, float(sample.noise_std), *sample.roi)
    body = bytearray(MAGIC)
    body += struct.pack("<B", FORMAT_VERSION)
    body += header
    for arr in (sample.image, sample.smaps, sample.kspace_full):
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    body += hashlib.blake2b(bytes(body), digest_size=_CHECKSUM_BYTES).digest()
    return bytes(body)


def save_sample(sample: KSpaceSample, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(_encode(sample))
    return path


def load_sample(path: Union[str, Path], expected_shape: Optional[tuple] = None) -> KSpaceSample:
    """Read and validate one sample file.

    ``expected_shape`` is ``(Nc, H, W)`` from the manifest, if known.
    """
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise HeaderError(f"{path}: bad magic string")
    off = len(MAGIC)
    if len(raw) < off + 1 + _HEADER.size + _CHECKSUM_BYTES:
        raise ChecksumError(f"{path}: file truncated")
    version = raw[off]
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported format version {version}")
    off += 1
    h, w, nc, seed, noise_std, *roi = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    sizes = [h * w * 2, nc * h * w * 2, nc * h * w * 2]
    expected_len = off + 4 * sum(sizes) + _CHECKSUM_BYTES
    if len(raw) != expected_len:
        raise ChecksumError(f"{path}: payload length {len(raw)} != {expected_len}")
    digest = hashlib.blake2b(raw[:-_CHECKSUM_BYTES], digest_size=_CHECKSUM_BYTES).digest()
    if digest != raw[-_CHECKSUM_BYTES:]:
        raise ChecksumError(f"{path}: checksum mismatch")
    if expected_shape is not None and tuple(expected_shape) != (nc, h, w):
        raise ShapeMismatchError(f"{path}: shape {(nc, h, w)} does not match manifest {tuple(expected_shape)}")
    arrays = []
    for n, shp in zip(sizes, [(h, w, 2), (nc, h, w, 2), (nc, h, w, 2)]):
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shp).astype(np.float32))
        off += 4 * n
    image, smaps, kspace = arrays
    if smaps_normalization_error(smaps) > 1e-5:
        raise SampleFormatError(f"{path}: sensitivity maps are not normalized")
    return KSpaceSample(kspace, image, smaps, tuple(roi), int(seed), float(noise_std))


@dataclass
class DatasetManifest:
    spec: PhantomSpec
    splits: dict = field(default_factory=dict)
    root: Optional[Path] = None
    version: str = MANIFEST_VERSION

    @property
    def count(self) -> int:
        return sum(len(v) for v in self.splits.values())

    @property
    def sample_shape(self) -> tuple:
        return (self.spec.n_coils, self.spec.size, self.spec.size)

    def paths(self, split: str) -> list[Path]:
        return [self.root / entry["file"] for entry in self.splits[split]]

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "count": self.count,
            "sample_shape": list(self.sample_shape),
            "spec": asdict(self.spec),
            "splits": self.splits,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _read_manifest_doc(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc


def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"{path}: manifest not found")
    doc = _read_manifest_doc(path)
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    spec = doc["spec"]
    spec = PhantomSpec(**{**spec, "n_ellipses": tuple(spec["n_ellipses"]), "intensity": tuple(spec["intensity"])})
    splits = {k: [dict(e, roi=tuple(e["roi"])) for e in v] for k, v in doc["splits"].items()}
    return DatasetManifest(spec, splits, root)


def load_split(manifest: DatasetManifest, split: str) -> list[KSpaceSample]:
    return [load_sample(p, manifest.sample_shape) for p in manifest.paths(split)]


def build_dataset(
    spec: PhantomSpec,
    n_train: int,
    n_val: int,
    n_test: int,
    out_dir: Union[str, Path],
) -> DatasetManifest:
    """Write ``train/val/test`` sample files plus ``manifest.json`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    existing = out / MANIFEST_NAME
    if existing.exists():
        found = _read_manifest_doc(existing).get("version")
        if found != MANIFEST_VERSION:
            raise ManifestError(f"{existing}: existing manifest has version {found!r}, expected {MANIFEST_VERSION!r}")

    counts = {"train": n_train, "val": n_val, "test": n_test}
    total = sum(counts.values())
    # seeds leave room for the +1/+2 offsets used by smaps and noise
    seeds = [int(s) * 4 for s in np.random.SeedSequence(spec.seed).generate_state(total, dtype=np.uint32)]
    if len(set(seeds)) != total:
        raise ManifestError("sample seed collision; choose another dataset seed")

    splits, i = {}, 0
    for split, n in counts.items():
        entries = []
        for j in range(n):
            sample = make_sample(spec, seeds[i])
            name = f"{split}_{j:04d}.bin"
            save_sample(sample, out / name)
            entries.append({"file": name, "seed": seeds[i], "roi": tuple(sample.roi)})
            i += 1
        splits[split] = entries
    manifest = DatasetManifest(spec, splits, out)
    existing.write_text(manifest.to_json())
    return manifest
