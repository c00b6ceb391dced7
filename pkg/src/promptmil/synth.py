"""Synthetic whole-slide stand-in: bags of small textured images.

Witness instances carry a class-specific oriented grating over noise.
Background instances carry noise plus a distractor grating whose
orientation never matches a class texture. Which instances are witnesses
is stored in ``instance_latents`` for oracle checks only.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PRESENCE_OR = "presence_or"
MAJORITY_VOTE = "majority_vote"
BACKGROUND = -1

MAGIC = b"PMBG"
FORMAT_VERSION = 1
LATENT_TAG = b"LATN"
_HEADER = struct.Struct("<4sHIHHHiI")  # magic, version, n, H, W, C, label, bag_id
_TAG = struct.Struct("<4sI")

SPLITS = ("train", "val", "test")


class BagFormatError(ValueError):
    pass


class MagicError(BagFormatError):
    pass


class VersionError(BagFormatError):
    pass


class TruncatedError(BagFormatError):
    pass


class SpecError(ValueError):
    pass


@dataclass
class GenSpec:
    num_classes: int = 2
    n_min: int = 4
    n_max: int = 16
    image_size: int = 32
    channels: int = 3
    witness_rate: float | list = 0.5
    amplitude: float = 0.2
    noise: float = 0.05
    distractor_amplitude: float = 0.25
    frequency: float = 0.125
    region_size: int = 8  # witness texture fills one grid cell of this size; 0 = whole image
    label_rule: str = PRESENCE_OR
    num_train: int = 200
    num_val: int = 50
    num_test: int = 100
    signal: bool = True
    seed: int = 0

    def rates(self) -> list[float]:
        r = self.witness_rate
        if isinstance(r, (int, float)):
            return [float(r)] * self.num_classes
        r = [float(x) for x in r]
        if len(r) != self.num_classes:
            raise SpecError(f"witness_rate has {len(r)} entries for {self.num_classes} classes")
        return r

    def validate(self) -> None:
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if not 1 <= self.n_min <= self.n_max:
            raise SpecError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if self.label_rule not in (PRESENCE_OR, MAJORITY_VOTE):
            raise SpecError(f"unknown label_rule {self.label_rule!r}")
        rates = self.rates()
        for c, r in enumerate(rates):
            if not 0.0 <= r <= 1.0:
                raise SpecError(f"witness_rate for class {c} outside [0, 1]: {r}")
            if c > 0 and r == 0.0:
                raise SpecError(f"positive class {c} needs witness_rate > 0")
        if self.label_rule == MAJORITY_VOTE and any(r == 0.0 for r in rates):
            raise SpecError("majority_vote needs witness_rate > 0 for every class")
        if self.region_size < 0 or (self.region_size and self.image_size % self.region_size):
            raise SpecError(f"region_size {self.region_size} must divide image_size {self.image_size}")
        if self.noise < 0 or self.amplitude < 0:
            raise SpecError("noise and amplitude must be nonnegative")

    def orientations(self) -> np.ndarray:
        """Class texture orientations, evenly spread over half a turn."""
        c = self.num_classes
        return np.pi * np.arange(c) / c

    def distractor_orientations(self) -> np.ndarray:
        # halfway between neighbouring class orientations
        return self.orientations() + np.pi / (2 * self.num_classes)

    def fingerprint(self) -> str:
        blob = repr(sorted(asdict(self).items())).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Bag:
    instances: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    label: int
    bag_id: int
    instance_latents: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Bag):
            return NotImplemented
        same_latents = (
            (self.instance_latents is None and other.instance_latents is None)
            or (self.instance_latents is not None and other.instance_latents is not None
                and np.array_equal(self.instance_latents, other.instance_latents))
        )
        return (self.label == other.label and self.bag_id == other.bag_id
                and self.instances.dtype == other.instances.dtype
                and np.array_equal(self.instances, other.instances) and same_latents)


def label_from_latents(latents: np.ndarray, rule: str) -> int:
    """Recompute a bag label from its witness flags."""
    w = latents[latents != BACKGROUND]
    if w.size == 0:
        return 0
    if rule == PRESENCE_OR:
        return int(w.max())
    counts = np.bincount(w)
    return int(np.argmax(counts))


def _grating(rng, size: int, theta: float, freq: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def _render(rng, spec: GenSpec, latent: int) -> np.ndarray:
    s, c = spec.image_size, spec.channels
    img = 0.5 + spec.noise * rng.standard_normal((s, s, c))
    distract = spec.distractor_orientations()
    theta = distract[rng.integers(len(distract))]
    img += spec.distractor_amplitude * _grating(rng, s, theta, spec.frequency)[..., None]
    if latent != BACKGROUND:
        # draw texture randomness even under signal ablation so that the
        # rest of the bag stays identical
        theta = spec.orientations()[latent]
        tex = spec.amplitude * _grating(rng, s, theta, spec.frequency)
        r = spec.region_size
        if r:
            cells = s // r
            cy, cx = divmod(int(rng.integers(cells * cells)), cells)
            mask = np.zeros((s, s))
            mask[cy * r:(cy + 1) * r, cx * r:(cx + 1) * r] = 1.0
            tex = tex * mask
        if spec.signal:
            img += tex[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _latents(rng, spec: GenSpec, y: int, n: int) -> np.ndarray:
    rates = spec.rates()
    while True:
        lat = np.full(n, BACKGROUND, dtype=np.int32)
        lat[rng.random(n) < rates[y]] = y
        if spec.label_rule == MAJORITY_VOTE:
            others = [k for k in range(spec.num_classes) if k != y]
            conf = (rng.random(n) < rates[y] / 3) & (lat == BACKGROUND)
            lat[conf] = rng.choice(others, size=int(conf.sum()))
        elif y > 0 and not np.any(lat == y):
            lat[rng.integers(n)] = y
        if label_from_latents(lat, spec.label_rule) == y:
            return lat


def make_bag(spec: GenSpec, y: int, bag_id: int) -> Bag:
    rng = np.random.default_rng([spec.seed, bag_id])
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    lat = _latents(rng, spec, y, n)
    inst = np.stack([_render(rng, spec, int(v)) for v in lat])
    return Bag(inst, y, bag_id, lat)


def generate_dataset(spec: GenSpec) -> dict[str, list[Bag]]:
    """Deterministic, class-balanced train/val/test bags for ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0xB465])
    out = {}
    next_id = 0
    for split, count in zip(SPLITS, (spec.num_train, spec.num_val, spec.num_test)):
        labels = np.arange(count) % spec.num_classes
        rng.shuffle(labels)
        out[split] = [make_bag(spec, int(y), next_id + i) for i, y in enumerate(labels)]
        next_id += count
    return out


def write_bag(bag: Bag, path) -> None:
    n, h, w, c = bag.instances.shape
    data = np.ascontiguousarray(bag.instances, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, h, w, c, int(bag.label), int(bag.bag_id)))
        f.write(data.tobytes())
        if bag.instance_latents is not None:
            lat = np.ascontiguousarray(bag.instance_latents, dtype="<i4")
            # oracle-only section: never fed to a model
            f.write(_TAG.pack(LATENT_TAG, lat.size))
            f.write(lat.tobytes())


def read_bag(path, load_latents: bool = True) -> Bag:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise MagicError(f"{path}: not a bag file (bad magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, version, n, h, w, c, label, bag_id = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    count = n * h * w * c
    end = _HEADER.size + 4 * count
    if len(raw) < end:
        raise TruncatedError(f"{path}: expected {count} instance values, file too short")
    inst = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    inst = inst.reshape(n, h, w, c).astype(np.float32)
    latents = None
    if len(raw) > end:
        if len(raw) < end + _TAG.size:
            raise TruncatedError(f"{path}: truncated section tag")
        tag, m = _TAG.unpack_from(raw, end)
        if tag != LATENT_TAG:
            raise BagFormatError(f"{path}: unknown section {tag!r}")
        if len(raw) < end + _TAG.size + 4 * m:
            raise TruncatedError(f"{path}: truncated latent section")
        if load_latents:
            latents = np.frombuffer(raw, dtype="<i4", count=m,
                                    offset=end + _TAG.size).astype(np.int32)
    return Bag(inst, int(label), int(bag_id), latents)


MANIFEST = "manifest.txt"


def write_dataset(dataset: dict[str, list[Bag]], out_dir, spec: GenSpec | None = None) -> Path:
    """Write bag files plus a plain-text manifest; returns the manifest path."""
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    out.mkdir(exist_ok=True)
    lines = ["# promptmil dataset manifest v1"]
    if spec is not None:
        lines.append(f"# spec_fingerprint {spec.fingerprint()}")
    for split in SPLITS:
        for bag in dataset.get(split, []):
            name = f"{split}_{bag.bag_id:05d}.pmbg"
            write_bag(bag, out / name)
            lines.append(f"{split}\t{name}\t{bag.label}\t{bag.n}")
    path = out / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dataset(root, load_latents: bool = False) -> dict[str, list[Bag]]:
    root = Path(root)
    manifest = root / MANIFEST if root.is_dir() else root
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    out: dict[str, list[Bag]] = {s: [] for s in SPLITS}
    for line in manifest.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        split, name, *_ = line.split("\t")
        if split not in out:
            raise BagFormatError(f"{manifest}: unknown split {split!r}")
        out[split].append(read_bag(manifest.parent / name, load_latents=load_latents))
    return out


def dataset_fingerprint(dataset: dict[str, list[Bag]]) -> str:
    """Hash of instance data and labels (latents excluded)."""
    h = hashlib.sha256()
    for split in SPLITS:
        for bag in dataset.get(split, []):
            h.update(f"{split}:{bag.bag_id}:{bag.label}:".encode())
            h.update(np.ascontiguousarray(bag.instances, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def strip_latents(bags: list[Bag]) -> list[Bag]:
    return [Bag(b.instances, b.label, b.bag_id, None) for b in bags]

