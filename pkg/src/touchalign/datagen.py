"""Synthetic multi-sensor visuo-tactile world with ground-truth latent factors.

Every sample is a latent contact state (material class, texture frequency,
contact depth, contact center, grasp outcome, object id) rendered twice: a
touch image through one of K sensor profiles (background color, illumination,
gel stiffness, pixel noise) and a canonical vision image with no sensor
artifacts. Material identity is carried by a per-class texture frequency band;
objects within a class sit on an even frequency grid inside the band.

On-disk layout (format version 1):
  <dir>/manifest.json                  global metadata, splits, config echo
  <dir>/<dataset>/samples.bin          concatenated float32 LE image tensors
  <dir>/<dataset>/samples.json         per-sample records: offsets + latents
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorio
from .tensorio import FormatError

# Renderer constants. SPREAD0 is the contact-blob Gaussian sigma in unit image
# coordinates at gel stiffness 1; AMP0 the peak amplitude at depth 1. The
# amplitude is divided by stiffness^2 so the integrated imprint mass is the
# same for every sensor (mean-pixel separation then follows from background
# separation alone). The spread keeps several texture periods visible inside
# the contact region at 32px; narrower blobs make adjacent frequency bands
# indistinguishable.
SPREAD0 = 0.20
AMP0 = 0.55
SHADE0 = 0.5

# Texture frequency layout: class m owns [FREQ_BASE + m*(BAND_WIDTH+BAND_GAP),
# .. + BAND_WIDTH] cycles per image width. Per-sample jitter stays well inside
# the BAND_GAP margin.
FREQ_BASE = 1.5
BAND_WIDTH = 1.5
BAND_GAP = 0.3
FREQ_JITTER = 0.06

DEPTH_MIN = 0.1
GRASP_DEPTH_THRESHOLD = 0.5
GRASP_FLIP_PROB = 0.10

SPLIT_NAMES = ("train", "val", "test")

# Minimum pairwise L1 background separation between sensor profiles; this is
# what makes mean-pixel sensor resolution reliable.
MIN_BACKGROUND_L1 = 0.2
MAX_NOISE_SIGMA = 0.1


@dataclass(frozen=True)
class LatentSample:
    """Ground-truth contact state behind one visuo-tactile pair."""

    material_class: int
    texture_frequency: float  # cycles per image width, > 0
    contact_depth: float  # 0 = no contact, 1 = deepest press
    contact_center: tuple[float, float]  # (cx, cy) in unit image coords
    grasp_outcome: int  # 1 = stable, 0 = slip
    object_id: int

    def validate(self, m: int | None = None) -> None:
        if m is not None and not 0 <= self.material_class < m:
            raise ValueError(f"material_class {self.material_class} outside [0, {m})")
        if not 0.0 <= self.contact_depth <= 1.0:
            raise ValueError(f"contact_depth {self.contact_depth} outside [0, 1]")
        if self.texture_frequency <= 0:
            raise ValueError("texture_frequency must be positive")
        if self.grasp_outcome not in (0, 1):
            raise ValueError("grasp_outcome must be 0 or 1")


@dataclass(frozen=True)
class SensorProfile:
    """Rendering idiosyncrasies of one simulated tactile sensor."""

    sensor_id: int
    background_color: tuple[float, float, float]
    illumination_direction: tuple[float, float]  # unit 2-vector
    gel_stiffness: float  # > 0, scales contact spread
    noise_sigma: float  # Gaussian pixel noise std, < 0.1

    def validate(self) -> None:
        bg = np.asarray(self.background_color, dtype=np.float64)
        if bg.shape != (3,) or np.any(bg < 0) or np.any(bg > 1):
            raise ValueError(f"background_color {self.background_color} outside [0,1]^3")
        ill = np.asarray(self.illumination_direction, dtype=np.float64)
        if ill.shape != (2,) or not math.isclose(float(np.linalg.norm(ill)), 1.0, abs_tol=1e-6):
            raise ValueError("illumination_direction must be a unit 2-vector")
        if self.gel_stiffness <= 0:
            raise ValueError("gel_stiffness must be positive")
        if not 0.0 <= self.noise_sigma < MAX_NOISE_SIGMA:
            raise ValueError(f"noise_sigma must be in [0, {MAX_NOISE_SIGMA})")

    def to_dict(self) -> dict:
        return {
            "sensor_id": self.sensor_id,
            "background_color": list(self.background_color),
            "illumination_direction": list(self.illumination_direction),
            "gel_stiffness": self.gel_stiffness,
            "noise_sigma": self.noise_sigma,
        }

    @staticmethod
    def from_dict(d: dict) -> "SensorProfile":
        return SensorProfile(
            sensor_id=int(d["sensor_id"]),
            background_color=tuple(float(x) for x in d["background_color"]),
            illumination_direction=tuple(float(x) for x in d["illumination_direction"]),
            gel_stiffness=float(d["gel_stiffness"]),
            noise_sigma=float(d["noise_sigma"]),
        )


@dataclass(frozen=True)
class TactileImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    sensor_id: int


def default_profiles(k: int, noise_sigma: float = 0.02) -> list[SensorProfile]:
    """K sensor profiles with guaranteed background separation.

    Gray levels are spread evenly, which keeps pairwise L1 distance at
    3 * 0.55 / (k - 1); beyond k = 9 that drops under the separation floor
    and callers must supply profiles themselves.
    """
    if k < 1:
        raise ValueError("need at least one sensor")
    if k > 9:
        raise ValueError("default profiles support at most 9 sensors; pass explicit profiles")
    levels = [0.425] if k == 1 else list(np.linspace(0.15, 0.70, k))
    stiffness = [1.0] if k == 1 else list(np.linspace(0.85, 1.30, k))
    profiles = []
    for i in range(k):
        angle = 2.0 * math.pi * i / k + 0.4
        profiles.append(
            SensorProfile(
                sensor_id=i,
                background_color=(levels[i], levels[i], levels[i]),
                illumination_direction=(math.cos(angle), math.sin(angle)),
                gel_stiffness=float(stiffness[i]),
                noise_sigma=noise_sigma,
            )
        )
    validate_profiles(profiles)
    return profiles


def validate_profiles(profiles: Sequence[SensorProfile]) -> None:
    for p in profiles:
        p.validate()
    ids = [p.sensor_id for p in profiles]
    if sorted(ids) != list(range(len(profiles))):
        raise ValueError(f"sensor ids must be 0..{len(profiles) - 1}, got {ids}")
    for i, a in enumerate(profiles):
        for b in profiles[i + 1 :]:
            l1 = float(np.abs(np.asarray(a.background_color) - np.asarray(b.background_color)).sum())
            if l1 < MIN_BACKGROUND_L1:
                raise ValueError(
                    f"profiles {a.sensor_id} and {b.sensor_id}: background L1 {l1:.3f} "
                    f"< {MIN_BACKGROUND_L1}"
                )


@dataclass(frozen=True)
class WorldConfig:
    """Structural description of the synthetic world."""

    m: int = 4  # material classes
    k: int = 3  # sensors (one dataset per sensor)
    image_size: int = 32  # H = W
    patch_size: int = 8  # encoder patch size, for divisibility validation
    pairs_per_sensor: int = 2000
    objects_per_class: int = 8
    noise_sigma: float = 0.02  # used when profiles are auto-generated
    profiles: tuple[SensorProfile, ...] | None = None
    # Optional per-dataset sizes; overrides pairs_per_sensor when given.
    pairs_by_sensor: tuple[int, ...] | None = None

    def resolved_profiles(self) -> list[SensorProfile]:
        if self.profiles is None:
            return default_profiles(self.k, self.noise_sigma)
        profiles = list(self.profiles)
        if len(profiles) != self.k:
            raise ValueError(f"{len(profiles)} profiles for k={self.k}")
        validate_profiles(profiles)
        return profiles

    def resolved_sizes(self) -> list[int]:
        if self.pairs_by_sensor is None:
            return [self.pairs_per_sensor] * self.k
        sizes = [int(n) for n in self.pairs_by_sensor]
        if len(sizes) != self.k:
            raise ValueError(f"{len(sizes)} dataset sizes for k={self.k}")
        if any(n < 1 for n in sizes):
            raise ValueError("every dataset size must be >= 1")
        return sizes

    def validate(self) -> None:
        if self.m < 2:
            raise ValueError("need at least 2 material classes")
        if self.k < 1:
            raise ValueError("need at least 1 sensor")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.pairs_per_sensor < 1:
            raise ValueError("pairs_per_sensor must be >= 1")
        self.resolved_sizes()
        if self.objects_per_class < 3:
            raise ValueError("objects_per_class must be >= 3 to populate all three splits")
        self.resolved_profiles()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["profiles"] = [p.to_dict() for p in self.resolved_profiles()]
        return d

    @staticmethod
    def from_dict(d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(WorldConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if kwargs.get("profiles") is not None:
            kwargs["profiles"] = tuple(SensorProfile.from_dict(p) for p in kwargs["profiles"])
        if kwargs.get("pairs_by_sensor") is not None:
            kwargs["pairs_by_sensor"] = tuple(int(n) for n in kwargs["pairs_by_sensor"])
        cfg = WorldConfig(**kwargs)
        cfg.validate()
        return cfg


def class_frequency_band(material_class: int) -> tuple[float, float]:
    lo = FREQ_BASE + material_class * (BAND_WIDTH + BAND_GAP)
    return lo, lo + BAND_WIDTH


def object_base_frequency(material_class: int, object_slot: int, objects_per_class: int) -> float:
    """Even grid inside the class band; object_slot in [0, objects_per_class)."""
    lo, hi = class_frequency_band(material_class)
    return lo + (hi - lo) * (object_slot + 0.5) / objects_per_class


def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    u = (np.arange(w, dtype=np.float64) + 0.5) / w
    v = (np.arange(h, dtype=np.float64) + 0.5) / h
    return np.meshgrid(u, v)  # U, V each (h, w)


def _imprint_field(
    latent: LatentSample, spread: float, amplitude: float, h: int, w: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (bump, texture, du_dv) shared by touch and vision renderers."""
    uu, vv = _pixel_grid(h, w)
    cx, cy = latent.contact_center
    du = (uu - cx) / spread
    dv = (vv - cy) / spread
    bump = np.exp(-0.5 * (du * du + dv * dv))
    tex = 0.5 * (1.0 + np.sin(2.0 * math.pi * latent.texture_frequency * uu))
    return amplitude * bump, tex, (du, dv)


def touch_pixels(
    latent: LatentSample, profile: SensorProfile, noise_seed: int, h: int = 32, w: int = 32
) -> np.ndarray:
    """Render one touch image as an (h, w, 3) float32 array in [0, 1]."""
    spread = SPREAD0 * profile.gel_stiffness
    amplitude = AMP0 * latent.contact_depth / (profile.gel_stiffness ** 2)
    bump, tex, (du, dv) = _imprint_field(latent, spread, amplitude, h, w)
    lx, ly = profile.illumination_direction
    shade = -SHADE0 * bump * (du * lx + dv * ly)
    field2d = bump * tex + shade
    img = np.asarray(profile.background_color, dtype=np.float64)[None, None, :] + field2d[..., None]
    if profile.noise_sigma > 0:
        noise_rng = np.random.default_rng(noise_seed)
        img = img + noise_rng.normal(0.0, profile.noise_sigma, size=(h, w, 3))
    # Clamp last: noise and deep contacts may saturate, which biases means,
    # so any mean-pixel oracle has to include this clamp.
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_touch(
    latent: LatentSample, profile: SensorProfile, noise_seed: int, h: int = 32, w: int = 32
) -> TactileImage:
    latent.validate()
    profile.validate()
    return TactileImage(pixels=touch_pixels(latent, profile, noise_seed, h, w), sensor_id=profile.sensor_id)


def render_vision(latent: LatentSample, h: int = 32, w: int = 32) -> np.ndarray:
    """Canonical camera: mid-gray background, reference spread, no sensor terms."""
    amplitude = AMP0 * latent.contact_depth
    bump, tex, _ = _imprint_field(latent, SPREAD0, amplitude, h, w)
    img = 0.5 + (bump * tex)[..., None] * np.ones(3)[None, None, :]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class DatasetPart:
    """One sensor's dataset held in memory."""

    name: str
    sensor_id: int
    touch: np.ndarray  # (n, h, w, 3) float32
    vision: np.ndarray  # (n, h, w, 3) float32
    material_class: np.ndarray  # (n,) int64
    texture_frequency: np.ndarray  # (n,) float64
    contact_depth: np.ndarray  # (n,) float64
    contact_center: np.ndarray  # (n, 2) float64
    grasp_outcome: np.ndarray  # (n,) int64
    object_id: np.ndarray  # (n,) int64
    split: np.ndarray  # (n,) int64 index into SPLIT_NAMES

    @property
    def size(self) -> int:
        return int(self.touch.shape[0])

    def split_indices(self, split: str) -> np.ndarray:
        code = SPLIT_NAMES.index(split)
        return np.nonzero(self.split == code)[0]


@dataclass
class Dataset:
    """Manifest plus all parts; the unit every other module consumes."""

    config: WorldConfig
    parts: list[DatasetPart]
    split_objects: dict[str, list[int]] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def sizes(self) -> list[int]:
        return [p.size for p in self.parts]

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def profiles(self) -> list[SensorProfile]:
        return self.config.resolved_profiles()

    def manifest_dict(self) -> dict:
        return {
            "format_version": tensorio.FORMAT_VERSION,
            "m": self.m,
            "k": self.k,
            "datasets": [
                {"name": p.name, "sensor_id": p.sensor_id, "size": p.size, "path": p.name}
                for p in self.parts
            ],
            "splits": {name: sorted(ids) for name, ids in self.split_objects.items()},
            "world": self.config.to_dict(),
        }


def _assign_splits(m: int, objects_per_class: int, rng: np.random.Generator) -> dict[str, list[int]]:
    """Object-level split: roughly 1/8 val and 1/4 test per class, rest train."""
    j = objects_per_class
    n_test = max(1, int(math.floor(j * 0.25 + 0.5)))
    n_val = max(1, int(math.floor(j * 0.125 + 0.5)))
    n_train = j - n_test - n_val
    if n_train < 1:
        raise ValueError(f"objects_per_class={j} leaves no training objects")
    out: dict[str, list[int]] = {name: [] for name in SPLIT_NAMES}
    for cls in range(m):
        order = rng.permutation(j)
        ids = [cls * j + int(slot) for slot in order]
        out["train"].extend(ids[:n_train])
        out["val"].extend(ids[n_train : n_train + n_val])
        out["test"].extend(ids[n_train + n_val :])
    return out


def generate_world(config: WorldConfig, seed: int) -> Dataset:
    """Deterministically build the full dataset in memory.

    All latent draws come from a single seeded generator in a fixed order, so
    (config, seed) determines every byte of the eventual files.
    """
    config.validate()
    profiles = config.resolved_profiles()
    rng = np.random.default_rng(seed)
    j = config.objects_per_class
    split_objects = _assign_splits(config.m, j, rng)
    split_of_object = np.empty(config.m * j, dtype=np.int64)
    for code, name in enumerate(SPLIT_NAMES):
        for oid in split_objects[name]:
            split_of_object[oid] = code

    h = w = config.image_size
    parts = []
    for profile, n in zip(profiles, config.resolved_sizes()):
        object_ids = rng.integers(0, config.m * j, size=n)
        jitter = rng.uniform(-FREQ_JITTER, FREQ_JITTER, size=n)
        centers = rng.uniform(0.25, 0.75, size=(n, 2))
        depths = rng.uniform(DEPTH_MIN, 1.0, size=n)
        flips = rng.random(n) < GRASP_FLIP_PROB
        noise_seeds = rng.integers(0, 2**63, size=n, dtype=np.int64)

        classes = object_ids // j
        slots = object_ids % j
        freqs = np.array(
            [object_base_frequency(int(c), int(s), j) for c, s in zip(classes, slots)]
        ) + jitter
        stable = (depths >= GRASP_DEPTH_THRESHOLD).astype(np.int64)
        grasp = np.where(flips, 1 - stable, stable)

        touch = np.empty((n, h, w, 3), dtype=np.float32)
        vision = np.empty((n, h, w, 3), dtype=np.float32)
        for i in range(n):
            latent = LatentSample(
                material_class=int(classes[i]),
                texture_frequency=float(freqs[i]),
                contact_depth=float(depths[i]),
                contact_center=(float(centers[i, 0]), float(centers[i, 1])),
                grasp_outcome=int(grasp[i]),
                object_id=int(object_ids[i]),
            )
            touch[i] = touch_pixels(latent, profile, int(noise_seeds[i]), h, w)
            vision[i] = render_vision(latent, h, w)

        parts.append(
            DatasetPart(
                name=f"sensor{profile.sensor_id}",
                sensor_id=profile.sensor_id,
                touch=touch,
                vision=vision,
                material_class=classes.astype(np.int64),
                texture_frequency=freqs.astype(np.float64),
                contact_depth=depths.astype(np.float64),
                contact_center=centers.astype(np.float64),
                grasp_outcome=grasp.astype(np.int64),
                object_id=object_ids.astype(np.int64),
                split=split_of_object[object_ids],
            )
        )
    return Dataset(config=config, parts=parts, split_objects=split_objects)


def write_dataset(dataset: Dataset, dir_path: str | Path) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    tensorio.dump_json(dir_path / "manifest.json", dataset.manifest_dict())
    for part in dataset.parts:
        part_dir = dir_path / part.name
        part_dir.mkdir(parents=True, exist_ok=True)
        arrays = []
        for i in range(part.size):
            arrays.append(part.touch[i])
            arrays.append(part.vision[i])
        entries = tensorio.write_blob(part_dir / "samples.bin", arrays)
        records = []
        for i in range(part.size):
            records.append(
                {
                    "touch_offset": entries[2 * i]["offset"],
                    "vision_offset": entries[2 * i + 1]["offset"],
                    "shape": entries[2 * i]["shape"],
                    "material_class": int(part.material_class[i]),
                    "texture_frequency": float(part.texture_frequency[i]),
                    "contact_depth": float(part.contact_depth[i]),
                    "contact_center": [float(part.contact_center[i, 0]), float(part.contact_center[i, 1])],
                    "grasp_outcome": int(part.grasp_outcome[i]),
                    "object_id": int(part.object_id[i]),
                    "sensor_id": part.sensor_id,
                    "split": SPLIT_NAMES[int(part.split[i])],
                }
            )
        tensorio.dump_json(
            part_dir / "samples.json",
            {"format_version": tensorio.FORMAT_VERSION, "records": records},
        )


def read_dataset(dir_path: str | Path) -> Dataset:
    dir_path = Path(dir_path)
    manifest = tensorio.load_json(dir_path / "manifest.json")
    if not isinstance(manifest, dict):
        raise FormatError("manifest.json must hold a JSON object")
    version = manifest.get("format_version")
    if version != tensorio.FORMAT_VERSION:
        raise FormatError(f"unknown dataset format version {version!r}")
    config = WorldConfig.from_dict(manifest["world"])
    parts = []
    for entry in manifest["datasets"]:
        part_dir = dir_path / entry["path"]
        sidecar = tensorio.load_json(part_dir / "samples.json")
        if sidecar.get("format_version") != tensorio.FORMAT_VERSION:
            raise FormatError(f"unknown sidecar format version in {part_dir}")
        records = sidecar["records"]
        if len(records) != int(entry["size"]):
            raise FormatError(
                f"{part_dir}: sidecar has {len(records)} records, manifest says {entry['size']}"
            )
        blob_entries = []
        for rec in records:
            blob_entries.append({"offset": rec["touch_offset"], "shape": rec["shape"]})
            blob_entries.append({"offset": rec["vision_offset"], "shape": rec["shape"]})
        arrays = tensorio.read_blob(part_dir / "samples.bin", blob_entries)
        n = len(records)
        h, w, _ = (int(x) for x in records[0]["shape"]) if n else (config.image_size, config.image_size, 3)
        touch = np.stack([arrays[2 * i] for i in range(n)]) if n else np.empty((0, h, w, 3), np.float32)
        vision = np.stack([arrays[2 * i + 1] for i in range(n)]) if n else np.empty((0, h, w, 3), np.float32)
        split_codes = []
        for rec in records:
            if rec["split"] not in SPLIT_NAMES:
                raise FormatError(f"unknown split name {rec['split']!r}")
            split_codes.append(SPLIT_NAMES.index(rec["split"]))
        parts.append(
            DatasetPart(
                name=entry["name"],
                sensor_id=int(entry["sensor_id"]),
                touch=touch,
                vision=vision,
                material_class=np.array([r["material_class"] for r in records], dtype=np.int64),
                texture_frequency=np.array([r["texture_frequency"] for r in records], dtype=np.float64),
                contact_depth=np.array([r["contact_depth"] for r in records], dtype=np.float64),
                contact_center=np.array([r["contact_center"] for r in records], dtype=np.float64).reshape(n, 2),
                grasp_outcome=np.array([r["grasp_outcome"] for r in records], dtype=np.int64),
                object_id=np.array([r["object_id"] for r in records], dtype=np.int64),
                split=np.array(split_codes, dtype=np.int64),
            )
        )
    splits = {name: list(ids) for name, ids in manifest.get("splits", {}).items()}
    seen: set[int] = set()
    for name, ids in splits.items():
        overlap = seen.intersection(ids)
        if overlap:
            raise FormatError(f"object ids {sorted(overlap)} appear in multiple splits")
        seen.update(ids)
    dataset = Dataset(config=config, parts=parts, split_objects=splits)
    total = sum(int(e["size"]) for e in manifest["datasets"])
    if total != dataset.total:
        raise FormatError("manifest sizes disagree with loaded data")
    return dataset


def generate_and_write(config: WorldConfig, seed: int, dir_path: str | Path) -> Dataset:
    dataset = generate_world(config, seed)
    write_dataset(dataset, dir_path)
    return dataset
