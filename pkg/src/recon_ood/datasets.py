"""Procedural 16x16 image benchmark: labeled in-distribution classes and
disjoint out-of-distribution families, plus the on-disk dataset format.

Every image is a pure function of (kind, jitter seed), and jitter seeds are
derived by hashing (master seed, split, kind, index), so splits are
disjoint by construction and a whole dataset is reproducible from its
manifest alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DomainError
from .seeding import derive_seed

IMAGE_SIZE = 16
N_PIXELS = IMAGE_SIZE * IMAGE_SIZE

ID_CLASSES = ("disk", "plus-cross", "horizontal-stripes", "checkerboard")
OOD_FAMILIES = ("ring", "triangle", "vertical-stripes", "uniform-noise")

DATASET_MAGIC = b"RDS1"

# Template amplitude is 0.9 so intensity jitter up to 1.2x only grazes the
# [-1, 1] clamp; full-image saturation would collapse distinct jitter draws
# into identical byte patterns.
_BG = -0.9
_FG = 0.9


def _shape_template(kind: str, dx: int, dy: int) -> np.ndarray:
    """Render one deterministic shape template shifted by (dx, dy) pixels."""
    n = IMAGE_SIZE
    img = np.full((n, n), _BG, dtype=np.float32)
    rows, cols = np.mgrid[0:n, 0:n]
    cy = (n - 1) / 2.0 + dy
    cx = (n - 1) / 2.0 + dx
    dist = np.sqrt((rows - cy) ** 2 + (cols - cx) ** 2)
    if kind == "disk":
        img[dist <= 5.0] = _FG
    elif kind == "ring":
        img[(dist >= 3.5) & (dist <= 5.5)] = _FG
    elif kind == "plus-cross":
        img[np.abs(rows - cy) <= 1.5] = _FG
        img[np.abs(cols - cx) <= 1.5] = _FG
    elif kind == "triangle":
        # upward triangle: apex two rows above center, base near the bottom
        top = cy - 5.5
        height = 11.0
        r = rows - top
        inside = (r >= 0) & (r <= height) & (np.abs(cols - cx) <= r * 6.0 / height)
        img[inside] = _FG
    elif kind == "horizontal-stripes":
        # 8-pixel bars: a +/-2 px phase shift keeps 75% pattern agreement,
        # so the class centroid survives jitter
        img[((rows - dy) // 8) % 2 == 0] = _FG
    elif kind == "vertical-stripes":
        img[((cols - dx) // 8) % 2 == 0] = _FG
    elif kind == "checkerboard":
        # 8-pixel cells: the period differs from the stripe classes and
        # the centroid survives +/-2 px phase jitter
        img[(((rows - dy) // 8) + ((cols - dx) // 8)) % 2 == 0] = _FG
    else:
        raise DomainError(f"unknown template kind {kind!r}")
    return img


def _render(kind: str, seed: int, jitter: bool) -> np.ndarray:
    rng = np.random.default_rng(np.uint64(seed))
    if jitter:
        dx = int(rng.integers(-2, 3))
        dy = int(rng.integers(-2, 3))
        intensity = float(rng.uniform(0.8, 1.2))
    else:
        dx = dy = 0
        intensity = 1.0
    if kind == "uniform-noise":
        base = rng.uniform(-1.0, 1.0, size=(IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
    else:
        base = _shape_template(kind, dx, dy)
    img = base * np.float32(intensity)
    if jitter:
        img = img + rng.normal(0.0, 0.05, size=img.shape).astype(np.float32)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def render_class(class_id: int, seed: int, jitter: bool = True) -> np.ndarray:
    """Render one in-distribution image, deterministic in (class_id, seed).

    Jitter applies a +/-2 pixel shift, an intensity scale in [0.8, 1.2],
    and additive Gaussian pixel noise (sigma 0.05), clamped to [-1, 1].
    """
    if not 0 <= class_id < len(ID_CLASSES):
        raise DomainError(
            f"class_id must be in [0, {len(ID_CLASSES)}), got {class_id}"
        )
    return _render(ID_CLASSES[class_id], seed, jitter)


def render_ood(family: str, seed: int, jitter: bool = True) -> np.ndarray:
    """Render one out-of-distribution image from a named family."""
    if family not in OOD_FAMILIES:
        raise DomainError(f"unknown OOD family {family!r}; expected one of {OOD_FAMILIES}")
    return _render(family, seed, jitter)


def jitter_seed(master_seed: int, split: str, kind: str, index: int) -> int:
    """Derive the per-sample jitter seed; distinct (split, kind, index) map
    to distinct seeds, which is what keeps the splits disjoint."""
    return derive_seed(master_seed, split, kind, index)


@dataclass(frozen=True)
class DatasetManifest:
    """Counts and seed from which a dataset is reproducible."""

    seed: int = 42
    train_per_class: int = 100
    calibration_per_class: int = 25
    test_id_per_class: int = 50
    test_ood_per_family: int = 200
    classes: tuple = ID_CLASSES
    families: tuple = OOD_FAMILIES

    def __post_init__(self):
        for name in ("train_per_class", "calibration_per_class",
                     "test_id_per_class", "test_ood_per_family"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if set(self.classes) & set(self.families):
            raise DomainError("ID class set and OOD family set must be disjoint")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "families", tuple(self.families))

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "counts": {
                "train_per_class": self.train_per_class,
                "calibration_per_class": self.calibration_per_class,
                "test_id_per_class": self.test_id_per_class,
                "test_ood_per_family": self.test_ood_per_family,
            },
            "classes": list(self.classes),
            "families": list(self.families),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        counts = doc["counts"]
        return cls(
            seed=int(doc["seed"]),
            train_per_class=int(counts["train_per_class"]),
            calibration_per_class=int(counts["calibration_per_class"]),
            test_id_per_class=int(counts["test_id_per_class"]),
            test_ood_per_family=int(counts["test_ood_per_family"]),
            classes=tuple(doc["classes"]),
            families=tuple(doc["families"]),
        )


def _iter_records(manifest: DatasetManifest):
    """Yield (family_tag, class_id, image) in canonical file order:
    train, calibration, test-id (class-major), then each OOD family."""
    id_splits = (
        ("train", manifest.train_per_class),
        ("calibration", manifest.calibration_per_class),
        ("test-id", manifest.test_id_per_class),
    )
    for split, per_class in id_splits:
        for class_id, class_name in enumerate(manifest.classes):
            for i in range(per_class):
                seed = jitter_seed(manifest.seed, split, class_name, i)
                yield "id", class_id, render_class(class_id, seed)
    for family in manifest.families:
        for i in range(manifest.test_ood_per_family):
            seed = jitter_seed(manifest.seed, "test-ood", family, i)
            yield f"ood:{family}", -1, render_ood(family, seed)


def build_dataset(manifest: DatasetManifest, path) -> Path:
    """Write the dataset file and its manifest JSON; returns the data path.

    File layout: magic ``RDS1``, u32 record count, then per record a u8
    family-tag length + tag bytes, i32 class id, and 256 little-endian
    float32 pixels.  Byte-identical for identical manifests.
    """
    path = Path(path)
    records = list(_iter_records(manifest))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        chunks = [DATASET_MAGIC, struct.pack("<I", len(records))]
        for tag, class_id, image in records:
            tag_bytes = tag.encode("utf-8")
            chunks.append(struct.pack("<B", len(tag_bytes)))
            chunks.append(tag_bytes)
            chunks.append(struct.pack("<i", class_id))
            chunks.append(image.astype("<f4").tobytes())
        path.write_bytes(b"".join(chunks))
        manifest_path_for(path).write_text(manifest.to_json())
    except OSError as exc:
        raise OSError(f"failed writing dataset to {path}: {exc}") from exc
    return path


def manifest_path_for(data_path) -> Path:
    data_path = Path(data_path)
    return data_path.with_name(data_path.stem + ".manifest.json")


class SyntheticDataset:
    """In-memory view of a dataset file with split slicing and a read log.

    ``sample_id`` is the record index in the file.  Every split access is
    tallied in ``read_counts`` by family tag, which is how the pipeline
    audits that no OOD record is touched before evaluation.
    """

    def __init__(self, images: np.ndarray, class_ids: np.ndarray,
                 tags: list, manifest: DatasetManifest):
        self.images = images
        self.class_ids = class_ids
        self.tags = tags
        self.manifest = manifest
        self.read_counts: dict[str, int] = {}

    def __len__(self) -> int:
        return self.images.shape[0]

    def _log(self, tags) -> None:
        for t in tags:
            self.read_counts[t] = self.read_counts.get(t, 0) + 1

    def _slice(self, start: int, stop: int):
        idx = np.arange(start, stop)
        tags = [self.tags[i] for i in idx]
        self._log(tags)
        return idx, self.images[idx], self.class_ids[idx], tags

    def _id_block(self, block: int) -> tuple[int, int]:
        m = self.manifest
        sizes = [
            m.train_per_class * len(m.classes),
            m.calibration_per_class * len(m.classes),
            m.test_id_per_class * len(m.classes),
        ]
        start = sum(sizes[:block])
        return start, start + sizes[block]

    def split(self, name: str):
        """Return (sample_ids, images, class_ids, tags) for a named split.

        Split names: ``train``, ``calibration``, ``test-id``, or
        ``ood:<family>``.
        """
        m = self.manifest
        if name == "train":
            return self._slice(*self._id_block(0))
        if name == "calibration":
            return self._slice(*self._id_block(1))
        if name == "test-id":
            return self._slice(*self._id_block(2))
        if name.startswith("ood:"):
            family = name[4:]
            if family not in m.families:
                raise DomainError(f"unknown OOD family {family!r}")
            base = self._id_block(2)[1]
            k = m.families.index(family)
            start = base + k * m.test_ood_per_family
            return self._slice(start, start + m.test_ood_per_family)
        raise DomainError(f"unknown split {name!r}")


def load_dataset(path) -> SyntheticDataset:
    """Read a dataset file plus its manifest into memory."""
    path = Path(path)
    manifest = DatasetManifest.from_json(manifest_path_for(path).read_text())
    blob = path.read_bytes()
    if blob[:4] != DATASET_MAGIC:
        raise ContractError(f"{path}: bad dataset magic {blob[:4]!r}")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    images = np.empty((count, N_PIXELS), dtype=np.float32)
    class_ids = np.empty(count, dtype=np.int64)
    tags = []
    for i in range(count):
        (tag_len,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        tag = blob[pos : pos + tag_len].decode("utf-8")
        pos += tag_len
        (class_id,) = struct.unpack_from("<i", blob, pos)
        pos += 4
        images[i] = np.frombuffer(blob, dtype="<f4", count=N_PIXELS, offset=pos)
        pos += 4 * N_PIXELS
        class_ids[i] = class_id
        tags.append(tag)
    if pos != len(blob):
        raise ContractError(f"{path}: {len(blob) - pos} trailing bytes")
    return SyntheticDataset(images, class_ids, tags, manifest)
