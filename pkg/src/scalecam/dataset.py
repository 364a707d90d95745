"""Manifests, augmentation, patient-wise splitting and synthetic data."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import decode_image, encode_pgm
from .tensor import Tensor, rng


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    patient_id: str
    label: int


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[Record, ...]
    class_names: tuple[str, ...]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        seen = set()
        for r in self.records:
            if r.path in seen:
                raise ManifestError(f"duplicate image path {r.path!r}")
            seen.add(r.path)
            if not 0 <= r.label < len(self.class_names):
                raise ManifestError(f"label {r.label} of {r.path!r} is outside 0..{len(self.class_names) - 1}")

    @property
    def classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.records)

    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    def class_histogram(self) -> tuple[int, ...]:
        counts = [0] * self.classes
        for r in self.records:
            counts[r.label] += 1
        return tuple(counts)

    def for_patients(self, patients) -> list[Record]:
        wanted = set(patients)
        return [r for r in self.records if r.patient_id in wanted]

    def resolve(self, record: Record) -> Path:
        return self.root / record.path


def _read_classes_comment(lines: list[str]) -> tuple[list[str] | None, list[str]]:
    names = None
    body = []
    for line in lines:
        stripped = line.strip()
        if stripped.startswith("#"):
            key, _, value = stripped[1:].partition("=")
            if key.strip() == "classes" and value.strip():
                names = [v.strip() for v in value.split(",")]
            continue
        if stripped:
            body.append(line)
    return names, body


def parse_manifest(text: str, class_names=None, root: Path | str = ".") -> DatasetManifest:
    """Parse ``path,patient_id,label`` CSV text.

    Class names come from ``class_names``, else a ``# classes = a,b,c``
    comment line, else the labels themselves (integers or sorted names).
    """
    declared, body = _read_classes_comment(text.splitlines())
    if class_names is not None:
        declared = list(class_names)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if reader.fieldnames is None:
        raise ManifestError("manifest is empty")
    header = [h.strip() for h in reader.fieldnames]
    for col in ("path", "patient_id", "label"):
        if col not in header:
            raise ManifestError(f"manifest header lacks required column {col!r}; got {header}")
    rows = []
    for lineno, row in enumerate(reader, 2):
        row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
        if not row["path"] or not row["patient_id"] or not row["label"]:
            raise ManifestError(f"row {lineno}: empty field in {row}")
        rows.append((row["path"], row["patient_id"], row["label"], lineno))

    raw_labels = [label for _, _, label, _ in rows]
    if declared is None:
        if all(label.isdigit() for label in raw_labels):
            k = max((int(x) for x in raw_labels), default=-1) + 1
            declared = [str(i) for i in range(k)]
        else:
            declared = sorted(set(raw_labels))
    index = {name: i for i, name in enumerate(declared)}
    records = []
    for path, pid, label, lineno in rows:
        if label in index:
            lab = index[label]
        elif label.isdigit() and int(label) < len(declared):
            lab = int(label)
        else:
            raise ManifestError(f"row {lineno}: unknown label {label!r}; classes are {declared}")
        records.append(Record(path, pid, lab))
    return DatasetManifest(tuple(records), tuple(declared), Path(root))


def load_manifest(path, class_names=None) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(), class_names, root=path.parent)


def format_manifest(manifest: DatasetManifest) -> str:
    out = io.StringIO()
    out.write(f"# classes = {','.join(manifest.class_names)}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["path", "patient_id", "label"])
    for r in manifest.records:
        writer.writerow([r.path, r.patient_id, manifest.class_names[r.label]])
    return out.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(format_manifest(manifest))


def load_image(manifest: DatasetManifest, record: Record) -> Tensor:
    return decode_image(manifest.resolve(record).read_bytes())


# ---------------------------------------------------------------------------
# resampling


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` [H,W] at fractional coordinates, clamping to the edge."""
    h, w = img.shape
    rows = np.clip(rows, 0.0, h - 1)
    cols = np.clip(cols, 0.0, w - 1)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    tr = rows - r0
    tc = cols - c0
    # a + t*(b-a) keeps constant regions exactly constant
    top = img[r0, c0] + tc * (img[r0, c1] - img[r0, c0])
    bottom = img[r1, c0] + tc * (img[r1, c1] - img[r1, c0])
    return top + tr * (bottom - top)


def resize(image, height: int, width: int | None = None):
    """Bilinear, corner-aligned resize of [H,W] or [C,H,W] data."""
    width = height if width is None else width
    if height < 1 or width < 1:
        raise ValueError("target size must be at least 1x1")
    is_tensor = isinstance(image, Tensor)
    arr = image.data if is_tensor else np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    planes = arr[None] if squeeze else arr
    h, w = planes.shape[1:]
    if (h, w) == (height, width):
        out = np.array(planes, dtype=np.float64)
    else:
        rs = np.arange(height) * ((h - 1) / (height - 1)) if height > 1 else np.zeros(1)
        cs = np.arange(width) * ((w - 1) / (width - 1)) if width > 1 else np.zeros(1)
        rr, cc = np.meshgrid(rs, cs, indexing="ij")
        out = np.stack([_bilinear(p, rr, cc) for p in planes])
    out = out[0] if squeeze else out
    return Tensor(out) if is_tensor else out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    rescale: float = 1.0 / 255.0
    horizontal_flip: bool = True
    vertical_flip: bool = True
    zoom_range: tuple[float, float] = (0.85, 1.15)
    rotation_range: tuple[float, float] = (0.0, 360.0)
    width_shift: float = 0.15
    height_shift: float = 0.15
    shear_range: float = 0.15

    def __post_init__(self):
        if min(self.zoom_range) <= 0:
            raise ValueError("zoom bounds must be positive")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentationConfig":
        base = dict(
            horizontal_flip=False,
            vertical_flip=False,
            zoom_range=(1.0, 1.0),
            rotation_range=(0.0, 0.0),
            width_shift=0.0,
            height_shift=0.0,
            shear_range=0.0,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    shift_rows: float = 0.0  # fraction of height
    shift_cols: float = 0.0  # fraction of width
    shear: float = 0.0
    zoom_rows: float = 1.0
    zoom_cols: float = 1.0
    flip_h: bool = False
    flip_v: bool = False


def _uniform(generator, lo: float, hi: float) -> float:
    return float(lo) if lo == hi else float(generator.uniform(lo, hi))


def sample_params(config: AugmentationConfig, generator: np.random.Generator) -> AugmentParams:
    """Draw every transform in a fixed order so streams stay aligned."""
    return AugmentParams(
        rotation_deg=_uniform(generator, *config.rotation_range),
        shift_rows=_uniform(generator, -config.height_shift, config.height_shift),
        shift_cols=_uniform(generator, -config.width_shift, config.width_shift),
        shear=_uniform(generator, -config.shear_range, config.shear_range),
        zoom_rows=_uniform(generator, *config.zoom_range),
        zoom_cols=_uniform(generator, *config.zoom_range),
        flip_h=bool(config.horizontal_flip and generator.random() < 0.5),
        flip_v=bool(config.vertical_flip and generator.random() < 0.5),
    )


def affine_matrix(p: AugmentParams) -> np.ndarray:
    """Output->input mapping in (row, col) coordinates about the image centre."""
    theta = math.radians(p.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    rotation = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, 0.0], [p.shear, 1.0]])
    zoom = np.diag([p.zoom_rows, p.zoom_cols])
    return rotation @ shear @ zoom


def apply_params(image, p: AugmentParams, rescale: float = 1.0 / 255.0) -> Tensor:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    planes = arr[None] if squeeze else arr
    _, h, w = planes.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    m = affine_matrix(p)
    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_r = m[0, 0] * rr + m[0, 1] * cc + cy + p.shift_rows * h
    src_c = m[1, 0] * rr + m[1, 1] * cc + cx + p.shift_cols * w
    identity = np.array_equal(m, np.eye(2)) and p.shift_rows == 0 and p.shift_cols == 0
    out = np.array(planes, dtype=np.float64) if identity else np.stack([_bilinear(pl, src_r, src_c) for pl in planes])
    if p.flip_h:
        out = out[:, :, ::-1]
    if p.flip_v:
        out = out[:, ::-1, :]
    # divide by the reciprocal so the default yields exactly value / 255
    out = np.clip(out / (1.0 / rescale), 0.0, 255.0 / (1.0 / rescale))
    return Tensor(out[0] if squeeze else out)


def augment(image, config: AugmentationConfig, generator: np.random.Generator) -> Tensor:
    """Random affine (rotation, shift, shear, zoom), random flips, then rescale."""
    return apply_params(image, sample_params(config, generator), config.rescale)


def sample_generator(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent per-sample stream: order of processing never matters."""
    return rng([seed, epoch, index])


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class Fold:
    train_patients: tuple[str, ...]
    test_patients: tuple[str, ...]

    def train_records(self, manifest: DatasetManifest) -> list[Record]:
        return manifest.for_patients(self.train_patients)

    def test_records(self, manifest: DatasetManifest) -> list[Record]:
        return manifest.for_patients(self.test_patients)


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def to_text(self) -> str:
        lines = [f"k = {self.k}", f"seed = {self.seed}"]
        for i, f in enumerate(self.folds):
            lines.append(f"fold {i} test = {','.join(f.test_patients)}")
        return "\n".join(lines) + "\n"


def patient_kfold_split(manifest: DatasetManifest, k: int, seed: int) -> SplitPlan:
    """Shuffle patients by ``seed`` and deal them round-robin into ``k`` test groups."""
    patients = manifest.patients()
    if k < 2 and k != len(patients):
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(patients):
        raise ValueError(f"k={k} exceeds the number of patients ({len(patients)})")
    order = rng([seed]).permutation(len(patients))
    groups: list[list[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        groups[pos % k].append(patients[idx])
    folds = []
    for i in range(k):
        test = tuple(sorted(groups[i]))
        train = tuple(sorted(p for j, g in enumerate(groups) if j != i for p in g))
        folds.append(Fold(train, test))
    return SplitPlan(tuple(folds), seed)


def train_val_split(patients, fraction: float = 0.15, seed: int = 0) -> tuple[list[str], list[str]]:
    """Hold out ceil(fraction * P) whole patients for validation."""
    patients = sorted(patients)
    if len(patients) < 2:
        raise ValueError("train/validation split needs at least 2 patients")
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    n_val = min(int(math.ceil(fraction * len(patients) - 1e-9)), len(patients) - 1)
    order = rng([seed, 0x7A1]).permutation(len(patients))
    val = sorted(patients[i] for i in order[:n_val])
    train = sorted(patients[i] for i in order[n_val:])
    return train, val


def shuffle(records, generator: np.random.Generator) -> list:
    records = list(records)
    return [records[i] for i in generator.permutation(len(records))]


# ---------------------------------------------------------------------------
# synthetic data


def motif_radius(label: int, classes: int, resolution: int) -> float:
    """Disc radius (pixels) that identifies class ``label``."""
    frac = 0.24 if classes == 1 else 0.08 + 0.32 * label / (classes - 1)
    return frac * resolution


def render_synthetic(label: int, classes: int, resolution: int, patient_gen, image_gen) -> np.ndarray:
    """One image: a bright disc whose area encodes the class, on a dim background."""
    # per-patient anatomy; drawn in a fixed order from the patient stream
    offset = patient_gen.uniform(-0.05, 0.05, size=2) * resolution
    radius_scale = patient_gen.uniform(0.92, 1.08)
    background = 30.0 + patient_gen.uniform(-10.0, 10.0)
    foreground = 200.0 + patient_gen.uniform(-20.0, 20.0)

    jitter = image_gen.uniform(-0.02, 0.02, size=2) * resolution
    centre = (resolution - 1) / 2.0 + offset + jitter
    radius = motif_radius(label, classes, resolution) * radius_scale
    rr, cc = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    disc = (rr - centre[0]) ** 2 + (cc - centre[1]) ** 2 <= radius**2
    img = np.where(disc, foreground, background) + image_gen.normal(0.0, 8.0, size=(resolution, resolution))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthetic_oracle(image: np.ndarray, classes: int, resolution: int, threshold: float = 128.0) -> int:
    """Closed-form classifier for synthetic images: bright-pixel count vs. disc areas."""
    count = max(int(np.count_nonzero(np.asarray(image) > threshold)), 1)
    areas = [math.pi * motif_radius(k, classes, resolution) ** 2 for k in range(classes)]
    return int(np.argmin([abs(math.log(count) - math.log(a)) for a in areas]))


def generate_synthetic(
    out_dir,
    classes: int = 3,
    patients_per_class: int = 10,
    images_per_patient: int = 5,
    resolution: int = 32,
    seed: int = 0,
    class_names=None,
) -> DatasetManifest:
    """Write a PGM dataset plus ``manifest.csv`` under ``out_dir``."""
    for name, value in (
        ("classes", classes),
        ("patients_per_class", patients_per_class),
        ("images_per_patient", images_per_patient),
        ("resolution", resolution),
    ):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    names = tuple(class_names) if class_names else tuple(f"class{k}" for k in range(classes))
    if len(names) != classes:
        raise ValueError("class_names length must equal classes")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    pid = 0
    for label in range(classes):
        for _ in range(patients_per_class):
            patient = f"p{pid:04d}"
            for i in range(images_per_patient):
                img = render_synthetic(label, classes, resolution, rng([seed, pid, 0]), rng([seed, pid, i + 1]))
                rel = f"images/{patient}_{i:03d}.pgm"
                (out / rel).write_bytes(encode_pgm(img))
                records.append(Record(rel, patient, label))
            pid += 1
    manifest = DatasetManifest(tuple(records), names, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
