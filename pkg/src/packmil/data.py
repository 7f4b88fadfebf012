"""Feature-bag files, dataset manifests and the synthetic slide generator.

Feature file layout (little-endian)::

    b"PMF1" | u32 version=1 | u32 N | u32 D | N*D float64, row-major

Manifest CSV columns::

    slide_id,feature_path,n_patches,task,grade,subtypes,time_bin,event,split
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TASKS, SynthConfig

FEATURE_MAGIC = b"PMF1"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
HEADER_SIZE = _HEADER.size  # 16

MANIFEST_COLUMNS = ["slide_id", "feature_path", "n_patches", "task", "grade", "subtypes", "time_bin", "event", "split"]
SPLITS = ("train", "val", "test")


class PersistenceError(OSError):
    pass


class FeatureFormatError(ValueError):
    pass


class FeatureCorruptionError(FeatureFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class LabelRecord:
    task: str
    grade: int | None = None
    subtypes: tuple[int, ...] | None = None
    time_bin: int | None = None
    event: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ManifestError(f"unknown task {self.task!r}")
        populated = {
            "grading": self.grade is not None,
            "subtyping": self.subtypes is not None,
            "survival": self.time_bin is not None or self.event is not None,
        }
        for task, present in populated.items():
            if (task == self.task) != present:
                if task == self.task:
                    raise ManifestError(f"{self.task} label is missing its fields")
                raise ManifestError(f"{self.task} label must not carry {task} fields")
        if self.task == "survival" and (self.time_bin is None or self.event is None):
            raise ManifestError("survival label needs both time_bin and event")


@dataclass
class FeatureBag:
    slide_id: str
    features: np.ndarray
    label: LabelRecord
    n_patches: int = field(default=-1)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.slide_id}: features must be an (N>=1, D) matrix, got {self.features.shape}")
        if self.n_patches < 0:
            self.n_patches = self.features.shape[0]
        if self.n_patches != self.features.shape[0]:
            raise ValueError(f"{self.slide_id}: n_patches={self.n_patches} but {self.features.shape[0]} feature rows")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ManifestRow:
    slide_id: str
    feature_path: str
    n_patches: int
    label: LabelRecord
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.rows)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def path_of(self, row: ManifestRow) -> Path:
        p = Path(row.feature_path)
        return p if p.is_absolute() else self.root / p


# ---------------------------------------------------------------- feature files


def encode_features(features: np.ndarray) -> bytes:
    x = np.ascontiguousarray(features, dtype="<f8")
    if x.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {x.shape}")
    n, d = x.shape
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d) + x.tobytes()


def decode_features(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < HEADER_SIZE:
        raise FeatureCorruptionError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, n, d = _HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{source}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{source}: unsupported version {version}")
    need = n * d * 8
    payload = buf[HEADER_SIZE:]
    if len(payload) < need:
        raise FeatureCorruptionError(f"{source}: payload has {len(payload)} bytes, header needs {need}")
    return np.frombuffer(payload, dtype="<f8", count=n * d).reshape(n, d).astype(np.float64)


def write_feature_file(bag: FeatureBag | np.ndarray, path: str | Path) -> None:
    feats = bag.features if isinstance(bag, FeatureBag) else bag
    try:
        Path(path).write_bytes(encode_features(feats))
    except OSError as exc:
        raise PersistenceError(f"cannot write feature file {path}: {exc}") from exc


def read_feature_file(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read feature file {path}: {exc}") from exc
    return decode_features(buf, str(path))


# ---------------------------------------------------------------- manifest


def _label_fields(label: LabelRecord) -> dict[str, str]:
    return {
        "task": label.task,
        "grade": "" if label.grade is None else str(label.grade),
        "subtypes": "" if label.subtypes is None else "|".join(str(int(t)) for t in label.subtypes),
        "time_bin": "" if label.time_bin is None else str(label.time_bin),
        "event": "" if label.event is None else str(label.event),
    }


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in manifest.rows:
        w.writerow({"slide_id": r.slide_id, "feature_path": r.feature_path, "n_patches": r.n_patches,
                    **_label_fields(r.label), "split": r.split})
    try:
        Path(path).write_text(buf.getvalue())
    except OSError as exc:
        raise PersistenceError(f"cannot write manifest {path}: {exc}") from exc


def _int_field(row: dict, name: str, where: str) -> int | None:
    raw = (row.get(name) or "").strip()
    if raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ManifestError(f"{where}: {name}={raw!r} is not an integer") from None


def load_manifest(
    path: str | Path,
    max_grade: int | None = None,
    n_subtypes: int | None = None,
    time_bins: int | None = None,
    check_files: bool = True,
) -> Manifest:
    """Parse and validate a manifest CSV; feature paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or list(reader.fieldnames) != MANIFEST_COLUMNS:
        raise ManifestError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
    manifest = Manifest(rows=[], root=path.parent)
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        where = f"{path}:{lineno}"
        sid = (row["slide_id"] or "").strip()
        if not sid:
            raise ManifestError(f"{where}: empty slide_id")
        if sid in seen:
            raise ManifestError(f"{where}: duplicate slide_id {sid!r}")
        seen.add(sid)
        task = (row["task"] or "").strip()
        if task not in TASKS:
            raise ManifestError(f"{where}: unknown task {task!r}")
        split = (row["split"] or "").strip()
        if split not in SPLITS:
            raise ManifestError(f"{where}: split must be one of {SPLITS}, got {split!r}")
        n_patches = _int_field(row, "n_patches", where)
        if n_patches is None or n_patches < 1:
            raise ManifestError(f"{where}: n_patches must be a positive integer")
        grade = _int_field(row, "grade", where)
        time_bin = _int_field(row, "time_bin", where)
        event = _int_field(row, "event", where)
        subtypes = None
        raw_sub = (row["subtypes"] or "").strip()
        if raw_sub:
            try:
                subtypes = tuple(int(t) for t in raw_sub.split("|"))
            except ValueError:
                raise ManifestError(f"{where}: subtypes {raw_sub!r} is not a |-separated binary string") from None
            if any(t not in (0, 1) for t in subtypes):
                raise ManifestError(f"{where}: subtypes must be binary, got {raw_sub!r}")
            if n_subtypes is not None and len(subtypes) != n_subtypes:
                raise ManifestError(f"{where}: expected {n_subtypes} subtype indicators, got {len(subtypes)}")
        if grade is not None and (grade < 0 or (max_grade is not None and grade > max_grade)):
            raise ManifestError(f"{where}: grade {grade} outside [0, {max_grade}]")
        if time_bin is not None and (time_bin < 1 or (time_bins is not None and time_bin > time_bins)):
            raise ManifestError(f"{where}: time_bin {time_bin} outside [1, {time_bins}]")
        if event is not None and event not in (0, 1):
            raise ManifestError(f"{where}: event must be 0 or 1, got {event}")
        try:
            label = LabelRecord(task, grade, subtypes, time_bin, event)
        except ManifestError as exc:
            raise ManifestError(f"{where}: {exc}") from None
        mrow = ManifestRow(sid, row["feature_path"].strip(), n_patches, label, split)
        if check_files and not manifest.path_of(mrow).is_file():
            raise ManifestError(f"{where}: feature file {manifest.path_of(mrow)} does not exist")
        manifest.rows.append(mrow)
    return manifest


def load_bags(manifest: Manifest, split: str | None = None, dim: int | None = None) -> list[FeatureBag]:
    """Read the feature files of ``manifest`` (optionally one split), checking N and D."""
    bags = []
    for row in manifest.rows if split is None else manifest.split(split):
        feats = read_feature_file(manifest.path_of(row))
        if feats.shape[0] != row.n_patches:
            raise ManifestError(f"{row.slide_id}: manifest n_patches={row.n_patches}, file has {feats.shape[0]} rows")
        if dim is None:
            dim = feats.shape[1]
        elif feats.shape[1] != dim:
            raise ManifestError(f"{row.slide_id}: feature dim {feats.shape[1]} differs from dataset dim {dim}")
        bags.append(FeatureBag(row.slide_id, feats, row.label, row.n_patches))
    return bags


# ---------------------------------------------------------------- synthetic data


def sample_lengths(cfg: SynthConfig, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    n = cfg.n_bags if n is None else n
    raw = rng.lognormal(cfg.len_mu, cfg.len_sigma, size=n)
    return np.clip(np.round(raw), cfg.len_min, cfg.len_max).astype(np.int64)


def _survival_labels(classes: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # higher class -> higher hazard -> earlier events
    rate = np.exp(0.8 * classes)
    event_times = rng.exponential(1.0 / rate)
    # exact censoring count keeps the realised rate on target
    censored = np.zeros(len(classes), dtype=bool)
    censored[rng.permutation(len(classes))[: int(round(cfg.censor_rate * len(classes)))]] = True
    observed = np.where(censored, event_times * rng.random(len(classes)), event_times)
    edges = np.quantile(observed, np.linspace(0, 1, cfg.time_bins + 1)[1:-1])
    bins = np.searchsorted(edges, observed, side="right") + 1
    return bins.astype(np.int64), (~censored).astype(np.int64)


def synthesize_bags(cfg: SynthConfig, seed: int) -> tuple[list[FeatureBag], list[str]]:
    """Draw bags in memory.  Returns the bags and their split assignment."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    lengths = sample_lengths(cfg, rng)
    classes = rng.integers(0, cfg.n_classes, size=cfg.n_bags)
    means = rng.normal(size=(cfg.n_classes, cfg.dim))
    means *= cfg.signal_scale / np.linalg.norm(means, axis=1, keepdims=True)
    if cfg.task == "survival":
        time_bins, events = _survival_labels(classes, cfg, rng)
    bags = []
    for i, (n, c) in enumerate(zip(lengths, classes)):
        feats = rng.normal(scale=cfg.noise_scale, size=(int(n), cfg.dim))
        n_signal = int(rng.binomial(int(n), cfg.signal_fraction)) if cfg.signal_fraction > 0 else 0
        if n_signal:
            rows = rng.choice(int(n), size=n_signal, replace=False)
            feats[rows] += means[c]
        if cfg.task == "grading":
            label = LabelRecord("grading", grade=int(c))
        elif cfg.task == "subtyping":
            label = LabelRecord("subtyping", subtypes=tuple(int(j == c) for j in range(cfg.n_classes)))
        else:
            label = LabelRecord("survival", time_bin=int(time_bins[i]), event=int(events[i]))
        bags.append(FeatureBag(f"slide_{i:05d}", feats, label))
    order = rng.permutation(cfg.n_bags)
    n_test = int(round(cfg.test_fraction * cfg.n_bags))
    n_val = int(round(cfg.val_fraction * cfg.n_bags))
    splits = ["train"] * cfg.n_bags
    for j, idx in enumerate(order):
        if j < n_test:
            splits[idx] = "test"
        elif j < n_test + n_val:
            splits[idx] = "val"
    return bags, splits


def generate_synthetic_dataset(cfg: SynthConfig, seed: int, out_dir: str | Path) -> Manifest:
    """Write a synthetic dataset (feature files + ``manifest.csv``) under ``out_dir``."""
    bags, splits = synthesize_bags(cfg, seed)
    out = Path(out_dir)
    feat_dir = out / "features"
    try:
        feat_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create {feat_dir}: {exc}") from exc
    rows = []
    for bag, split in zip(bags, splits):
        rel = f"features/{bag.slide_id}.pmf"
        write_feature_file(bag, out / rel)
        rows.append(ManifestRow(bag.slide_id, rel, bag.n_patches, bag.label, split))
    manifest = Manifest(rows, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
