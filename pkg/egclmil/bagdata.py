'''
egclmil / bagdata.py

Patch-embedding bags, the BAGF file format, cohort manifests, task label
schemas and the synthetic cohort generator.

BAGF layout (all integers little-endian):
    magic "BAGF" | u16 version=1
    | u16 len + UTF-8 slide_id | u16 len + UTF-8 patient_id
    | u16 label | u16 len + UTF-8 fine_label (len 0 = absent)
    | u32 P | u32 D | P x D float32 row-major
'''
import json
import logging
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BagFormatError, ConfigError, SchemaError

_logger = logging.getLogger(__name__)

BAGF_MAGIC = b'BAGF'
BAGF_VERSION = 1
MANIFEST_NAME = 'manifest.json'

# Canonical 7-class schema, in label-index order
SEVEN_CLASS_NAMES = (
    'Ependymal tumors',
    'High-grade brain tumors',
    'Non-glial brain tumors',
    'Non-neoplastic brain lesions',
    'Normal brain',
    'Other low-grade glial tumors',
    'Pilocytic astrocytoma',
)
CONTROL_CLASSES = ('Non-neoplastic brain lesions', 'Normal brain')
DMG_H3 = 'DMG H3 mutated'
EXCLUDED = -1

PAIR_SWEEPS = 1000
PAIR_TOLERANCE = 1e-10


# =============================================================================
# Bags
# =============================================================================
@dataclass(frozen=True, eq=False)
class EmbeddingBag:
    '''
    One slide: P patch embeddings of dimension D plus its identity.

    Attributes:
        slide_id: unique within a cohort
        patient_id: owner; a patient may hold several slides
        label: class index under the 7-class schema
        features: P x D float32 matrix
        fine_label: optional subtype annotation (e.g. "DMG H3 mutated")
    '''
    slide_id: str
    patient_id: str
    label: int
    features: np.ndarray
    fine_label: Optional[str] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise BagFormatError(
                f'Bag {self.slide_id}: features must be P x D with P, D >= 1, got {feats.shape}'
            )
        if not np.all(np.isfinite(feats)):
            raise BagFormatError(f'Bag {self.slide_id}: non-finite feature values')
        if not 0 <= int(self.label) <= 0xFFFF:
            raise BagFormatError(f'Bag {self.slide_id}: label out of range: {self.label}')
        object.__setattr__(self, 'features', feats)
        object.__setattr__(self, 'label', int(self.label))

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __repr__(self):
        return (
            f'EmbeddingBag(slide_id={self.slide_id!r}, patient_id={self.patient_id!r}, '
            f'label={self.label}, fine_label={self.fine_label!r}, '
            f'P={self.n_patches}, D={self.dim})'
        )


def _pack_str(value: Optional[str]) -> bytes:
    raw = (value or '').encode('utf-8')
    if len(raw) > 0xFFFF:
        raise BagFormatError(f'String field too long for BAGF header: {len(raw)} bytes')
    return struct.pack('<H', len(raw)) + raw


def write_bag(bag: EmbeddingBag, path: Path) -> None:
    ''' Write a bag in the BAGF format '''
    feats = bag.features
    if not np.all(np.isfinite(feats)):
        raise BagFormatError(f'Bag {bag.slide_id}: refusing to write non-finite features')
    header = (
        BAGF_MAGIC
        + struct.pack('<H', BAGF_VERSION)
        + _pack_str(bag.slide_id)
        + _pack_str(bag.patient_id)
        + struct.pack('<H', bag.label)
        + _pack_str(bag.fine_label)
        + struct.pack('<II', feats.shape[0], feats.shape[1])
    )
    payload = np.ascontiguousarray(feats, dtype='<f4').tobytes()
    try:
        with open(path, 'wb') as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise BagFormatError(f'Unable to write bag {path}: {e}') from e


class _Reader:
    ''' Cursor over a byte buffer raising BagFormatError on truncation '''
    def __init__(self, data: bytes, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BagFormatError(f'{self.source}: truncated header')
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (length,) = self.unpack('<H')
        try:
            return self.take(length).decode('utf-8')
        except UnicodeDecodeError:
            raise BagFormatError(f'{self.source}: header string is not UTF-8')


def _parse_header(reader: _Reader) -> dict:
    if reader.take(4) != BAGF_MAGIC:
        raise BagFormatError(f'{reader.source}: bad magic, not a BAGF file')
    (version,) = reader.unpack('<H')
    if version != BAGF_VERSION:
        raise BagFormatError(f'{reader.source}: unsupported BAGF version {version}')
    slide_id = reader.text()
    patient_id = reader.text()
    (label,) = reader.unpack('<H')
    fine_label = reader.text() or None
    n_patches, dim = reader.unpack('<II')
    return {
        'slide_id': slide_id,
        'patient_id': patient_id,
        'label': label,
        'fine_label': fine_label,
        'n_patches': n_patches,
        'dim': dim,
    }


def _read_bytes(path: Path) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise BagFormatError(f'Unable to read bag {path}: {e}') from e


def read_bag_header(path: Path) -> dict:
    ''' Header fields only: slide_id, patient_id, label, fine_label, n_patches, dim '''
    return _parse_header(_Reader(_read_bytes(path), path))


def read_bag(path: Path) -> EmbeddingBag:
    ''' Read a BAGF file written by write_bag() '''
    reader = _Reader(_read_bytes(path), path)
    header = _parse_header(reader)
    expected = header['n_patches'] * header['dim'] * 4
    remaining = len(reader.data) - reader.pos
    if remaining < expected:
        raise BagFormatError(
            f'{path}: truncated payload, expected {expected} bytes, found {remaining}'
        )
    if remaining > expected:
        raise BagFormatError(
            f'{path}: header declares {header["n_patches"]}x{header["dim"]} '
            f'but payload holds {remaining} bytes'
        )
    feats = np.frombuffer(reader.data, dtype='<f4', count=header['n_patches'] * header['dim'],
                          offset=reader.pos)
    feats = feats.reshape(header['n_patches'], header['dim']).astype(np.float32)
    _logger.debug(f'Read bag {header["slide_id"]} P={header["n_patches"]} D={header["dim"]}')
    return EmbeddingBag(
        slide_id=header['slide_id'],
        patient_id=header['patient_id'],
        label=header['label'],
        features=feats,
        fine_label=header['fine_label'],
    )


# =============================================================================
# Cohort manifest
# =============================================================================
@dataclass(frozen=True)
class SlideEntry:
    path: str
    slide_id: str
    patient_id: str
    label: int
    fine_label: Optional[str] = None


@dataclass(frozen=True)
class CohortManifest:
    '''
    Cohort description.  Slide paths are relative to `root` (the directory
    holding manifest.json) unless absolute.
    '''
    class_names: Tuple[str, ...]
    slides: Tuple[SlideEntry, ...]
    embedding_dim: int
    root: Optional[Path] = None

    def __post_init__(self):
        object.__setattr__(self, 'class_names', tuple(self.class_names))
        object.__setattr__(self, 'slides', tuple(self.slides))
        errors = []
        seen = set()
        for entry in self.slides:
            if entry.slide_id in seen:
                errors.append(f'duplicate slide_id {entry.slide_id!r}')
            seen.add(entry.slide_id)
            if not 0 <= entry.label < len(self.class_names):
                errors.append(f'slide {entry.slide_id!r}: label {entry.label} outside class_names')
        if self.embedding_dim < 1:
            errors.append(f'embedding_dim must be >= 1: {self.embedding_dim}')
        if errors:
            raise BagFormatError('Invalid manifest: ' + ' - '.join(errors))

    def resolve(self, entry: SlideEntry) -> Path:
        path = Path(entry.path)
        if path.is_absolute() or self.root is None:
            return path
        return Path(self.root) / path

    def validate_files(self) -> None:
        ''' Every referenced file exists and its header agrees with the manifest '''
        for entry in self.slides:
            path = self.resolve(entry)
            if not path.exists():
                raise BagFormatError(f'Manifest references missing bag file: {path}')
            header = read_bag_header(path)
            if header['slide_id'] != entry.slide_id:
                raise BagFormatError(
                    f'{path}: slide_id {header["slide_id"]!r} does not match manifest {entry.slide_id!r}'
                )
            if header['dim'] != self.embedding_dim:
                raise BagFormatError(
                    f'{path}: embedding dim {header["dim"]} does not match manifest {self.embedding_dim}'
                )
            if header['n_patches'] < 1:
                raise BagFormatError(f'{path}: bag holds no patches')

    def load_bags(self) -> Dict[str, EmbeddingBag]:
        ''' slide_id -> bag, in manifest order '''
        bags = {}
        for entry in self.slides:
            bag = read_bag(self.resolve(entry))
            if bag.slide_id != entry.slide_id or bag.dim != self.embedding_dim:
                raise BagFormatError(f'Bag {entry.slide_id} disagrees with the manifest')
            bags[entry.slide_id] = bag
        return bags


def save_manifest(manifest: CohortManifest, path: Path) -> None:
    document = {
        'class_names': list(manifest.class_names),
        'embedding_dim': manifest.embedding_dim,
        'slides': [
            {
                'path': e.path,
                'slide_id': e.slide_id,
                'patient_id': e.patient_id,
                'label': e.label,
                'fine_label': e.fine_label,
            }
            for e in manifest.slides
        ],
    }
    with open(path, 'w') as f:
        json.dump(document, f, indent=2)
        f.write('\n')


def load_manifest(path: Path, check_files: bool = True) -> CohortManifest:
    ''' Read manifest.json; relative slide paths resolve against its directory '''
    path = Path(path)
    try:
        with open(path, 'r') as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise BagFormatError(f'Unable to read manifest {path}: {e}') from e
    try:
        manifest = CohortManifest(
            class_names=tuple(document['class_names']),
            embedding_dim=int(document['embedding_dim']),
            slides=tuple(
                SlideEntry(
                    path=s['path'],
                    slide_id=s['slide_id'],
                    patient_id=s['patient_id'],
                    label=int(s['label']),
                    fine_label=s.get('fine_label'),
                )
                for s in document['slides']
            ),
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise BagFormatError(f'Manifest {path} is missing or mistypes a field: {e}') from e
    if check_files:
        manifest.validate_files()
    _logger.debug(f'Loaded manifest {path}: {len(manifest.slides)} slides')
    return manifest


# =============================================================================
# Task schemas
# =============================================================================
_TASK_CLASSES = {
    'binary': ('Non-tumor', 'Tumor'),
    'three_class': (DMG_H3, 'Pilocytic astrocytoma', 'Ependymal tumors'),
    'six_class': (
        'Ependymal tumors',
        'High-grade brain tumors',
        'Non-glial brain tumors',
        'Control (non-neoplastic or normal)',
        'Other low-grade glial tumors',
        'Pilocytic astrocytoma',
    ),
}


@dataclass(frozen=True)
class TaskSchema:
    '''
    Mapping from a 7-class (label, fine_label) to a task class index.

    seven_class is the identity on label indices.  The other tasks resolve the
    label through its class name, so the manifest must use the canonical names.
    '''
    task: str

    def __post_init__(self):
        if self.task not in ('binary', 'three_class', 'six_class', 'seven_class'):
            raise SchemaError(f'Unknown task schema: {self.task!r}')

    def class_names(self, manifest_classes: Sequence[str]) -> Tuple[str, ...]:
        if self.task == 'seven_class':
            return tuple(manifest_classes)
        return _TASK_CLASSES[self.task]

    def map(self, class_name: str, fine_label: Optional[str], label: int = None) -> int:
        ''' Task class index or EXCLUDED '''
        if self.task == 'seven_class':
            return label
        if class_name not in SEVEN_CLASS_NAMES:
            raise SchemaError(
                f'Task {self.task} needs canonical class names, got {class_name!r}'
            )
        if self.task == 'binary':
            return 0 if class_name in CONTROL_CLASSES else 1
        if self.task == 'six_class':
            if class_name in CONTROL_CLASSES:
                return 3
            order = _TASK_CLASSES['six_class']
            return order.index(class_name)
        # three_class
        if class_name == 'High-grade brain tumors':
            return 0 if fine_label == DMG_H3 else EXCLUDED
        if class_name == 'Pilocytic astrocytoma':
            return 1
        if class_name == 'Ependymal tumors':
            return 2
        return EXCLUDED


@dataclass(frozen=True)
class TaskSlide:
    entry: SlideEntry
    label: int


@dataclass(frozen=True)
class TaskCohort:
    task: str
    class_names: Tuple[str, ...]
    slides: Tuple[TaskSlide, ...]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> Dict[str, int]:
        return {s.entry.slide_id: s.label for s in self.slides}


def remap_labels(manifest: CohortManifest, schema: TaskSchema) -> TaskCohort:
    ''' Apply a task schema; EXCLUDED slides are dropped '''
    names = schema.class_names(manifest.class_names)
    kept = []
    for entry in manifest.slides:
        target = schema.map(manifest.class_names[entry.label], entry.fine_label, entry.label)
        if target == EXCLUDED:
            continue
        kept.append(TaskSlide(entry=entry, label=target))

    if schema.task == 'three_class' and not any(s.label == 0 for s in kept):
        raise SchemaError(
            f'three_class task requested but no slide carries fine_label {DMG_H3!r}'
        )
    _logger.debug(
        f'remap_labels({schema.task}): kept {len(kept)} of {len(manifest.slides)} slides'
    )
    return TaskCohort(task=schema.task, class_names=names, slides=tuple(kept))


# =============================================================================
# Synthetic cohorts
# =============================================================================
@dataclass(frozen=True)
class SyntheticSpec:
    '''
    Desk-scale stand-in for a real cohort.

    Attributes:
        n_classes: number of 7-class labels (7 uses the canonical names)
        n_patients_per_class: patients generated for every class
        slides_per_patient: slides per patient (all share the patient label)
        patches_per_slide: inclusive (min, max) patch count
        embedding_dim: D
        class_centroid_separation: distance between any two class centroids
        confusable_pairs: (a, b, separation) triples pulling centroids closer
        background_fraction: share of patches drawn from the shared background
        within_class_std: isotropic patch spread around a centroid
        subtype_fraction: share of High-grade patients annotated DMG H3 mutated
        seed: generator seed
    '''
    n_classes: int = 7
    n_patients_per_class: int = 6
    slides_per_patient: int = 1
    patches_per_slide: Tuple[int, int] = (16, 48)
    embedding_dim: int = 32
    class_centroid_separation: float = 4.0
    confusable_pairs: Tuple[Tuple[int, int, float], ...] = ()
    background_fraction: float = 0.5
    within_class_std: float = 1.0
    subtype_fraction: float = 0.5
    seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, 'patches_per_slide', tuple(int(v) for v in self.patches_per_slide))
        object.__setattr__(
            self, 'confusable_pairs',
            tuple((int(p[0]), int(p[1]), float(p[2])) for p in self.confusable_pairs)
        )
        errors = []
        if self.n_classes < 2:
            errors.append(f'n_classes must be >= 2: {self.n_classes}')
        if self.n_patients_per_class < 1:
            errors.append(f'n_patients_per_class must be >= 1: {self.n_patients_per_class}')
        if self.slides_per_patient < 1:
            errors.append(f'slides_per_patient must be >= 1: {self.slides_per_patient}')
        lo, hi = self.patches_per_slide if len(self.patches_per_slide) == 2 else (0, -1)
        if lo < 1 or hi < lo:
            errors.append(f'patches_per_slide must be (min, max) with 1 <= min <= max: {self.patches_per_slide}')
        if self.embedding_dim < 1:
            errors.append(f'embedding_dim must be >= 1: {self.embedding_dim}')
        if self.class_centroid_separation < 0:
            errors.append(f'class_centroid_separation must be >= 0: {self.class_centroid_separation}')
        for a, b, sep in self.confusable_pairs:
            if not (0 <= a < self.n_classes and 0 <= b < self.n_classes) or a == b:
                errors.append(f'confusable_pairs entry references invalid classes: ({a}, {b})')
            if sep < 0:
                errors.append(f'confusable_pairs separation must be >= 0: ({a}, {b}, {sep})')
        if not 0 <= self.background_fraction < 1:
            errors.append(f'background_fraction must be in [0, 1): {self.background_fraction}')
        if self.within_class_std <= 0:
            errors.append(f'within_class_std must be > 0: {self.within_class_std}')
        if not 0 <= self.subtype_fraction <= 1:
            errors.append(f'subtype_fraction must be in [0, 1]: {self.subtype_fraction}')
        if errors:
            raise ConfigError('Invalid synthetic spec: ' + ' - '.join(errors))

    @property
    def class_names(self) -> Tuple[str, ...]:
        if self.n_classes == len(SEVEN_CLASS_NAMES):
            return SEVEN_CLASS_NAMES
        return tuple(f'class_{c}' for c in range(self.n_classes))


def load_synthetic_spec(path: Path) -> SyntheticSpec:
    ''' Read a SyntheticSpec from JSON; unknown keys are rejected '''
    try:
        with open(path, 'r') as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f'Unable to read synthetic spec {path}: {e}') from e
    if not isinstance(document, dict):
        raise ConfigError(f'Synthetic spec {path} must hold a JSON object')
    allowed = {f.name for f in fields(SyntheticSpec)}
    unknown = sorted(set(document) - allowed)
    if unknown:
        raise ConfigError(f'Unknown key(s) in synthetic spec {path}: {", ".join(unknown)}')
    try:
        return SyntheticSpec(**document)
    except (TypeError, ValueError, IndexError) as e:
        raise ConfigError(f'Bad value in synthetic spec {path}: {e}') from e


def _class_centroids(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    C, D = spec.n_classes, spec.embedding_dim
    if D >= C:
        # orthonormal directions -> every pair exactly `separation` apart
        q, _ = np.linalg.qr(rng.standard_normal((D, C)))
        centroids = q.T * (spec.class_centroid_separation / np.sqrt(2.0))
    else:
        centroids = rng.standard_normal((C, D)) * (spec.class_centroid_separation / np.sqrt(2.0 * D))

    if spec.confusable_pairs:
        _place_confusable_pairs(centroids, spec.confusable_pairs)
    return centroids


def _place_confusable_pairs(centroids: np.ndarray, pairs, sweeps: int = PAIR_SWEEPS,
                            tol: float = PAIR_TOLERANCE) -> None:
    '''
    Move centroids in place until every pair sits at its requested distance.

    Pairs sharing a class are solved together by repeated pairwise projection
    (each pass re-centres both ends on their midpoint).  Any forest of pairs
    converges; a cycle with incompatible distances does not and is logged.
    '''
    worst = 0.0
    for _ in range(sweeps):
        worst = 0.0
        for a, b, sep in pairs:
            offset = centroids[b] - centroids[a]
            norm = np.linalg.norm(offset)
            worst = max(worst, abs(norm - sep))
            if norm == 0:
                continue
            mid = 0.5 * (centroids[a] + centroids[b])
            direction = offset / norm
            centroids[a] = mid - 0.5 * sep * direction
            centroids[b] = mid + 0.5 * sep * direction
        if worst <= tol:
            return
    _logger.warning(f'Confusable pair distances off by up to {worst:.3g} after {sweeps} sweeps')


def generate_synthetic_cohort(spec: SyntheticSpec) -> Tuple[CohortManifest, List[EmbeddingBag]]:
    '''
    Deterministic cohort from a SyntheticSpec.  Each class owns a Gaussian
    centroid; background patches come from a shared centroid at the origin.
    '''
    rng = np.random.default_rng(spec.seed)
    centroids = _class_centroids(spec, rng)
    background = np.zeros(spec.embedding_dim)
    names = spec.class_names
    high_grade = names.index('High-grade brain tumors') if names == SEVEN_CLASS_NAMES else None
    n_subtype = int(round(spec.subtype_fraction * spec.n_patients_per_class))
    lo, hi = spec.patches_per_slide

    entries, bags = [], []
    patient_counter = 0
    for label in range(spec.n_classes):
        for j in range(spec.n_patients_per_class):
            patient_id = f'PT{patient_counter:04d}'
            patient_counter += 1
            fine_label = None
            if label == high_grade:
                fine_label = DMG_H3 if j < n_subtype else 'Other high-grade glioma'
            for s in range(spec.slides_per_patient):
                slide_id = f'{patient_id}-S{s}'
                n_patches = int(rng.integers(lo, hi + 1))
                is_background = rng.random(n_patches) < spec.background_fraction
                noise = rng.standard_normal((n_patches, spec.embedding_dim)) * spec.within_class_std
                means = np.where(is_background[:, None], background, centroids[label])
                bag = EmbeddingBag(
                    slide_id=slide_id,
                    patient_id=patient_id,
                    label=label,
                    features=(means + noise).astype(np.float32),
                    fine_label=fine_label,
                )
                bags.append(bag)
                entries.append(SlideEntry(
                    path=f'bags/{slide_id}.bagf',
                    slide_id=slide_id,
                    patient_id=patient_id,
                    label=label,
                    fine_label=fine_label,
                ))

    manifest = CohortManifest(
        class_names=names,
        slides=tuple(entries),
        embedding_dim=spec.embedding_dim,
    )
    _logger.debug(f'Generated synthetic cohort: {len(bags)} slides, seed={spec.seed}')
    return manifest, bags


def write_cohort(manifest: CohortManifest, bags: Sequence[EmbeddingBag], out_dir: Path) -> Path:
    ''' Write bags under out_dir and the manifest as out_dir/manifest.json '''
    out_dir = Path(out_dir)
    by_id = {b.slide_id: b for b in bags}
    for entry in manifest.slides:
        target = out_dir / entry.path
        target.parent.mkdir(parents=True, exist_ok=True)
        write_bag(by_id[entry.slide_id], target)
    manifest_path = out_dir / MANIFEST_NAME
    save_manifest(manifest, manifest_path)
    return manifest_path
