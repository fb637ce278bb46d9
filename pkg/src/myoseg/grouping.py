"""Dataset manifest, availability groups, and training-sample preparation.

Group membership is inferred from which sequence files exist for a subject
(G1: LGE+T2+bSSFP, G2: LGE+bSSFP, G3: LGE). Missing sequences enter the
network as all-zero channels; missing labels are dropped from the loss via
the per-group label lists.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import schema as sch
from .augment import (
    AugmentRanges,
    apply_intensity,
    apply_spatial,
    pull_coordinates,
    sample_intensity_params,
    sample_spatial_params,
)
from .volume import (
    LABELMAP,
    RoiSpec,
    Volume,
    compute_label_center,
    extract_roi,
    load_volume,
    missing_sequence_placeholder,
    resample_isotropic,
    robust_normalize,
    roi_pad_value,
)

LABEL_SUFFIX = "gd"


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    group: str
    sequence_paths: dict          # sequence name -> path (present only)
    label_path: object = None     # path or None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    split: str = "train"

    def __post_init__(self):
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate subject ids in manifest: {dupes}")

    def by_group(self, group):
        return [e for e in self.entries if e.group == group]

    def __len__(self):
        return len(self.entries)


def _find_file(directory, stem):
    for ext in (".nii.gz", ".nii"):
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def build_manifest(data_root, split="train", require_labels=None):
    """Enumerate subjects under data_root (or data_root/<split> if present).

    Each subject is a directory holding <id>_<seq>.nii[.gz] files plus an
    optional <id>_gd.nii[.gz] labelmap. Availability patterns outside the
    three groups raise, naming the subject.
    """
    root = Path(data_root)
    split_dir = root / split
    if split_dir.is_dir():
        root = split_dir
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if require_labels is None:
        require_labels = split == "train"

    entries = []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        sid = subject_dir.name
        seq_paths = {}
        for seq in sch.SEQUENCES:
            p = _find_file(subject_dir, f"{sid}_{seq}")
            if p is not None:
                seq_paths[seq] = p
        if not seq_paths:
            continue  # not a subject directory
        try:
            group = sch.group_from_sequences(seq_paths)
        except ValueError as e:
            raise ValueError(f"subject '{sid}': {e}") from e
        label_path = _find_file(subject_dir, f"{sid}_{LABEL_SUFFIX}")
        if require_labels and label_path is None:
            raise FileNotFoundError(f"subject '{sid}': missing label file")
        entries.append(
            ManifestEntry(
                subject_id=sid,
                group=group,
                sequence_paths=seq_paths,
                label_path=label_path,
            )
        )
    return DatasetManifest(entries=tuple(entries), split=split)


@dataclass(frozen=True)
class SubjectSample:
    """Aligned multi-sequence volumes plus labels and availability masks.

    sequences always holds all three canonical keys; missing ones are
    all-zero placeholder volumes on the shared grid.
    """

    subject_id: str
    group: str
    sequences: dict
    labels: object                # Volume(labelmap) or None
    sequence_mask: tuple
    label_mask: tuple

    def image_channels(self):
        """(3, D, H, W) float32 array in canonical (LGE, T2, bSSFP) order."""
        return np.stack(
            [self.sequences[s].data.astype(np.float32) for s in sch.SEQUENCES]
        )


def stage1_groundtruth(sample, schema=None):
    """Coarse-anatomy labelmap: background/LV/RV/MYO with MYO as the union of
    healthy myocardium, scar and edema codes."""
    schema = schema or sch.LabelSchema()
    labels = sample.labels
    if labels is None:
        raise ValueError(f"subject '{sample.subject_id}' has no labels")
    src = labels.data
    out = np.zeros(src.shape, dtype=src.dtype)
    out[src == schema.code("lv")] = schema.stage1_code("lv")
    out[src == schema.code("rv")] = schema.stage1_code("rv")
    myo = np.isin(src, schema.myo_union_codes())
    out[myo] = schema.stage1_code("myo")
    return labels.with_data(out)


@dataclass(frozen=True)
class PreprocessSettings:
    """Everything sample preparation needs besides the manifest itself."""

    target_spacing: float = 1.2
    train_roi: tuple = (128, 128, 128)
    eval_roi: tuple = (192, 192, 192)
    ranges: AugmentRanges = field(default_factory=AugmentRanges)
    schema: sch.LabelSchema = field(default_factory=sch.LabelSchema)
    augment: bool = True


class SubjectStore:
    """Loads subjects and caches them resampled to the target spacing."""

    def __init__(self, settings, cache_size=16):
        self.settings = settings
        self.cache_size = cache_size
        self._cache = {}

    def resampled(self, entry):
        cached = self._cache.get(entry.subject_id)
        if cached is not None:
            return cached
        t = self.settings.target_spacing
        sequences = {
            seq: resample_isotropic(load_volume(path), t)
            for seq, path in entry.sequence_paths.items()
        }
        labels = None
        if entry.label_path is not None:
            labels = resample_isotropic(
                load_volume(entry.label_path, kind=LABELMAP), t
            )
        if len(self._cache) >= self.cache_size:
            self._cache.pop(next(iter(self._cache)))
        self._cache[entry.subject_id] = (sequences, labels)
        return sequences, labels


def _assemble(entry, sequences, labels):
    group = entry.group
    template = next(iter(sequences.values()))
    full = {
        seq: sequences.get(seq, missing_sequence_placeholder(template))
        for seq in sch.SEQUENCES
    }
    return SubjectSample(
        subject_id=entry.subject_id,
        group=group,
        sequences=full,
        labels=labels,
        sequence_mask=sch.sequence_mask(group),
        label_mask=sch.label_mask(group),
    )


def prepare_training_sample(entry, rng, settings, store):
    """Resample, crop around the ground truth, augment, and normalize.

    One spatial transform is shared by all sequences and the labelmap of the
    subject; intensity shift/scale is drawn per available sequence after
    normalization.
    """
    sequences, labels = store.resampled(entry)
    if labels is None:
        raise ValueError(f"subject '{entry.subject_id}' has no labels for training")

    center = compute_label_center(labels)
    labels_roi = extract_roi(labels, RoiSpec(center, settings.train_roi, 0))
    seq_roi = {
        seq: extract_roi(v, RoiSpec(center, settings.train_roi, roi_pad_value(v)))
        for seq, v in sequences.items()
    }

    if settings.augment:
        params = sample_spatial_params(rng, settings.ranges)
        coords = pull_coordinates(settings.train_roi, params)
        seq_roi = {s: apply_spatial(v, params, coords) for s, v in seq_roi.items()}
        labels_roi = apply_spatial(labels_roi, params, coords)

    seq_roi = {s: robust_normalize(v) for s, v in seq_roi.items()}

    if settings.augment:
        order = [s for s in sch.SEQUENCES if s in seq_roi]
        iparams = sample_intensity_params(rng, order, settings.ranges)
        seq_roi = {s: apply_intensity(v, iparams, s) for s, v in seq_roi.items()}

    return _assemble(entry, seq_roi, labels_roi)


def preprocess_inference_sample(entry, settings, store=None):
    """Validation/test preparation: resample, scan-centered ROI, normalize.

    No augmentation is applied outside training.
    """
    store = store or SubjectStore(settings)
    sequences, labels = store.resampled(entry)
    template = next(iter(sequences.values()))
    center = tuple(s // 2 for s in template.shape)
    roi = settings.eval_roi
    seq_roi = {
        seq: robust_normalize(extract_roi(v, RoiSpec(center, roi, roi_pad_value(v))))
        for seq, v in sequences.items()
    }
    labels_roi = None
    if labels is not None:
        labels_roi = extract_roi(labels, RoiSpec(center, roi, 0))
    return _assemble(entry, seq_roi, labels_roi)


def sample_training_triplet(manifest, rng, settings, store=None):
    """Draw one uniformly random subject per group (G1, G2, G3), fully
    preprocessed and augmented, consuming the rng in a fixed order."""
    store = store or SubjectStore(settings)
    triplet = []
    for group in sch.GROUPS:
        pool = manifest.by_group(group)
        if not pool:
            raise ValueError(f"group {group} has no subjects in the manifest")
        entry = pool[int(rng.integers(len(pool)))]
        triplet.append(prepare_training_sample(entry, rng, settings, store))
    return tuple(triplet)
