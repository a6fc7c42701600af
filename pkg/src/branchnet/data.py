"""Manifest-backed datasets, sequence ingestion, the subject-independent
fold protocol, and a synthetic dataset generator for desk-scale runs.

The manifest is a UTF-8 CSV with header
``path,subject_id,label,sequence_id,frame_index``; the label field may be
empty (unlabelled sample). Images are pre-cropped faces, stored as 8-bit
grayscale PNG or PGM, loaded to (C, 96, 96) float arrays in [0, 1].
"""

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import apply_affine

NEUTRAL_CLASS = 0  # class index emitted for the first frame of a sequence


class DataError(ValueError):
    """Malformed manifests, unreadable images, or protocol violations."""


@dataclass
class Sample:
    image: np.ndarray            # (C, H, W) float32 in [0, 1]
    subject_id: str
    label: int | None
    source_id: str
    sequence_id: str | None = None
    frame_index: int | None = None


class Dataset:
    """An immutable-by-convention list of samples."""

    def __init__(self, samples):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def subjects(self):
        return sorted({s.subject_id for s in self.samples})

    def filter_subjects(self, subject_ids):
        keep = set(subject_ids)
        return Dataset(s for s in self.samples if s.subject_id in keep)

    def labelled(self):
        return Dataset(s for s in self.samples if s.label is not None)

    def labels(self):
        return np.array([s.label for s in self.samples])

    def images(self):
        return np.stack([s.image for s in self.samples])


def _normalize_subject_id(raw):
    """Zero-pad purely numeric ids so lexicographic order is numeric order."""
    raw = raw.strip()
    return raw.zfill(6) if raw.isdigit() else raw


def load_image(path, image_size=96, grayscale=True):
    try:
        img = Image.open(path)
        img = img.convert("L" if grayscale else "RGB")
    except Exception as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    if img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if grayscale:
        return arr[None, :, :]
    return arr.transpose(2, 0, 1)


MANIFEST_FIELDS = ["path", "subject_id", "label", "sequence_id", "frame_index"]


def load_manifest(path, image_size=96, grayscale=True, num_classes=None):
    """Load a manifest CSV and decode every referenced image."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_FIELDS:
            raise DataError(
                f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            img_path = row["path"].strip()
            if not os.path.isabs(img_path):
                img_path = str(base / img_path)
            if not os.path.exists(img_path):
                raise DataError(f"{path}:{lineno}: missing image file {img_path}")
            label_field = (row["label"] or "").strip()
            label = None
            if label_field:
                label = int(label_field)
                if label < 0 or (num_classes is not None and label >= num_classes):
                    raise DataError(f"{path}:{lineno}: label {label} out of range")
            seq = (row["sequence_id"] or "").strip() or None
            frame = (row["frame_index"] or "").strip()
            samples.append(Sample(
                image=load_image(img_path, image_size, grayscale),
                subject_id=_normalize_subject_id(row["subject_id"]),
                label=label,
                source_id=row["path"].strip(),
                sequence_id=seq,
                frame_index=int(frame) if frame else None,
            ))
    return Dataset(samples)


def save_manifest(dataset, path):
    """Write manifest rows for *dataset* (images must already be on disk)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for s in dataset:
            writer.writerow([
                s.source_id,
                s.subject_id,
                "" if s.label is None else s.label,
                s.sequence_id or "",
                "" if s.frame_index is None else s.frame_index,
            ])


def ingest_sequences(dataset, neutral_class=NEUTRAL_CLASS):
    """Turn image sequences into frame samples.

    Per sequence: the first frame becomes a *neutral_class* sample and the
    last three frames take the sequence's emotion label. Sequences with
    fewer than four frames are skipped; returns (dataset, skipped_count).
    """
    groups = {}
    for s in dataset:
        if s.sequence_id is None:
            raise DataError(f"sample {s.source_id} has no sequence_id")
        groups.setdefault(s.sequence_id, []).append(s)
    out, skipped = [], 0
    for seq_id in sorted(groups):
        frames = sorted(groups[seq_id], key=lambda s: s.frame_index)
        if len(frames) < 4:
            skipped += 1
            continue
        labels = {s.label for s in frames if s.label is not None}
        if len(labels) != 1:
            raise DataError(f"sequence {seq_id} needs exactly one emotion label")
        emotion = labels.pop()
        first, last3 = frames[0], frames[-3:]
        out.append(Sample(first.image, first.subject_id, neutral_class,
                          first.source_id, seq_id, first.frame_index))
        for s in last3:
            out.append(Sample(s.image, s.subject_id, emotion,
                              s.source_id, seq_id, s.frame_index))
    return Dataset(out), skipped


# -- fold protocol -------------------------------------------------------------


@dataclass
class FoldAssignment:
    """Subject -> fold map, with the per-trial role split once selected."""
    fold_of_subject: dict
    num_folds: int = 10
    test_fold: int | None = None
    val_fold: int | None = None
    labelled_folds: tuple = ()
    unlabelled_folds: tuple = ()

    def subjects_in(self, fold):
        return sorted(s for s, f in self.fold_of_subject.items() if f == fold)

    def subjects_in_folds(self, folds):
        return sorted(s for s, f in self.fold_of_subject.items() if f in set(folds))


def assign_folds(subjects, num_folds=10):
    """Round-robin subjects over folds after sorting ids ascending.

    The subject at sorted rank r (1-based) lands in fold ((r-1) mod F)+1.
    """
    subjects = list(subjects)
    if len(set(subjects)) != len(subjects):
        raise DataError("duplicate subject ids")
    if len(subjects) < num_folds:
        raise DataError(f"need at least {num_folds} subjects, got {len(subjects)}")
    assignment = {}
    for rank, subject in enumerate(sorted(subjects), start=1):
        assignment[subject] = (rank - 1) % num_folds + 1
    return FoldAssignment(assignment, num_folds)


def split_trial(assignment, t):
    """Assign fold roles for trial *t*: fold t tests, fold t+1 (wrapping)
    validates, and of the remaining folds in ascending order the first
    four are labelled and the last four unlabelled."""
    nf = assignment.num_folds
    if not 1 <= t <= nf:
        raise DataError(f"test fold must be in 1..{nf}")
    val = t % nf + 1
    rest = [f for f in range(1, nf + 1) if f not in (t, val)]
    return FoldAssignment(
        dict(assignment.fold_of_subject),
        nf,
        test_fold=t,
        val_fold=val,
        labelled_folds=tuple(rest[: len(rest) // 2]),
        unlabelled_folds=tuple(rest[len(rest) // 2:]),
    )


# -- synthetic data ------------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    num_subjects: int = 40
    samples_per_subject_class: int = 2
    subject_noise: float = 0.1
    pattern_noise: float = 0.05
    seed: int = 0
    image_size: int = 96

    def __post_init__(self):
        if min(self.num_classes, self.num_subjects, self.samples_per_subject_class) < 1:
            raise ValueError("all counts must be >= 1")
        if self.subject_noise < 0 or self.pattern_noise < 0:
            raise ValueError("noise levels must be >= 0")


def class_prototype(k, num_classes, size=96):
    """Deterministic oriented grating for class *k*: orientation, spatial
    frequency and phase all vary with the class index."""
    theta = math.pi * k / num_classes
    freq = 4.0 + 1.5 * (k % 4)
    phase = 0.9 * k
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - size / 2) * math.cos(theta) + (yy - size / 2) * math.sin(theta)
    img = 0.5 + 0.35 * np.sin(2 * math.pi * freq * u / size + phase)
    return img.astype(np.float32)


def _subject_distortion(rng, noise, size):
    """Persistent per-subject view: small affine plus smooth gain/shade fields.

    The smooth fields are the part an affine-only augmentation cannot
    mimic, so doubling *noise* yields a genuinely shifted distribution.
    """
    params = {
        "angle": noise * rng.uniform(-20.0, 20.0),
        "scale": 1.0 + noise * rng.uniform(-0.6, 0.6),
        "tx": noise * rng.uniform(-0.25, 0.25) * size,
        "ty": noise * rng.uniform(-0.25, 0.25) * size,
    }
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    fields = []
    for amp_lo, amp_hi in ((0.6, 1.4), (0.4, 1.0)):
        fx, fy = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        amp = noise * rng.uniform(amp_lo, amp_hi)
        fields.append(amp * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase))
    params["gain_field"] = (1.0 + fields[0]).astype(np.float32)
    params["shade_field"] = (fields[1] + noise * rng.uniform(-0.3, 0.3)).astype(np.float32)
    return params


def _render_sample(proto, distortion, pattern_noise, rng):
    img = apply_affine(proto[None, :, :],
                       scale=distortion["scale"], tx=distortion["tx"],
                       ty=distortion["ty"], angle=distortion["angle"])[0]
    img = img * distortion["gain_field"] + distortion["shade_field"]
    if pattern_noise > 0:
        img = img + pattern_noise * rng.standard_normal(img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _write_pgm(path, img):
    """8-bit binary PGM; trivially byte-deterministic."""
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def nearest_prototype_accuracy(images, labels, num_classes, size):
    """Oracle classifier: nearest class grating in L2 over raw pixels."""
    protos = np.stack([class_prototype(k, num_classes, size).ravel()
                       for k in range(num_classes)]).astype(np.float64)
    flat = images.reshape(len(images), -1).astype(np.float64)
    d2 = (flat ** 2).sum(axis=1, keepdims=True) - 2.0 * flat @ protos.T \
        + (protos ** 2).sum(axis=1)
    return float((d2.argmin(axis=1) == labels).mean())


def gen_synthetic(spec: SyntheticSpec, out_dir):
    """Generate a labelled dataset on disk (PGM images plus manifest.csv).

    Returns (manifest_path, calibration_accuracy), the latter from the
    nearest-prototype oracle over all generated samples.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    size = spec.image_size
    protos = [class_prototype(k, spec.num_classes, size) for k in range(spec.num_classes)]

    rows, all_images, all_labels = [], [], []
    for si in range(spec.num_subjects):
        subject = f"s{si + 1:04d}"
        rng_subj = np.random.default_rng(
            np.random.SeedSequence(spec.seed, spawn_key=(1, si)))
        distortion = _subject_distortion(rng_subj, spec.subject_noise, size)
        for k in range(spec.num_classes):
            for m in range(spec.samples_per_subject_class):
                rng_samp = np.random.default_rng(
                    np.random.SeedSequence(spec.seed, spawn_key=(2, si, k, m)))
                img = _render_sample(protos[k], distortion, spec.pattern_noise, rng_samp)
                name = f"{subject}_c{k}_m{m}.pgm"
                _write_pgm(images_dir / name, img)
                rows.append([f"images/{name}", subject, k, "", ""])
                all_images.append(img)
                all_labels.append(k)

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
    accuracy = nearest_prototype_accuracy(
        np.stack(all_images), np.array(all_labels), spec.num_classes, size)
    return manifest_path, accuracy
