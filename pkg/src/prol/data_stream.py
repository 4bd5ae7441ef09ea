"""Disjoint class-incremental task sequences served as seen-once chunk streams."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, InvalidSplitError, ManifestError, SeenOnceViolation


@dataclass
class LabeledDataset:
    """Images (N, H, W, C) float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")
        if self.class_count < 1:
            raise ContractError("class_count must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ContractError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count)

    def select_classes(self, classes: Sequence[int], relabel: bool = True) -> "LabeledDataset":
        """Keep only ``classes``; optionally relabel them to 0..len(classes)-1 in the given order."""
        classes = [int(c) for c in classes]
        keep = np.isin(self.labels, classes)
        labels = self.labels[keep]
        if relabel:
            remap = {c: i for i, c in enumerate(classes)}
            labels = np.array([remap[int(c)] for c in labels], dtype=np.int64)
            return LabeledDataset(self.images[keep], labels, len(classes))
        return LabeledDataset(self.images[keep], labels, self.class_count)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int  # 1-based, as in the training loop
    classes: tuple
    indices: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> TaskSpec:
        return self.tasks[i]


@dataclass(frozen=True)
class StreamChunk:
    chunk_id: int
    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @property
    def pairs(self):
        return list(zip(self.x, (int(v) for v in self.y)))


def task_sizes(class_count: int, T: int) -> list[int]:
    base, extra = divmod(class_count, T)
    return [base + (1 if t < extra else 0) for t in range(T)]


def split_tasks(dataset: LabeledDataset, T: int, seed: int) -> TaskSequence:
    """Shuffle class ids by ``seed`` and cut them into ``T`` contiguous blocks.

    When ``class_count % T != 0`` the earliest tasks each take one extra class.
    """
    if T < 1:
        raise InvalidSplitError(f"task count must be >= 1, got {T}")
    if T > dataset.class_count:
        raise InvalidSplitError(f"cannot split {dataset.class_count} classes into {T} tasks")
    order = np.random.default_rng(seed).permutation(dataset.class_count)
    tasks = []
    start = 0
    for t, size in enumerate(task_sizes(dataset.class_count, T)):
        classes = tuple(sorted(int(c) for c in order[start : start + size]))
        start += size
        idx = np.flatnonzero(np.isin(dataset.labels, classes))
        tasks.append(TaskSpec(task_id=t + 1, classes=classes, indices=idx))
    return TaskSequence(tuple(tasks))


class SeenOnceAudit:
    """Per-run visit bitmap over dataset indices; a second visit raises."""

    def __init__(self, size: int):
        self.visits = np.zeros(size, dtype=bool)
        self.streamed_tasks: set[int] = set()

    def claim_task(self, task_id: int) -> None:
        if task_id in self.streamed_tasks:
            raise SeenOnceViolation(f"task {task_id} was already streamed in this run")
        self.streamed_tasks.add(task_id)

    def mark(self, indices: np.ndarray) -> None:
        if np.any(self.visits[indices]):
            dup = indices[self.visits[indices]]
            raise SeenOnceViolation(f"samples {dup.tolist()[:10]} would be visited twice")
        if len(np.unique(indices)) != len(indices):
            raise SeenOnceViolation("a chunk contains the same sample twice")
        self.visits[indices] = True

    @property
    def visited(self) -> int:
        return int(self.visits.sum())


class ChunkStream:
    """One-shot iterator over the chunks of a single task."""

    def __init__(self, dataset: LabeledDataset, task: TaskSpec, chunk_size: int, seed: int,
                 audit: SeenOnceAudit | None = None):
        if chunk_size < 1:
            raise ContractError("chunk_size must be >= 1")
        self.dataset = dataset
        self.task = task
        self.chunk_size = chunk_size
        self.order = np.random.default_rng(seed).permutation(task.indices)
        self.audit = audit
        self._started = False
        if audit is not None:
            audit.claim_task(task.task_id)

    def __len__(self) -> int:
        return -(-len(self.order) // self.chunk_size)

    def __iter__(self) -> Iterator[StreamChunk]:
        if self._started:
            raise SeenOnceViolation(f"task {self.task.task_id} stream has already been consumed")
        self._started = True
        return self._generate()

    def _generate(self):
        for j, start in enumerate(range(0, len(self.order), self.chunk_size)):
            idx = self.order[start : start + self.chunk_size]
            if self.audit is not None:
                self.audit.mark(idx)
            yield StreamChunk(j, idx, self.dataset.images[idx], self.dataset.labels[idx])


def stream_chunks(dataset: LabeledDataset, task: TaskSpec, chunk_size: int, seed: int,
                  audit: SeenOnceAudit | None = None) -> ChunkStream:
    return ChunkStream(dataset, task, chunk_size, seed, audit)


def _pattern(rng: np.random.Generator, side: int) -> np.ndarray:
    """Sum of two random oriented gratings, normalized to unit max-abs."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    out = np.zeros((side, side))
    for _ in range(2):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.5, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return out / np.abs(out).max()


def make_synthetic(classes: int, per_class: int, image_side: int = 16, separation: float = 1.0,
                   seed: int = 0, channels: int = 3, noise: float = 0.15) -> LabeledDataset:
    """Class templates (spatial pattern times a colour direction plus a colour mean) with noise.

    ``separation`` scales the template amplitude relative to the fixed pixel noise.
    """
    if classes < 2:
        raise ContractError("make_synthetic needs at least 2 classes")
    if not separation > 0:
        raise ContractError("separation must be > 0")
    if per_class < 1 or image_side < 1:
        raise ContractError("per_class and image_side must be positive")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(classes):
        pattern = _pattern(rng, image_side)[:, :, None]
        colour = rng.normal(size=channels)
        colour /= np.linalg.norm(colour)
        mean = rng.uniform(-1, 1, size=channels)
        template = 0.5 * pattern * colour + 0.25 * mean
        eps = rng.normal(size=(per_class, image_side, image_side, channels))
        x = 0.5 + 0.1 * separation * template[None] + noise * eps
        images.append(np.clip(x, 0.0, 1.0))
        labels.append(np.full(per_class, c))
    return LabeledDataset(np.concatenate(images).astype(np.float32), np.concatenate(labels), classes)


def train_test_split(dataset: LabeledDataset, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified per-class hold-out split."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.class_count):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        n_test = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return (dataset.subset(np.sort(np.concatenate(train_idx))),
            dataset.subset(np.sort(np.concatenate(test_idx))))


def load_manifest(path) -> LabeledDataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "class_count" not in doc or "items" not in doc:
        raise ManifestError(f"malformed manifest {path}: expected keys 'class_count' and 'items'")
    class_count = doc["class_count"]
    if not isinstance(class_count, int) or class_count < 1:
        raise ManifestError(f"malformed manifest {path}: class_count must be a positive integer")

    images, labels = [], []
    for n, item in enumerate(doc["items"]):
        try:
            rel, label = item["path"], item["label"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"item {n} lacks 'path' or 'label'") from exc
        if not isinstance(label, int) or not 0 <= label < class_count:
            raise ManifestError(f"item {n}: label {label!r} outside [0, {class_count})")
        img_path = (path.parent / rel) if not Path(rel).is_absolute() else Path(rel)
        if not img_path.exists():
            raise ManifestError(f"item {n}: image file missing: {img_path}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if images and arr.shape != images[0].shape:
            raise ManifestError(f"item {n}: image shape {arr.shape} differs from {images[0].shape}")
        images.append(arr)
        labels.append(label)
    if not images:
        raise ManifestError(f"manifest {path} lists no items")
    return LabeledDataset(np.stack(images), np.array(labels), class_count)


def export_manifest(dataset: LabeledDataset, directory) -> Path:
    """Write PNGs plus ``manifest.json``; images are quantized to 8 bits."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    items = []
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        rel = f"images/{i:06d}.png"
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
        Image.fromarray(arr).save(directory / rel)
        items.append({"path": rel, "label": int(label)})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"class_count": dataset.class_count, "items": items}), encoding="utf-8")
    return manifest
