"""
Task distributions
==================
Non-mutually-exclusive sinusoid regression on disjoint intervals, ordered
(globally consistent) and intershuffled few-shot classification over class
pools, and the CE-increasing target-offset augmentation.

All samplers are pure functions of (config, seed).
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from sklearn.metrics import pairwise_distances

from errors import ContractViolation
from models import ClassificationConfig, SinusoidConfig

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".pgm", ".tif", ".tiff"}


@dataclass(frozen=True)
class SinusoidFamily:
    interval: int
    amplitude: float
    phase: float
    offset: float = 0.0   # meta-augmentation shift, 0 for plain tasks


@dataclass(frozen=True)
class ClassificationFamily:
    partition: Optional[int]   # None for intershuffled tasks
    class_ids: Tuple[int, ...]
    labels: Tuple[int, ...]    # label of class_ids[j]
    mode: str


@dataclass(frozen=True)
class Task:
    """Support and query draws of one task"""
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    family: Union[SinusoidFamily, ClassificationFamily]

    @property
    def head(self) -> str:
        return "regression" if isinstance(self.family, SinusoidFamily) else "classification"


# ---------------------------------------------------------------------------
# Sinusoids
# ---------------------------------------------------------------------------

def sample_sinusoid_task(
    cfg: SinusoidConfig,
    rng_seed: int,
    interval: Optional[int] = None,
    amplitude: Optional[float] = None,
    phase: Optional[float] = None,
) -> Task:
    """
    Draw one sinusoid task y = A sin(x - phi) on a single interval

    Args:
        cfg: Interval layout, ranges and shot counts
        rng_seed: Seed of this draw
        interval: Fix the interval index instead of drawing it
        amplitude: Fix A instead of drawing it
        phase: Fix phi instead of drawing it

    Returns:
        Task with k_shot support and q_query query points from the chosen interval
    """
    rng = np.random.default_rng(rng_seed)
    # draws are always consumed in this order so fixing one value never shifts the others
    drawn_interval = int(rng.integers(cfg.n_intervals))
    drawn_amplitude = float(rng.uniform(cfg.amplitude_min, cfg.amplitude_max))
    drawn_phase = float(rng.uniform(cfg.phase_min, cfg.phase_max))

    interval = drawn_interval if interval is None else int(interval)
    if not 0 <= interval < cfg.n_intervals:
        raise ContractViolation(f"interval {interval} outside 0..{cfg.n_intervals - 1}")
    amplitude = drawn_amplitude if amplitude is None else float(amplitude)
    phase = drawn_phase if phase is None else float(phase)

    lo, hi = cfg.intervals[interval]
    x = rng.uniform(lo, hi, size=cfg.k_shot + cfg.q_query)
    y = amplitude * np.sin(x - phase)

    k = cfg.k_shot
    return Task(
        support_x=x[:k].reshape(-1, 1),
        support_y=y[:k],
        query_x=x[k:].reshape(-1, 1),
        query_y=y[k:],
        family=SinusoidFamily(interval=interval, amplitude=amplitude, phase=phase),
    )


def meta_augment_task(task: Task, seed: int, offset_range: float = 2.0, offset: Optional[float] = None) -> Task:
    """
    CE-increasing augmentation: shift every target of a regression task by one random c

    Args:
        task: Regression task
        seed: Seed of the offset draw
        offset_range: c ~ U[-offset_range, offset_range]
        offset: Use this c instead of drawing one

    Returns:
        Task with identical inputs and targets shifted by c (support and query alike)
    """
    if not isinstance(task.family, SinusoidFamily):
        raise ContractViolation("meta-augmentation is defined for regression tasks only")
    if offset is None:
        offset = float(np.random.default_rng(seed).uniform(-offset_range, offset_range))
    return replace(
        task,
        support_y=task.support_y + offset,
        query_y=task.query_y + offset,
        family=replace(task.family, offset=task.family.offset + offset),
    )


# ---------------------------------------------------------------------------
# Class pools
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSamples:
    class_id: int
    name: str
    features: np.ndarray   # (n_samples, dim)


@dataclass(frozen=True)
class PartitionPlan:
    k_way: int
    partitions: Tuple[Tuple[int, ...], ...]
    dropped: Tuple[int, ...]


@dataclass(frozen=True)
class ClassPool:
    """Immutable set of classes with their sample vectors"""
    classes: Tuple[ClassSamples, ...]
    plan: Optional[PartitionPlan] = None
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def class_ids(self) -> List[int]:
        return [c.class_id for c in self.classes]

    @property
    def k_way(self) -> Optional[int]:
        return self.plan.k_way if self.plan else None

    @property
    def partitions(self) -> Tuple[Tuple[int, ...], ...]:
        return self.plan.partitions if self.plan else ()

    @property
    def dim(self) -> int:
        return int(self.classes[0].features.shape[1]) if self.classes else 0

    def get(self, class_id: int) -> ClassSamples:
        for samples in self.classes:
            if samples.class_id == class_id:
                return samples
        raise KeyError(class_id)

    def subset(self, class_ids: Sequence[int]) -> "ClassPool":
        wanted = set(class_ids)
        return ClassPool(classes=tuple(c for c in self.classes if c.class_id in wanted), warnings=self.warnings)

    def partitioned(self, k_way: int, seed: int) -> "ClassPool":
        return replace(self, plan=make_partitions(self, k_way, seed))


def make_partitions(pool: ClassPool, k_way: int, seed: int) -> PartitionPlan:
    """
    Split the pool into disjoint k-sized class groups

    Args:
        pool: Class pool
        k_way: Group size
        seed: Seed of the class shuffle

    Returns:
        PartitionPlan; classes beyond the last full group are listed in dropped
    """
    if k_way <= 0:
        raise ContractViolation(f"k_way must be positive, got {k_way}")
    if len(pool.classes) < k_way:
        raise ContractViolation(f"pool has {len(pool.classes)} classes, fewer than k_way={k_way}")

    ids = np.asarray(pool.class_ids)
    order = ids[np.random.default_rng(seed).permutation(len(ids))]
    n_full = len(order) // k_way
    partitions = tuple(tuple(int(c) for c in order[i * k_way:(i + 1) * k_way]) for i in range(n_full))
    dropped = tuple(int(c) for c in order[n_full * k_way:])
    if dropped:
        logger.info(f"Partitioning dropped {len(dropped)} classes: {list(dropped)}")
    return PartitionPlan(k_way=k_way, partitions=partitions, dropped=dropped)


def sample_classification_task(
    pool: ClassPool,
    mode: str,
    k_shot: int,
    q_query: int,
    seed: int,
    k_way: Optional[int] = None,
) -> Task:
    """
    Draw one few-shot classification task

    Args:
        pool: Class pool (partitioned for ordered mode)
        mode: 'ordered' (label = position within the partition) or 'intershuffle'
        k_shot: Support examples per class
        q_query: Query examples per class
        seed: Seed of this draw
        k_way: Classes per task in intershuffle mode (defaults to the pool's partition size)

    Returns:
        Label-balanced task
    """
    rng = np.random.default_rng(seed)

    if mode == "ordered":
        if not pool.partitions:
            raise ContractViolation("ordered mode needs a partitioned pool")
        partition = int(rng.integers(len(pool.partitions)))
        class_ids = pool.partitions[partition]
        labels = tuple(range(len(class_ids)))
    elif mode == "intershuffle":
        k_way = k_way or pool.k_way
        if not k_way:
            raise ContractViolation("intershuffle mode needs k_way")
        if len(pool.classes) < k_way:
            raise ContractViolation(f"pool has {len(pool.classes)} classes, fewer than k_way={k_way}")
        partition = None
        picked = rng.choice(len(pool.classes), size=k_way, replace=False)
        class_ids = tuple(pool.classes[i].class_id for i in picked)
        labels = tuple(int(label) for label in rng.permutation(k_way))
    else:
        raise ContractViolation(f"unknown labeling mode {mode!r}")

    support_x, support_y, query_x, query_y = [], [], [], []
    for class_id, label in zip(class_ids, labels):
        features = pool.get(class_id).features
        if k_shot + q_query > len(features):
            raise ContractViolation(
                f"class {class_id} has {len(features)} samples, task needs {k_shot} + {q_query}"
            )
        picked = rng.choice(len(features), size=k_shot + q_query, replace=False)
        support_x.append(features[picked[:k_shot]])
        query_x.append(features[picked[k_shot:]])
        support_y.extend([label] * k_shot)
        query_y.extend([label] * q_query)

    return Task(
        support_x=np.concatenate(support_x),
        support_y=np.asarray(support_y, dtype=np.int64),
        query_x=np.concatenate(query_x),
        query_y=np.asarray(query_y, dtype=np.int64),
        family=ClassificationFamily(partition=partition, class_ids=tuple(class_ids), labels=labels, mode=mode),
    )


def synth_class_pool(
    n_classes: int,
    dim: int,
    samples_per_class: int,
    seed: int,
    within_std: float = 1.0,
    center_spacing: float = 6.0,
    first_class_id: int = 0,
) -> ClassPool:
    """
    Isotropic Gaussian clusters, one per class

    Args:
        n_classes: Number of classes
        dim: Feature dimension
        samples_per_class: Vectors per class
        seed: Pool seed
        within_std: Within-class standard deviation
        center_spacing: Minimum distance between centers, in units of within_std
        first_class_id: Id of the first class (lets two pools share an id space)

    Returns:
        ClassPool with centers at least center_spacing * within_std apart
    """
    if min(n_classes, dim, samples_per_class) <= 0:
        raise ContractViolation("n_classes, dim and samples_per_class must be positive")

    rng = np.random.default_rng(seed)
    min_distance = center_spacing * within_std
    radius = min_distance * max(1.0, n_classes ** (1.0 / dim))
    centers: List[np.ndarray] = []
    attempts = 0
    while len(centers) < n_classes:
        candidate = rng.uniform(-radius, radius, size=dim)
        if not centers or pairwise_distances(candidate[None, :], np.asarray(centers)).min() >= min_distance:
            centers.append(candidate)
            continue
        attempts += 1
        if attempts % 100 == 0:
            radius *= 1.1

    classes = tuple(
        ClassSamples(
            class_id=first_class_id + index,
            name=f"class_{first_class_id + index:04d}",
            features=center + within_std * rng.standard_normal((samples_per_class, dim)),
        )
        for index, center in enumerate(centers)
    )
    return ClassPool(classes=classes)


def load_image_pool(directory: Union[str, Path], side: int, first_class_id: int = 0) -> ClassPool:
    """
    Build a pool from <directory>/<class_name>/<image files>

    Args:
        directory: Root directory, one subdirectory per class
        side: Images are area-averaged down to side x side
        first_class_id: Id of the first class

    Returns:
        ClassPool with flattened [0, 1] grayscale vectors; lexicographic ordering throughout
    """
    root = Path(directory)
    if not root.is_dir():
        raise ContractViolation(f"image directory not found: {root}")

    classes, warnings = [], []
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for class_dir in class_dirs:
        vectors = []
        for image_path in sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS):
            try:
                with Image.open(image_path) as img:
                    small = img.convert("L").resize((side, side), Image.Resampling.BOX)
                    vectors.append(np.asarray(small, dtype=np.float64).reshape(-1) / 255.0)
            except (OSError, UnidentifiedImageError) as e:
                message = f"skipped unreadable image {image_path}: {e}"
                logger.warning(f"⚠️  {message}")
                warnings.append(message)

        if not vectors:
            message = f"dropped empty class directory {class_dir}"
            logger.warning(f"⚠️  {message}")
            warnings.append(message)
            continue

        classes.append(ClassSamples(
            class_id=first_class_id + len(classes),
            name=class_dir.name,
            features=np.stack(vectors),
        ))

    logger.info(f"✅ Loaded {len(classes)} classes from {root}")
    return ClassPool(classes=tuple(classes), warnings=tuple(warnings))


def pool_statistics(pool: ClassPool) -> pd.DataFrame:
    """Per-class sample counts"""
    return pd.DataFrame(
        {"class": [c.name for c in pool.classes], "sample_count": [len(c.features) for c in pool.classes]}
    )


# ---------------------------------------------------------------------------
# Task sources used by the training loop
# ---------------------------------------------------------------------------

class SinusoidTaskSource:
    """
    NME sinusoid tasks

    Meta-train: one fixed (A, phi) per interval, drawn once from the source seed,
    with fresh x on every draw. Meta-test: fresh (A, phi) on a random interval.
    """

    head = "regression"
    input_dim = 1

    def __init__(self, cfg: SinusoidConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x51])
        self.train_bank: List[Tuple[float, float]] = [
            (float(rng.uniform(cfg.amplitude_min, cfg.amplitude_max)), float(rng.uniform(cfg.phase_min, cfg.phase_max)))
            for _ in range(cfg.n_intervals)
        ]

    def sample_train(self, seed: int) -> Task:
        interval = int(np.random.default_rng([seed, 0x52]).integers(self.cfg.n_intervals))
        amplitude, phase = self.train_bank[interval]
        return sample_sinusoid_task(self.cfg, seed, interval=interval, amplitude=amplitude, phase=phase)

    def sample_test(self, seed: int) -> Task:
        return sample_sinusoid_task(self.cfg, seed)


class AugmentedTaskSource:
    """Applies the target-offset augmentation to meta-train tasks only"""

    def __init__(self, source: SinusoidTaskSource, offset_range: float = 2.0):
        self.source = source
        self.offset_range = offset_range
        self.head = source.head
        self.input_dim = source.input_dim

    def sample_train(self, seed: int) -> Task:
        return meta_augment_task(self.source.sample_train(seed), seed=seed + 1, offset_range=self.offset_range)

    def sample_test(self, seed: int) -> Task:
        return self.source.sample_test(seed)


class ClassificationTaskSource:
    """Few-shot classification with disjoint meta-train / meta-test class sets"""

    head = "classification"

    def __init__(self, cfg: ClassificationConfig, seed: int):
        self.cfg = cfg
        if cfg.image_dir:
            pool = load_image_pool(cfg.image_dir, cfg.image_side)
            order = np.random.default_rng([seed, 0x61]).permutation(len(pool.classes))
            ids = [pool.classes[i].class_id for i in order]
            n_train = min(cfg.n_train_classes, len(ids) - cfg.k_way)
            train_pool, test_pool = pool.subset(ids[:n_train]), pool.subset(ids[n_train:])
        else:
            pool = synth_class_pool(
                cfg.n_train_classes + cfg.n_test_classes,
                cfg.feature_dim,
                cfg.samples_per_class,
                seed=seed,
                within_std=cfg.within_std,
                center_spacing=cfg.center_spacing,
            )
            train_pool = pool.subset(pool.class_ids[:cfg.n_train_classes])
            test_pool = pool.subset(pool.class_ids[cfg.n_train_classes:])

        self.pool = pool
        self.train_pool = train_pool.partitioned(cfg.k_way, seed)
        self.test_pool = test_pool.partitioned(cfg.k_way, seed + 1)
        self.input_dim = pool.dim

    def _sample(self, pool: ClassPool, seed: int) -> Task:
        return sample_classification_task(pool, self.cfg.mode, self.cfg.k_shot, self.cfg.q_query, seed, k_way=self.cfg.k_way)

    def sample_train(self, seed: int) -> Task:
        return self._sample(self.train_pool, seed)

    def sample_test(self, seed: int) -> Task:
        return self._sample(self.test_pool, seed)
