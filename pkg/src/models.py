"""
Pydantic models for experiment configuration and reported metrics
"""
import math
from typing import Annotated, List, Literal, Optional, Tuple

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator


def _split_list(value):
    """Accept comma-separated strings for list fields (config files are flat text)"""
    if value is None:
        return []
    if isinstance(value, str):
        parts = [part.strip() for part in value.split(",")]
        return [part for part in parts if part]
    return value


IntList = Annotated[List[int], BeforeValidator(_split_list)]
FloatList = Annotated[List[float], BeforeValidator(_split_list)]
StrList = Annotated[List[str], BeforeValidator(_split_list)]


class ModelSpec(BaseModel):
    """Feed-forward network shape"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_dim: int = Field(1, gt=0)
    hidden_sizes: IntList = Field(default_factory=lambda: [40, 40])
    output_dim: int = Field(1, gt=0)
    head: Literal["regression", "classification"] = "regression"
    activation: Literal["relu"] = "relu"

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_hidden(cls, sizes: List[int]) -> List[int]:
        if any(size <= 0 for size in sizes):
            raise ValueError("hidden sizes must all be positive")
        return sizes

    @model_validator(mode="after")
    def _regression_scalar_output(self):
        if self.head == "regression" and self.output_dim != 1:
            raise ValueError("regression head must have output_dim 1")
        return self


class SinusoidConfig(BaseModel):
    """Non-mutually-exclusive sinusoid regression tasks on disjoint intervals"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    amplitude_min: float = 0.1
    amplitude_max: float = 5.0
    phase_min: float = 0.0
    phase_max: float = math.pi
    domain_min: float = -5.0
    domain_max: float = 5.0
    interval_width: float = Field(0.5, gt=0)
    gap_width: float = Field(0.5, ge=0)
    n_intervals: int = Field(10, gt=0)
    k_shot: int = Field(5, gt=0)
    q_query: int = Field(10, gt=0)   # not given for sinusoids, 10 by default

    @model_validator(mode="after")
    def _intervals_fit_domain(self):
        last_hi = self.domain_min + (self.n_intervals - 1) * (self.interval_width + self.gap_width) + self.interval_width
        if last_hi > self.domain_max + 1e-12:
            raise ValueError("intervals do not fit inside the domain")
        if self.amplitude_min > self.amplitude_max or self.phase_min > self.phase_max:
            raise ValueError("amplitude/phase ranges are reversed")
        return self

    @property
    def intervals(self) -> List[Tuple[float, float]]:
        """[-5,-4.5], [-4,-3.5], ..., [4,4.5] with the defaults"""
        step = self.interval_width + self.gap_width
        return [
            (self.domain_min + i * step, self.domain_min + i * step + self.interval_width)
            for i in range(self.n_intervals)
        ]


class ClassificationConfig(BaseModel):
    """Few-shot classification over a synthetic (or image) class pool"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["ordered", "intershuffle"] = "ordered"
    k_way: int = Field(5, gt=0)
    k_shot: int = Field(1, gt=0)
    q_query: int = Field(5, gt=0)
    n_train_classes: int = Field(20, gt=0)
    n_test_classes: int = Field(20, gt=0)
    feature_dim: int = Field(16, gt=0)
    samples_per_class: int = Field(20, gt=0)
    within_std: float = Field(1.0, gt=0)
    center_spacing: float = Field(6.0, gt=0)   # in units of within_std
    image_dir: Optional[str] = None            # optional image pool instead of synthetic clusters
    image_side: int = Field(14, gt=0)


class NoiseSpec(BaseModel):
    """Gaussian perturbation added to parameter updates"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    mean: float = 0.0
    std: float = Field(7e-7, ge=0)                   # inner loop sigma
    outer_std: Optional[float] = Field(2e-7, ge=0)   # falls back to std when unset
    target: Literal["inner", "outer", "both", "none"] = "both"
    decay_factor: float = Field(0.5, gt=0, le=1)
    decay_interval: Optional[int] = Field(None, gt=0)  # None: half of the outer iterations

    def applies_to(self, loop: Literal["inner", "outer"]) -> bool:
        """Whether noise is injected in the given loop"""
        return self.target == "both" or self.target == loop

    def base_std(self, loop: Literal["inner", "outer"]) -> float:
        if loop == "outer" and self.outer_std is not None:
            return self.outer_std
        return self.std

    def effective_std(self, loop: Literal["inner", "outer"], outer_iter: int, total_iters: int) -> float:
        """
        Sigma in force at an outer iteration

        Args:
            loop: 'inner' or 'outer'
            outer_iter: Current outer iteration (0-based)
            total_iters: Total outer iterations of the run (sets the default decay interval)

        Returns:
            sigma * decay_factor ** floor(outer_iter / decay_interval), or 0 when the loop is not targeted
        """
        if not self.applies_to(loop):
            return 0.0
        interval = self.decay_interval or max(1, total_iters // 2)
        return self.base_std(loop) * self.decay_factor ** (outer_iter // interval)

    def is_active(self, loop: Literal["inner", "outer"]) -> bool:
        return self.applies_to(loop) and (self.base_std(loop) > 0 or self.mean != 0)

    def describe(self, outer_iter: int, total_iters: int) -> str:
        """Effective sigma of each targeted loop, for progress logs"""
        parts = [
            f"sigma_{loop} {self.effective_std(loop, outer_iter, total_iters):.2e}"
            for loop in ("inner", "outer")
            if self.applies_to(loop)
        ]
        return " ".join(parts) or "noise off"


class TrainConfig(BaseModel):
    """Bilevel optimisation settings"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    inner_lr: float = Field(0.01, gt=0)
    outer_lr: float = Field(0.001, gt=0)
    inner_steps: int = Field(1, gt=0)
    meta_batch_size: int = Field(4, gt=0)
    outer_iterations: int = Field(5000, ge=0)
    gradient_order: Literal["first", "second"] = "second"
    seed: int = Field(0, ge=0)
    task_workers: int = Field(1, gt=0)
    log_interval: int = Field(500, gt=0)
    checkpoint_interval: Optional[int] = Field(None, gt=0)


class EvaluationSchedule(BaseModel):
    """When and how the training loop evaluates"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    interval: int = Field(1000, gt=0)
    n_tasks: int = Field(50, gt=0)
    adapt_steps: IntList = Field(default_factory=lambda: list(range(11)))
    report_steps: int = Field(10, ge=0)
    gap_ratio_threshold: float = 0.2
    gap_test_factor: float = 3.0

    @field_validator("adapt_steps")
    @classmethod
    def _zero_shot_included(cls, steps: List[int]) -> List[int]:
        if 0 not in steps:
            raise ValueError("adapt_steps must include 0 (zero-shot evaluation)")
        if any(step < 0 for step in steps):
            raise ValueError("adapt_steps must be non-negative")
        return sorted(set(steps))

    @model_validator(mode="after")
    def _report_step_evaluated(self):
        if self.report_steps not in self.adapt_steps:
            raise ValueError("report_steps must be one of adapt_steps")
        return self


class FeedbackConfig(BaseModel):
    """Retraining from a stored meta-test gradient"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    iterations: int = Field(500, ge=0)
    clamp_weights: bool = False
    base: Literal["vanilla", "noise", "both"] = "vanilla"
    use_noise: bool = False
    test_task_seed: int = Field(0, ge=0)


class SweepConfig(BaseModel):
    """Sigma grid for the inner-loop noise sweep"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    stds: FloatList = Field(default_factory=lambda: [1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5])
    task: Literal["sinusoid", "classification"] = "classification"

    @field_validator("stds")
    @classmethod
    def _non_negative(cls, stds: List[float]) -> List[float]:
        if not stds:
            raise ValueError("at least one sigma is required")
        if any(std < 0 for std in stds):
            raise ValueError("sigma values must be non-negative")
        return stds


VARIANTS = ("vanilla", "noise", "noise_inner", "noise_outer", "noise_both", "meta_augmentation", "feedback")


class ExperimentConfig(BaseModel):
    """Everything a run depends on; a run is a pure function of this object"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["sinusoid", "classification", "noise_sweep", "feedback"] = "sinusoid"
    model: ModelSpec = Field(default_factory=ModelSpec)
    sinusoid: SinusoidConfig = Field(default_factory=SinusoidConfig)
    classification: ClassificationConfig = Field(default_factory=ClassificationConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    evaluation: EvaluationSchedule = Field(default_factory=EvaluationSchedule)
    feedback: FeedbackConfig = Field(default_factory=FeedbackConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    meta_augmentation_offset: float = Field(2.0, gt=0)   # offsets drawn from U[-x, x]
    variants: StrList = Field(default_factory=list)   # empty: chosen by kind
    seeds: IntList = Field(default_factory=lambda: list(range(10)))
    workers: int = Field(1, gt=0)
    output_dir: Optional[str] = None

    @field_validator("variants")
    @classmethod
    def _known_variants(cls, variants: List[str]) -> List[str]:
        unknown = [v for v in variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
        return variants

    @field_validator("seeds")
    @classmethod
    def _seeds_present(cls, seeds: List[int]) -> List[int]:
        if not seeds:
            raise ValueError("at least one seed is required")
        if any(seed < 0 for seed in seeds):
            raise ValueError("seeds must be non-negative")
        return seeds

    @property
    def task_family(self) -> Literal["sinusoid", "classification"]:
        if self.kind == "noise_sweep":
            return self.sweep.task
        if self.kind == "feedback":
            return "classification" if self.model.head == "classification" else "sinusoid"
        return self.kind

    @property
    def resolved_variants(self) -> List[str]:
        if self.variants:
            return list(self.variants)
        if self.kind == "sinusoid":
            return ["vanilla", "meta_augmentation", "noise_inner", "feedback"]
        if self.kind == "classification":
            return ["vanilla", "noise_inner"]
        if self.kind == "feedback":
            return ["feedback"]
        return ["noise_inner"]

    @model_validator(mode="after")
    def _consistent_heads(self):
        family = self.task_family
        if family == "classification":
            if self.model.head != "classification":
                raise ValueError("classification experiments need model.head=classification")
            if self.model.output_dim != self.classification.k_way:
                raise ValueError("model.output_dim must equal classification.k_way")
            expected_dim = self.classification.image_side ** 2 if self.classification.image_dir else self.classification.feature_dim
            if self.model.input_dim != expected_dim:
                raise ValueError(f"model.input_dim must be {expected_dim} for this class pool")
            if "meta_augmentation" in self.resolved_variants:
                raise ValueError("meta_augmentation is defined for regression tasks only")
        elif self.model.head != "regression" or self.model.input_dim != 1:
            raise ValueError("sinusoid experiments need a regression head with input_dim 1")
        return self


class MetricsRecord(BaseModel):
    """One evaluation row (one CSV line in metrics.csv)"""
    variant: str = "vanilla"
    phase: Literal["train", "feedback", "evaluate"] = "train"
    outer_iter: int
    split: Literal["meta_train", "meta_test", "target_task"]
    adapt_steps: int
    loss_mean: float
    loss_std: float
    accuracy_mean: Optional[float] = None   # classification only
    accuracy_std: Optional[float] = None
    seed: int = 0


METRICS_COLUMNS = list(MetricsRecord.model_fields.keys())


class SplitGap(BaseModel):
    """Zero-shot vs adapted loss on one split"""
    zero_shot_loss: float
    adapted_loss: float
    gap_ratio: float


class GapReport(BaseModel):
    """Memorization diagnostic"""
    adapt_steps: int
    meta_train: SplitGap
    meta_test: SplitGap
    ratio_threshold: float
    test_factor: float
    memorization: bool


class RunReport(BaseModel):
    """What a finished experiment hands back to the caller"""
    config_hash: str
    wall_clock_seconds: float
    output_dir: str
    records: List[MetricsRecord]
    aggregate: List[dict]
