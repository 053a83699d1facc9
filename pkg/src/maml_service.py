"""
MAML with noise-augmented updates
==================================
Inner loop: phi <- phi - alpha * grad L_support(phi) + eps  (Augmented SGD)
Outer loop: theta' = theta - beta * sum_i grad_theta L_query,i(phi_i) + eps_outer

eps is drawn i.i.d. per scalar parameter from N(mu, sigma_t), where sigma_t
decays by a constant factor every decay_interval outer iterations. Noise
comes from its own seeded stream, so switching it off never shifts the data.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from autodiff import DTYPE, Tape
from errors import ContractViolation, NumericalFailure
from models import EvaluationSchedule, MetricsRecord, ModelSpec, NoiseSpec, TrainConfig
from nn import ParameterSet, accuracy, forward, init_params, loss, save_parameters
from tasks import Task

logger = logging.getLogger(__name__)


class SeedStreams:
    """Named random streams derived from one run seed"""

    DATA = 1
    NOISE = 2
    INIT = 3
    EVAL = 4
    FEEDBACK_DATA = 5
    FEEDBACK_NOISE = 6
    FEEDBACK_TASK = 7

    INNER = 0
    OUTER = 1

    def __init__(self, seed: int):
        if seed < 0:
            raise ContractViolation(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)

    def generator(self, stream: int, *keys: int) -> np.random.Generator:
        """Independent generator for (seed, stream, *keys)"""
        return np.random.default_rng([self.seed, stream, *[int(k) for k in keys]])

    def integer_seed(self, stream: int, *keys: int) -> int:
        return int(self.generator(stream, *keys).integers(2 ** 31 - 1))


def _ensure_finite(value: torch.Tensor, what: str, **context) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NumericalFailure(f"non-finite {what}", **context)


def draw_noise(params: ParameterSet, mean: float, std: float, rng: np.random.Generator) -> List[torch.Tensor]:
    """Per-scalar i.i.d. N(mean, std) draws, one tensor per parameter in declaration order"""
    return [torch.from_numpy(rng.normal(mean, std, size=tuple(t.shape))).to(DTYPE) for t in params.values()]


class MAMLService:
    """Bilevel trainer: inner Augmented SGD, outer meta-update, evaluation"""

    def __init__(
        self,
        model_spec: ModelSpec,
        train_config: TrainConfig,
        noise: Optional[NoiseSpec] = None,
        seed: Optional[int] = None,
        evaluation: Optional[EvaluationSchedule] = None,
    ):
        """
        Initialize MAML service

        Args:
            model_spec: Network shape
            train_config: Learning rates, step counts, gradient order
            noise: Noise configuration (None: vanilla MAML)
            seed: Run seed (defaults to train_config.seed)
            evaluation: Evaluation schedule used by train()
        """
        self.spec = model_spec
        self.config = train_config
        self.noise = noise or NoiseSpec(target="none")
        self.streams = SeedStreams(train_config.seed if seed is None else seed)
        self.evaluation = evaluation or EvaluationSchedule()

    @property
    def second_order(self) -> bool:
        return self.config.gradient_order == "second"

    def task_loss(self, params: ParameterSet, x, y) -> torch.Tensor:
        return loss(forward(params, self.spec, x), y, self.spec.head)

    def init_params(self) -> ParameterSet:
        return init_params(self.spec, self.streams.integer_seed(SeedStreams.INIT))

    # ------------------------------------------------------------------
    # Inner loop
    # ------------------------------------------------------------------
    def inner_adapt(
        self,
        theta: ParameterSet,
        support_x,
        support_y,
        alpha: Optional[float] = None,
        steps: Optional[int] = None,
        noise_std: float = 0.0,
        noise_mean: float = 0.0,
        rng: Optional[np.random.Generator] = None,
        create_graph: bool = False,
    ) -> ParameterSet:
        """
        Adapt parameters on a support set with Augmented SGD

        Args:
            theta: Starting parameters; when they record operations, phi stays differentiable w.r.t. them
            support_x: Support inputs
            support_y: Support targets
            alpha: Inner learning rate (defaults to the train config)
            steps: Number of inner steps (defaults to the train config)
            noise_std: Effective sigma for this call
            noise_mean: mu
            rng: Noise generator; no noise is added without one
            create_graph: Keep the inner gradients on the graph (second-order meta-gradient)

        Returns:
            Adapted parameters phi
        """
        alpha = self.config.inner_lr if alpha is None else alpha
        steps = self.config.inner_steps if steps is None else steps
        if len(support_x) == 0:
            raise ContractViolation("inner_adapt needs a non-empty support set")

        tape = Tape(1 if create_graph else 0)
        phi = theta if any(t.requires_grad for t in theta.values()) else theta.with_grad()
        add_noise = rng is not None and (noise_std > 0 or noise_mean != 0)

        for step in range(steps):
            step_loss = self.task_loss(phi, support_x, support_y)
            _ensure_finite(step_loss, "support loss", inner_step=step)
            grads = tape.backward(step_loss, phi.values())
            for grad in grads:
                _ensure_finite(grad, "support gradient", inner_step=step)

            phi = phi.zip_map(grads, lambda p, g: p - alpha * g)
            if add_noise:
                # additive constant: zero derivative w.r.t. theta
                phi = phi.zip_map(draw_noise(phi, noise_mean, noise_std, rng), lambda p, e: p + e)
        return phi

    # ------------------------------------------------------------------
    # Outer loop
    # ------------------------------------------------------------------
    def task_meta_gradients(
        self,
        theta: ParameterSet,
        tasks: Sequence[Task],
        outer_iter: int = 0,
        with_noise: bool = True,
        noise_stream: int = SeedStreams.NOISE,
    ) -> List[Tuple[torch.Tensor, float]]:
        """
        Per-task outer gradients

        Args:
            theta: Meta-parameters
            tasks: Meta-batch
            outer_iter: Outer iteration (keys the noise substreams and sets the decayed sigma)
            with_noise: Apply inner-loop noise when the NoiseSpec targets it
            noise_stream: Stream the noise substreams come from

        Returns:
            (flattened grad_theta L_query(phi_i), query loss) per task, in task-index order
        """
        inner_active = with_noise and self.noise.is_active("inner")
        inner_std = self.noise.effective_std("inner", outer_iter, self.config.outer_iterations) if inner_active else 0.0

        def one_task(task_index: int) -> Tuple[torch.Tensor, float]:
            task = tasks[task_index]
            theta_leaf = theta.with_grad()
            rng = self.streams.generator(noise_stream, outer_iter, task_index, SeedStreams.INNER) if inner_active else None
            try:
                phi = self.inner_adapt(
                    theta_leaf, task.support_x, task.support_y,
                    noise_std=inner_std, noise_mean=self.noise.mean, rng=rng,
                    create_graph=self.second_order,
                )
                query_loss = self.task_loss(phi, task.query_x, task.query_y)
                _ensure_finite(query_loss, "query loss")
                tape = Tape(1 if self.second_order else 0)
                if self.second_order:
                    grads = tape.grad_of_grad(query_loss, (), theta_leaf.values())
                else:
                    grads = tape.backward(query_loss, theta_leaf.values())
                flat = torch.cat([g.reshape(-1) for g in grads]).detach()
                _ensure_finite(flat, "meta-gradient")
            except NumericalFailure as e:
                raise e.with_context(outer_iter=outer_iter, task_index=task_index, seed=self.streams.seed)
            return flat, float(query_loss.detach())

        if self.config.task_workers > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=self.config.task_workers) as executor:
                return list(executor.map(one_task, range(len(tasks))))
        return [one_task(i) for i in range(len(tasks))]

    def apply_update(
        self,
        theta: ParameterSet,
        grads: Sequence[torch.Tensor],
        weights: Optional[Sequence[float]] = None,
        outer_iter: int = 0,
        with_noise: bool = True,
        noise_stream: int = SeedStreams.NOISE,
    ) -> ParameterSet:
        """
        theta - beta * sum_i w_i * g_i + eps_outer, summed in task-index order

        Args:
            theta: Meta-parameters
            grads: Flattened per-task outer gradients
            weights: Per-task weights (None: all ones)
            outer_iter: Outer iteration
            with_noise: Apply outer-loop noise when the NoiseSpec targets it
            noise_stream: Stream the outer noise comes from

        Returns:
            Updated meta-parameters
        """
        if weights is not None and len(weights) != len(grads):
            raise ContractViolation(f"{len(weights)} weights for {len(grads)} gradients")

        total = torch.zeros(theta.total_count, dtype=DTYPE)
        for index, grad in enumerate(grads):
            total = total + (grad if weights is None else float(weights[index]) * grad)

        flat = theta.flatten().detach() - self.config.outer_lr * total
        if with_noise and self.noise.is_active("outer"):
            std = self.noise.effective_std("outer", outer_iter, self.config.outer_iterations)
            rng = self.streams.generator(noise_stream, outer_iter, SeedStreams.OUTER)
            flat = flat + torch.from_numpy(rng.normal(self.noise.mean, std, size=tuple(flat.shape))).to(DTYPE)
        return theta.unflatten(flat)

    def _meta_step(self, theta: ParameterSet, tasks: Sequence[Task], outer_iter: int) -> Tuple[ParameterSet, List[float]]:
        if not tasks:
            raise ContractViolation("meta_step needs at least one task")
        results = self.task_meta_gradients(theta, tasks, outer_iter)
        updated = self.apply_update(theta, [g for g, _ in results], outer_iter=outer_iter)
        return updated, [query_loss for _, query_loss in results]

    def meta_step(self, theta: ParameterSet, tasks: Sequence[Task], outer_iter: int = 0) -> ParameterSet:
        """
        One outer update over a meta-batch

        Args:
            theta: Meta-parameters
            tasks: Meta-batch of s tasks
            outer_iter: Outer iteration (noise keys and decay)

        Returns:
            theta'
        """
        return self._meta_step(theta, tasks, outer_iter)[0]

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------
    def evaluate_losses(
        self,
        theta: ParameterSet,
        tasks: Sequence[Task],
        alpha: Optional[float],
        adapt_steps: Sequence[int],
    ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """
        Noise-free adaptation of a copy of theta per task

        Returns:
            (losses, accuracies) shaped (n_tasks, len(adapt_steps)); accuracies is None for regression
        """
        steps = sorted(set(int(s) for s in adapt_steps))
        column = {step: j for j, step in enumerate(steps)}
        classification = self.spec.head == "classification"
        losses = np.zeros((len(tasks), len(steps)))
        accuracies = np.zeros((len(tasks), len(steps))) if classification else None

        for i, task in enumerate(tasks):
            phi = theta.detach()
            for step in range(steps[-1] + 1):
                if step in column:
                    with torch.no_grad():
                        predictions = forward(phi, self.spec, task.query_x)
                        losses[i, column[step]] = float(loss(predictions, task.query_y, self.spec.head))
                        if classification:
                            accuracies[i, column[step]] = accuracy(predictions, task.query_y)
                if step < steps[-1]:
                    phi = self.inner_adapt(phi, task.support_x, task.support_y, alpha=alpha, steps=1).detach()

        if not np.isfinite(losses).all():
            raise NumericalFailure("non-finite evaluation loss", seed=self.streams.seed)
        return losses, accuracies

    def evaluate(
        self,
        theta: ParameterSet,
        tasks: Sequence[Task],
        alpha: Optional[float] = None,
        adapt_steps: Sequence[int] = (0,),
        split: str = "meta_test",
        outer_iter: int = 0,
        phase: str = "train",
        variant: str = "vanilla",
    ) -> List[MetricsRecord]:
        """
        Query loss (and accuracy) after n noise-free inner steps, for each n

        Args:
            theta: Meta-parameters
            tasks: Evaluation tasks
            alpha: Inner learning rate (defaults to the train config)
            adapt_steps: Step counts to report; must include 0 (zero-shot)
            split: 'meta_train', 'meta_test' or 'target_task'
            outer_iter: Outer iteration the evaluation belongs to
            phase: 'train', 'feedback' or 'evaluate'
            variant: Label of the training variant

        Returns:
            One MetricsRecord per step count, mean and std across tasks
        """
        if 0 not in adapt_steps:
            raise ContractViolation("adapt_steps must include 0")
        steps = sorted(set(int(s) for s in adapt_steps))
        losses, accuracies = self.evaluate_losses(theta, tasks, alpha, steps)

        records = []
        for j, step in enumerate(steps):
            records.append(MetricsRecord(
                variant=variant,
                phase=phase,
                outer_iter=outer_iter,
                split=split,
                adapt_steps=step,
                loss_mean=float(np.mean(losses[:, j])),
                loss_std=float(np.std(losses[:, j])),
                accuracy_mean=None if accuracies is None else float(np.mean(accuracies[:, j])),
                accuracy_std=None if accuracies is None else float(np.std(accuracies[:, j])),
                seed=self.streams.seed,
            ))
        return records

    def heldout_tasks(self, source) -> Tuple[List[Task], List[Task]]:
        """Fixed meta-train and meta-test evaluation samples of this run"""
        n = self.evaluation.n_tasks
        train_tasks = [source.sample_train(self.streams.integer_seed(SeedStreams.EVAL, 0, i)) for i in range(n)]
        test_tasks = [source.sample_test(self.streams.integer_seed(SeedStreams.EVAL, 1, i)) for i in range(n)]
        return train_tasks, test_tasks

    def evaluate_splits(self, theta, heldout, outer_iter, variant, phase="train") -> List[MetricsRecord]:
        train_tasks, test_tasks = heldout
        steps = self.evaluation.adapt_steps
        return (
            self.evaluate(theta, train_tasks, adapt_steps=steps, split="meta_train", outer_iter=outer_iter, phase=phase, variant=variant)
            + self.evaluate(theta, test_tasks, adapt_steps=steps, split="meta_test", outer_iter=outer_iter, phase=phase, variant=variant)
        )

    # ------------------------------------------------------------------
    # Training loop
    # ------------------------------------------------------------------
    def train(
        self,
        source,
        variant: str = "vanilla",
        checkpoint_dir: Optional[Path] = None,
        on_record: Optional[Callable[[MetricsRecord], None]] = None,
    ) -> Tuple[ParameterSet, List[MetricsRecord]]:
        """
        Meta-train from a fresh initialization

        Args:
            source: Task source (sample_train / sample_test)
            variant: Label written into the records
            checkpoint_dir: Where periodic checkpoints go (train_config.checkpoint_interval)
            on_record: Called for every evaluation record as it is produced

        Returns:
            (theta*, evaluation records)
        """
        theta = self.init_params()
        heldout = self.heldout_tasks(source)
        total = self.config.outer_iterations
        records: List[MetricsRecord] = []

        def emit(batch: List[MetricsRecord]):
            records.extend(batch)
            if on_record:
                for record in batch:
                    on_record(record)

        logger.info(f"🚀 [{variant} seed={self.streams.seed}] meta-training for {total} outer iterations "
                    f"({self.config.gradient_order}-order, noise target={self.noise.target})")

        running: List[float] = []
        for outer_iter in range(total):
            if outer_iter % self.evaluation.interval == 0:
                emit(self.evaluate_splits(theta, heldout, outer_iter, variant))

            tasks = [
                source.sample_train(self.streams.integer_seed(SeedStreams.DATA, outer_iter, i))
                for i in range(self.config.meta_batch_size)
            ]
            try:
                theta, query_losses = self._meta_step(theta, tasks, outer_iter)
            except NumericalFailure as e:
                raise e.with_context(variant=variant)
            running.extend(query_losses)

            if (outer_iter + 1) % self.config.log_interval == 0:
                logger.info(f"[{variant} seed={self.streams.seed}] iter {outer_iter + 1}/{total} "
                            f"query loss {np.mean(running):.4f} {self.noise.describe(outer_iter, total)}")
                running = []

            interval = self.config.checkpoint_interval
            if checkpoint_dir is not None and interval and (outer_iter + 1) % interval == 0:
                save_parameters(theta, Path(checkpoint_dir) / f"theta_{outer_iter + 1:06d}.bin")

        emit(self.evaluate_splits(theta, heldout, total, variant))
        logger.info(f"✅ [{variant} seed={self.streams.seed}] meta-training finished")
        return theta, records
