"""
Feedback retraining
===================
A meta-trained theta* is adapted to a new task T_new; the gradient of T_new's
support loss at theta* is stored once. Retraining then weights each
meta-train task by how well its meta-gradient aligns with that stored
gradient (cosine similarity) and takes weighted outer steps from theta*.
T_new's query set is used only to evaluate before and after.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.metrics.pairwise import cosine_similarity

from autodiff import backward
from errors import ContractViolation, FeedbackNotApplicable, NumericalFailure
from maml_service import MAMLService, SeedStreams
from models import FeedbackConfig, MetricsRecord, ModelSpec
from nn import ParameterSet, forward, loss
from tasks import Task

logger = logging.getLogger(__name__)

_MAGIC = b"TGRD"


@dataclass(frozen=True)
class TestGradient:
    """Stored support-loss gradient of the target task at theta*"""
    __test__ = False   # not a pytest class

    vector: np.ndarray
    source_task_id: str
    norm: float

    def save(self, path: Union[str, Path]) -> Path:
        """
        Layout: b'TGRD', uint32 LE id length, UTF-8 id, uint64 LE length,
        then little-endian float64 values.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        task_id = self.source_task_id.encode("utf-8")
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", len(task_id)))
            f.write(task_id)
            f.write(struct.pack("<Q", self.vector.size))
            f.write(np.asarray(self.vector, dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TestGradient":
        data = Path(path).read_bytes()
        if data[:4] != _MAGIC:
            raise ContractViolation(f"{path} is not a test-gradient file")
        (id_len,) = struct.unpack("<I", data[4:8])
        task_id = data[8:8 + id_len].decode("utf-8")
        offset = 8 + id_len
        (size,) = struct.unpack("<Q", data[offset:offset + 8])
        vector = np.frombuffer(data[offset + 8:], dtype="<f8").astype(np.float64)
        if vector.size != size:
            raise ContractViolation(f"{path} holds {vector.size} values, header says {size}")
        return cls(vector=vector, source_task_id=task_id, norm=float(np.linalg.norm(vector)))


def record_test_gradient(theta: ParameterSet, task: Task, model_spec: ModelSpec, task_id: str = "target") -> TestGradient:
    """
    Gradient of the target task's support loss at theta, flattened in declaration order

    Raises:
        FeedbackNotApplicable: the gradient has zero norm
    """
    leaf = theta.with_grad()
    support_loss = loss(forward(leaf, model_spec, task.support_x), task.support_y, model_spec.head)
    grads = backward(support_loss, leaf.values())
    vector = torch.cat([g.reshape(-1) for g in grads]).detach().cpu().numpy().copy()

    if not np.isfinite(vector).all():
        raise NumericalFailure("non-finite test-task gradient", task_id=task_id)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise FeedbackNotApplicable(f"test-task gradient of {task_id!r} has zero norm")
    logger.info(f"Recorded test-task gradient for {task_id!r} (norm {norm:.4e})")
    return TestGradient(vector=vector, source_task_id=task_id, norm=norm)


def cosine_sim(a, b) -> float:
    """Cosine similarity of two non-zero vectors, clipped to [-1, 1]"""
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    if a.shape != b.shape:
        raise ContractViolation(f"vector lengths differ: {a.shape[1]} vs {b.shape[1]}")
    if not np.any(a) or not np.any(b):
        raise ContractViolation("cosine similarity of a zero vector")
    return float(np.clip(cosine_similarity(a, b)[0, 0], -1.0, 1.0))


@dataclass
class FeedbackStep:
    theta: ParameterSet
    weights: np.ndarray
    query_losses: List[float]


class FeedbackService:
    """Weighted outer updates steered by a stored test-task gradient"""

    def __init__(self, maml: MAMLService, config: Optional[FeedbackConfig] = None):
        """
        Initialize feedback service

        Args:
            maml: Trainer supplying the inner loop, per-task gradients and the update rule
            config: Retraining settings
        """
        self.maml = maml
        self.config = config or FeedbackConfig()

    def task_weights(self, grads: Sequence[torch.Tensor], test_grad: TestGradient) -> np.ndarray:
        """h_i = cos(grad_i, test_grad); zero-norm task gradients get 0"""
        if test_grad.norm == 0.0:
            raise FeedbackNotApplicable(f"test-task gradient of {test_grad.source_task_id!r} has zero norm")

        weights = np.zeros(len(grads))
        for index, grad in enumerate(grads):
            vector = grad.detach().cpu().numpy()
            if vector.size != test_grad.vector.size:
                raise ContractViolation(
                    f"task gradient has {vector.size} entries, test gradient {test_grad.vector.size}"
                )
            if np.any(vector):
                weights[index] = cosine_sim(vector, test_grad.vector)
        if self.config.clamp_weights:
            weights = np.clip(weights, 0.0, 1.0)
        return weights

    def feedback_meta_step(
        self,
        theta: ParameterSet,
        tasks: Sequence[Task],
        test_grad: TestGradient,
        outer_iter: int = 0,
    ) -> FeedbackStep:
        """
        One weighted outer update: theta - beta * sum_i h_i * grad_i (+ outer noise when enabled)

        Args:
            theta: Current meta-parameters
            tasks: Meta-train batch
            test_grad: Stored target-task gradient
            outer_iter: Retraining iteration

        Returns:
            Updated theta with the weights used
        """
        if not tasks:
            raise ContractViolation("feedback_meta_step needs at least one task")
        with_noise = self.config.use_noise
        results = self.maml.task_meta_gradients(
            theta, tasks, outer_iter, with_noise=with_noise, noise_stream=SeedStreams.FEEDBACK_NOISE
        )
        grads = [grad for grad, _ in results]
        weights = self.task_weights(grads, test_grad)
        updated = self.maml.apply_update(
            theta, grads, weights=weights, outer_iter=outer_iter,
            with_noise=with_noise, noise_stream=SeedStreams.FEEDBACK_NOISE,
        )
        return FeedbackStep(theta=updated, weights=weights, query_losses=[q for _, q in results])

    def _evaluate_target(self, theta, task, outer_iter, variant) -> List[MetricsRecord]:
        return self.maml.evaluate(
            theta, [task], adapt_steps=self.maml.evaluation.adapt_steps,
            split="target_task", outer_iter=outer_iter, phase="feedback", variant=variant,
        )

    def feedback_retrain(
        self,
        theta_star: ParameterSet,
        new_task: Task,
        source,
        task_id: str = "target",
        test_grad: Optional[TestGradient] = None,
        variant: str = "feedback",
    ) -> Tuple[ParameterSet, List[MetricsRecord], TestGradient]:
        """
        Retrain theta* towards a new task

        Args:
            theta_star: Meta-trained parameters
            new_task: Target task (support set feeds the gradient, query set the evaluation)
            source: Meta-train task source
            task_id: Identifier stored with the test gradient
            test_grad: Previously stored gradient (recorded from new_task when omitted)
            variant: Label written into the records

        Returns:
            (theta_fb, target-task records before and after, test gradient)
        """
        if test_grad is None:
            test_grad = record_test_gradient(theta_star, new_task, self.maml.spec, task_id)
        elif test_grad.vector.size != theta_star.total_count:
            raise ContractViolation(
                f"test gradient has {test_grad.vector.size} entries, parameters {theta_star.total_count}"
            )

        iterations = self.config.iterations
        records = self._evaluate_target(theta_star, new_task, 0, variant)
        logger.info(f"🔁 [{variant} seed={self.maml.streams.seed}] feedback retraining for {iterations} iterations")

        theta = theta_star
        streams = self.maml.streams
        for outer_iter in range(iterations):
            tasks = [
                source.sample_train(streams.integer_seed(SeedStreams.FEEDBACK_DATA, outer_iter, i))
                for i in range(self.maml.config.meta_batch_size)
            ]
            try:
                step = self.feedback_meta_step(theta, tasks, test_grad, outer_iter)
            except NumericalFailure as e:
                raise e.with_context(variant=variant)
            theta = step.theta
            if (outer_iter + 1) % self.maml.config.log_interval == 0:
                logger.info(f"[{variant} seed={streams.seed}] feedback iter {outer_iter + 1}/{iterations} "
                            f"mean weight {step.weights.mean():+.3f} query loss {np.mean(step.query_losses):.4f}")

        records += self._evaluate_target(theta, new_task, iterations, variant)
        logger.info(f"✅ [{variant} seed={streams.seed}] feedback retraining finished")
        return theta, records, test_grad
