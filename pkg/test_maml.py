"""Test the MAML inner/outer loops, noise injection and the training loop"""
import logging
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / "src"))

import numpy as np
import pytest
import torch

from autodiff import DTYPE
from errors import ContractViolation, NumericalFailure
from maml_service import MAMLService, SeedStreams
from models import EvaluationSchedule, ModelSpec, NoiseSpec, SinusoidConfig, TrainConfig
from nn import ParameterSet, forward, init_params, loss
from tasks import SinusoidFamily, SinusoidTaskSource, Task

SPEC = ModelSpec(input_dim=1, hidden_sizes=[10, 10], output_dim=1)
SOURCE = SinusoidTaskSource(SinusoidConfig(), seed=0)
VANILLA = NoiseSpec(target="none")


def _tasks(outer_iter: int, count: int = 2, seed: int = 0):
    streams = SeedStreams(seed)
    return [SOURCE.sample_train(streams.integer_seed(SeedStreams.DATA, outer_iter, i)) for i in range(count)]


def _service(noise=VANILLA, **train) -> MAMLService:
    settings = dict(inner_lr=0.01, outer_lr=0.01, meta_batch_size=2, outer_iterations=100)
    settings.update(train)
    return MAMLService(SPEC, TrainConfig(**settings), noise, seed=0)


def _reference_vanilla_step(theta: ParameterSet, tasks, alpha: float, beta: float) -> ParameterSet:
    grads = []
    for task in tasks:
        leaves = [t.detach().clone().requires_grad_(True) for t in theta.values()]
        params = ParameterSet(dict(zip(theta.names(), leaves)))
        support = loss(forward(params, SPEC, task.support_x), task.support_y, "regression")
        inner = torch.autograd.grad(support, leaves, create_graph=True)
        adapted = ParameterSet({name: p - alpha * g for name, p, g in zip(theta.names(), leaves, inner)})
        query = loss(forward(adapted, SPEC, task.query_x), task.query_y, "regression")
        outer = torch.autograd.grad(query, leaves)
        grads.append(torch.cat([g.reshape(-1) for g in outer]))
    total = torch.zeros(theta.total_count, dtype=DTYPE)
    for grad in grads:
        total = total + grad
    return theta.unflatten(theta.flatten() - beta * total)


def test_seed_streams_are_reproducible_and_distinct():
    a, b = SeedStreams(4), SeedStreams(4)
    assert a.integer_seed(SeedStreams.DATA, 1, 2) == b.integer_seed(SeedStreams.DATA, 1, 2)
    assert a.integer_seed(SeedStreams.DATA, 1, 2) != a.integer_seed(SeedStreams.NOISE, 1, 2)
    assert a.integer_seed(SeedStreams.DATA, 1, 2) != a.integer_seed(SeedStreams.DATA, 2, 1)


def test_noise_decay_schedule():
    noise = NoiseSpec(std=7e-7, outer_std=2e-7, target="both", decay_factor=0.5)
    assert noise.effective_std("inner", 0, 100) == pytest.approx(7e-7)
    assert noise.effective_std("inner", 49, 100) == pytest.approx(7e-7)
    assert noise.effective_std("inner", 50, 100) == pytest.approx(3.5e-7)
    assert noise.effective_std("outer", 99, 100) == pytest.approx(1e-7)
    inner_only = noise.model_copy(update={"target": "inner"})
    assert inner_only.effective_std("outer", 0, 100) == 0.0
    assert not inner_only.is_active("outer")


def test_inner_adapt_is_plain_sgd_without_noise():
    service = _service()
    theta = init_params(SPEC, 1)
    task = _tasks(0)[0]

    leaf = theta.with_grad()
    grads = torch.autograd.grad(service.task_loss(leaf, task.support_x, task.support_y), leaf.values())
    expected = [p.detach() - 0.01 * g for p, g in zip(leaf.values(), grads)]

    phi = service.inner_adapt(theta, task.support_x, task.support_y, alpha=0.01, steps=1)
    assert all(torch.equal(a.detach(), b) for a, b in zip(phi.values(), expected))


def test_inner_adapt_zero_steps_is_identity():
    service = _service()
    theta = init_params(SPEC, 1)
    task = _tasks(0)[0]
    phi = service.inner_adapt(theta, task.support_x, task.support_y, steps=0)
    assert np.array_equal(phi.to_numpy(), theta.to_numpy())


def test_inner_adapt_rejects_empty_support():
    service = _service()
    with pytest.raises(ContractViolation):
        service.inner_adapt(init_params(SPEC, 1), np.zeros((0, 1)), np.zeros(0))


def test_inner_noise_is_added_per_parameter():
    service = _service()
    theta = init_params(SPEC, 1)
    task = _tasks(0)[0]
    plain = service.inner_adapt(theta, task.support_x, task.support_y, steps=1)
    noisy = service.inner_adapt(
        theta, task.support_x, task.support_y, steps=1,
        noise_std=1e-3, rng=np.random.default_rng(0),
    )
    expected = np.random.default_rng(0).normal(0.0, 1e-3, size=theta.total_count)
    assert np.allclose(noisy.to_numpy() - plain.to_numpy(), expected, atol=1e-15)


def test_vanilla_equivalence_over_100_steps():
    service = _service()
    theta = service.init_params()
    reference = theta
    for outer_iter in range(100):
        tasks = _tasks(outer_iter)
        theta = service.meta_step(theta, tasks, outer_iter)
        reference = _reference_vanilla_step(reference, tasks, alpha=0.01, beta=0.01)
    assert np.array_equal(theta.to_numpy(), reference.to_numpy())


def test_zero_sigma_noise_matches_vanilla():
    vanilla = _service()
    silent = _service(NoiseSpec(std=0.0, outer_std=0.0, target="both"))
    theta = vanilla.init_params()
    tasks = _tasks(0)
    assert np.array_equal(
        vanilla.meta_step(theta, tasks, 0).to_numpy(),
        silent.meta_step(theta, tasks, 0).to_numpy(),
    )


def test_noise_is_reproducible_and_changes_the_update():
    noise = NoiseSpec(std=1e-3, outer_std=1e-3, target="both")
    a, b = _service(noise), _service(noise)
    theta = a.init_params()
    tasks = _tasks(0)
    first = a.meta_step(theta, tasks, 0).to_numpy()
    assert np.array_equal(first, b.meta_step(theta, tasks, 0).to_numpy())
    assert not np.array_equal(first, _service().meta_step(theta, tasks, 0).to_numpy())


def test_parallel_tasks_give_identical_results():
    noise = NoiseSpec(std=1e-3, outer_std=1e-3, target="both")
    serial, parallel = _service(noise), _service(noise, task_workers=4)
    theta = serial.init_params()
    tasks = _tasks(5, count=4)
    assert np.array_equal(
        serial.meta_step(theta, tasks, 5).to_numpy(),
        parallel.meta_step(theta, tasks, 5).to_numpy(),
    )


def test_outer_noise_statistics():
    sigma = 0.5
    service = _service(NoiseSpec(std=0.0, outer_std=sigma, target="outer"))
    spec = ModelSpec(input_dim=1, hidden_sizes=[200, 200], output_dim=1)
    theta = init_params(spec, 0).map(torch.zeros_like)
    zeros = [torch.zeros(theta.total_count, dtype=DTYPE)]
    updated = service.apply_update(theta, zeros, outer_iter=0).to_numpy()
    assert abs(updated.mean()) < 0.01
    assert abs(updated.std() - sigma) / sigma < 0.02


def test_first_order_meta_gradient_is_query_gradient_at_phi():
    service = _service(gradient_order="first")
    theta = init_params(SPEC, 3)
    task = _tasks(0)[0]
    grad, _ = service.task_meta_gradients(theta, [task], 0)[0]

    phi = service.inner_adapt(theta, task.support_x, task.support_y).detach().with_grad()
    direct = torch.autograd.grad(service.task_loss(phi, task.query_x, task.query_y), phi.values())
    assert torch.allclose(grad, torch.cat([g.reshape(-1) for g in direct]), rtol=0, atol=1e-14)


def test_second_order_differs_from_first_order():
    theta = init_params(SPEC, 3)
    task = _tasks(0)[0]
    second, _ = _service(inner_lr=0.5).task_meta_gradients(theta, [task], 0)[0]
    first, _ = _service(inner_lr=0.5, gradient_order="first").task_meta_gradients(theta, [task], 0)[0]
    assert not torch.equal(first, second)


def test_non_finite_loss_reports_context():
    service = _service()
    tasks = _tasks(3)
    tasks[1] = replace(tasks[1], query_y=np.full_like(tasks[1].query_y, np.inf))
    with pytest.raises(NumericalFailure) as info:
        service.meta_step(service.init_params(), tasks, 3)
    assert info.value.context["task_index"] == 1
    assert info.value.context["outer_iter"] == 3


def test_meta_step_needs_tasks():
    with pytest.raises(ContractViolation):
        _service().meta_step(init_params(SPEC, 0), [], 0)


def test_weighted_update_with_unit_weights_matches_plain_sum():
    service = _service()
    theta = service.init_params()
    grads = [g for g, _ in service.task_meta_gradients(theta, _tasks(0), 0)]
    plain = service.apply_update(theta, grads)
    weighted = service.apply_update(theta, grads, weights=[1.0, 1.0])
    assert np.array_equal(plain.to_numpy(), weighted.to_numpy())


def test_evaluate_records():
    service = _service()
    theta = service.init_params()
    tasks = [SOURCE.sample_test(i) for i in range(5)]
    records = service.evaluate(theta, tasks, adapt_steps=[0, 1, 5], split="meta_test", variant="vanilla")
    assert [r.adapt_steps for r in records] == [0, 1, 5]
    assert all(r.accuracy_mean is None for r in records)

    zero_shot = [float(loss(forward(theta, SPEC, t.query_x), t.query_y, "regression")) for t in tasks]
    assert records[0].loss_mean == pytest.approx(np.mean(zero_shot), abs=1e-12)
    assert records[0].loss_std == pytest.approx(np.std(zero_shot), abs=1e-12)

    with pytest.raises(ContractViolation):
        service.evaluate(theta, tasks, adapt_steps=[1, 2])


def test_train_without_iterations_evaluates_initialization_once():
    evaluation = EvaluationSchedule(interval=10, n_tasks=3, adapt_steps=[0, 1], report_steps=1)
    service = MAMLService(SPEC, TrainConfig(outer_iterations=0), VANILLA, seed=2, evaluation=evaluation)
    theta, records = service.train(SOURCE)
    assert np.array_equal(theta.to_numpy(), service.init_params().to_numpy())
    assert len(records) == 4
    assert {r.outer_iter for r in records} == {0}
    assert {r.split for r in records} == {"meta_train", "meta_test"}


def test_train_schedule_and_checkpoints():
    evaluation = EvaluationSchedule(interval=2, n_tasks=3, adapt_steps=[0, 1], report_steps=1)
    config = TrainConfig(outer_iterations=4, meta_batch_size=2, log_interval=2, checkpoint_interval=2)
    service = MAMLService(SPEC, config, VANILLA, seed=0, evaluation=evaluation)
    seen = []
    with tempfile.TemporaryDirectory() as tmp:
        _, records = service.train(SOURCE, variant="vanilla", checkpoint_dir=Path(tmp), on_record=seen.append)
        written = sorted(p.name for p in Path(tmp).iterdir())
    assert sorted({r.outer_iter for r in records}) == [0, 2, 4]
    assert len(records) == 12
    assert seen == records
    assert written == ["theta_000002.bin", "theta_000004.bin"]


def test_training_is_deterministic():
    evaluation = EvaluationSchedule(interval=3, n_tasks=2, adapt_steps=[0, 1], report_steps=1)
    config = TrainConfig(outer_iterations=3, meta_batch_size=2)
    noise = NoiseSpec(std=1e-4, target="inner")
    runs = [MAMLService(SPEC, config, noise, seed=1, evaluation=evaluation).train(SOURCE) for _ in range(2)]
    assert np.array_equal(runs[0][0].to_numpy(), runs[1][0].to_numpy())
    assert [r.model_dump() for r in runs[0][1]] == [r.model_dump() for r in runs[1][1]]


LINEAR = ModelSpec(input_dim=2, hidden_sizes=[], output_dim=1)


def _zero_target_task(rng: np.random.Generator) -> Task:
    # zero targets make the loss of a linear model the quadratic 0.5 * theta^T H theta
    return Task(
        support_x=rng.standard_normal((6, 2)),
        support_y=np.zeros(6),
        query_x=rng.standard_normal((8, 2)),
        query_y=np.zeros(8),
        family=SinusoidFamily(interval=0, amplitude=1.0, phase=0.0),
    )


def _hessian(x: np.ndarray) -> np.ndarray:
    augmented = np.hstack([x, np.ones((x.shape[0], 1))])
    return 2.0 * augmented.T @ augmented / x.shape[0]


def test_inner_adapt_matches_quadratic_closed_form():
    rng = np.random.default_rng(21)
    alpha = 0.05
    service = MAMLService(LINEAR, TrainConfig(inner_lr=alpha), VANILLA, seed=0)
    for _ in range(10):
        task = _zero_target_task(rng)
        theta = init_params(LINEAR, 0).unflatten(rng.standard_normal(3))
        phi = service.inner_adapt(theta, task.support_x, task.support_y, steps=1)
        expected = (np.eye(3) - alpha * _hessian(task.support_x)) @ theta.to_numpy()
        assert np.allclose(phi.to_numpy(), expected, rtol=1e-12, atol=1e-12)


def test_meta_step_matches_quadratic_closed_form():
    rng = np.random.default_rng(22)
    alpha, beta = 0.05, 0.1
    service = MAMLService(LINEAR, TrainConfig(inner_lr=alpha, outer_lr=beta), VANILLA, seed=0)
    for _ in range(10):
        task = _zero_target_task(rng)
        theta = init_params(LINEAR, 0).unflatten(rng.standard_normal(3))
        contraction = np.eye(3) - alpha * _hessian(task.support_x)
        phi = contraction @ theta.to_numpy()
        expected = theta.to_numpy() - beta * contraction @ _hessian(task.query_x) @ phi
        updated = service.meta_step(theta, [task], 0)
        assert np.allclose(updated.to_numpy(), expected, rtol=1e-12, atol=1e-12)


def test_first_and_second_order_agree_for_tiny_inner_steps():
    theta = init_params(SPEC, 3)
    task = _tasks(0)[0]
    second, _ = _service(inner_lr=1e-8).task_meta_gradients(theta, [task], 0)[0]
    first, _ = _service(inner_lr=1e-8, gradient_order="first").task_meta_gradients(theta, [task], 0)[0]
    assert float(torch.linalg.norm(second - first) / torch.linalg.norm(second)) <= 1e-6


def test_meta_step_ignores_task_order():
    service = _service(meta_batch_size=4)
    theta = service.init_params()
    tasks = _tasks(2, count=4)
    forward_order = service.meta_step(theta, tasks, 2).to_numpy()
    reversed_order = service.meta_step(theta, tasks[::-1], 2).to_numpy()
    assert np.allclose(forward_order, reversed_order, rtol=0, atol=1e-12)


class _Collect(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.INFO)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def test_progress_log_reports_targeted_loops():
    evaluation = EvaluationSchedule(interval=10, n_tasks=2, adapt_steps=[0, 1], report_steps=1)
    config = TrainConfig(outer_iterations=2, meta_batch_size=1, log_interval=2)
    noise = NoiseSpec(std=0.0, outer_std=3e-4, target="outer", decay_factor=1.0)
    service = MAMLService(SPEC, config, noise, seed=0, evaluation=evaluation)

    target = logging.getLogger("maml_service")
    handler, level = _Collect(), target.level
    target.addHandler(handler)
    target.setLevel(logging.INFO)
    try:
        service.train(SOURCE, variant="noise_outer")
    finally:
        target.removeHandler(handler)
        target.setLevel(level)

    progress = [m for m in handler.messages if "query loss" in m]
    assert len(progress) == 1
    assert "sigma_outer 3.00e-04" in progress[0]
    assert "sigma_inner" not in progress[0]


def test_noise_description_lists_each_targeted_loop():
    noise = NoiseSpec(std=1e-3, outer_std=2e-4, target="both", decay_factor=0.5)
    assert noise.describe(0, 10) == "sigma_inner 1.00e-03 sigma_outer 2.00e-04"
    assert noise.describe(5, 10) == "sigma_inner 5.00e-04 sigma_outer 1.00e-04"
    assert noise.model_copy(update={"target": "inner"}).describe(0, 10) == "sigma_inner 1.00e-03"
    assert VANILLA.describe(0, 10) == "noise off"


if __name__ == "__main__":
    failures = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"✅ {name}")
            except Exception as e:
                failures += 1
                print(f"❌ {name}: {e}")
    sys.exit(1 if failures else 0)
