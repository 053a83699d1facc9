"""Test config-file parsing, validation messages and the canonical hash"""
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / "src"))

import pytest

from config import canonical_text, config_hash, load_experiment_config, nest, with_overrides
from errors import ConfigError
from models import ExperimentConfig

REPO = Path(__file__).resolve().parent


def _load(text: str, **overrides):
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "experiment.cfg"
        path.write_text(text, encoding="utf-8")
        return load_experiment_config(path, overrides or None)


def test_nested_keys_and_lists():
    config = _load("kind=sinusoid\nseeds=3, 4,5\nmodel.hidden_sizes=8,8\ntrain.inner_lr=0.05\n# comment\n")
    assert config.seeds == [3, 4, 5]
    assert config.model.hidden_sizes == [8, 8]
    assert config.train.inner_lr == 0.05
    assert config.train.outer_lr == 0.001


def test_defaults_match_desk_scale():
    config = ExperimentConfig()
    assert config.train.meta_batch_size == 4
    assert config.train.outer_iterations == 5000
    assert config.noise.std == 7e-7 and config.noise.outer_std == 2e-7
    assert config.sinusoid.k_shot == 5 and config.sinusoid.q_query == 10
    assert config.evaluation.adapt_steps == list(range(11))
    assert config.resolved_variants == ["vanilla", "meta_augmentation", "noise_inner", "feedback"]


def test_field_level_errors():
    with pytest.raises(ConfigError) as info:
        _load("train.inner_lr=-1\ntrain.gradient_order=third\n")
    problems = "\n".join(info.value.problems)
    assert "train.inner_lr" in problems
    assert "train.gradient_order" in problems


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError) as info:
        _load("train.inner_rl=0.1\n")
    assert any("train.inner_rl" in p for p in info.value.problems)


def test_classification_head_must_match_task():
    with pytest.raises(ConfigError):
        _load("kind=classification\nmodel.head=classification\nmodel.output_dim=3\nmodel.input_dim=16\n")
    with pytest.raises(ConfigError):
        _load("kind=classification\nmodel.head=classification\nmodel.output_dim=5\nmodel.input_dim=16\n"
              "variants=vanilla,meta_augmentation\n")


def test_adapt_steps_must_include_zero():
    with pytest.raises(ConfigError):
        _load("evaluation.adapt_steps=1,2,10\n")


def test_missing_file():
    with pytest.raises(ConfigError):
        load_experiment_config("/nonexistent/experiment.cfg")


def test_key_cannot_be_value_and_section():
    with pytest.raises(ConfigError):
        nest({"train": "1", "train.inner_lr": "0.1"})


def test_overrides_replace_file_values():
    config = _load("seeds=0,1,2\n", seeds="7")
    assert config.seeds == [7]


def test_canonical_text_round_trips():
    config = _load("kind=sinusoid\nseeds=1,2\nnoise.outer_std=\nfeedback.clamp_weights=true\n")
    assert config.noise.outer_std is None
    assert config.feedback.clamp_weights is True

    reloaded = _load(canonical_text(config))
    assert reloaded == config
    assert config_hash(reloaded) == config_hash(config)


def test_hash_tracks_every_setting():
    base = ExperimentConfig()
    assert config_hash(base) == config_hash(ExperimentConfig())
    assert config_hash(base) != config_hash(with_overrides(base, train__inner_lr=0.02))


def test_shipped_configs_are_valid():
    kinds = {path.stem: load_experiment_config(path).kind for path in sorted((REPO / "configs").glob("*.cfg"))}
    assert kinds == {
        "classification": "classification",
        "feedback": "feedback",
        "noise_sweep": "noise_sweep",
        "sinusoid": "sinusoid",
    }


def test_shipped_classification_config_limits_adaptation():
    for name in ("classification", "noise_sweep"):
        config = load_experiment_config(REPO / "configs" / f"{name}.cfg")
        assert config.evaluation.report_steps == config.train.inner_steps, name
        assert config.train.inner_lr <= 0.1, name
        assert config.classification.center_spacing >= 6.0, name
    config = load_experiment_config(REPO / "configs" / "classification.cfg")
    assert config.resolved_variants[:2] == ["vanilla", "noise_inner"]


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
