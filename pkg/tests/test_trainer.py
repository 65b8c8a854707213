"""Deterministic training, checkpoints and resume."""

from pathlib import Path

import numpy as np
import pytest

from canseg.models.schemas import RunConfig
from canseg.services.trainer import Trainer, batch_indices, validate
from canseg.services.weights import decode_container

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_batch_indices():
    assert batch_indices(0, 3) == [0, 1, 2]
    assert batch_indices(2, 3) == [6, 7, 8]


class TestTrainer:
    def test_no_iterations_still_writes_weights(self, tiny_run_config, tmp_path):
        result = Trainer(tiny_run_config).train(tmp_path / "w.canw", max_iter=0)
        assert result.losses == []
        assert (tmp_path / "w.canw").exists()

    def test_losses_finite(self, tiny_run_config, tmp_path):
        result = Trainer(tiny_run_config).train(tmp_path / "w.canw")
        assert result.final_iteration == 4
        assert len(result.losses) == 4
        assert np.all(np.isfinite(result.losses))
        assert result.val_miou is not None
        assert (Path(tiny_run_config.io.checkpoint_dir) / "iter-000004" / "state.json").exists()

    def test_same_seed_identical_bytes(self, tiny_run_config, tmp_path):
        Trainer(tiny_run_config).train(tmp_path / "a.canw")
        Trainer(tiny_run_config).train(tmp_path / "b.canw")
        assert (tmp_path / "a.canw").read_bytes() == (tmp_path / "b.canw").read_bytes()

    def test_resume_matches_uninterrupted(self, tiny_run_config, tmp_path):
        Trainer(tiny_run_config).train(tmp_path / "full.canw")

        first = Trainer(tiny_run_config)
        first.train(tmp_path / "half.canw", max_iter=2)
        resumed = Trainer(tiny_run_config)
        resumed.resume(first.checkpoint_dir(2))
        assert resumed.iteration == 2
        result = resumed.train(tmp_path / "resumed.canw")
        assert result.start_iteration == 2
        assert (tmp_path / "full.canw").read_bytes() == (tmp_path / "resumed.canw").read_bytes()

    def test_weights_cover_state(self, tiny_run_config, tmp_path):
        trainer = Trainer(tiny_run_config)
        trainer.train(tmp_path / "w.canw", max_iter=1)
        names = list(decode_container((tmp_path / "w.canw").read_bytes()))
        assert names == list(trainer.model.state_dict())

    def test_validation_report(self, tiny_run_config):
        report = validate(Trainer(tiny_run_config).model, tiny_run_config)
        assert len(report.per_class) == tiny_run_config.model.num_classes
        assert 0.0 <= report.mean <= 1.0


@pytest.mark.slow
def test_toy_config_learns_shapes(tmp_path):
    """The shipped toy run reaches a validation mIoU of 0.90."""
    config = RunConfig.load(CONFIGS / "toy.json")
    config = config.model_copy(
        update={"io": config.io.model_copy(update={"weights": tmp_path / "toy.canw", "checkpoint_dir": tmp_path / "ckpt"})}
    )
    trainer = Trainer(config)
    trainer.train()
    assert validate(trainer.model, config).mean >= 0.90
