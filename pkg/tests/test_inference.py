"""Grid padding, cropped predictions and output files."""

from pathlib import Path

import numpy as np
import pytest

from canseg.core.errors import ShapeError
from canseg.services import imageio
from canseg.services.inference import infer_files, output_paths, pad_to_grid, predict_labels, predict_logits


class TestPadToGrid:
    def test_pads_bottom_right(self, rng):
        images = rng.standard_normal((1, 3, 70, 90))
        padded, extent = pad_to_grid(images)
        assert padded.shape == (1, 3, 80, 96)
        assert extent == (70, 90)
        np.testing.assert_array_equal(padded[:, :, :70, :90], images)

    def test_aligned_unchanged(self, rng):
        images = rng.standard_normal((2, 3, 32, 48))
        padded, _ = pad_to_grid(images)
        assert padded is images

    def test_rank(self):
        with pytest.raises(ShapeError):
            pad_to_grid(np.zeros((3, 32, 32)))


class TestPredict:
    """Any input extent comes back at its own size."""

    def test_crop_back(self, tiny_model, rng):
        images = rng.random((1, 3, 70, 90), dtype=np.float32)
        logits = predict_logits(tiny_model, images)
        assert logits.shape == (1, tiny_model.config.num_classes, 70, 90)

    def test_labels_in_range(self, tiny_model, rng):
        labels = predict_labels(tiny_model, rng.random((2, 3, 32, 32), dtype=np.float32))
        assert labels.shape == (2, 32, 32)
        assert labels.min() >= 0 and labels.max() < tiny_model.config.num_classes

    def test_restores_training_mode(self, tiny_model, rng):
        tiny_model.train()
        predict_logits(tiny_model, rng.random((1, 3, 32, 32), dtype=np.float32))
        assert tiny_model.training


class TestOutputFiles:
    def test_single_image_names(self):
        labels, colour = output_paths(Path("out/pred"), Path("in/a.ppm"), many=False)
        assert (labels, colour) == (Path("out/pred.labels.pgm"), Path("out/pred.color.ppm"))

    def test_several_images_append_stem(self):
        labels, _ = output_paths(Path("out/pred"), Path("in/a.ppm"), many=True)
        assert labels == Path("out/pred-a.labels.pgm")

    def test_infer_files_writes_maps(self, tiny_model, rng, tmp_path):
        paths = []
        for name, (h, w) in (("a", (70, 90)), ("b", (32, 32))):
            path = tmp_path / f"{name}.ppm"
            imageio.write_ppm(path, rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
            paths.append(path)
        outputs = infer_files(tiny_model, paths, tmp_path / "out" / "pred", threads=2)
        assert [o[0].name for o in outputs] == ["pred-a.labels.pgm", "pred-b.labels.pgm"]
        label = imageio.read_pgm(outputs[0][0])
        assert label.shape == (70, 90)
        assert label.max() < tiny_model.config.num_classes
        assert imageio.read_ppm(outputs[0][1]).shape == (70, 90, 3)
