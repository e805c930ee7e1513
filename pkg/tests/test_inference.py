import numpy as np
import pytest
import torch

from ged import denoiser
from ged.checkpoint import save_checkpoint
from ged.denoiser import UNetConfig, build_finetune_mask, build_unet
from ged.errors import ValidationError
from ged.inference import (
    EdgePrediction,
    Predictor,
    load_prediction_png,
    prediction_filename,
    save_prediction_png,
)

CFG = UNetConfig(base_channels=8, stage_multipliers=(1, 2),
                 attention_stages=(1,), text_dim=64)


@pytest.fixture(scope="module")
def predictor(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    model = build_unet(CFG, seed=0)
    mask = build_finetune_mask(model, "partial")
    save_checkpoint(path, model, mask, bounds=(10, 500),
                    extra={"strategy": "encoding"})
    return Predictor.from_checkpoint(path)


@pytest.fixture(scope="module")
def image():
    r = np.random.default_rng(5)
    return r.random((48, 48, 3))


class TestPredict:
    def test_single_forward_pass(self, predictor, image):
        before = denoiser.forward_call_count()
        predictor.predict(image, 0.5)
        assert denoiser.forward_call_count() - before == 1

    def test_output_shape_matches_input(self, predictor, image):
        pred = predictor.predict(image, 0.3)
        assert pred.prob_map.shape == image.shape[:2]

    def test_non_divisible_shape_padded_and_cropped(self, predictor):
        r = np.random.default_rng(6)
        img = r.random((45, 51, 3))
        pred = predictor.predict(img, 0.5)
        assert pred.prob_map.shape == (45, 51)

    def test_deterministic(self, predictor, image):
        a = predictor.predict(image, 0.7).prob_map
        b = predictor.predict(image, 0.7).prob_map
        assert np.array_equal(a, b)

    def test_no_rng_consumed(self, predictor, image):
        state_before = torch.get_rng_state()
        np_state = np.random.get_state()[1].copy()
        predictor.predict(image, 0.5)
        predictor.predict(image, None)
        assert torch.equal(state_before, torch.get_rng_state())
        assert np.array_equal(np_state, np.random.get_state()[1])

    def test_values_in_unit_range(self, predictor, image):
        pred = predictor.predict(image, 1.0)
        assert pred.prob_map.min() >= 0.0
        assert pred.prob_map.max() <= 1.0

    def test_granularity_out_of_range(self, predictor, image):
        with pytest.raises(ValidationError):
            predictor.predict(image, 1.5)

    def test_sentinel_granularity(self, predictor, image):
        pred = predictor.predict(image, None)
        assert pred.granularity is None


class TestSweep:
    def test_grid_m11(self, predictor, image):
        preds = predictor.sweep(image, m=11)
        gs = [p.granularity for p in preds]
        assert gs == [k / 10 for k in range(11)]
        assert gs == sorted(gs)

    def test_grid_m2(self, predictor, image):
        preds = predictor.sweep(image, m=2)
        assert [p.granularity for p in preds] == [0.0, 1.0]

    def test_forward_count_is_m(self, predictor, image):
        before = denoiser.forward_call_count()
        predictor.sweep(image, m=5)
        assert denoiser.forward_call_count() - before == 5

    def test_m_too_small(self, predictor, image):
        with pytest.raises(ValidationError):
            predictor.sweep(image, m=1)


class TestPngIO:
    def test_filenames(self):
        assert prediction_filename("img7", 0.5) == "img7_g050.png"
        assert prediction_filename("img7", 1.0) == "img7_g100.png"
        assert prediction_filename("img7", 0.0) == "img7_g000.png"
        assert prediction_filename("img7", None) == "img7_goff.png"

    def test_sixteen_bit_roundtrip(self, tmp_path, rng):
        prob = rng.random((20, 30))
        pred = EdgePrediction(prob, 0.5, "x")
        path = save_prediction_png(pred, tmp_path)
        assert path.name == "x_g050.png"
        back = load_prediction_png(path)
        assert back.shape == (20, 30)
        assert np.abs(back - prob).max() <= 0.5 / 65535.0

    def test_sixteen_bit_depth(self, tmp_path):
        pred = EdgePrediction(np.ones((4, 4)), 1.0, "full")
        path = save_prediction_png(pred, tmp_path)
        from PIL import Image

        raw = np.asarray(Image.open(path))
        assert raw.dtype == np.uint16 or raw.max() > 255
        assert raw.max() == 65535
