import numpy as np
import pytest

from sparnet import data
from sparnet.rng import make_stream

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str):
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


TINY = data.DataConfig(verbs=("left", "right"), nouns=("circle", "square"), train_per_class=3, test_per_class=2,
                       length=12, n_frames=3, map_size=4)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Four-class dataset of 12-frame clips with motion GT, shared by the whole session."""
    root = tmp_path_factory.mktemp("tiny") / "ds"
    data.gen_dataset(TINY, 5, root)
    data.gen_motion_maps(root, n_frames=TINY.n_frames, map_size=4)
    return root


@pytest.fixture
def rng():
    return make_stream(1234, "tests")


def textured(rng, h, w, sigma=1.0):
    from scipy import ndimage
    return ndimage.gaussian_filter(rng.random((h, w)), sigma).astype(np.float32)


def tiny_model_config(ms_on=True, cam_on=False, multitask=False):
    """8x8 input, N=2, two classes, float64: small enough for exhaustive finite differences."""
    from sparnet.models import BackboneConfig, ModelConfig, MSHeadConfig
    return ModelConfig(backbone=BackboneConfig(input_size=8, stage_channels=(2, 3, 4, 4)), hidden=3,
                       num_classes=2, num_verbs=2, num_nouns=2, multitask=multitask,
                       ms=MSHeadConfig(tap="T3", reduce_channels=2), ms_on=ms_on, cam_on=cam_on,
                       dtype="float64")


def model_grad_errors(model, frames, labels, maps, ms_weight=1.0, eps=1e-6):
    """Per parameter: max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) of loss_combined."""
    from sparnet import train
    from sparnet.tensor import Tensor, backward, no_grad

    def loss():
        out = model(Tensor(frames))
        lc = train.loss_classification(out.class_logits, labels)
        lm = train.loss_ms(out.motion_probs, maps) if model.config.ms_on else None
        return train.loss_combined(lc, lm, ms_weight)

    model.zero_grad()
    backward(loss())
    model.fill_missing_grads()
    errors = {}
    with no_grad():
        for name, p in model.params.items():
            flat = p.data.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss().item()
                flat[i] = orig - eps
                fm = loss().item()
                flat[i] = orig
                num[i] = (fp - fm) / (2 * eps)
            ana = p.grad.reshape(-1)
            errors[name] = float(np.max(np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)))
    return errors


def tiny_batch(rng, b=2, n=2, s=2):
    frames = rng.random((b, n, 3, 8, 8))
    maps = rng.random((b, n, s * s))
    maps /= maps.sum(axis=-1, keepdims=True)
    return frames, rng.integers(0, 2, b), maps
