import pytest
import torch

from ffedit.codec import ConvCodec
from ffedit.denoiser import DenoiserConfig, DenoiserNet
from ffedit.edm import build_schedule, make_conditioning
from ffedit.synthetic import ShapeSpec, SynthConfig, gen_synthetic

TINY = DenoiserConfig(latent_channels=4, width=8, heads=2, cond_dim=16, frame_size=16)


def tiny_model(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    net = DenoiserNet(TINY).to(dtype)
    return net.eval().requires_grad_(False)


def tiny_codec(seed=0):
    torch.manual_seed(seed)
    return ConvCodec(latent_channels=4, width=8).eval().requires_grad_(False)


def square_video(frames=6, size=16, velocity=(1.0, 0.0), start=(5.0, 8.0), seed=None):
    spec = ShapeSpec("square", 5.0, (-0.8, -0.2, 0.6), start, velocity)
    return gen_synthetic(SynthConfig(frames, size, size, (1.0, 1.0, 1.0), [spec]))


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def codec():
    return tiny_codec()


@pytest.fixture
def video():
    return square_video()


@pytest.fixture
def cond(model, codec, video):
    return make_conditioning(model, codec, video.frames[0], seed=3)


@pytest.fixture
def schedule():
    return build_schedule(5)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
