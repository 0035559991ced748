import sys
from pathlib import Path

import numpy as np
import pytest

from facepipe import kernels
from facepipe.dataset import SplitSpec, build_manifest
from facepipe.detect import load_cascade
from facepipe.imageio import write_image
from facepipe.model import build_alexnet, init_weights
from facepipe.synth import moving_face_sequence, write_identity_dataset
from facepipe.training import TrainConfig, train

FIXTURES = Path(__file__).parent / "fixtures"
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(params=kernels.available_backends())
def backend(request, monkeypatch):
    """Route the kernel wrappers through each available backend in turn."""
    monkeypatch.setattr(kernels, "_impl", kernels.get_backend(request.param))
    return request.param


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def stock_cascade():
    return load_cascade()


@pytest.fixture(scope="session")
def tiny_cascade():
    return load_cascade(FIXTURES / "tiny_cascade.xml")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("faces")
    write_identity_dataset(root, n_identities=4, per_class=20, size=64, seed=3)
    manifest = build_manifest(root, SplitSpec((0.75, 0.25, 0.0), seed=0))
    manifest.save(root / "manifest.csv")
    return root, manifest


@pytest.fixture(scope="session")
def trained_model(small_dataset, tmp_path_factory):
    """A tiny-preset model trained briefly on the small synthetic set."""
    _, manifest = small_dataset
    out = tmp_path_factory.mktemp("train")
    graph = init_weights(build_alexnet("tiny", manifest.labels), seed=0)
    train(graph, manifest, TrainConfig(epochs=8, batch_size=16, lr_milestones=(6,)), out_dir=out)
    return out / "model.frcm"


@pytest.fixture(scope="session")
def moving_sequence():
    return moving_face_sequence(10, seed=0)


@pytest.fixture(scope="session")
def frames_dir(moving_sequence, tmp_path_factory):
    frames, _ = moving_sequence
    d = tmp_path_factory.mktemp("frames")
    for i, f in enumerate(frames):
        write_image(d / f"frame_{i:06d}.ppm", f)
    return d
