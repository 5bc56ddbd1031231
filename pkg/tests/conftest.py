import numpy as np
import pytest
import torch

from havt_ivd.data_model import AudioSegment, GroundTruthBox, Sample, VehicleState, VideoClip


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


def make_sample(n_boxes: int = 2, size: int = 32, frames: int = 4, mics: int = 3, n_audio: int = 4000, seed: int = 0) -> Sample:
    rng = np.random.default_rng(seed)
    boxes = []
    for k in range(n_boxes):
        w, h = rng.uniform(4, size / 3, 2)
        cx = rng.uniform(w / 2, size - w / 2)
        cy = rng.uniform(h / 2, size - h / 2)
        boxes.append(GroundTruthBox(cx, cy, w, h, VehicleState(k % 3)))
    return Sample(
        clip=VideoClip(rng.uniform(0, 1, (frames, 3, size, size)), 8.0),
        audio=AudioSegment(rng.uniform(-1, 1, (mics, n_audio)), 16000),
        boxes=boxes,
        scene_meta={"seed": str(seed), "note": "fixture"},
    )


TINY_SCENE_KW = dict(image_size=32, n_frames=4, sample_rate=4000, duration=1.0, motion_speed=(1.0, 2.0), n_vehicles=(1, 2))


def tiny_run(**overrides):
    from havt_ivd.harness.config import ModelHyper, RunConfig

    base = dict(
        size_bands=(64 * 32 / 224, 128 * 32 / 224),
        batch=4,
        max_epochs=2,
        patience=5,
        model=ModelHyper(embed_dim=16, depth=1, heads=4, spca_layers=1, visual_widths=(4, 8, 8, 16), audio_widths=(4, 8, 8, 16, 16)),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from havt_ivd.synthetic_scene import SceneConfig, generate_corpus

    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(SceneConfig(seed=5, **TINY_SCENE_KW), 24, root, ratios=(0.5, 0.25, 0.25))
    return root
