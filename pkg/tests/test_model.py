import time

import numpy as np
import pytest
import torch

from havt_ivd.audio_frontend import compute_melspec
from havt_ivd.data_model import AudioSegment
from havt_ivd.model import HAVTDetector, ModelConfig

from gradcheck_util import detector_gradient_rows, mini_batch, mini_detector


def full_size_trace():
    rng = np.random.default_rng(0)
    audio = AudioSegment(rng.standard_normal((6, 240000)).astype(np.float32), 48000)
    mel = compute_melspec(audio).values
    model = HAVTDetector(ModelConfig()).eval()
    video = torch.rand(1, 16, 3, 224, 224)
    with torch.no_grad():
        trace = model.trace(video, torch.from_numpy(np.asarray(mel, dtype=np.float32))[None])
    return mel, model, trace


def test_full_size_shape_chain():
    t0 = time.perf_counter()
    mel, model, trace = full_size_trace()
    elapsed = time.perf_counter() - t0
    assert mel.shape == (6, 128, 469)
    pyr = trace["pyramid"]
    assert tuple(pyr.p8.shape) == (1, 32, 8, 28, 28)
    assert tuple(pyr.p16.shape) == (1, 64, 4, 14, 14)
    assert tuple(pyr.p32.shape) == (1, 128, 2, 7, 7)
    assert tuple(model.audio(torch.zeros(1, 6, 128, 469)).shape[-2:]) == (4, 15)
    assert tuple(trace["avce"].shape) == (1, 128, 7, 7)
    assert {s: tuple(o.shape) for s, o in trace["outs"].items()} == {8: (1, 8, 28, 28), 16: (1, 8, 14, 14), 32: (1, 8, 7, 7)}
    assert elapsed < 10


@pytest.mark.parametrize("fusion", ["none", "concat", "havt"])
@pytest.mark.parametrize("head", ["decoupled", "coupled"])
def test_variants_share_output_layout(fusion, head):
    model = mini_detector(head=head, fusion=fusion)
    video, mel, _ = mini_batch()
    outs = model(video.float(), None if fusion == "none" else mel.float())
    assert {s: tuple(o.shape) for s, o in outs.items()} == {8: (2, 8, 8, 8), 16: (2, 8, 4, 4), 32: (2, 8, 2, 2)}
    assert (fusion == "none") == (not hasattr(model, "audio"))


def test_video_only_model_ignores_audio():
    model = mini_detector(fusion="none").eval()
    video, mel, _ = mini_batch()
    a = model(video.float(), mel.float())
    b = model(video.float(), None)
    assert all(torch.equal(a[s], b[s]) for s in a)


def test_fused_model_reacts_to_audio():
    model = mini_detector().eval()
    video, mel, _ = mini_batch()
    a = model(video.float(), mel.float())
    b = model(video.float(), mel.float() + 1.0)
    assert any(not torch.allclose(a[s], b[s]) for s in a)


def test_scale_subset_builds_only_those_heads():
    config = ModelConfig(image_size=64, n_frames=4, n_mics=3, n_audio_frames=32, embed_dim=16,
                         visual_widths=(4, 8, 8, 16), audio_widths=(4, 8, 8, 16, 16), depth=1, n_scaq=4, scales=(32,))
    model = HAVTDetector(config)
    video, mel, _ = mini_batch()
    assert set(model(video.float(), mel.float())) == {32}
    assert set(model.heads) == {"32"}


def test_end_to_end_gradients_match_finite_differences():
    rows = detector_gradient_rows(240)
    names = {r[0] for r in rows}
    assert any(n.startswith("fusion.spca.") for n in names)
    assert any(".cls_" in n for n in names) and any(".reg_" in n for n in names)
    worst = max(rows, key=lambda r: r[-1])
    assert worst[-1] < 1e-3, worst


def test_coupled_head_gradients_match_finite_differences():
    rows = detector_gradient_rows(60, seed=1, head="coupled")
    worst = max(rows, key=lambda r: r[-1])
    assert worst[-1] < 1e-3, worst
