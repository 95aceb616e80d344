import numpy as np
import pytest
import torch

from stlayout.clustering import ClusterLayout
from stlayout.config import ConfigError, EditConfig, RegionConfig
from stlayout.diffusion.denoiser import NO_CONTROL
from stlayout.layout import LayoutError, LayoutSet, Level, RegionSpec
from stlayout.pipeline import (cross_mass, load_denoiser, make_hook, prepare_conditioning, run_edit,
                               self_leakage)
from stlayout.diffusion import make_schedule
from stlayout.synth import synth_video, two_shape_scene


@pytest.fixture(scope="module")
def video():
    return synth_video(two_shape_scene("red", "red"))


def layout_of(video):
    specs = [RegionSpec(1, ("red", "square")), RegionSpec(2, ("red", "square"))]
    return LayoutSet(specs, video["masks"], ())


def config(**kw):
    regions = kw.pop("regions", [RegionConfig(1, "red square", "green square"),
                                 RegionConfig(2, "red square", "blue square")])
    return EditConfig("green square and blue square on gray background", regions,
                      sample_steps=kw.pop("sample_steps", 20), **kw).validate()


def test_full_fidelity_path(video, tiny_checkpoint):
    cfg = config(modulate_steps=0, checkpoint=str(tiny_checkpoint))
    cfg.blend.enabled = False
    cfg.global_prompt = "red square and red square on gray background"
    cfg.regions = [RegionConfig(1, "red square", "red square"), RegionConfig(2, "red square", "red square")]
    res = run_edit(cfg.validate(), video["frames"], layout_of(video))
    assert np.array_equal(res.edited, video["frames"])


def test_background_bit_exact(video, tiny_checkpoint):
    res = run_edit(config(checkpoint=str(tiny_checkpoint)), video["frames"], layout_of(video),
                   flow=video["flow"])
    # the default blend mask is the union of the foreground over all frames
    union = video["masks"].any(axis=(0, 1))
    bg = np.broadcast_to(~union, (4, 16, 16))
    assert np.array_equal(res.edited[bg], video["frames"][bg])
    assert not np.array_equal(res.edited, video["frames"])
    assert set(res.report.edit_accuracy) == {1, 2}


def test_per_frame_blend_background(video, tiny_checkpoint):
    cfg = config(checkpoint=str(tiny_checkpoint))
    cfg.blend.mode = "per_frame"
    res = run_edit(cfg, video["frames"], layout_of(video))
    bg = ~video["masks"].any(axis=1)
    assert np.array_equal(res.edited[bg], video["frames"][bg])


def test_hook_inactive_is_plain(video, tiny_checkpoint):
    cfg = config()
    cond = prepare_conditioning(layout_of(video), {1: range(1, 3), 2: range(4, 6)}, 10)
    hook = make_hook(cond, make_schedule(sample_steps=20), cfg, {}, probe_steps=())
    assert hook(16, 100, False) is NO_CONTROL
    active = hook(0, 999, True)
    assert active.cross_modulation(0) is not None and active.self_modulation(0) is not None
    off = make_hook(cond, make_schedule(sample_steps=20), config(cross_modulation=False), {}, ())
    assert off(0, 999, True).cross_modulation(0) is None


def test_probe_records_attention(video, tiny_checkpoint):
    cfg = config(checkpoint=str(tiny_checkpoint))
    res = run_edit(cfg, video["frames"], layout_of(video), probe_steps=[0, cfg.probe])
    assert sorted(res.probes) == [0, cfg.probe]
    probe = res.probes[cfg.probe]
    assert probe.cross[0].shape == (4, 256, 10)
    assert probe.self_[1].shape == (1024, 1024)
    np.testing.assert_allclose(probe.cross[0].sum(-1), 1.0, atol=1e-5)
    masses = cross_mass(probe, res.conditioning)
    leaks = self_leakage(probe, res.conditioning)
    assert set(masses) == set(leaks) == {1, 2}
    assert all(0 <= v <= 1 for v in list(masses.values()) + list(leaks.values()))


def test_cluster_layout_source(video, tiny_checkpoint):
    labels = np.zeros((4, 256), dtype=np.int64)
    for f in range(4):
        labels[f][video["masks"][f, 0].reshape(-1)] = 1
        labels[f][video["masks"][f, 1].reshape(-1)] = 2
    clusters = ClusterLayout(labels, np.zeros((4, 3, 2)), 3)
    cfg = config(regions=[RegionConfig(1, "red square", "green square", cluster=1),
                          RegionConfig(2, "red square", "blue square", cluster=2)],
                 checkpoint=str(tiny_checkpoint))
    res = run_edit(cfg, video["frames"], clusters)
    assert np.array_equal(res.layout.masks[:, 0], video["masks"][:, 0])


def test_cluster_binding_required(video, tiny_checkpoint):
    clusters = ClusterLayout(np.zeros((4, 256), dtype=np.int64), np.zeros((4, 3, 2)), 3)
    with pytest.raises(LayoutError):
        run_edit(config(checkpoint=str(tiny_checkpoint)), video["frames"], clusters)


def test_internal_clustering(video, tiny_checkpoint):
    cfg = config(regions=[RegionConfig(1, "red square", "green square", cluster=0),
                          RegionConfig(2, "red square", "blue square", cluster=1)],
                 checkpoint=str(tiny_checkpoint))
    cfg.clustering.level_index = 10
    res = run_edit(cfg, video["frames"], None)
    assert res.layout.masks.shape == (4, 2, 16, 16)


def test_missing_region(video, tiny_checkpoint):
    lay = LayoutSet([RegionSpec(1, ("a",))], video["masks"][:, :1])
    with pytest.raises(LayoutError, match="no region 2"):
        run_edit(config(checkpoint=str(tiny_checkpoint)), video["frames"], lay)


def test_layout_resampled(video, tiny_checkpoint):
    big = np.repeat(np.repeat(video["masks"], 2, axis=2), 2, axis=3)
    lay = LayoutSet([RegionSpec(1, ("a",)), RegionSpec(2, ("b",))], big)
    res = run_edit(config(checkpoint=str(tiny_checkpoint)), video["frames"], lay)
    assert np.array_equal(res.layout.masks, video["masks"])


def test_deterministic(video, tiny_checkpoint):
    cfg = config(checkpoint=str(tiny_checkpoint))
    a = run_edit(cfg, video["frames"], layout_of(video))
    b = run_edit(cfg, video["frames"], layout_of(video))
    assert np.array_equal(a.edited, b.edited)
