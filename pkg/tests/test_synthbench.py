import json

import numpy as np
import pytest

from dfnlab.fdmp import read_fdmp
from dfnlab.model import Backbone
from dfnlab.synthbench import (DOMAINS, NEUTRAL, SHAPES, DomainSpec, SamplePool, apply_style, domain_component,
                               episode_batch, export, get_domain, miou, paired_batches, render_geometry,
                               render_sample, sample_episode)


def test_miou_grid_oracle():
    # 4x4: prediction covers the left half, truth the top-left 2x2 block
    pred = np.zeros((4, 4))
    pred[:, :2] = 1
    true = np.zeros((4, 4))
    true[:2, :2] = 1
    # foreground 4/8, background 8/12 -> mean 7/12
    assert miou(pred, true) == pytest.approx(7 / 12)


def test_miou_empty_union_scores_one():
    assert miou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_rendering_is_seeded():
    a = render_sample(get_domain("source"), "disk", 11)
    b = render_sample(get_domain("source"), "disk", 11)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], render_sample(get_domain("source"), "disk", 12)[0])


@pytest.mark.parametrize("shape", SHAPES)
def test_masks_binary_and_sized(shape):
    _, mask = render_geometry(shape, 3)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert NEUTRAL.pixel_range[0] <= mask.sum() <= NEUTRAL.pixel_range[1]


def test_style_decomposes_exactly():
    spec = get_domain("target-b")
    spec = DomainSpec(**{**spec.__dict__, "noise_std": 0.0, "foreground_tint": (0.2, 0.0, -0.1)})
    base, mask = render_geometry("cross", 5)
    assert np.allclose(apply_style(spec, base, 0, mask), base + domain_component(spec, base, mask))


def test_domains_have_disjoint_labels():
    src = set(get_domain("source").classes)
    for t in ("target-a", "target-b", "target-c"):
        assert not src & set(get_domain(t).classes)
    with pytest.raises(ValueError):
        get_domain("target-z")


def test_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec("bad", ("disk",), channel_scale=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        DomainSpec("bad", ("hexagon",))
    with pytest.raises(ValueError):
        render_sample(get_domain("source"), "cross", 0)


def test_episode_shapes_and_shots():
    e = sample_episode(get_domain("target-a"), 5, 0)
    assert e.support_images.shape == (5, 3, 32, 32) and e.shots == 5
    assert len(e.support) == 5
    with pytest.raises(ValueError):
        sample_episode(get_domain("target-a"), 3, 0)
    b = episode_batch(get_domain("target-a"), 4, 1, 0)
    assert len(b) == 4 and b.support_masks.shape == (4, 1, 32, 32)


def test_paired_batches_share_geometry():
    src, tgt = paired_batches([get_domain("source"), get_domain("target-c")], 6, 1, 0)
    assert np.array_equal(src.query_masks, tgt.query_masks)
    assert not np.allclose(src.query_images, tgt.query_images)


def test_pool_features_follow_the_backbone():
    pool = SamplePool(get_domain("source"), 4, 0)
    rng = np.random.default_rng(0)
    assert pool.episodes(2, 1, rng).features is None
    bb = Backbone.random(0)
    batch = pool.attach(bb).episodes(2, 1, rng)
    assert batch.features[0] == bb.checksum()
    assert batch.features[1][0][0].shape == (2, 1, 8, 16, 16)
    sub = batch.subset([1])
    assert sub.features[1][2][1].shape == (1, 32, 4, 4)


@pytest.mark.slow
@pytest.mark.parametrize("target", ["target-a", "target-b", "target-c"])
def test_domains_are_linearly_separable(target):
    # a ridge probe on pooled deepest backbone features tells each target from the source
    from dfnlab.harness import get_backbone
    bb = get_backbone(0)

    def feats(name, seed):
        deep = bb.tap_arrays(episode_batch(get_domain(name), 60, 1, seed).query_images)[-1]
        return np.hstack([deep.mean(axis=(2, 3)), np.ones((60, 1))])

    x = np.vstack([feats("source", 0), feats(target, 0)])
    y = np.r_[np.ones(60), -np.ones(60)]
    w = np.linalg.solve(x.T @ x + 1e-3 * np.eye(x.shape[1]), x.T @ y)
    acc = np.mean(np.r_[feats("source", 1) @ w > 0, feats(target, 1) @ w < 0])
    assert acc > 0.9


def test_export_writes_manifest(tmp_path):
    path = export(get_domain("target-a"), 3, tmp_path, seed=2)
    manifest = json.loads(path.read_text())
    assert len(manifest["items"]) == 3
    img = read_fdmp(tmp_path / manifest["items"][0]["image"])
    mask = read_fdmp(tmp_path / manifest["items"][0]["mask"])
    assert img.shape == (3, 32, 32) and mask.shape == (32, 32)
    assert manifest["domain"]["domain_id"] == "target-a"
    assert set(DOMAINS) >= {"source", "target-a", "target-b", "target-c"}


def test_inverted_prediction_scores_zero():
    t = np.zeros((8, 8))
    t[2:5, 1:6] = 1
    assert miou(1 - t, t) == 0.0


def test_restyling_keeps_the_mask():
    base, mask = render_geometry("cross", 11)
    for spec in DOMAINS.values():
        img = apply_style(spec, base, 11, mask)
        assert img.shape == base.shape and np.isfinite(img).all()
    assert np.array_equal(render_geometry("cross", 11)[1], mask)


def test_support_and_query_share_a_class():
    for name in DOMAINS:
        e = sample_episode(get_domain(name), 5, 7)
        assert e.class_id in get_domain(name).classes
        assert e.support_masks.any(axis=(1, 2)).all() and e.query_mask.any()
