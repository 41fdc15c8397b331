import json
import math

import numpy as np
import pytest

from droptop import stream as S


def cfg(**kw):
    base = dict(samples_per_class=50, test_samples_per_class=20, image_size=16)
    base.update(kw)
    return S.StreamConfig(**base)


def test_glyphs_distinct_and_seed_free():
    gs = [S.glyph(c) for c in range(10)]
    assert all(g.shape == (7, 7) for g in gs)
    assert len({g.tobytes() for g in gs}) == 10
    assert np.array_equal(S.glyph(3), S.glyph(3))


@pytest.mark.parametrize("gen", S.GENERATORS)
def test_structure_and_balance(gen):
    st = S.generate(cfg(generator=gen, num_tasks=3))
    assert len(st) == 3
    for t, task in enumerate(st):
        assert task.classes == [2 * t, 2 * t + 1]
        counts = np.bincount(task.train.labels, minlength=6)
        assert counts[2 * t] == counts[2 * t + 1] == 50
        imgs = task.train.images
        assert imgs.shape == (100, 3, 16, 16) and imgs.dtype == np.float32
        assert imgs.min() >= 0 and imgs.max() <= 1
        carries = task.train.carries_shortcut
        regions = task.train.shortcut_region
        assert (regions.reshape(len(carries), -1).any(axis=1) == carries).all()


@pytest.mark.parametrize("gen", S.GENERATORS)
def test_one_pass_batches(gen):
    task = S.generate(cfg(generator=gen)).tasks[0]
    seen = np.concatenate([b.labels for b in task.batches(32)])
    np.testing.assert_array_equal(seen, task.train.labels)
    sizes = [len(b) for b in task.batches(32)]
    assert sum(sizes) == 100 and sizes[:-1] == [32] * 3


@pytest.mark.parametrize("gen", S.GENERATORS)
def test_bitwise_deterministic(gen):
    a, b = S.generate(cfg(generator=gen)), S.generate(cfg(generator=gen))
    for ta, tb in zip(a, b):
        assert ta.train.images.tobytes() == tb.train.images.tobytes()
        for name in ta.tests:
            assert ta.tests[name].images.tobytes() == tb.tests[name].images.tobytes()
    c = S.generate(cfg(generator=gen, seed=1))
    assert a.tasks[0].train.images.tobytes() != c.tasks[0].train.images.tobytes()


def test_full_bias_colours_every_image():
    task = S.generate(cfg(bias_ratio=1.0, noise_std=0.0)).tasks[0]
    for img, y in zip(task.train.images, task.train.labels):
        assert S.dominant_hue(img) == y


def test_recycled_cues():
    st = S.generate(cfg(bias_ratio=1.0, noise_std=0.0, num_cues=2))
    t1 = st.tasks[1].train
    hues = [S.dominant_hue(img) for img in t1.images]
    np.testing.assert_array_equal(hues, t1.labels % 2)


def test_carries_frequency_within_three_sigma():
    c = cfg(samples_per_class=10_000, num_tasks=1, classes_per_task=1, bias_ratio=0.9, image_size=8)
    carries = S.generate(c).tasks[0].train.carries_shortcut
    n = len(carries)
    assert abs(carries.sum() - 0.9 * n) < 3 * math.sqrt(n * 0.9 * 0.1)


def test_unbiased_split_hue_independent_of_label():
    c = cfg(test_samples_per_class=5000, num_tasks=1, image_size=8, noise_std=0.0)
    test = S.generate(c).tasks[0].tests["unbiased"]
    hue = [S.dominant_hue(img) for img in test.images]
    assert S.mutual_information(hue, test.labels) < 0.02


def test_patch_zero_bias_background_independent():
    c = cfg(generator="patch_background", samples_per_class=5000, num_tasks=1, image_size=16, bias_ratio=0.0)
    train = S.generate(c).tasks[0].train
    assert S.mutual_information(train.cue, train.labels) < 0.02


def test_patch_variants_zero_the_other_part():
    c = cfg(generator="patch_background", noise_std=0.0)
    labels = np.array([0, 1] * 20)
    full = S._render_patch(c, labels, 1.0, np.random.default_rng(4), "full")
    fg_only = S._render_patch(c, labels, 1.0, np.random.default_rng(4), "only_fg")
    bg_only = S._render_patch(c, labels, 1.0, np.random.default_rng(4), "only_bg")
    glyph = full.images.min(axis=1) == 1.0
    assert glyph.any()
    assert (fg_only.images.transpose(1, 0, 2, 3)[:, ~glyph] == 0).all()
    assert (fg_only.images.transpose(1, 0, 2, 3)[:, glyph] == 1).all()
    assert (bg_only.images.transpose(1, 0, 2, 3)[:, glyph] == 0).all()
    assert not fg_only.carries_shortcut.any() and not fg_only.shortcut_region.any()
    assert set(S.generate(c).tasks[0].tests) == {"biased", "unbiased", "only_fg", "only_bg"}


def test_patch_cue_region_is_outside_glyph():
    task = S.generate(cfg(generator="patch_background", image_size=32, bias_ratio=1.0, noise_std=0.0)).tasks[0]
    imgs, regions = task.train.images, task.train.shortcut_region
    white = imgs.min(axis=1) == 1.0
    assert not (white & regions).any()


def test_mutual_information_oracle():
    x = np.array([0, 0, 1, 1])
    assert S.mutual_information(x, x) == pytest.approx(1.0)
    assert S.mutual_information(x, [0, 1, 0, 1]) == pytest.approx(0.0)


@pytest.mark.parametrize("kw", [dict(generator="x"), dict(bias_ratio=1.5), dict(num_tasks=0),
                                dict(classes_per_task=6), dict(num_cues=11), dict(image_size=4)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        S.generate(cfg(**kw))


def test_novel_images_differ_from_stream_classes():
    c = cfg()
    imgs = S.novel_class_images(c, 10, seed=0)
    assert imgs.shape == (10, 3, 16, 16)


def test_dump_roundtrip(tmp_path):
    st = S.generate(cfg(generator="patch_background"))
    S.dump_stream(st, tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    rows = (tmp_path / "manifest.csv").read_text().splitlines()
    assert rows[0] == "index,label,task,carries_shortcut,split,file,row"
    train = np.fromfile(tmp_path / "task0_train.f32", dtype="<f4").reshape(st.tasks[0].train.images.shape)
    np.testing.assert_array_equal(train, st.tasks[0].train.images)
    assert meta["config"]["generator"] == "patch_background"
    assert len(rows) - 1 == sum(len(s) for t in st for s in [t.train] + list(t.tests.values()))
