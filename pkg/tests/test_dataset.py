import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dualskin.dataset import (
    AugmentConfig,
    LabelFlags,
    Sample,
    alternating_batches,
    augment,
    hflip,
    load_dataset,
    load_manifest,
    load_sample,
    split_by_label,
)
from dualskin.exceptions import ConfigError, InputError, ValidationError


def _write_png(path, arr, mode):
    Image.fromarray(arr, mode).save(path)


def _toy_dir(tmp_path, h=80, w=100):
    """Two-entry manifest: one skin-only sample, one body-only sample."""
    rng = np.random.default_rng(0)
    for name in ("a", "b"):
        _write_png(tmp_path / f"{name}.png", rng.integers(0, 256, (h, w, 3), dtype=np.uint8), "RGB")
    body = np.zeros((h, w), np.uint8)
    body[10:60, 20:70] = 255
    skin = np.zeros((h, w), np.uint8)
    skin[20:40, 30:50] = 255
    _write_png(tmp_path / "a_skin.png", skin, "L")
    _write_png(tmp_path / "b_body.png", body, "L")
    _write_png(tmp_path / "b_skin.png", skin, "L")
    lines = [
        {"id": "a", "image": "a.png", "skin_mask": "a_skin.png"},
        {"id": "b", "image": "b.png", "body_mask": "b_body.png"},
    ]
    (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(r) for r in lines) + "\n")
    return tmp_path / "m.jsonl"


def test_flags_follow_mask_presence(tmp_path):
    ds = load_dataset(_toy_dir(tmp_path), size=64)
    assert [s.flags.as_tuple() for s in ds] == [(1, 0), (0, 1)]
    for s in ds:
        assert (s.skin_mask is not None) == bool(s.flags.skin)
        assert (s.body_mask is not None) == bool(s.flags.body)


def test_resize_to_working_size(tmp_path):
    ds = load_dataset(_toy_dir(tmp_path), size=64)
    assert ds[0].image.shape == (64, 64, 3)
    assert ds[0].skin_mask.shape == (64, 64)
    assert set(np.unique(ds[1].body_mask)) <= {0, 1}


def test_native_size_and_normalisation(tmp_path):
    m = _toy_dir(tmp_path)
    s = load_dataset(m, size=None)[0]
    raw = np.asarray(Image.open(tmp_path / "a.png"))
    assert s.shape == (80, 100)
    np.testing.assert_array_equal(s.image, raw.astype(np.float32) / 255.0)
    assert set(np.unique(s.skin_mask)) == {0, 1}


def test_dual_labelled_entry_accepted(tmp_path):
    _toy_dir(tmp_path)
    (tmp_path / "v.jsonl").write_text(json.dumps(
        {"id": "v", "image": "b.png", "skin_mask": "b_skin.png", "body_mask": "b_body.png"}) + "\n")
    (s,) = load_dataset(tmp_path / "v.jsonl", size=32)
    assert s.flags == LabelFlags(1, 1)
    assert s.containment_violations() == 0


def test_missing_file_names_id(tmp_path):
    _toy_dir(tmp_path)
    (tmp_path / "bad.jsonl").write_text(json.dumps({"id": "ghost", "image": "a.png", "skin_mask": "nope.png"}) + "\n")
    with pytest.raises(InputError, match="ghost"):
        load_manifest(tmp_path / "bad.jsonl")


def test_manifest_errors(tmp_path):
    _toy_dir(tmp_path)
    dup = [{"id": "x", "image": "a.png", "skin_mask": "a_skin.png"}] * 2
    (tmp_path / "dup.jsonl").write_text("\n".join(json.dumps(r) for r in dup))
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "dup.jsonl")
    (tmp_path / "none.jsonl").write_text(json.dumps({"id": "x", "image": "a.png"}))
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "none.jsonl")
    with pytest.raises(InputError):
        load_manifest(tmp_path / "absent.jsonl")


def test_loader_idempotent(tmp_path):
    m = _toy_dir(tmp_path)
    a, b = load_dataset(m, 32), load_dataset(m, 32)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)


def test_label_flags_validation():
    with pytest.raises(ValidationError):
        LabelFlags(0, 0)
    with pytest.raises(ValidationError):
        LabelFlags(2, 1)


def _nested_sample(rng, h=24, w=24):
    body = np.zeros((h, w), np.uint8)
    y0, x0 = rng.integers(0, h // 2, 2)
    body[y0:y0 + h // 2, x0:x0 + w // 2] = 1
    skin = body * (rng.random((h, w)) < 0.5).astype(np.uint8)
    return Sample("s", rng.random((h, w, 3)).astype(np.float32), skin, body)


def test_hflip_involution(rng):
    s = _nested_sample(rng)
    back = hflip(hflip(s))
    np.testing.assert_array_equal(back.image, s.image)
    np.testing.assert_array_equal(back.skin_mask, s.skin_mask)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), flip=st.floats(0, 1), hi=st.floats(1.0, 1.6))
def test_augment_keeps_binarity_and_containment(seed, flip, hi):
    rng = np.random.default_rng(seed)
    s = _nested_sample(rng)
    cfg = AugmentConfig(flip_probability=flip, scale_range=(1.0, hi), crop_size=24)
    out = augment(s, cfg, rng)
    assert out.shape == (24, 24)
    assert set(np.unique(out.skin_mask)) <= {0, 1}
    assert out.containment_violations() == 0


def test_augment_deterministic(rng):
    s = _nested_sample(rng)
    cfg = AugmentConfig(crop_size=20)
    a = augment(s, cfg, np.random.default_rng(9))
    b = augment(s, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.body_mask, b.body_mask)


def test_augment_crop_too_large(rng):
    with pytest.raises(ValidationError):
        augment(_nested_sample(rng), AugmentConfig(crop_size=40, scale_range=(1.0, 1.0)), rng)


def _pool(n_skin, n_body):
    img = np.zeros((4, 4, 3), np.float32)
    m = np.ones((4, 4), np.uint8)
    return [Sample(f"s{i}", img, m, None) for i in range(n_skin)] + [
        Sample(f"b{i}", img, None, m) for i in range(n_body)
    ]


def test_alternation_first_batches():
    skin, body = split_by_label(_pool(5, 3))
    it = alternating_batches(skin, body, 4, 0)
    assert all(s.flags.skin for s in next(it))
    assert all(s.flags.body for s in next(it))


@settings(max_examples=25, deadline=None)
@given(n_skin=st.integers(1, 7), n_body=st.integers(1, 7), bs=st.integers(1, 5), n=st.integers(1, 6))
def test_alternation_counts(n_skin, n_body, bs, n):
    skin, body = split_by_label(_pool(n_skin, n_body))
    it = alternating_batches(skin, body, bs, 3)
    kinds = [next(it)[0].flags.skin for _ in range(2 * n)]
    assert kinds == [1, 0] * n


def test_alternation_deterministic_and_cycles():
    skin, body = split_by_label(_pool(3, 2))
    ids = lambda: [[s.id for s in next(it)] for it in [alternating_batches(skin, body, 2, 5)] for _ in range(8)]
    first, second = ids(), ids()
    assert first == second
    # every skin sample appears once per pass of the smaller set
    skin_ids = [i for k, b in enumerate(first) if k % 2 == 0 for i in b]
    assert sorted(skin_ids[:3]) == ["s0", "s1", "s2"]


def test_alternation_empty_set():
    with pytest.raises(ConfigError):
        next(alternating_batches([], _pool(0, 2), 2, 0))


def test_load_sample_rejects_rgb_mask(tmp_path):
    _toy_dir(tmp_path)
    _write_png(tmp_path / "rgbmask.png", np.zeros((80, 100, 3), np.uint8), "RGB")
    (tmp_path / "r.jsonl").write_text(json.dumps({"id": "r", "image": "a.png", "skin_mask": "rgbmask.png"}))
    (desc,) = load_manifest(tmp_path / "r.jsonl")
    with pytest.raises(ValidationError):
        load_sample(desc, 32)
