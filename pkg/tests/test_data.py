import json
import struct

import numpy as np
import pytest

from hemisit.data import (SynthSpec, VOLUME_MAGIC, asymmetry_fraction, generate_synthetic, make_dataset,
                          read_manifest, read_volume, split_counts, write_volume)
from hemisit.errors import FormatError, SpecError
from hemisit.volume import Volume, flip_sagittal, split_hemispheres

SPEC = SynthSpec()


def test_volume_file_size(tmp_path):
    write_volume(tmp_path / "v", Volume(np.ones((2, 2, 2))))
    assert (tmp_path / "v").stat().st_size == 52


def test_volume_round_trip(tmp_path, rng):
    v = Volume(rng.standard_normal((3, 4, 5)) * 100)
    write_volume(tmp_path / "v", v)
    back = read_volume(tmp_path / "v")
    assert back.extents == v.extents
    assert np.array_equal(back.data, v.data.astype(np.float32).astype(np.float64))


def test_volume_layout_is_x_slowest(tmp_path):
    a = np.arange(6, dtype=float).reshape(3, 2, 1)
    write_volume(tmp_path / "v", Volume(a))
    blob = (tmp_path / "v").read_bytes()
    assert blob[:8] == VOLUME_MAGIC
    assert struct.unpack("<3I", blob[8:20]) == (3, 2, 1)
    assert np.frombuffer(blob[20:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XXXXXXXX" + b[8:], 0),
    (lambda b: b[:-4], None),
    (lambda b: b + b"\0", None),
    (lambda b: b[:8] + struct.pack("<3I", 70000, 70000, 70000) + b[20:], 8),
    (lambda b: b[:12], 12),
])
def test_volume_format_errors(tmp_path, mutate, offset):
    write_volume(tmp_path / "v", Volume(np.ones((2, 2, 2))))
    (tmp_path / "bad").write_bytes(mutate((tmp_path / "v").read_bytes()))
    with pytest.raises(FormatError) as err:
        read_volume(tmp_path / "bad")
    if offset is not None:
        assert err.value.offset == offset


def _no_lesion_seed():
    for s in range(100):
        _, m = generate_synthetic(SPEC, 0, s)
        if not m.data.any():
            return s
    raise AssertionError("no lesion-free class-0 sample in 100 seeds")


def test_class0_without_lesion_is_mirror_symmetric():
    v, _ = generate_synthetic(SPEC, 0, _no_lesion_seed())
    assert np.array_equal(v.data, v.data[::-1])
    left, right = split_hemispheres(v)
    assert np.array_equal(flip_sagittal(right).data, left.data)


def test_class0_lesions_are_bilateral():
    seen = 0
    for s in range(20):
        _, m = generate_synthetic(SPEC, 0, s)
        if m.data.any():
            seen += 1
            assert np.array_equal(m.data, m.data[::-1])
    assert 0 < seen < 20


@pytest.mark.parametrize("seed", range(20))
def test_class1_asymmetry_is_concentrated(seed):
    v, m = generate_synthetic(SPEC, 1, seed)
    frac, energy = asymmetry_fraction(v.data, m.data, dilation=2)
    assert energy > 0
    assert frac >= 0.9
    assert not np.array_equal(m.data, m.data[::-1])


def test_both_sides_get_class1_lesions():
    sides = {bool(generate_synthetic(SPEC, 1, s)[1].data[:16].any()) for s in range(20)}
    assert sides == {True, False}


@pytest.mark.parametrize("label", [0, 1])
def test_values_in_unit_interval_and_deterministic(label):
    a, ma = generate_synthetic(SPEC, label, 7)
    b, mb = generate_synthetic(SPEC, label, 7)
    assert np.array_equal(a.data, b.data) and np.array_equal(ma.data, mb.data)
    assert a.data.min() >= 0.0 and a.data.max() <= 1.0


def test_lesion_outside_hemisphere_rejected():
    with pytest.raises(SpecError):
        SynthSpec(lesion_center=(15.0, 18.0, 16.0))


def test_paper_scale_geometry():
    spec = SynthSpec.paper_scale()
    v, m = generate_synthetic(spec, 1, 0)
    assert v.extents == (121, 145, 121)
    assert m.data.any()


def test_split_counts_reference():
    assert split_counts(100, (0.7, 0.15, 0.15)) == [70, 15, 15]
    assert split_counts(10, (1, 0, 0)) == [10, 0, 0]
    for n in range(3, 60):
        counts = split_counts(n, (0.7, 0.15, 0.15))
        assert sum(counts) == n
        assert all(abs(c - f * n) < 1 for c, f in zip(counts, (0.7, 0.15, 0.15)))


def test_make_dataset_stratified(tmp_path):
    man = make_dataset(SPEC, 100, seed=3, root=tmp_path, write=False)
    for label in (0, 1):
        got = [sum(1 for r in man.records if r.label == label and r.split == s) for s in ("train", "val", "test")]
        assert got == [70, 15, 15]


def test_make_dataset_all_train(tmp_path):
    man = make_dataset(SPEC, 5, fractions=(1, 0, 0), root=tmp_path, write=False)
    assert {r.split for r in man.records} == {"train"}


def test_make_dataset_too_small(tmp_path):
    with pytest.raises(SpecError):
        make_dataset(SPEC, 2, root=tmp_path, write=False)


def test_make_dataset_deterministic_files(tmp_path):
    a = make_dataset(SPEC, 7, seed=1, root=tmp_path / "a")
    b = make_dataset(SPEC, 7, seed=1, root=tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for r in a.records:
        assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
    line = json.loads((tmp_path / "a/manifest.jsonl").read_text().splitlines()[0])
    assert set(line) == {"path", "label", "split", "lesion_mask_path"}
    back = read_manifest(tmp_path / "a/manifest.jsonl")
    assert back.records == a.records
    vols, labels = back.load_split("train")
    assert vols.shape[1:] == SPEC.extents and len(labels) == vols.shape[0]


def test_manifest_rejects_bad_records(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"path": "nope.sitvol", "label": 1, "split": "train"}) + "\n")
    with pytest.raises(SpecError):
        read_manifest(tmp_path / "m.jsonl")
    (tmp_path / "x.sitvol").write_bytes(b"")
    (tmp_path / "m.jsonl").write_text(json.dumps({"path": "x.sitvol", "label": 3, "split": "train"}) + "\n")
    with pytest.raises(SpecError):
        read_manifest(tmp_path / "m.jsonl")


def test_loader_threads_env(monkeypatch, tmp_path):
    from hemisit.data import loader_threads
    monkeypatch.setenv("SIT_THREADS", "4")
    assert loader_threads() == 4
    monkeypatch.setenv("SIT_THREADS", "junk")
    assert loader_threads() == 1
