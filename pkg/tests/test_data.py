import hashlib

import numpy as np
import pytest

from mixseg import data
from mixseg.data import IGNORE, SOURCE, TARGET, DatasetError, Sample


@pytest.fixture(scope="module")
def small_split():
    return data.make_split(n_source=12, n_target=10, n_eval=4, n_labeled=3, seed=5)


def test_generate_deterministic():
    a = data.generate_domain(SOURCE, 5, seed=3)
    b = data.generate_domain(SOURCE, 5, seed=3)
    assert a == b
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))


def test_generate_count_positive():
    with pytest.raises(ValueError):
        data.generate_domain(SOURCE, 0, seed=0)


def test_sample_invariants():
    for s in data.generate_domain(TARGET, 20, seed=1):
        assert s.image.shape == (3, 48, 48) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.label.shape == (48, 48) and s.label.max() < data.NUM_CLASSES
        assert not (s.label == IGNORE).any()


def test_shapes_one_to_three_and_non_overlapping():
    for sid in range(50):
        shapes = data.sample_geometry(0, sid)
        assert 1 <= len(shapes) <= 3
        masks = [data.shape_mask(s, 48) for s in shapes]
        total = sum(m.astype(int) for m in masks)
        assert total.max() <= 1


def test_label_rerasterizes_exactly():
    for s in data.generate_domain(SOURCE, 10, seed=2):
        assert np.array_equal(data.rasterize(data.sample_geometry(2, s.id)), s.label)


def test_background_dominates():
    hist = data.label_histogram(data.generate_domain(SOURCE, 100, seed=0))
    assert hist[0] > hist[1:].max()
    assert (hist[1:] > 0).all()


def test_paired_domains_share_geometry_not_pixels():
    src = data.generate_domain(SOURCE, 10, seed=4)
    tgt = data.generate_domain(TARGET, 10, seed=4)
    for a, b in zip(src, tgt):
        assert np.array_equal(a.label, b.label)
        assert not np.array_equal(a.image, b.image)
    # per-channel means on background pixels differ between domains
    def bg_mean(samples):
        return np.mean([s.image[:, s.label == 0].mean(axis=1) for s in samples], axis=0)
    assert np.abs(bg_mean(src) - bg_mean(tgt)).max() > 0.05


# -- split ------------------------------------------------------------------

def test_split_partition():
    pool = data.generate_domain(TARGET, 10, seed=0)
    lab, unl, hidden = data.split_target(pool, 4, seed=0)
    ids_l, ids_u = {s.id for s in lab}, {s.id for s in unl}
    assert len(lab) == 4 and not ids_l & ids_u
    assert ids_l | ids_u == {s.id for s in pool}
    assert all(s.label is None for s in unl)
    assert set(hidden) == ids_u


def test_split_extremes_and_errors():
    pool = data.generate_domain(TARGET, 6, seed=0)
    _, unl, _ = data.split_target(pool, 5, seed=0)
    assert len(unl) == 1
    for bad in (0, 6, 7):
        with pytest.raises(ValueError):
            data.split_target(pool, bad, seed=0)


def test_split_seed_behaviour():
    pool = data.generate_domain(TARGET, 40, seed=0)
    pick = lambda seed: sorted(s.id for s in data.split_target(pool, 8, seed)[0])
    assert pick(0) == pick(0)
    assert pick(0) != pick(1)


def test_make_split_disjoint(small_split):
    sp = small_split
    ids = lambda xs: {s.id for s in xs}
    assert not ids(sp.labeled_target) & ids(sp.unlabeled_target)
    assert not ids(sp.eval_target) & (ids(sp.labeled_target) | ids(sp.unlabeled_target))
    assert len(sp.labeled_target) + len(sp.unlabeled_target) == 10
    assert sp.manifest["n_labeled"] == "3"


def test_resplit(small_split):
    r = data.resplit(small_split, 10, seed=1)
    assert len(r.labeled_target) == 10 and not r.unlabeled_target
    r2 = data.resplit(small_split, 2, seed=1)
    assert len(r2.labeled_target) == 2 and len(r2.unlabeled_target) == 8
    assert {s.id for s in r2.labeled_target + r2.unlabeled_target} == {s.id for s in small_split.target_pool()}
    stripped = data.DatasetSplit(small_split.source, small_split.labeled_target,
                                 small_split.unlabeled_target, small_split.eval_target)
    with pytest.raises(DatasetError):
        data.resplit(stripped, 2, seed=1)


# -- file formats -----------------------------------------------------------

def test_tensor_roundtrip(tmp_path):
    arr = np.random.default_rng(0).random((3, 5, 7)).astype(np.float32)
    data.write_tensor(tmp_path / "a.img", arr)
    back = data.read_tensor(tmp_path / "a.img")
    assert back.dtype == np.float32 and np.array_equal(back, arr)


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing"])
def test_tensor_corruption(tmp_path, mutate):
    p = tmp_path / "a.img"
    data.write_tensor(p, np.ones((2, 3), dtype=np.float32))
    raw = p.read_bytes()
    raw = {"magic": b"XXXX" + raw[4:], "truncate": raw[:-3], "trailing": raw + b"\0"}[mutate]
    p.write_bytes(raw)
    with pytest.raises(DatasetError, match="a.img"):
        data.read_tensor(p)


def test_pgm_bytes_match_label(tmp_path):
    lbl = np.random.default_rng(1).integers(0, 5, (6, 9)).astype(np.uint8)
    lbl[0, 0] = IGNORE
    data.write_pgm(tmp_path / "l.pgm", lbl)
    raw = (tmp_path / "l.pgm").read_bytes()
    assert raw.startswith(b"P5\n9 6\n255\n")
    assert raw[-lbl.size:] == lbl.tobytes()
    assert np.array_equal(data.read_pgm(tmp_path / "l.pgm"), lbl)


def test_ppm_roundtrip(tmp_path):
    rgb = np.random.default_rng(2).integers(0, 256, (4, 5, 3)).astype(np.uint8)
    data.write_ppm(tmp_path / "x.ppm", rgb)
    assert np.array_equal(data.read_ppm(tmp_path / "x.ppm"), rgb)


def test_dataset_roundtrip(tmp_path, small_split):
    data.save_dataset(small_split, tmp_path / "ds")
    back = data.load_dataset(tmp_path / "ds")
    for attr in ("source", "labeled_target", "unlabeled_target", "eval_target"):
        assert getattr(back, attr) == getattr(small_split, attr)
    assert back.hidden_labels == {}
    assert back.manifest == small_split.manifest
    assert not list((tmp_path / "ds" / "target_unlabeled").glob("*.pgm"))


def test_dataset_roundtrip_hidden_labels(tmp_path, small_split):
    data.save_dataset(small_split, tmp_path / "ds", with_hidden_labels=True)
    back = data.load_dataset(tmp_path / "ds")
    assert set(back.hidden_labels) == set(small_split.hidden_labels)
    assert all(np.array_equal(back.hidden_labels[k], v) for k, v in small_split.hidden_labels.items())
    assert all(s.label is None for s in back.unlabeled_target)


def test_dataset_tampered_file(tmp_path, small_split):
    data.save_dataset(small_split, tmp_path / "ds")
    victim = sorted((tmp_path / "ds" / "source").glob("*.img"))[0]
    victim.write_bytes(b"JUNK" + victim.read_bytes()[4:])
    with pytest.raises(DatasetError, match=victim.name):
        data.load_dataset(tmp_path / "ds")


def test_dataset_missing_dir(tmp_path):
    with pytest.raises(DatasetError):
        data.load_dataset(tmp_path / "nope")


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_regeneration_byte_identical(tmp_path):
    for name in ("a", "b"):
        data.save_dataset(data.make_split(6, 6, 2, 2, seed=9), tmp_path / name)
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")
