import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmrl import models
from dmrl.datasets import (
    DomainDataset,
    SynthSpec,
    cycle_batches,
    generate_synthetic,
    load_any,
    load_csv_digits,
    load_idx,
    make_batches,
    upsample_nearest,
    write_idx,
)
from dmrl.errors import ConfigurationError, ConsistencyError, FormatError
from dmrl.objectives import HyperParams
from dmrl.trainer import RunData, accuracy, train


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


# --- synthetic ----------------------------------------------------------------


def test_synthetic_counts_and_labels():
    src, tgt = generate_synthetic(SynthSpec(num_classes=3, per_class=100))
    assert len(src) == 300 and len(tgt) == 300
    assert src.labeled and not tgt.labeled
    assert np.bincount(src.labels).tolist() == [100, 100, 100]
    s_eval, t_eval = generate_synthetic(SynthSpec(), "eval")
    assert s_eval.labeled and t_eval.labeled
    assert t_eval.domain_tag == "target" and t_eval.split == "eval"


def test_synthetic_is_deterministic():
    a = generate_synthetic(SynthSpec(seed=3))
    b = generate_synthetic(SynthSpec(seed=3))
    assert a[0].images.tobytes() == b[0].images.tobytes()
    assert a[1].images.tobytes() == b[1].images.tobytes()
    c = generate_synthetic(SynthSpec(seed=4))
    assert c[0].images.tobytes() != a[0].images.tobytes()


def test_class_means_match_generator():
    spec = SynthSpec(per_class=10_000, sigma=0.7, rotation=math.radians(30), translation=(1.0, -2.0))
    _, t_eval = generate_synthetic(spec, "eval")
    src, _ = generate_synthetic(spec)
    bound = 3 * spec.sigma / math.sqrt(spec.per_class)
    for ds, domain in ((src, "source"), (t_eval, "target")):
        means = spec.class_means(domain)
        for k in range(spec.num_classes):
            np.testing.assert_array_less(np.abs(ds.images[ds.labels == k].mean(axis=0) - means[k]), bound)


def test_target_is_rotated_source_process():
    spec = SynthSpec(rotation=math.radians(50))
    src, tgt = spec.class_means("source"), spec.class_means("target")
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    np.testing.assert_allclose(src @ np.array([[c, s], [-s, c]]), tgt, atol=1e-12)


def test_no_shift_keeps_source_accuracy():
    arch = models.Architecture(hidden=(16,), feature_dim=8, disc_hidden=8)
    gaps = []
    for seed in range(5):
        spec = SynthSpec(rotation=0.0, seed=seed)
        s, t = generate_synthetic(spec)
        se, te = generate_synthetic(spec, "eval")
        params, _ = train(arch, HyperParams(variant="source_only", epochs=10), RunData(s, t, se, te), seed=seed)
        gaps.append(accuracy(params, te) - accuracy(params, se))
    assert abs(float(np.median(gaps))) <= 0.03


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(sigma=0.0), dict(per_class=0)])
def test_invalid_spec(kw):
    with pytest.raises(ConfigurationError):
        generate_synthetic(SynthSpec(**kw))


# --- IDX ------------------------------------------------------------------------


def test_idx_scaling_and_shape(tmp_path):
    pixels = [0, 255, 128, 1, 2, 3, 4, 5] + list(range(8))
    (tmp_path / "img").write_bytes(idx_bytes(0x803, (2, 2, 4), pixels))
    (tmp_path / "lab").write_bytes(idx_bytes(0x801, (2,), [7, 3]))
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.images.shape == (2, 1, 2, 4)
    assert ds.images[0, 0, 0, 1] == 1.0
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.labels.tolist() == [7, 3]


def test_idx_bad_magic_names_bytes(tmp_path):
    (tmp_path / "img").write_bytes(idx_bytes(0x12345678, (1,), [0]))
    with pytest.raises(FormatError, match="12345678"):
        load_idx(tmp_path / "img")


def test_idx_truncated(tmp_path):
    (tmp_path / "img").write_bytes(idx_bytes(0x803, (3, 4, 4), [0] * 40))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img")
    (tmp_path / "short").write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "short")


def test_idx_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(idx_bytes(0x803, (2, 1, 1), [1, 2]))
    (tmp_path / "lab").write_bytes(idx_bytes(0x801, (3,), [0, 1, 2]))
    with pytest.raises(ConsistencyError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_label_magic_checked(tmp_path):
    (tmp_path / "img").write_bytes(idx_bytes(0x803, (1, 1, 1), [1]))
    with pytest.raises(FormatError, match="00000803"):
        load_idx(tmp_path / "img", tmp_path / "img")


def test_idx_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(5, 6, 7), dtype=np.uint8)
    labels = rng.integers(0, 10, 5)
    write_idx(tmp_path / "i", raw, tmp_path / "l", labels)
    assert (tmp_path / "i").read_bytes()[:4] == b"\x00\x00\x08\x03"
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(ds.images[:, 0], raw / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16))
def test_idx_round_trip_float_vectors(tmp_path_factory, seed):
    tmp = tmp_path_factory.mktemp("idx")
    src, _ = generate_synthetic(SynthSpec(per_class=7, seed=seed))
    write_idx(tmp / "i", src.images, tmp / "l", src.labels)
    back = load_idx(tmp / "i", tmp / "l")
    assert back.images.tobytes() == src.images.tobytes()
    np.testing.assert_array_equal(back.labels, src.labels)


# --- CSV ------------------------------------------------------------------------


def test_csv_single_black_digit(tmp_path):
    (tmp_path / "d.csv").write_text("7," + ",".join(["0"] * 256) + "\n")
    ds = load_csv_digits(tmp_path / "d.csv")
    assert ds.images.shape == (1, 1, 28, 28)
    assert not ds.images.any()
    assert ds.labels.tolist() == [7]


def test_csv_ragged_rows(tmp_path):
    rows = ["1," + ",".join(["0"] * 16), "2," + ",".join(["0"] * 16), "3," + ",".join(["0"] * 15)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    with pytest.raises(FormatError, match=":3:"):
        load_csv_digits(tmp_path / "d.csv")


def test_csv_scaling_autodetect(tmp_path):
    (tmp_path / "unit.csv").write_text("0," + ",".join(["0.5"] * 16) + "\n")
    assert load_csv_digits(tmp_path / "unit.csv").images.max() == 0.5
    (tmp_path / "byte.csv").write_text("0," + ",".join(["255"] * 16) + "\n")
    assert load_csv_digits(tmp_path / "byte.csv").images.max() == 1.0
    assert load_any(tmp_path / "byte.csv").images.shape == (1, 1, 4, 4)


def test_upsample_nearest_blocks():
    img = np.arange(4.0).reshape(1, 1, 2, 2)
    up = upsample_nearest(img, 4)
    np.testing.assert_array_equal(up[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    assert upsample_nearest(np.zeros((1, 1, 16, 16)), 28).shape == (1, 1, 28, 28)


# --- batching -----------------------------------------------------------------------


def tiny(n=10):
    return DomainDataset(np.arange(n, dtype=float)[:, None], np.arange(n) % 3)


def test_batches_drop_tail():
    ds = tiny()
    batches = list(make_batches(ds, 3, seed=0))
    assert len(batches) == 3
    seen = np.concatenate([b.index for b in batches])
    assert len(set(seen.tolist())) == 9
    np.testing.assert_array_equal(np.concatenate([b.x[:, 0] for b in batches]), seen)


def test_epochs_reshuffle_but_keep_multiset():
    ds = tiny(12)
    e0 = np.concatenate([b.index for b in make_batches(ds, 4, seed=1, epoch=0)])
    e1 = np.concatenate([b.index for b in make_batches(ds, 4, seed=1, epoch=1)])
    assert not np.array_equal(e0, e1)
    assert sorted(e0.tolist()) == sorted(e1.tolist())
    again = np.concatenate([b.index for b in make_batches(ds, 4, seed=1, epoch=0)])
    np.testing.assert_array_equal(e0, again)


def test_batch_size_too_large():
    with pytest.raises(ConfigurationError):
        list(make_batches(tiny(5), 6, seed=0))


def test_cycle_batches_crosses_epochs():
    stream = cycle_batches(tiny(6), 4, seed=0)
    first = [next(stream).index for _ in range(3)]
    assert all(len(b) == 4 for b in first)
