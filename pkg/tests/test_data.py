import struct

import numpy as np
import pytest

from ttglab import data


# IDX ---------------------------------------------------------------------

def test_parse_idx_images_hand_built():
    payload = bytes(range(256)) * 6 + bytes(32)  # 2*28*28 = 1568 bytes
    raw = struct.pack(">IIII", 0x00000803, 2, 28, 28) + payload
    x = data.parse_idx(raw)
    assert x.shape == (2, 784)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert x[0, 1] == 1.0 / 255.0


def test_parse_idx_labels_hand_built():
    raw = struct.pack(">II", 0x00000801, 3) + bytes([0, 5, 9])
    y = data.parse_idx(raw)
    assert y.dtype == np.int64
    assert np.array_equal(y, [0, 5, 9])


def test_parse_idx_wrong_magic():
    raw = struct.pack(">II", 0x00000802, 3) + bytes(3)
    with pytest.raises(data.DataError, match="unexpected magic"):
        data.parse_idx(raw)


def test_parse_idx_truncated_payload_reports_offset():
    raw = struct.pack(">IIII", 0x00000803, 2, 28, 28) + bytes(100)
    with pytest.raises(data.DataError, match="byte offset"):
        data.parse_idx(raw)


def test_idx_roundtrip_byte_identical():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 6, 6), dtype=np.uint8)
    raw = struct.pack(">IIII", 0x00000803, 5, 6, 6) + imgs.tobytes()
    parsed = data.parse_idx(raw)
    assert data.serialize_idx_images(parsed, 6, 6) == raw

    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    raw = struct.pack(">II", 0x00000801, 7) + labels.tobytes()
    assert data.serialize_idx_labels(data.parse_idx(raw)) == raw


# rotation ------------------------------------------------------------------

def test_rotate_zero_is_bit_identical():
    rng = np.random.default_rng(1)
    img = rng.random((9, 9))
    assert np.array_equal(data.rotate_image(img, 0.0), img)


def test_rotate_full_turn_is_identity_within_tolerance():
    rng = np.random.default_rng(2)
    img = rng.random((9, 9))
    assert np.max(np.abs(data.rotate_image(img, 360.0) - img)) < 1e-9


def test_rotate_90_moves_single_pixel_to_rotated_coordinate():
    img = np.zeros((3, 3))
    img[0, 1] = 1.0
    out = data.rotate_image(img, 90.0)
    # (row 0, col 1) sits one unit above center; a counterclockwise quarter
    # turn carries it one unit left of center, i.e. (row 1, col 0).
    expect = np.zeros((3, 3))
    expect[1, 0] = 1.0
    assert np.allclose(out, expect, atol=1e-12)


def test_rotation_preserves_mass_of_centered_blob():
    rows = cols = 21
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    blob = np.exp(-(((rr - 10) ** 2 + (cc - 10) ** 2) / 8.0))
    for angle in (13.0, 45.0, 77.0, 120.0):
        rotated = data.rotate_image(blob, angle)
        assert abs(rotated.sum() - blob.sum()) / blob.sum() < 0.02


# domain builders -------------------------------------------------------------

def base_set(n=10, side=5, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.random((n, side * side))
    y = rng.integers(0, 3, size=n)
    return data.LabeledSet(x, y, domain_id=0, angle_deg=0.0)


def test_build_rotated_domains_defaults():
    sources, targets = data.build_rotated_domains(
        base_set(), data.DEFAULT_SOURCE_ANGLES, data.DEFAULT_TARGET_ANGLES)
    assert len(sources) == 5 and len(targets) == 2
    assert [d.angle_deg for d in sources] == [15, 30, 45, 60, 75]
    assert [d.angle_deg for d in targets] == [0, 90]
    assert all(len(d) == 10 for d in sources + targets)
    ids = [d.domain_id for d in sources + targets]
    assert len(set(ids)) == 7


def test_build_rotated_domains_rejects_overlap():
    with pytest.raises(data.DataError):
        data.build_rotated_domains(base_set(), [0.0], [0.0])


def test_blob_domains_geometry():
    domains = data.build_blob_domains(2, angles=[90.0], n_per_class=4,
                                      noise_sigma=0.0, seed=0)
    d = domains[0]
    # class means (1,0) and (-1,0) rotated by 90 degrees -> (0,1), (0,-1)
    assert np.allclose(d.x[d.y == 0], [0.0, 1.0], atol=1e-12)
    assert np.allclose(d.x[d.y == 1], [0.0, -1.0], atol=1e-12)


def test_blob_domains_deterministic():
    a = data.build_blob_domains(3, [0, 30], 5, 0.2, seed=11)
    b = data.build_blob_domains(3, [0, 30], 5, 0.2, seed=11)
    for da, db in zip(a, b):
        assert np.array_equal(da.x, db.x) and np.array_equal(da.y, db.y)


def test_blob_domains_require_two_classes():
    with pytest.raises(data.DataError):
        data.build_blob_domains(1, [0], 5, 0.1, seed=0)


# splits and samplers -----------------------------------------------------------

def blob_sources(n_domains=4):
    return data.build_blob_domains(3, angles=np.arange(n_domains) * 20.0,
                                   n_per_class=6, noise_sigma=0.1, seed=5)


def test_leave_one_out_structure():
    domains = blob_sources(4)
    splits = data.split_leave_one_out(domains)
    assert len(splits) == 4
    for sources, target in splits:
        assert len(sources) == 3
        assert target.domain_id not in {s.domain_id for s in sources}

    two = data.split_leave_one_out(blob_sources(2))
    assert len(two) == 2 and all(len(s) == 1 for s, _ in two)

    with pytest.raises(data.DataError):
        data.split_leave_one_out(blob_sources(2)[:1])


def test_sample_episode_frequencies():
    domains = blob_sources(3)
    rng = np.random.default_rng(7)
    hits = np.zeros(3)
    for _ in range(3000):
        ep = data.sample_episode(domains, rng)
        hits[ep.meta_target.domain_id] += 1
    assert np.all(np.abs(hits / 3000 - 1 / 3) < 0.03)


def test_sample_episode_two_domains_and_reproducibility():
    domains = blob_sources(2)
    ep = data.sample_episode(domains, np.random.default_rng(0))
    assert len(ep.meta_sources) == 1

    picks_a = [data.sample_episode(domains, np.random.default_rng(3)).meta_target.domain_id
               for _ in range(1)]
    picks_b = [data.sample_episode(domains, np.random.default_rng(3)).meta_target.domain_id
               for _ in range(1)]
    assert picks_a == picks_b

    with pytest.raises(data.DataError):
        data.sample_episode(domains[:1], np.random.default_rng(0))


def test_stream_batch_counts():
    target = data.LabeledSet(np.zeros((200, 2)), np.zeros(200, dtype=int), 0, 0.0)
    assert len(data.stream_batches(target, 20, seed=0)) == 10

    target = data.LabeledSet(np.zeros((201, 2)), np.zeros(201, dtype=int), 0, 0.0)
    stream = data.stream_batches(target, 20, seed=0)
    sizes = [len(yb) for _, yb in stream]
    assert len(sizes) == 11 and sizes[-1] == 1


def test_stream_is_a_partition_and_deterministic():
    rng = np.random.default_rng(9)
    target = data.LabeledSet(rng.random((37, 2)), np.arange(37), 0, 0.0)
    stream = data.stream_batches(target, 5, seed=4)
    seen = np.concatenate([yb for _, yb in stream])
    assert sorted(seen.tolist()) == list(range(37))

    again = data.stream_batches(target, 5, seed=4)
    assert np.array_equal(stream.order, again.order)


def test_draw_batch_covers_union_deterministically():
    domains = blob_sources(2)
    x1, y1 = data.draw_batch(domains, 16, np.random.default_rng(2))
    x2, y2 = data.draw_batch(domains, 16, np.random.default_rng(2))
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    assert x1.shape == (16, 2)
