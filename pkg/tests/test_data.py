from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedinject.data import (BenchmarkSpec, ConfigError, DatasetFormatError, decode_dataset,
                            default_benchmark, encode_dataset, generate_benchmark, generate_task,
                            partition, partition_benchmark, partition_sizes)

SMALL = default_benchmark(n_train=200, n_val=100)


def test_default_benchmark_shape():
    spec = default_benchmark()
    assert len(spec.training_tasks) == 4 and len(spec.validation_tasks) == 3
    assert spec.modality_names("training") == ["image", "signal", "tabular"]
    mods = {m for t in spec.validation_tasks for m in t.encoded_modalities}
    assert mods <= set(spec.modality_names("training"))


def test_spec_round_trips_through_dict():
    spec = default_benchmark()
    assert BenchmarkSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()


def test_too_small_task_is_config_error():
    spec = default_benchmark(n_train=39)
    with pytest.raises(ConfigError):
        spec.validate()


def test_generation_is_deterministic_per_seed():
    a = generate_benchmark(SMALL, 3)
    b = generate_benchmark(SMALL, 3)
    c = generate_benchmark(SMALL, 4)
    for t in SMALL.tasks:
        assert encode_dataset(SMALL, t, a[t.id]) == encode_dataset(SMALL, t, b[t.id])
        assert encode_dataset(SMALL, t, a[t.id]) != encode_dataset(SMALL, t, c[t.id])


def test_task_samples_do_not_depend_on_task_order():
    spec = default_benchmark(n_train=100, n_val=100)
    alone = default_benchmark(n_train=100, n_val=100)
    alone.tasks = [alone.task("ecg")]
    x = generate_task(spec, spec.task("ecg"), 0)
    y = generate_task(alone, alone.task("ecg"), 0)
    assert [s.label for s in x] == [s.label for s in y]


def test_class_prior_is_respected():
    spec = default_benchmark(n_train=4000)
    for t in spec.training_tasks:
        labels = np.array([s.label for s in generate_task(spec, t, 0)])
        # binomial sd at n=4000 is 0.8 points
        assert abs(labels.mean() - t.class_prior) < 0.03, t.id


def test_labels_are_linearly_recoverable_from_the_rendered_modalities():
    """A least-squares probe on the raw inputs beats chance by a wide margin."""
    spec = default_benchmark(n_train=1500)
    for t in spec.training_tasks:
        samples = generate_task(spec, t, 1)
        x = np.stack([np.concatenate([s.modalities[m].ravel() for m in t.encoded_modalities])
                      for s in samples])
        x = np.hstack([x, np.ones((len(x), 1))])
        y = np.array([s.label for s in samples]) * 2.0 - 1.0
        tr, te = slice(0, 1000), slice(1000, None)
        w, *_ = np.linalg.lstsq(x[tr], y[tr], rcond=None)
        acc = np.mean(np.sign(x[te] @ w) == y[te])
        assert acc > 0.8, (t.id, acc)


def test_samples_carry_only_their_task_modalities():
    data = generate_benchmark(SMALL, 0)
    for t in SMALL.tasks:
        s = data[t.id][0]
        assert sorted(s.modalities) == sorted(t.encoded_modalities)
        for m in t.encoded_modalities:
            assert s.modalities[m].shape == SMALL.modalities[m].shape


# ---------------------------------------------------------------- partition


def test_partition_sizes_for_the_covid_row():
    assert partition_sizes(13_808) == (9_665, 1_380, 1_380, 1_383)


def test_partition_sizes_send_remainder_to_test():
    assert partition_sizes(38_129) == (26_690, 3_812, 3_812, 3_815)
    assert partition_sizes(40) == (28, 4, 4, 4)
    with pytest.raises(ConfigError):
        partition_sizes(39)


@settings(max_examples=200, deadline=None)
@given(st.integers(40, 50_000), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_partition_cells_are_disjoint_and_exhaustive(s, n_clients, seed):
    p = partition(s, n_clients, seed)
    cells = [p.private, p.public, p.dev, p.test]
    flat = [i for c in cells for i in c]
    assert sorted(flat) == list(range(s))
    assert tuple(len(c) for c in cells) == partition_sizes(s)
    sizes = [len(c) for c in p.clients]
    assert max(sizes) - min(sizes) <= 1


def test_partition_is_seeded():
    assert partition(500, 5, 1).test == partition(500, 5, 1).test
    assert partition(500, 5, 1).test != partition(500, 5, 2).test


def test_validation_tasks_are_test_only():
    data = partition_benchmark(SMALL, generate_benchmark(SMALL, 0), 5, 0)
    for t in SMALL.validation_tasks:
        assert len(data.test(t.id)) == t.n_samples
    assert set(data.public()) == {t.id for t in SMALL.training_tasks}
    for cid in range(5):
        assert set(data.client_shard(cid)) == {t.id for t in SMALL.training_tasks}


# ---------------------------------------------------------------- .fkds


def test_dataset_round_trip():
    t = SMALL.task("mortality")
    samples = generate_task(SMALL, t, 0)
    header, back = decode_dataset(encode_dataset(SMALL, t, samples))
    assert header["count"] == len(samples) and header["task"]["id"] == "mortality"
    for a, b in zip(samples, back):
        assert a.index == b.index and a.label == b.label
        np.testing.assert_array_equal(a.latent, b.latent)
        for m in a.modalities:
            np.testing.assert_array_equal(a.modalities[m], b.modalities[m])


def test_dataset_header_is_canonical_json():
    t = SMALL.task("ecg")
    buf = encode_dataset(SMALL, t, generate_task(SMALL, t, 0)[:3])
    assert buf[:4] == b"FKDS"
    hlen = int.from_bytes(buf[5:9], "little")
    head = buf[9:9 + hlen].decode()
    assert head.index('"count"') < head.index('"latent_dim"') < head.index('"task"')


def test_corrupt_dataset_is_rejected():
    t = SMALL.task("ecg")
    buf = encode_dataset(SMALL, t, generate_task(SMALL, t, 0)[:3])
    with pytest.raises(DatasetFormatError):
        decode_dataset(b"XXXX" + buf[4:])
    with pytest.raises(DatasetFormatError):
        decode_dataset(buf[:-10])
