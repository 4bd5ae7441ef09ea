import json
from itertools import chain

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prol.data_stream import (LabeledDataset, SeenOnceAudit, export_manifest, load_manifest, make_synthetic,
                              split_tasks, stream_chunks, task_sizes, train_test_split)
from prol.errors import ContractError, InvalidSplitError, ManifestError, SeenOnceViolation


def labelled(n_classes, per_class=2):
    labels = np.repeat(np.arange(n_classes), per_class)
    return LabeledDataset(np.zeros((len(labels), 2, 2, 3), np.float32), labels, n_classes)


def test_hundred_classes_ten_tasks():
    seq = split_tasks(labelled(100), 10, seed=0)
    assert [len(t.classes) for t in seq] == [10] * 10


def test_single_task_holds_every_class():
    seq = split_tasks(labelled(10), 1, seed=5)
    assert seq[0].classes == tuple(range(10))


def test_uneven_split_against_enumeration():
    # round-robin hand enumeration: class slots 0..9 dealt to tasks 0,1,2,3,0,1,... give 3,3,2,2
    dealt = [0] * 4
    for slot in range(10):
        dealt[slot % 4] += 1
    assert task_sizes(10, 4) == dealt == [3, 3, 2, 2]
    seq = split_tasks(labelled(10), 4, seed=2)
    assert [len(t.classes) for t in seq] == [3, 3, 2, 2]


def test_too_many_tasks_rejected():
    with pytest.raises(InvalidSplitError):
        split_tasks(labelled(3), 4, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 10_000))
def test_split_is_a_disjoint_cover(n_classes, T, seed):
    if T > n_classes:
        return
    seq = split_tasks(labelled(n_classes, 1), T, seed)
    classes = list(chain.from_iterable(t.classes for t in seq))
    assert sorted(classes) == list(range(n_classes))
    sizes = [len(t.classes) for t in seq]
    assert max(sizes) - min(sizes) <= 1
    assert [t.task_id for t in seq] == list(range(1, T + 1))


def _chunks(n, size):
    ds = LabeledDataset(np.zeros((n, 2, 2, 3), np.float32), np.zeros(n, np.int64), 1)
    task = split_tasks(ds, 1, 0)[0]
    return list(stream_chunks(ds, task, size, seed=0))


def test_exact_chunking():
    chunks = _chunks(100, 10)
    assert len(chunks) == 10 and all(len(c) == 10 for c in chunks)


def test_ceiling_chunking():
    chunks = _chunks(103, 10)
    assert len(chunks) == -(-103 // 10) == 11
    assert [len(c) for c in chunks] == [10] * 10 + [3]


def test_consumed_stream_cannot_restart():
    ds = labelled(2, 5)
    stream = stream_chunks(ds, split_tasks(ds, 1, 0)[0], 3, seed=0)
    list(stream)
    with pytest.raises(SeenOnceViolation):
        iter(stream)


def test_audit_rejects_second_stream_of_same_task():
    ds = labelled(4, 3)
    audit = SeenOnceAudit(len(ds))
    task = split_tasks(ds, 2, 0)[0]
    list(stream_chunks(ds, task, 2, 0, audit))
    with pytest.raises(SeenOnceViolation):
        stream_chunks(ds, task, 2, 1, audit)


def test_audit_counts_every_sample_once():
    ds = labelled(6, 7)
    audit = SeenOnceAudit(len(ds))
    for task in split_tasks(ds, 3, 9):
        for chunk in stream_chunks(ds, task, 4, task.task_id, audit):
            assert set(ds.labels[chunk.indices]) <= set(task.classes)
    assert audit.visited == len(ds)


def test_linear_probe_separates_two_classes():
    ds = make_synthetic(2, 50, separation=10, seed=0)
    X = np.c_[ds.images.reshape(len(ds), -1), np.ones(len(ds))]
    target = np.where(ds.labels == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(X, target, rcond=None)
    assert np.mean((X @ w > 0) == (ds.labels == 1)) >= 0.99


def test_synthetic_rejects_zero_separation():
    with pytest.raises(ContractError):
        make_synthetic(3, 4, separation=0)


def test_synthetic_is_deterministic():
    a, b = make_synthetic(4, 5, seed=11), make_synthetic(4, 5, seed=11)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_stratified_split_keeps_every_class():
    tr, te = train_test_split(make_synthetic(5, 10, seed=0), 0.2, seed=0)
    assert np.bincount(te.labels).tolist() == [2] * 5
    assert np.bincount(tr.labels).tolist() == [8] * 5


def test_manifest_round_trip(tmp_path):
    ds = make_synthetic(2, 2, image_side=4, seed=0)
    path = export_manifest(ds, tmp_path)
    back = load_manifest(path)
    assert len(back) == 4 and back.class_count == 2
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6


def test_manifest_missing_file_names_path(tmp_path):
    path = export_manifest(make_synthetic(2, 2, image_side=4), tmp_path)
    (tmp_path / "images" / "000001.png").unlink()
    with pytest.raises(ManifestError, match="000001.png"):
        load_manifest(path)


def test_manifest_label_outside_range(tmp_path):
    path = export_manifest(make_synthetic(2, 2, image_side=4), tmp_path)
    doc = json.loads(path.read_text())
    doc["class_count"] = 3
    doc["items"][0]["label"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="label 5"):
        load_manifest(path)
