import os

import numpy as np
import pytest
import torch

from petaug.checkpoint import MAGIC, ParameterStore, atomic_write_bytes
from petaug.errors import ConfigurationError, DataError
from petaug.model import Encoder


def _store():
    store = ParameterStore()
    store.add("a/weight", np.arange(6, dtype=np.float32).reshape(2, 3))
    store.add("a/bias", np.array([0.5, -1.25], dtype=np.float32), trainable=False)
    store.add("scalar", np.array(3.0, dtype=np.float32))
    return store


def test_round_trip_preserves_values_flags_and_order(tmp_path):
    store = _store()
    store.save(tmp_path / "x.ckpt")
    back = ParameterStore.load(tmp_path / "x.ckpt")
    assert list(back) == ["a/weight", "a/bias", "scalar"]
    for name in store:
        assert np.array_equal(back[name].values, store[name].values)
        assert back[name].trainable == store[name].trainable
    assert back.to_bytes() == store.to_bytes()
    assert back.trainable_count() == 7 and back.total_count() == 9


def test_bad_magic_and_truncation():
    data = _store().to_bytes()
    assert data.startswith(MAGIC)
    with pytest.raises(DataError, match="magic"):
        ParameterStore.from_bytes(b"NOTACKPT" + data[8:])
    for cut in (20, len(data) // 2, len(data) - 1):
        with pytest.raises(DataError):
            ParameterStore.from_bytes(data[:cut])


def test_duplicate_names_rejected():
    store = _store()
    with pytest.raises(ConfigurationError):
        store.add("scalar", np.zeros(1))
    with pytest.raises(ConfigurationError):
        store.merged(_store())


def test_module_round_trip(tiny_config):
    source = Encoder(tiny_config, seed=1)
    target = Encoder(tiny_config, seed=2)
    ParameterStore.from_bytes(ParameterStore.from_module(source).to_bytes()).load_into(target)
    for (name, a), (_, b) in zip(source.state_dict().items(), target.state_dict().items()):
        assert torch.equal(a, b), name


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    path = tmp_path / "out.bin"
    atomic_write_bytes(path, b"first")

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_bytes(path, b"second")
    assert path.read_bytes() == b"first"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out.bin"]
