from __future__ import annotations

import numpy as np
import pytest

from mixedprefix.autodiff.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from mixedprefix.autodiff.graph import Graph
from mixedprefix.errors import CheckpointError
from mixedprefix.lm.model import LmModel, lm_forward


def test_float64_storage_is_exact(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4))
    path = save_checkpoint(tmp_path / "x.ckpt", {"a/w": arr, "b": np.arange(3.0)}, {"note": "hi"})
    ckpt = load_checkpoint(path)
    assert np.array_equal(ckpt.tensors["a/w"], arr)
    assert ckpt.metadata == {"note": "hi"}
    assert ckpt.namespace("a") == {"w": ckpt.tensors["a/w"]}


def test_float32_storage_loads_as_float64():
    arr = np.random.default_rng(1).normal(size=(5,))
    ckpt = decode_checkpoint(encode_checkpoint({"w": arr}, storage="float32"))
    assert ckpt.storage == "float32"
    assert ckpt.tensors["w"].dtype == np.float64
    np.testing.assert_allclose(ckpt.tensors["w"], arr, rtol=1e-6)


def test_header_records_nonlinearity():
    ckpt = decode_checkpoint(encode_checkpoint({"w": np.zeros(2)}, nonlinearity="tanh"))
    assert ckpt.nonlinearity == "tanh"


@pytest.mark.parametrize("blob", [b"NOPE" + b"\x00" * 8, b"MXP"])
def test_bad_containers_are_rejected(blob):
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob)


def test_truncated_payload_is_rejected():
    blob = encode_checkpoint({"w": np.ones(10)})
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-8])


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_backbone_round_trip_gives_identical_logits(tmp_path, backbone):
    path = backbone.save(tmp_path / "backbone.ckpt")
    twin = LmModel.from_checkpoint(path)
    ids = np.array([[2, 4, 5, 6]])
    a = lm_forward(backbone, Graph(grad_enabled=False), ids).logits.value
    b = lm_forward(twin, Graph(grad_enabled=False), ids).logits.value
    assert np.array_equal(a, b)
    assert twin.config == backbone.config
