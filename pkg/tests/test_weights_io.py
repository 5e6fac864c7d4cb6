import struct

import numpy as np
import pytest

from cnnf import model as Mo
from cnnf import weights_io as W
from cnnf.errors import (
    BadMagicError,
    DuplicateNameError,
    FormatError,
    PrecisionMismatchError,
    RecordSizeError,
    TruncationError,
    VersionError,
    WeightImportError,
)
from cnnf.tensor import Rng


def randn32(shape, seed):
    return Rng(seed).normals(int(np.prod(shape))).reshape(shape).astype(np.float32)


def test_roundtrip_single_tensor_bitwise():
    arr = randn32((11, 11, 3, 64), seed=1)
    ckpt = W.Checkpoint(tensors={"conv1.weights": arr})
    back = W.load_bytes(W.save_bytes(ckpt))
    assert back.tensors["conv1.weights"].tobytes() == arr.tobytes()
    assert back.tensors["conv1.weights"].shape == arr.shape


def test_roundtrip_f64_and_metadata():
    arr = Rng(2).normals(30).reshape(2, 15)
    ckpt = W.Checkpoint(tensors={"x": arr}, structure={"layers": []},
                        metadata={"epoch": 3, "lr": 1e-3, "seed": 7})
    back = W.load_bytes(W.save_bytes(ckpt))
    assert back.tensors["x"].dtype == np.float64
    assert back.tensors["x"].tobytes() == arr.tobytes()
    assert back.structure == {"layers": []}
    assert back.metadata == {"epoch": 3, "lr": 1e-3, "seed": 7}


def test_save_is_byte_stable():
    arr = randn32((3, 4), seed=3)
    ckpt = W.Checkpoint(tensors={"a": arr}, metadata={"seed": 1})
    assert W.save_bytes(ckpt) == W.save_bytes(ckpt)


def test_known_byte_layout():
    # one f32 record "ab" with dims (1, 2) and payload [1.0, 2.0]
    arr = np.array([[1.0, 2.0]], dtype=np.float32)
    data = W.save_bytes(W.Checkpoint(tensors={"ab": arr}))
    expected = (b"CNNF" + struct.pack("<II", 1, 1)
                + struct.pack("<I", 2) + b"ab"
                + struct.pack("<BB", 1, 2) + struct.pack("<II", 1, 2)
                + struct.pack("<ff", 1.0, 2.0))
    assert data == expected


def test_bad_magic():
    with pytest.raises(BadMagicError):
        W.load_bytes(b"NOPE" + b"\x00" * 8)


def test_future_version_rejected():
    data = b"CNNF" + struct.pack("<II", 2, 0)
    with pytest.raises(VersionError):
        W.load_bytes(data)


def test_truncated_file():
    data = W.save_bytes(W.Checkpoint(tensors={"a": randn32((4, 4), 5)}))
    with pytest.raises(TruncationError):
        W.load_bytes(data[:10])
    with pytest.raises((TruncationError, RecordSizeError)):
        W.load_bytes(data[:-3])


def test_record_dims_byte_mismatch():
    # claim dims (2, 2) but supply only 4 payload bytes
    data = (b"CNNF" + struct.pack("<II", 1, 1)
            + struct.pack("<I", 1) + b"x"
            + struct.pack("<BB", 1, 2) + struct.pack("<II", 2, 2)
            + struct.pack("<f", 1.0))
    with pytest.raises(RecordSizeError):
        W.load_bytes(data)


def test_duplicate_names_rejected():
    rec = (struct.pack("<I", 1) + b"x" + struct.pack("<BB", 1, 1)
           + struct.pack("<I", 1) + struct.pack("<f", 1.0))
    data = b"CNNF" + struct.pack("<II", 1, 2) + rec + rec
    with pytest.raises(DuplicateNameError):
        W.load_bytes(data)


def test_trailing_bytes_rejected():
    data = W.save_bytes(W.Checkpoint(tensors={"a": randn32((2, 2), 6)}))
    with pytest.raises(FormatError):
        W.load_bytes(data + b"\x00")


def test_unknown_dtype_code():
    data = (b"CNNF" + struct.pack("<II", 1, 1)
            + struct.pack("<I", 1) + b"x"
            + struct.pack("<BB", 9, 1) + struct.pack("<I", 1) + b"\x00" * 8)
    with pytest.raises(FormatError):
        W.load_bytes(data)


def test_atomic_save_and_load(tmp_path):
    arr = randn32((5, 5), seed=7)
    path = tmp_path / "ckpt.cnnf"
    W.save(W.Checkpoint(tensors={"a": arr}), str(path))
    assert not list(tmp_path.glob("*.tmp"))
    back = W.load(str(path))
    assert back.tensors["a"].tobytes() == arr.tobytes()


def test_int_tensor_rejected_on_save():
    with pytest.raises(FormatError):
        W.save_bytes(W.Checkpoint(tensors={"a": np.arange(4)}))


# ---------------------------------------------------------------------------
# network round trips
# ---------------------------------------------------------------------------


def test_network_structure_roundtrip():
    net = Mo.finetune_surgery(Mo.build_mini_cnnf(seed=3), num_classes=7, seed=3)
    rebuilt = W.network_from_structure(W.network_structure(net))
    assert [s.name for s in rebuilt.layers] == [s.name for s in net.layers]
    assert [s.trainable for s in rebuilt.layers] == [s.trainable for s in net.layers]
    assert rebuilt.num_classes == 7
    assert rebuilt.dtype == net.dtype


def test_checkpoint_roundtrip_restores_network(tmp_path):
    net = Mo.finetune_surgery(Mo.build_mini_cnnf(seed=4), num_classes=7, seed=4)
    velocities = {(n, f): np.zeros_like(a) + 0.5
                  for n, f, a in net.trainable_param_items()}
    mean = randn32((1, 32, 32, 3), seed=9)
    ckpt = W.checkpoint_for_network(net, metadata={"epoch": 2, "lr": 1e-3, "seed": 4},
                                    velocities=velocities,
                                    extra_tensors={W.MEAN_NAME: mean})
    path = tmp_path / "net.cnnf"
    W.save(ckpt, str(path))
    net2, vel2, extras = W.network_from_checkpoint(W.load(str(path)))
    for (name, fieldname, arr) in net.param_items():
        assert getattr(net2.layer(name).params, fieldname).tobytes() == arr.tobytes()
    assert set(vel2) == set(velocities)
    assert all(vel2[k].tobytes() == velocities[k].tobytes() for k in velocities)
    assert extras[W.MEAN_NAME].tobytes() == mean.tobytes()
    x = randn32((2, 32, 32, 3), seed=10)
    assert np.array_equal(net.forward(x), net2.forward(x))


def test_import_pretrained_strict_full_match():
    net = Mo.build_mini_cnnf(seed=5)
    donor = Mo.build_mini_cnnf(seed=6)
    imported, skipped = W.import_pretrained(net, W.network_records(donor), strict=True)
    assert skipped == []
    for name, fieldname, arr in donor.param_items():
        assert getattr(imported.layer(name).params, fieldname).tobytes() == arr.tobytes()
    # source net untouched
    assert net.layer("fc8").params.weights.tobytes() != \
        imported.layer("fc8").params.weights.tobytes()


def test_import_pretrained_lenient_skips_replaced_head():
    donor = Mo.build_mini_cnnf(seed=7)  # 7-class head
    records = W.network_records(donor)
    target = Mo.replace_head(Mo.build_mini_cnnf(seed=8), 3, seed=8)  # 3-class head
    imported, skipped = W.import_pretrained(target, records, strict=False)
    skipped_names = {name for name, _ in skipped}
    assert skipped_names == {"fc8.weights", "fc8.bias"}
    assert imported.layer("conv1").params.weights.tobytes() == \
        donor.layer("conv1").params.weights.tobytes()
    assert imported.layer("fc6").params.weights.tobytes() == \
        donor.layer("fc6").params.weights.tobytes()
    # the fresh head survives untouched
    assert imported.layer("fc8").params.weights.shape == (512, 3)
    assert imported.layer("fc8").params.weights.tobytes() == \
        target.layer("fc8").params.weights.tobytes()


def test_import_pretrained_strict_shape_conflict_names_layer():
    net = Mo.build_mini_cnnf(seed=9)
    records = W.network_records(net)
    records["conv1.weights"] = np.zeros((3, 3, 5, 8), np.float32)
    with pytest.raises(WeightImportError, match="conv1.weights"):
        W.import_pretrained(net, records, strict=True)


def test_import_pretrained_strict_missing_record():
    net = Mo.build_mini_cnnf(seed=9)
    records = dict(W.network_records(net))
    del records["fc7.bias"]
    with pytest.raises(WeightImportError, match="fc7.bias"):
        W.import_pretrained(net, records, strict=True)


def test_import_pretrained_strict_unknown_record():
    net = Mo.build_mini_cnnf(seed=9)
    records = dict(W.network_records(net))
    records["conv9.weights"] = np.zeros((1, 1, 1, 1), np.float32)
    with pytest.raises(WeightImportError, match="conv9.weights"):
        W.import_pretrained(net, records, strict=True)


def test_import_precision_mismatch_raises_in_both_modes():
    net = Mo.build_mini_cnnf(seed=9)
    records = dict(W.network_records(net))
    records["fc8.bias"] = records["fc8.bias"].astype(np.float64)
    with pytest.raises(PrecisionMismatchError):
        W.import_pretrained(net, records, strict=True)
    with pytest.raises(PrecisionMismatchError):
        W.import_pretrained(net, records, strict=False)


def test_import_strict_is_all_or_nothing():
    net = Mo.build_mini_cnnf(seed=10)
    original = net.layer("conv1").params.weights.copy()
    records = dict(W.network_records(Mo.build_mini_cnnf(seed=11)))
    del records["fc6.weights"]
    with pytest.raises(WeightImportError):
        W.import_pretrained(net, records, strict=True)
    assert net.layer("conv1").params.weights.tobytes() == original.tobytes()
