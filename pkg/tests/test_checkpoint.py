import json
import struct
import warnings

import numpy as np
import pytest

from mergelock.checkpoint import (
    Checkpoint,
    ModelConfig,
    TaskVector,
    apply_task_vectors,
    checkpoint_from_bytes,
    fingerprint,
    identity_key,
    key_from_bytes,
    read_batch,
    read_checkpoint,
    require_same_schema,
    serialize_checkpoint,
    serialize_key,
    task_vector,
    unpack,
    write_batch,
    write_checkpoint,
)
from mergelock.errors import CorruptedKeyError, FingerprintWarning, ParseError, SchemaError
from mergelock.protect import SamplingConfig, protect_mergelock, protect_params, recover


def test_round_trip_is_bit_exact(tmp_path, family):
    pre = family.pretrained
    path = tmp_path / "m.mlck"
    write_checkpoint(path, pre)
    back = read_checkpoint(path)
    assert back == pre
    assert all(np.array_equal(back[n], pre[n]) for n in pre.names())
    assert serialize_checkpoint(back) == path.read_bytes()


def test_layout_is_length_prefixed_canonical_json(family):
    blob = serialize_checkpoint(family.pretrained)
    (hlen,) = struct.unpack("<Q", blob[:8])
    header_bytes = blob[8 : 8 + hlen]
    header = json.loads(header_bytes)
    assert header_bytes == json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    assert len(blob) == 8 + hlen + 8 * family.pretrained.num_params()


def test_f32_round_trip_is_lossy_but_close(tmp_path, family):
    path = tmp_path / "m32.mlck"
    write_checkpoint(path, family.pretrained, dtype="f32")
    back = read_checkpoint(path)
    for n in back.names():
        assert np.allclose(back[n], family.pretrained[n], rtol=1e-6, atol=1e-7)


def test_fingerprint_is_stable_and_content_sensitive(family):
    a, b = family.finetunes
    assert fingerprint(a) == fingerprint(Checkpoint(a.config, a.tensors))
    assert fingerprint(a) != fingerprint(b)
    assert len(fingerprint(a)) == 64


@pytest.mark.parametrize("cut", [0, 4, 12, 200, -1])
def test_truncated_input_raises_parse_error_with_offset(family, cut):
    blob = serialize_checkpoint(family.pretrained)
    with pytest.raises(ParseError) as exc:
        checkpoint_from_bytes(blob[:cut] if cut >= 0 else blob[:-3])
    assert isinstance(exc.value.offset, int) and exc.value.offset >= 0


def test_garbage_header_raises_parse_error():
    blob = struct.pack("<Q", 5) + b"{nope"
    with pytest.raises(ParseError):
        unpack(blob)


def test_schema_validation(small_config, family):
    tensors = dict(family.pretrained.tensors)
    del tensors["layers.0.attn.w_q"]
    with pytest.raises(SchemaError):
        Checkpoint(small_config, tensors)
    tensors = dict(family.pretrained.tensors)
    tensors["layers.0.attn.w_q"] = np.zeros((3, 3))
    with pytest.raises(Exception):
        Checkpoint(small_config, tensors)
    with pytest.raises(SchemaError):
        ModelConfig(1, 3, 16, 8)
    with pytest.raises(SchemaError):
        ModelConfig(1, 1, 4, 4, activation="swish")


def test_nonzero_bias_rejected_without_bias_flag(family):
    cfg = ModelConfig(2, 2, 16, 32, includes_bias=False)
    with pytest.raises(SchemaError):
        Checkpoint(cfg, family.pretrained.tensors)


def test_checkpoints_are_immutable(family):
    with pytest.raises(ValueError):
        family.pretrained["layers.0.attn.w_q"][0, 0] = 1.0


def test_require_same_schema(family):
    other = ModelConfig(1, 2, 16, 32)
    from mergelock.synth import synthetic_family

    with pytest.raises(SchemaError):
        require_same_schema(family.pretrained, synthetic_family(0, other, tasks=0).pretrained)


def test_batch_round_trip(tmp_path, family):
    path = tmp_path / "b.mlck"
    write_batch(path, family.batch)
    back = read_batch(path)
    assert len(back) == len(family.batch)
    assert all(np.array_equal(x, y) for x, y in zip(back, family.batch))


@pytest.mark.parametrize("scheme", ["mergelock", "params"])
def test_key_round_trip(family, scheme):
    ft = family.finetunes[0]
    if scheme == "mergelock":
        protected, key = protect_mergelock(ft, SamplingConfig(seed=4))
    else:
        protected, key = protect_params(ft, family.pretrained, SamplingConfig(seed=4))
    back = key_from_bytes(serialize_key(key))
    assert back.geometry() == key.geometry()
    assert back.metadata == key.metadata
    restored = recover(protected, back)
    assert max(float(np.abs(restored[n] - ft[n]).max()) for n in ft.names()) <= 1e-10


def test_corrupted_key_detected(small_config):
    key = identity_key(small_config)
    t = key.heads[(0, 0)]
    key.heads[(0, 0)] = t._replace(a_inv=t.a_inv * 2.0)
    with pytest.raises(CorruptedKeyError):
        serialize_key(key)


def test_key_missing_entry_detected(small_config):
    blob = serialize_key(identity_key(small_config, "params"))
    c = unpack(blob)
    from mergelock.checkpoint import _pack

    tensors = dict(c.tensors)
    tensors.pop("layers.1.mlp_perm")
    with pytest.raises(CorruptedKeyError):
        key_from_bytes(_pack("key", c.config, c.metadata, tensors, "f64"))


def test_fingerprint_mismatch_warns_but_recovers(family):
    ft, other = family.finetunes
    _, key = protect_mergelock(ft, SamplingConfig(seed=1))
    with pytest.warns(FingerprintWarning):
        recover(other, key)


def test_matching_fingerprint_is_silent(family):
    protected, key = protect_mergelock(family.finetunes[0], SamplingConfig(seed=1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        recover(protected, key)


def test_task_vector_flat_round_trip_and_apply(family):
    pre, ft = family.pretrained, family.finetunes[0]
    tv = task_vector(ft, pre)
    again = TaskVector.from_flat(pre.config, tv.flat())
    assert np.array_equal(again.flat(), tv.flat())
    assert apply_task_vectors(pre, [tv], 0.0) == pre
    rebuilt = apply_task_vectors(pre, [tv], 1.0)
    for n in ft.names():
        assert np.allclose(rebuilt[n], ft[n], rtol=0, atol=4 * np.finfo(float).eps * (1 + np.abs(ft[n]).max()))
