import numpy as np
import pytest

from dicm import protocol
from dicm.protocol import (Barrier, EmbedGradPush, EmbedRequest, EmbedResponse,
                           IdParamPull, IdParamPush, IdParamResponse,
                           ProtocolError, ServerSync, TrafficMeter, WorkerSync)


def roundtrip(msg):
    return protocol.decode(protocol.encode(msg))


def test_embed_request_round_trip_and_size():
    msg = EmbedRequest(3, 1, np.array([5, 9, 12]))
    out = roundtrip(msg)
    assert out.iteration == 3 and out.sender == 1
    assert np.array_equal(out.ids, [5, 9, 12])
    assert msg.metered_size() == 13 + 4 + 12


def test_embed_response_round_trip_preserves_float64():
    vec = np.array([[1.0 / 3.0, np.pi], [1e-17, -2.5]])
    msg = EmbedResponse(0, 2, np.array([7, 8]), vec)
    out = roundtrip(msg)
    assert np.array_equal(out.vectors, vec)  # bit-exact through the wire
    assert msg.metered_size() == 13 + 8 + 8 + 4 * 4


def test_grad_push_and_pull_round_trip():
    push = EmbedGradPush(1, 0, np.array([4]), np.array([[0.5, -0.25, 0.125]]))
    out = roundtrip(push)
    assert isinstance(out, EmbedGradPush)
    assert np.array_equal(out.vectors, push.vectors)
    pull = IdParamPull(2, 3, np.array([[0, 11], [1, 4]]))
    out = roundtrip(pull)
    assert np.array_equal(out.keys, pull.keys)
    assert pull.metered_size() == 13 + 4 + 16


def test_id_param_response_round_trip():
    msg = IdParamResponse(5, 1, np.array([[0, 2]]), np.array([[1.5, 2.5]]))
    out = roundtrip(msg)
    assert np.array_equal(out.keys, msg.keys)
    assert np.array_equal(out.vectors, msg.vectors)
    push = IdParamPush(5, 1, np.array([[0, 2]]), np.array([[1.5, 2.5]]))
    assert isinstance(roundtrip(push), IdParamPush)


def test_sync_round_trip_and_size():
    grads = {"mlp/0/w": np.arange(6.0), "mlp/0/b": np.array([1.0])}
    for cls in (ServerSync, WorkerSync):
        msg = cls(9, 0, grads)
        out = roundtrip(msg)
        assert isinstance(out, cls)
        assert set(out.grads) == set(grads)
        for n in grads:
            assert np.array_equal(out.grads[n], grads[n])
        expect = 13 + 4 + (6 + len("mlp/0/w") + 24) + (6 + len("mlp/0/b") + 4)
        assert msg.metered_size() == expect


def test_barrier_and_empty_payloads():
    out = roundtrip(Barrier(7, 4))
    assert (out.iteration, out.sender) == (7, 4)
    assert Barrier(7, 4).metered_size() == 13
    empty = roundtrip(EmbedResponse(0, 0, np.array([], dtype=np.int64), np.zeros((0, 12))))
    assert empty.vectors.shape == (0, 12)


def test_decode_rejects_garbage():
    with pytest.raises(ProtocolError):
        protocol.decode(b"\x00\x01")
    frame = bytearray(protocol.encode(Barrier(0, 0)))
    frame[4] = 200  # unknown tag
    with pytest.raises(ProtocolError, match="tag"):
        protocol.decode(bytes(frame))
    with pytest.raises(ProtocolError, match="length"):
        protocol.decode(bytes(frame[:-1] + b"\x00\x00"))


def test_meter_tracks_send_receive_symmetrically():
    meter = TrafficMeter()
    msg = EmbedRequest(0, 0, np.array([1, 2]))
    meter.record_send(msg, "worker->server")
    meter.record_receive(msg, "worker->server")
    key = (protocol.CAT_IMAGE_EMBEDDING, "worker->server")
    assert meter.sent[key] == meter.received[key] == msg.metered_size()
    meter.add_storage("server-image-features", 1024)
    assert meter.storage["server-image-features"] == 1024
