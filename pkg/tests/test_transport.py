import struct
import threading

import numpy as np
import pytest

from fedner import transport as tp
from fedner.transport import GradientPacket, Kind


def random_packet(rng):
    n = int(rng.integers(0, 40))
    kind = rng.integers(4)
    if kind == 0:
        grad = rng.normal(size=n) * 10.0 ** rng.integers(-300, 300, size=n)
    elif kind == 1:
        grad = rng.integers(-(2**63), 2**63 - 1, size=n, dtype=np.int64).view(np.float64)
        grad = grad[np.isfinite(grad)]
    elif kind == 2:
        grad = np.array([0.0, -0.0, 1e308, -1e308, 5e-324, np.nextafter(1.0, 2.0)])[: n]
    else:
        grad = rng.normal(size=n)
    return GradientPacket(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)), grad,
                          int(rng.integers(1, 2**63)), float(rng.normal()))


def test_ten_thousand_packets_round_trip_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        p = random_packet(rng)
        out = tp.decode(tp.encode(tp.gradient(p))).packet
        assert out == p
        assert out.gradient.tobytes() == p.gradient.tobytes()


def test_empty_gradient_round_trips():
    p = GradientPacket(0, 0, np.zeros(0), 1, 0.0)
    assert tp.decode(tp.encode(tp.gradient(p))).packet == p


def test_special_values():
    values = np.array([0.0, -0.0, 1e308])
    out = tp.decode(tp.encode(tp.gradient(GradientPacket(1, 2, values, 3)))).packet.gradient
    assert out.tobytes() == values.tobytes()
    assert np.signbit(out[1])
    with pytest.raises(ValueError):
        GradientPacket(1, 2, np.array([0.0, np.nan]), 3)
    with pytest.raises(ValueError):
        tp.round_start(0, [np.inf], 4)
    with pytest.raises(ValueError):
        GradientPacket(1, 2, np.zeros(1), 3, loss=float("nan"))


def test_nan_in_wire_bytes_is_a_decode_error():
    frame = bytearray(tp.encode(tp.broadcast(3, [1.0, 2.0])))
    frame[-8:] = struct.pack("<d", float("nan"))
    with pytest.raises(tp.DecodeError):
        tp.decode(bytes(frame))


@pytest.mark.parametrize("msg", [
    tp.register(7, 1234),
    tp.round_start(5, np.arange(4.0), 17),
    tp.broadcast(9, np.array([-1.5])),
    tp.shutdown(),
])
def test_every_kind_round_trips(msg):
    assert tp.decode(tp.encode(msg)) == msg


def test_header_layout():
    frame = tp.encode(tp.register(258, 5))
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
    assert frame[4] == tp.VERSION and frame[5] == Kind.REGISTER
    assert struct.unpack("<I", frame[6:10])[0] == 258
    assert struct.unpack("<Q", frame[10:])[0] == 5


def test_truncated_frames():
    frame = tp.encode(tp.gradient(GradientPacket(0, 1, np.arange(5.0), 2)))
    for cut in (0, 3, 4, 9, 20, len(frame) - 1):
        with pytest.raises(tp.TruncatedFrame):
            tp.decode(frame[:cut])


def test_length_prefix_lying_short():
    frame = bytearray(tp.encode(tp.broadcast(0, np.arange(3.0))))
    frame[:4] = struct.pack(">I", len(frame) - 4 - 8)
    with pytest.raises(tp.DecodeError):
        tp.decode(bytes(frame[:-8]))


def test_bad_version_and_kind():
    frame = bytearray(tp.encode(tp.shutdown()))
    frame[4] = 2
    with pytest.raises(tp.BadVersion):
        tp.decode(bytes(frame))
    frame[4] = tp.VERSION
    frame[5] = 99
    with pytest.raises(tp.BadKind):
        tp.decode(bytes(frame))


def test_trailing_bytes_rejected():
    with pytest.raises(tp.DecodeError):
        tp.decode(tp.encode(tp.shutdown()) + b"\x00")


def test_concatenated_frames_decode_in_order():
    rng = np.random.default_rng(1)
    msgs = [tp.register(1, 10), tp.round_start(1, rng.normal(size=6), 4)]
    msgs += [tp.gradient(random_packet(rng)) for _ in range(20)]
    msgs += [tp.broadcast(2, rng.normal(size=3)), tp.shutdown()]
    stream = b"".join(tp.encode(m) for m in msgs)
    assert tp.decode_stream(stream) == msgs


def test_packet_equality_is_bitwise():
    a = GradientPacket(0, 0, np.array([0.0]), 1)
    b = GradientPacket(0, 0, np.array([-0.0]), 1)
    assert a != b
    assert a == GradientPacket(0, 0, np.array([0.0]), 1)


def test_packet_is_immutable_value():
    g = np.array([1.0, 2.0])
    p = GradientPacket(0, 0, g, 1)
    with pytest.raises(Exception):
        p.weight = 2
    assert p.weight == 1


def test_in_process_channel():
    a, b = tp.in_process_pair()
    a.send(tp.register(3, 4))
    assert b.recv(timeout=1) == tp.register(3, 4)
    a.close()
    with pytest.raises(tp.ChannelClosed):
        b.recv(timeout=1)
    with pytest.raises(TimeoutError):
        a.recv(timeout=0.01)


def test_socket_channel_round_trip():
    listener = tp.socket_listen("127.0.0.1:0")
    rng = np.random.default_rng(2)
    msgs = [tp.gradient(random_packet(rng)) for _ in range(50)] + [tp.shutdown()]
    got = []

    def client():
        ch = tp.socket_connect(listener.address)
        for m in msgs:
            ch.send(m)
        ch.close()

    t = threading.Thread(target=client)
    t.start()
    server = listener.accept(timeout=10)
    for _ in msgs:
        got.append(server.recv(timeout=10))
    with pytest.raises(tp.ChannelClosed):
        server.recv(timeout=10)
    t.join()
    server.close()
    listener.close()
    assert got == msgs


def test_parse_address():
    assert tp.parse_address("127.0.0.1:5000") == ("127.0.0.1", 5000)
    assert tp.parse_address(":7") == ("127.0.0.1", 7)
