import socket
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import farm_handshake
from iot6scan.mockfarm import Behavior, Listener
from iot6scan.protocols import ProtocolError, Status, by_name
from iot6scan.protocols.amqp import (
    HEADER_0_9_1,
    HEADER_1_0,
    AmqpHandshakeMachine,
    ConnectionStart,
    decode_connection_start,
    decode_field_table,
    encode_connection_start,
    encode_field_table,
    parse_protocol_header,
    split_frame,
)

serialization = pytest.importorskip("amqp.serialization")


def test_headers():
    assert HEADER_0_9_1.hex(" ") == "41 4d 51 50 00 00 09 01"
    assert parse_protocol_header(HEADER_0_9_1).version == "0-9-1"
    assert parse_protocol_header(HEADER_1_0).version == "1.0"
    with pytest.raises(ProtocolError):
        parse_protocol_header(b"HTTP/1.1")


def _sample_start():
    return ConnectionStart(server_properties={
        "product": "Broker", "version": "1.2.3", "capabilities": {"basic.nack": True, "exchange_exchange_bindings": False},
        "cluster_id": 42,
    }, mechanisms="PLAIN AMQPLAIN EXTERNAL", locales="en_US")


def test_connection_start_parsed_by_reference_library():
    frame = encode_connection_start(_sample_start())
    ftype, channel, payload, used = split_frame(frame)
    assert (ftype, channel, used) == (1, 0, len(frame))
    assert struct.unpack(">HH", payload[:4]) == (10, 10)
    values, end = serialization.loads("ooFSS", payload[4:], 0)
    assert end == len(payload) - 4
    s = _sample_start()
    assert values == [0, 9, s.server_properties, s.mechanisms, s.locales]


def test_reference_encoded_start_decodes():
    props = {"product": "Ref", "n": 7, "neg": -3, "f": 1.5, "caps": {"a": True}}
    raw = serialization.dumps("ooFSS", [0, 9, props, "PLAIN", "en_US"])
    start = decode_connection_start(struct.pack(">HH", 10, 10) + raw)
    assert start.server_properties == props
    assert (start.mechanisms, start.locales) == ("PLAIN", "en_US")


field_values = st.recursive(
    st.booleans() | st.integers(-2**63, 2**63 - 1) | st.text(max_size=20),
    lambda inner: st.dictionaries(st.text(max_size=10), inner, max_size=4),
    max_leaves=10,
)


@given(st.dictionaries(st.text(max_size=10).filter(lambda k: len(k.encode()) < 256), field_values, max_size=6))
def test_field_table_round_trip(table):
    raw = encode_field_table(table)
    assert decode_field_table(raw) == (table, len(raw))


@given(st.binary(max_size=64))
def test_field_table_decode_is_total(raw):
    try:
        decode_field_table(raw)
    except ProtocolError:
        pass


def _run(*chunks, close=False):
    m = AmqpHandshakeMachine()
    assert m.start() == HEADER_0_9_1
    for c in chunks:
        m.receive_data(c)
    if close:
        m.connection_closed()
    return m


def test_machine_connection_start():
    frame = encode_connection_start(_sample_start())
    m = _run(frame[:5], frame[5:])
    assert m.result.status is Status.SUCCESS
    assert m.result.fields["server_version"] == "0-9-1"
    assert m.result.fields["product"] == "Broker"


def test_machine_version_header_reply():
    m = _run(HEADER_1_0)
    assert m.result.status is Status.SUCCESS
    assert m.result.fields["server_version"] == "1.0"


def test_machine_http_reply_is_protocol_error():
    m = _run(b"HTTP/1.1 400 Bad Request\r\n\r\n")
    assert m.result.status is Status.PROTOCOL_ERROR


def test_machine_close_mid_frame():
    assert _run(encode_connection_start(_sample_start())[:9], close=True).result.status is Status.PROTOCOL_ERROR
    assert _run(close=True).result.status is Status.CONNECTED_NO_PROTOCOL


def test_machine_silence():
    m = _run()
    m.timed_out()
    assert m.result.status is Status.TIMEOUT


def test_farm_start_frame_parsed_by_reference_library(farm_factory):
    farm = farm_factory(Listener(by_name("amqp")))
    with socket.create_connection(("::1", farm.port_map()["amqp"]), timeout=3) as s:
        s.sendall(HEADER_0_9_1)
        buf = b""
        while split_frame(buf) is None:
            buf += s.recv(4096)
    _, _, payload, _ = split_frame(buf)
    values, _ = serialization.loads("ooFSS", payload[4:], 0)
    assert values[:2] == [0, 9]
    assert values[2]["product"] == "MockMQ"


def test_reference_client_reads_farm_start(farm_factory):
    amqp = pytest.importorskip("amqp")
    farm = farm_factory(Listener(by_name("amqp")))
    conn = amqp.Connection(host=f"[::1]:{farm.port_map()['amqp']}", connect_timeout=3, read_timeout=1)
    try:
        conn.connect()
    except Exception:
        pass  # the mock broker stops after Connection.Start
    finally:
        try:
            conn.collect()
        except Exception:
            pass
    assert conn.server_properties["product"] == "MockMQ"
    assert conn.version_major == 0 and conn.version_minor == 9


def test_farm_handshakes(farm_factory):
    farm = farm_factory(Listener(by_name("amqp")), Listener(by_name("amqps")))
    for key in ("amqp", "amqps"):
        o = farm_handshake(farm, key)
        assert o.status is Status.SUCCESS, (key, o)
        assert o.fields["server_version"] == "0-9-1"


def test_farm_amqp_1_0(farm_factory):
    b = Behavior(Behavior.normal().kind, amqp_version="1.0")
    farm = farm_factory(Listener(by_name("amqp"), b))
    o = farm_handshake(farm, "amqp")
    assert o.status is Status.SUCCESS and o.fields["server_version"] == "1.0"
