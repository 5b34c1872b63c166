import socket
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from iot6scan.protocols import ProtocolError, Status, by_name
from iot6scan.protocols.mqtt import (
    FixedHeader,
    MqttConnectMachine,
    decode_connect,
    decode_fixed_header,
    encode_connack,
    encode_connect,
    encode_fixed_header,
    encode_remaining_length,
)
from iot6scan.mockfarm import Listener

CONNECT_A = "10 0d 00 04 4d 51 54 54 04 02 00 3c 00 01 61"

# Remaining-length examples from the MQTT 3.1.1 standard, table 2.4.
RL_VECTORS = [
    (0, "00"), (127, "7f"), (128, "80 01"), (16383, "ff 7f"), (16384, "80 80 01"),
    (2097151, "ff ff 7f"), (2097152, "80 80 80 01"), (268435455, "ff ff ff 7f"),
]


def test_connect_vector():
    assert encode_connect("a").hex(" ") == CONNECT_A


def test_connect_decodes():
    c = decode_connect(encode_connect("sensor-7", keepalive=60))
    assert (c.protocol_name, c.level, c.flags, c.keepalive, c.client_id) == ("MQTT", 4, 0x02, 60, "sensor-7")


@pytest.mark.parametrize("n,hexstr", RL_VECTORS)
def test_remaining_length_vectors(n, hexstr):
    assert encode_remaining_length(n).hex(" ") == hexstr


def test_remaining_length_out_of_range():
    with pytest.raises(ValueError):
        encode_remaining_length(268435456)


@given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 268435455))
def test_fixed_header_round_trip(ptype, flags, n):
    h = FixedHeader(ptype, flags, n)
    raw = encode_fixed_header(h)
    assert decode_fixed_header(raw) == (h, len(raw))
    assert decode_fixed_header(raw[:-1]) is None


def test_fixed_header_rejects_five_byte_length():
    with pytest.raises(ProtocolError):
        decode_fixed_header(bytes([0x20, 0xFF, 0xFF, 0xFF, 0xFF, 0x01]))


@given(st.binary(max_size=8))
def test_fixed_header_decode_is_total(raw):
    try:
        decode_fixed_header(raw)
    except ProtocolError:
        pass


def _machine(client_id="a"):
    m = MqttConnectMachine(client_id)
    assert m.start() == encode_connect(client_id)
    return m


def test_connack_success():
    m = _machine()
    m.receive_data(bytes.fromhex("20020000"))
    assert m.result.status is Status.SUCCESS
    assert m.result.fields["return_code"] == 0


def test_connack_refusal_still_mqtt():
    m = _machine()
    m.receive_data(encode_connack(5))
    assert m.result.status is Status.SUCCESS and m.result.fields["return_code"] == 5


def test_connack_split_across_reads():
    m = _machine()
    for b in bytes.fromhex("20020000"):
        m.receive_data(bytes([b]))
    assert m.result.status is Status.SUCCESS


def test_other_first_packet_is_protocol_error():
    m = _machine()
    m.receive_data(bytes.fromhex("d000"))  # PINGRESP
    assert m.result.status is Status.PROTOCOL_ERROR


def test_close_without_bytes():
    m = _machine()
    m.connection_closed()
    assert m.result.status is Status.CONNECTED_NO_PROTOCOL


def test_silence_is_timeout():
    m = _machine()
    m.timed_out()
    assert m.result.status is Status.TIMEOUT


# ---- independent client: paho-mqtt -----------------------------------------------

paho = pytest.importorskip("paho.mqtt.client")


def _paho_client(client_id):
    return paho.Client(paho.CallbackAPIVersion.VERSION2, client_id=client_id, protocol=paho.MQTTv311,
                       clean_session=True)


def test_connect_bytes_equal_paho():
    srv = socket.socket(socket.AF_INET6)
    srv.bind(("::1", 0))
    srv.listen(1)
    got = {}

    def accept():
        conn, _ = srv.accept()
        conn.settimeout(5)
        data = b""
        while len(data) < 15:
            chunk = conn.recv(64)
            if not chunk:
                break
            data += chunk
        got["bytes"] = data
        conn.close()

    t = threading.Thread(target=accept)
    t.start()
    c = _paho_client("a")
    c.connect("::1", srv.getsockname()[1], keepalive=60)
    for _ in range(5):
        c.loop(timeout=0.2)
        if "bytes" in got:
            break
    t.join(5)
    srv.close()
    assert got["bytes"] == encode_connect("a")


def test_paho_accepts_farm_connack(farm_factory):
    farm = farm_factory(Listener(by_name("mqtt")))
    codes = []
    c = _paho_client("probe")
    c.on_connect = lambda client, userdata, flags, rc, props: codes.append(rc)
    c.connect("::1", farm.port_map()["mqtt"], keepalive=60)
    for _ in range(20):
        c.loop(timeout=0.1)
        if codes:
            break
    c.disconnect()
    assert codes and codes[0] == 0
