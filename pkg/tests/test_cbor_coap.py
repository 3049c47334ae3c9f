import pytest
from hypothesis import given, settings, strategies as st

from lwm2m_c2c import cbor, coap
from lwm2m_c2c.coap import Code, Kind, Message, Option
from lwm2m_c2c.errors import Malformed
from lwm2m_c2c.model import Path


# well-known vectors (canonical CBOR)
@pytest.mark.parametrize("value, hexstr", [
    (0, "00"),
    (23, "17"),
    (24, "1818"),
    (3311, "190cef"),
    (65536, "1a00010000"),
    (-1, "20"),
    (-500, "3901f3"),
    (b"", "40"),
    ("ac", "626163"),
    ([], "80"),
    ([1, [2, 3]], "8201820203"),
    ({1: 3311, 3: 1}, "a201190cef0301"),
    ({"b": 1, 10: 2, "a": 3}, "a30a02616103616201"),  # shorter keys first, then bytewise
    (True, "f5"),
    (False, "f4"),
    (None, "f6"),
])
def test_cbor_vectors(value, hexstr):
    assert cbor.dumps(value).hex() == hexstr
    assert cbor.loads(bytes.fromhex(hexstr)) == value


@pytest.mark.parametrize("hexstr", [
    "",            # empty
    "1817",        # non-shortest argument
    "5f",          # indefinite length
    "a2 01 00 01 00".replace(" ", ""),  # duplicate key
    "a2 03 00 01 00".replace(" ", ""),  # unordered keys
    "f7",          # undefined is outside the subset
    "fa3f800000",  # floats are outside the subset
    "c100",        # tags are outside the subset
    "0000",        # trailing data
    "62ffff",      # invalid UTF-8
])
def test_cbor_rejects(hexstr):
    with pytest.raises(Malformed):
        cbor.loads(bytes.fromhex(hexstr))


def test_cbor_nesting_limit():
    deep = b"\x81" * 40 + b"\x00"
    with pytest.raises(Malformed):
        cbor.loads(deep)


cbor_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(1 << 64), (1 << 64) - 1) | st.binary(max_size=20) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.integers(0, 50) | st.text(max_size=5), inner,
                                                                max_size=4),
    max_leaves=12,
)


@settings(max_examples=300)
@given(cbor_values)
def test_cbor_round_trip(value):
    raw = cbor.dumps(value)
    assert cbor.loads(raw) == value
    assert cbor.dumps(cbor.loads(raw)) == raw


# CoAP framing

def test_request_encoding_matches_hand_assembly():
    msg = coap.request(Code.GET, Path(3311, 0, 5850))
    msg = msg.with_(message_id=0xBEEF, token=b"\x01\x02")
    # ver 1, CON, tkl 2 | GET | mid | token | uri-path 3311, 0, 5850 (delta 11, then 0, 0)
    expected = "42 01 be ef 01 02 b4 33 33 31 31 01 30 04 35 38 35 30"
    assert coap.encode(msg).hex(" ") == expected


def test_decode_inverse_of_encode():
    msg = Message(Kind.NON, Code.CONTENT, 7, b"\xaa" * 4,
                  [(Option.OBSERVE, b"\x05"), (Option.CONTENT_FORMAT, coap.uint_bytes(11542))], b"hello")
    back = coap.decode(coap.encode(msg))
    assert back == msg
    assert back.observe == 5


def test_long_option_uses_extended_length():
    msg = coap.request(Code.POST, ["x" * 300]).with_(message_id=1)
    assert coap.decode(coap.encode(msg)).uri_path == ["x" * 300]


@pytest.mark.parametrize("raw", [
    "",
    "40",                # short header
    "80 01 00 00",       # version 2
    "49 01 00 00",       # token longer than 8
    "40 01 00 00 ff",    # payload marker with nothing after
    "40 01 00 00 f0",    # reserved option nibble
])
def test_coap_rejects(raw):
    with pytest.raises(Malformed):
        coap.decode(bytes.fromhex(raw))


@pytest.mark.parametrize("code, dotted", [
    (Code.CONTENT, "2.05"), (Code.UNAUTHORIZED, "4.01"), (Code.NOT_FOUND, "4.04"), (Code.INTERNAL_ERROR, "5.00"),
])
def test_dotted_codes(code, dotted):
    assert code.dotted == dotted


def test_piggybacked_response_echoes_token():
    req = coap.request(Code.GET, Path(3300, 0)).with_(message_id=42, token=b"tok")
    resp = coap.response_to(req, Code.CONTENT, b"x")
    assert (resp.kind, resp.message_id, resp.token) == (Kind.ACK, 42, b"tok")
