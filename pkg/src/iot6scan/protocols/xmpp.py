"""XMPP client stream opening (RFC 6120 framing)."""
from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from typing import Optional
from xml.sax.saxutils import quoteattr

from .machine import HandshakeMachine
from .ports import Status

NS_STREAMS = "http://etherx.jabber.org/streams"
NS_CLIENT = "jabber:client"
NS_STREAM_ERRORS = "urn:ietf:params:xml:ns:xmpp-streams"

_STREAM = f"{{{NS_STREAMS}}}stream"
_FEATURES = f"{{{NS_STREAMS}}}features"
_ERROR = f"{{{NS_STREAMS}}}error"

# Servers are sloppy about namespace declarations; a synthetic outer element
# binds the usual prefixes so that a bare <stream:error/> still parses.
_WRAPPER = f"<wrapper xmlns='{NS_CLIENT}' xmlns:stream='{NS_STREAMS}'>"
MAX_REPLY = 64 * 1024
_XML_DECL = re.compile(rb"^\s*<\?xml[^>]*\?>")

ET.register_namespace("stream", NS_STREAMS)


def stream_header(to_domain: Optional[str] = None, from_jid: Optional[str] = None, stream_id: Optional[str] = None) -> bytes:
    attrs = ""
    if to_domain:
        attrs += f" to={quoteattr(to_domain)}"
    if from_jid:
        attrs += f" from={quoteattr(from_jid)}"
    if stream_id:
        attrs += f" id={quoteattr(stream_id)}"
    return (
        "<?xml version='1.0'?>"
        f"<stream:stream{attrs} xmlns='{NS_CLIENT}' xmlns:stream='{NS_STREAMS}' version='1.0'>"
    ).encode("utf-8")


def features(*mechanisms: str, starttls: bool = False) -> bytes:
    parts = ["<stream:features>"]
    if starttls:
        parts.append("<starttls xmlns='urn:ietf:params:xml:ns:xmpp-tls'/>")
    if mechanisms:
        parts.append("<mechanisms xmlns='urn:ietf:params:xml:ns:xmpp-sasl'>")
        parts += [f"<mechanism>{m}</mechanism>" for m in mechanisms]
        parts.append("</mechanisms>")
    parts.append("</stream:features>")
    return "".join(parts).encode("utf-8")


def stream_error(condition: str) -> bytes:
    return f"<stream:error><{condition} xmlns='{NS_STREAM_ERRORS}'/></stream:error></stream:stream>".encode()


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


class XmppStreamMachine(HandshakeMachine):
    """Opens a client stream; success once the server opens its stream.

    If ``<stream:features>`` follows within the same exchange it is captured
    as text. A server stream open without features (close or timeout after
    it) is still a success.
    """

    def __init__(self, to_domain: Optional[str] = None) -> None:
        super().__init__()
        self.to_domain = to_domain
        self._xml = b""
        self._seen_bytes = False
        self._head = b""
        self._stream_attrs: Optional[dict] = None
        self._error_started = False

    def _initial_flight(self) -> bytes:
        return stream_header(self.to_domain)

    def _on_data(self, data: bytes) -> bytes:
        if not self._seen_bytes:
            # Hold the head of the reply until an XML declaration, if any, is complete.
            self._head += data
            stripped = self._head.lstrip()
            if not stripped:
                return b""
            if not stripped.startswith(b"<"):
                self._seen_bytes = True
                self._finish(Status.PROTOCOL_ERROR, detail="reply is not XML")
                return b""
            if b"<?xml".startswith(stripped[:5]) and b"?>" not in stripped:
                return b""
            self._seen_bytes = True
            data = _XML_DECL.sub(b"", self._head, count=1)
        self._xml += data
        if len(self._xml) > MAX_REPLY:
            self._finish(Status.PROTOCOL_ERROR, detail="reply too large")
            return b""
        # Re-parse from the start on every read: expat run incrementally can
        # hold back an end tag whose '>' arrives in a later chunk.
        self._stream_attrs, self._error_started = None, False
        parser = ET.XMLPullParser(events=("start", "end"))
        try:
            parser.feed(_WRAPPER)
            parser.feed(self._xml)
            for event, elem in parser.read_events():
                self._handle(event, elem)
                if self.done:
                    break
        except ET.ParseError as exc:
            if self._error_started:
                self._finish(Status.PROTOCOL_ERROR, detail="stream-error")
            else:
                self._finish(Status.PROTOCOL_ERROR, detail=f"malformed XML: {exc}")
        return b""

    def _handle(self, event: str, elem: ET.Element) -> None:
        if event == "start" and elem.tag == _STREAM:
            self._stream_attrs = dict(elem.attrib)
        elif event == "start" and elem.tag == _ERROR:
            self._error_started = True
        elif event == "end" and elem.tag == _ERROR:
            conditions = [_local(c.tag) for c in elem if _local(c.tag) != "text"]
            self._finish(Status.PROTOCOL_ERROR, detail="stream-error: " + (",".join(conditions) or "unspecified"))
        elif event == "end" and elem.tag == _FEATURES and self._stream_attrs is not None:
            text = ET.tostring(elem, encoding="unicode")
            self._finish(Status.SUCCESS, evidence=text, **self._attr_fields())
        elif event == "start" and self._stream_attrs is None and elem.tag not in (_STREAM, _ERROR, "wrapper", f"{{{NS_CLIENT}}}wrapper"):
            self._finish(Status.PROTOCOL_ERROR, detail=f"unexpected element {elem.tag}")

    def _attr_fields(self) -> dict:
        attrs = self._stream_attrs or {}
        return {k: attrs[k] for k in ("from", "id", "version") if k in attrs}

    def _settle(self, fallback: Status) -> None:
        if self._error_started:
            self._finish(Status.PROTOCOL_ERROR, detail="stream-error")
        elif self._stream_attrs is not None:
            self._finish(Status.SUCCESS, evidence="", **self._attr_fields())
        else:
            self._finish(fallback)

    def _on_close(self) -> None:
        self._settle(Status.PROTOCOL_ERROR if self._head.strip() else Status.CONNECTED_NO_PROTOCOL)

    def _on_timeout(self) -> None:
        self._settle(Status.TIMEOUT)
