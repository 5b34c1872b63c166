"""IPv6 IoT protocol scanning toolkit.

Pipeline: :mod:`targetprep` (hitlist hygiene) → :mod:`scanner` (open-port
scan, then application-layer handshakes via :mod:`protocols`) →
:mod:`certlab` and :mod:`analysis` (reports). :mod:`mockfarm` provides
loopback responders for end-to-end testing.
"""
__version__ = "0.1.0"
