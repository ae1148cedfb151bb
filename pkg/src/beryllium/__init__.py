"""Beryllium: a ticket-brokered distributed batch testbed.

Services: Resource Broker (``broker``), Information Index (``index``),
Logging & Bookkeeping (``lnb``) and Computing Elements (``ce``), each hosted
in an embedded ``container``. ``cli`` is the user interface and ``testkit``
boots whole topologies for testing.
"""

__version__ = "0.1.0"
