"""Broker-mediated application sharing over a LAN cluster.

Peers discover shareable applications via multicast queries; a broker
funnels many remote clients through a single upstream terminal session
using round-robin time slicing, focus tracking and stream multiplexing.
"""

__version__ = "0.1.0"
