"""Federated learning with bucketed scalar quantisation of client updates.

Simulator and compression library: per-layer bucket-uniform / bucket-quantile
codecs with mid-point decoding, a QSGD comparator, bit-exact wire payloads and
an uplink/downlink communication cost model.
"""

__version__ = "0.1.0"
