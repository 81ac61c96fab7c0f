"""Deterministic simulator of guest FPGA programming over virtio.

Firmware requests travel through a paravirtual device to a host FPGA
manager; overlays then activate passthrough devices for DMA benchmarks.
"""

__version__ = "0.1.0"
