"""Compact 4D Gaussian GOP codec: anchors, frame decoding, reorganization and rANS coding.

Submodules load on first attribute access so that ``gifstream.cli`` can apply
its thread cap before numpy initializes.
"""
from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "GopConfig": "model", "GopModel": "model", "GaussianFrame": "model", "validate": "model",
    "generate_synthetic": "model",
    "decode_frame": "deform", "build_knn": "deform",
    "build_layout": "reorg", "grid_sort": "reorg", "smoothness_energy": "reorg",
    "entropy_bits": "entropy", "interval_mass": "entropy", "SymbolPlane": "entropy",
    "build_cdf": "rans", "rans_encode": "rans", "rans_decode": "rans", "GaussianTables": "rans",
    "encode_gop": "container", "decode_gop": "container", "quantize_model": "container",
    "read_model": "container", "write_model": "container", "export_ply": "container",
    "size_breakdown": "container", "Bitstream": "container",
    "load_weights": "nn", "save_weights": "nn", "WeightsBundle": "nn",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module 'gifstream' has no attribute {name!r}")
