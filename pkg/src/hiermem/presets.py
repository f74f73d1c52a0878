"""Named model/hardware presets, overridable via the HIERMEM_PRESET_DIR env var.

A preset directory may hold ``<name>.json`` files with a ``kind`` field of
"model" (TransformerConfig fields) or "hardware" (HardwareProfile fields);
they shadow the built-ins of the same name.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import ConfigError
from .footprint import TransformerConfig
from .simengine import HardwareProfile, LinkSpec

PRESET_DIR_ENV = "HIERMEM_PRESET_DIR"

MODEL_PRESETS: dict[str, dict] = {
    # shape behind the published 648/162/1944 GiB footprint figures
    "gpt3-175b": {"batch_size": 1, "seq_len": 2048, "d_model": 12288,
                  "d_ffn": 49152, "num_layers": 96, "num_heads": 96},
    "gpt3-1.7b": {"batch_size": 1, "seq_len": 2048, "d_model": 2304,
                  "d_ffn": 9216, "num_layers": 24, "num_heads": 24},
    "tiny-2layer": {"batch_size": 1, "seq_len": 128, "d_model": 256,
                    "d_ffn": 1024, "num_layers": 2, "num_heads": 4},
}

HARDWARE_PRESETS: dict[str, dict] = {
    # A100 server: 600 GB/s HBM, 32 GB/s PCIe, 200 GB/s GPU-GPU, 3.5 GB/s SSD
    "a100-server": {
        "links": {
            "pcie_h2d": {"bandwidth_bytes_per_s": 32e9, "latency_s": 10e-6},
            "pcie_d2h": {"bandwidth_bytes_per_s": 32e9, "latency_s": 10e-6},
            "gpu_interconnect": {"bandwidth_bytes_per_s": 200e9, "latency_s": 10e-6},
            "ssd_io": {"bandwidth_bytes_per_s": 3.5e9, "latency_s": 10e-6},
        },
        "gpu_bytes_per_s": 600e9,
        "cpu_bytes_per_s": 80e9,
        "num_gpus": 8,
        "pcie_lanes": 4,
    },
}


def _dir_override(name: str, kind: str) -> dict | None:
    preset_dir = os.environ.get(PRESET_DIR_ENV)
    if not preset_dir:
        return None
    path = Path(preset_dir) / f"{name}.json"
    if not path.is_file():
        return None
    raw = json.loads(path.read_text())
    if raw.get("kind", kind) != kind:
        raise ConfigError(f"preset file {path} is not a {kind} preset")
    raw.pop("kind", None)
    return raw


def model_preset(name: str) -> TransformerConfig:
    raw = _dir_override(name, "model")
    if raw is None:
        if name not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {name!r} "
                              f"(known: {sorted(MODEL_PRESETS)})")
        raw = MODEL_PRESETS[name]
    return TransformerConfig.from_dict(raw)


def hardware_preset(name: str) -> HardwareProfile:
    raw = _dir_override(name, "hardware")
    if raw is None:
        if name not in HARDWARE_PRESETS:
            raise ConfigError(f"unknown hardware preset {name!r} "
                              f"(known: {sorted(HARDWARE_PRESETS)})")
        raw = HARDWARE_PRESETS[name]
    return HardwareProfile.from_dict(raw)


def resolve_model(spec) -> TransformerConfig:
    """Accepts a dict of config fields or a 'preset:<name>' string."""
    if isinstance(spec, str):
        return model_preset(spec.removeprefix("preset:"))
    return TransformerConfig.from_dict(spec)


def resolve_hardware(spec) -> HardwareProfile:
    if isinstance(spec, str):
        return hardware_preset(spec.removeprefix("preset:"))
    return HardwareProfile.from_dict(spec)
