"""Canonical model geometries used as simulation presets."""
from __future__ import annotations

from .errors import ValidationError

# preset -> geometry overrides applied to the trace and sim sections
PRESETS: dict[str, dict] = {
    "qwen": {
        "layers": 48,
        "experts": 128,
        "k": 8,
        "shared_experts": 0,
        "expert_size_mb": 17.3,
    },
    "deepseek": {
        "layers": 30,
        "experts": 72,
        "k": 6,
        "shared_experts": 2,
        "expert_size_mb": 23.6,
    },
}


def preset_geometry(name: str) -> dict:
    if name == "custom":
        return {}
    if name not in PRESETS:
        raise ValidationError(f"unknown preset '{name}' (choose qwen, deepseek, or custom)")
    return dict(PRESETS[name])
