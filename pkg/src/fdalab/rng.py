"""Seed derivation so independent jobs stay deterministic in any execution order."""

from __future__ import annotations

import hashlib

import torch


def derive_seed(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings into a stable 63-bit seed."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


def torch_generator(*parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g
