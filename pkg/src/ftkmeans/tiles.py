"""Three-level tile configuration (block / sub-block / micro kernel).

The levels mirror the parallel-work / register-blocking / innermost-kernel
split of cache-blocked GEMM. Generation rules: every parameter is a power
of two, the sub level shares the block's k extent, each level divides the
one above it in m and n, and the sub-to-micro area ratio is 8 or 16.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Innermost kernel sizes by precision; kept at the reference values so the
# search space stays comparable, but overridable when enumerating.
MICRO_SINGLE = (16, 8, 4)
MICRO_DOUBLE = (8, 8, 4)


def _is_pow2(v):
    return v >= 1 and (v & (v - 1)) == 0


@dataclass(frozen=True)
class TileConfig:
    """Tile sizes as (m, n, k) triples for the block, sub and micro levels."""

    block: tuple
    sub: tuple
    micro: tuple

    def validate(self):
        bm, bn, bk = self.block
        sm, sn, sk = self.sub
        um, un, uk = self.micro
        for name, triple in (("block", self.block), ("sub", self.sub), ("micro", self.micro)):
            if len(triple) != 3:
                raise ValueError(f"{name} must be an (m, n, k) triple")
            for v in triple:
                if not _is_pow2(int(v)):
                    raise ValueError(f"{name} sizes must be powers of two, got {triple}")
        if sk != bk:
            raise ValueError(f"sub.k ({sk}) must equal block.k ({bk})")
        if bm % sm or bn % sn:
            raise ValueError(f"sub tile {sm}x{sn} must divide block tile {bm}x{bn}")
        if sm % um or sn % un:
            raise ValueError(f"micro tile {um}x{un} must divide sub tile {sm}x{sn}")
        ratio = (sm * sn) // (um * un)
        if (sm * sn) % (um * un) or ratio not in (8, 16):
            raise ValueError(f"sub/micro area ratio must be 8 or 16, got {ratio}")
        return self

    def as_tuple(self):
        return self.block + self.sub + self.micro

    def __str__(self):
        b, s, u = self.block, self.sub, self.micro
        return f"{b[0]},{b[1]},{b[2]}/{s[0]},{s[1]},{s[2]}/{u[0]},{u[1]},{u[2]}"


def make_config(block, sub, micro):
    return TileConfig(tuple(block), tuple(sub), tuple(micro)).validate()


def micro_for(dtype):
    return MICRO_SINGLE if np.dtype(dtype) == np.float32 else MICRO_DOUBLE


def default_config(dtype):
    """Fixed fallback configuration (the reference library's hard-coded tiles)."""
    if np.dtype(dtype) == np.float32:
        return make_config((32, 256, 16), (32, 64, 16), MICRO_SINGLE)
    return make_config((64, 64, 16), (32, 32, 16), MICRO_DOUBLE)


def parse_tile(text, dtype):
    """Parse ``"bm,bn,bk,sm,sn,sk"`` into a TileConfig (micro from precision)."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 6:
        raise ValueError(f"tile spec needs 6 comma-separated sizes, got {text!r}")
    vals = [int(p) for p in parts]
    return make_config(vals[:3], vals[3:], micro_for(dtype))
