"""Deterministic soft-error injection into protected computation sites.

Faults corrupt accumulator state (computed values), never stored inputs:
memory is assumed ECC-protected, so input corruption would model a
different failure class. Schedules are fully planned from (spec, shape,
seed) before execution starts, which makes serial and threaded runs inject
identically. Within one tile-verification interval at most one fault is
scheduled, matching the single-event-upset assumption the correction
scheme relies on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

SIGN_BIT = {np.dtype(np.float32): 31, np.dtype(np.float64): 63}
EXP_BITS = {np.dtype(np.float32): (23, 30), np.dtype(np.float64): (52, 62)}
WIDTH = {np.dtype(np.float32): 32, np.dtype(np.float64): 64}

MODES = ("none", "per-tile-prob", "fixed-count", "exhaustive-sweep")
BIT_POLICIES = ("uniform-over-width", "sign-only", "exponent-only", "chosen")
TARGETS = ("gemm-accumulator", "update-accumulator", "both")

SCHEDULE_HEADER = ["iteration", "tile_i", "tile_j", "elem_i", "elem_j", "bit"]


def flip_bit(value, bit):
    """XOR one bit of a float's binary interchange representation.

    The width follows the value's dtype: numpy float32 scalars flip within
    32 bits, anything else is treated as a 64-bit double.
    """
    if isinstance(value, np.float32):
        if not 0 <= bit < 32:
            raise ValueError(f"bit {bit} out of range for float32")
        u = np.frombuffer(np.float32(value).tobytes(), dtype=np.uint32)[0]
        u ^= np.uint32(1) << np.uint32(bit)
        return np.frombuffer(np.uint32(u).tobytes(), dtype=np.float32)[0]
    if not 0 <= bit < 64:
        raise ValueError(f"bit {bit} out of range for float64")
    u = np.frombuffer(np.float64(value).tobytes(), dtype=np.uint64)[0]
    u ^= np.uint64(1) << np.uint64(bit)
    return np.frombuffer(np.uint64(u).tobytes(), dtype=np.float64)[0]


@dataclass(frozen=True)
class FaultSpec:
    """What to inject: mode, rate/count, bit policy, RNG seed, and target."""

    mode: str = "none"
    prob: float = 0.0
    count: int = 0
    bit_policy: str = "uniform-over-width"
    chosen_bit: int = 0
    seed: int = 0
    target: str = "gemm-accumulator"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown fault mode {self.mode!r}")
        if self.bit_policy not in BIT_POLICIES:
            raise ValueError(f"unknown bit policy {self.bit_policy!r}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if self.mode == "per-tile-prob" and not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.prob}")
        if self.mode == "fixed-count" and self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")

    @staticmethod
    def parse(text, seed=0, target="gemm-accumulator"):
        """Parse the CLI mini-language: none | prob:P | fixed:N | sweep,
        with an optional bit-policy suffix @sign | @exp | @any | @b<k>."""
        text = text.strip()
        policy = "uniform-over-width"
        chosen = 0
        if "@" in text:
            text, suffix = text.split("@", 1)
            if suffix == "sign":
                policy = "sign-only"
            elif suffix == "exp":
                policy = "exponent-only"
            elif suffix == "any":
                policy = "uniform-over-width"
            elif suffix.startswith("b"):
                policy = "chosen"
                chosen = int(suffix[1:])
            else:
                raise ValueError(f"unknown bit policy suffix {suffix!r}")
        if text == "none":
            return FaultSpec(mode="none", seed=seed, target=target)
        if text == "sweep":
            return FaultSpec(
                mode="exhaustive-sweep", bit_policy=policy, chosen_bit=chosen,
                seed=seed, target=target,
            )
        if text.startswith("prob:"):
            return FaultSpec(
                mode="per-tile-prob", prob=float(text[5:]), bit_policy=policy,
                chosen_bit=chosen, seed=seed, target=target,
            )
        if text.startswith("fixed:"):
            return FaultSpec(
                mode="fixed-count", count=int(text[6:]), bit_policy=policy,
                chosen_bit=chosen, seed=seed, target=target,
            )
        raise ValueError(f"cannot parse fault spec {text!r}")


@dataclass(frozen=True)
class FaultEntry:
    iteration: int
    tile: tuple
    elem: tuple
    bit: int


@dataclass
class FaultSchedule:
    """Deterministic plan of single-bit corruptions keyed by (iteration, tile)."""

    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def for_iteration(self, iteration):
        return [e for e in self.entries if e.iteration == iteration]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SCHEDULE_HEADER)
            for e in self.entries:
                w.writerow([e.iteration, e.tile[0], e.tile[1], e.elem[0], e.elem[1], e.bit])

    @staticmethod
    def from_csv(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        entries = [
            FaultEntry(int(r[0]), (int(r[1]), int(r[2])), (int(r[3]), int(r[4])), int(r[5]))
            for r in rows[1:]
        ]
        return FaultSchedule(entries=entries)


def _draw_bit(rng, spec, dtype):
    dt = np.dtype(dtype)
    if spec.bit_policy == "sign-only":
        return SIGN_BIT[dt]
    if spec.bit_policy == "exponent-only":
        lo, hi = EXP_BITS[dt]
        return int(rng.integers(lo, hi + 1))
    if spec.bit_policy == "chosen":
        if not 0 <= spec.chosen_bit < WIDTH[dt]:
            raise ValueError(f"chosen bit {spec.chosen_bit} out of range for {dt}")
        return spec.chosen_bit
    return int(rng.integers(0, WIDTH[dt]))


def _tile_extent(tile, grid_idx, full, dim):
    # effective extent of an edge tile when the true shape is known
    if dim is None:
        return full
    return min(full, dim - grid_idx * full)


def plan_faults(spec, n_iters, tile_grid, tile_dims, dtype=np.float32, shape=None):
    """Build the injection plan for a (grid of tiles) x (iterations) campaign.

    ``tile_grid`` is (n_tile_rows, n_tile_cols) and ``tile_dims`` the full
    (rows, cols) of one tile. When ``shape`` is given, elements are drawn
    within each edge tile's effective extent so every scheduled flip lands
    on a live accumulator cell. At most one entry per (iteration, tile).
    """
    rng = np.random.default_rng(spec.seed)
    nbi, nbj = tile_grid
    tm, tn = tile_dims
    entries = []
    if spec.mode == "none":
        return FaultSchedule(entries)

    def extents(bi, bj):
        mi = tm if shape is None else min(tm, shape[0] - bi * tm)
        nj = tn if shape is None else min(tn, shape[1] - bj * tn)
        return max(mi, 1), max(nj, 1)

    if spec.mode == "exhaustive-sweep":
        width = WIDTH[np.dtype(dtype)]
        it = 0
        mi, nj = extents(0, 0)
        for i in range(mi):
            for j in range(nj):
                for b in range(width):
                    entries.append(FaultEntry(it, (0, 0), (i, j), b))
                    it += 1
        return FaultSchedule(entries)

    for it in range(n_iters):
        if spec.mode == "per-tile-prob":
            for bi in range(nbi):
                for bj in range(nbj):
                    if rng.random() < spec.prob:
                        mi, nj = extents(bi, bj)
                        ei = int(rng.integers(0, mi))
                        ej = int(rng.integers(0, nj))
                        entries.append(
                            FaultEntry(it, (bi, bj), (ei, ej), _draw_bit(rng, spec, dtype))
                        )
        elif spec.mode == "fixed-count":
            n_tiles = nbi * nbj
            count = min(spec.count, n_tiles)
            picks = rng.choice(n_tiles, size=count, replace=False)
            for flat in sorted(int(p) for p in picks):
                bi, bj = divmod(flat, nbj)
                mi, nj = extents(bi, bj)
                ei = int(rng.integers(0, mi))
                ej = int(rng.integers(0, nj))
                entries.append(FaultEntry(it, (bi, bj), (ei, ej), _draw_bit(rng, spec, dtype)))
    return FaultSchedule(entries)


class FaultHook:
    """No-op injection hook; protected runs with this hook are bit-identical
    to unprotected ones."""

    injected = ()

    def kernel_arrays(self, iteration, dtype):
        return None

    def absorb_kernel_results(self, iteration, applied, before, after):
        pass

    def maybe_corrupt(self, iteration, tile, acc):
        pass


NOOP_HOOK = FaultHook()


class ScheduledFaultHook(FaultHook):
    """Applies a precomputed FaultSchedule and records what was injected.

    For compiled kernels the per-iteration entries are handed over as flat
    arrays (``kernel_arrays``) and the applied flips are collected back
    afterwards. For plain array sites (the update phase, tests) the
    ``maybe_corrupt`` method mutates the accumulator directly.
    """

    def __init__(self, schedule):
        self.schedule = schedule
        self.injected = []
        self._pending = {}
        self._consumed = set()

    def kernel_arrays(self, iteration, dtype):
        entries = self.schedule.for_iteration(iteration)
        if not entries:
            return None
        n = len(entries)
        arrs = (
            np.array([e.tile[0] for e in entries], dtype=np.int64),
            np.array([e.tile[1] for e in entries], dtype=np.int64),
            np.array([e.elem[0] for e in entries], dtype=np.int64),
            np.array([e.elem[1] for e in entries], dtype=np.int64),
            np.array([e.bit for e in entries], dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            np.zeros(n, dtype=np.float64),
            np.zeros(n, dtype=np.float64),
        )
        self._pending[iteration] = entries
        return arrs

    def absorb_kernel_results(self, iteration, applied, before, after):
        entries = self._pending.pop(iteration, [])
        for q, e in enumerate(entries):
            if applied[q]:
                self.injected.append(
                    {
                        "iteration": e.iteration,
                        "tile": e.tile,
                        "elem": e.elem,
                        "bit": e.bit,
                        "before": float(before[q]),
                        "after": float(after[q]),
                        "delta": float(after[q] - before[q]),
                    }
                )

    def maybe_corrupt(self, iteration, tile, acc):
        """Apply any entry scheduled for (iteration, tile) to the array ``acc``.

        Entries are one-shot (transient upsets): a deterministic retry of the
        same site sees a clean run.
        """
        for e in self.schedule.for_iteration(iteration):
            if e.tile != tuple(tile) or e in self._consumed:
                continue
            self._consumed.add(e)
            i, j = e.elem
            if i >= acc.shape[0] or j >= acc.shape[1]:
                continue
            before = acc[i, j]
            if acc.dtype == np.float32:
                after = flip_bit(np.float32(before), e.bit)
            else:
                after = flip_bit(np.float64(before), e.bit)
            acc[i, j] = after
            self.injected.append(
                {
                    "iteration": e.iteration,
                    "tile": e.tile,
                    "elem": e.elem,
                    "bit": e.bit,
                    "before": float(before),
                    "after": float(after),
                    "delta": float(after) - float(before),
                }
            )
