"""Dense matrix plumbing: synthetic data, squared row norms, and file I/O.

Matrices are plain 2-D C-contiguous numpy arrays of float32 ("single") or
float64 ("double"). Both samples and centroids are stored row-major; the
GEMM core indexes the centroid matrix transposed, it never materializes a
transpose.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

PRECISIONS = {"single": np.float32, "double": np.float64}

_MAGIC = b"FTKM"
_VERSION = 1
# magic(4) + u32 version(4) + u8 precision(1) + reserved(3) + u64 rows(8) + u64 cols(8)
HEADER_SIZE = 28


def dtype_of(precision):
    """Map a precision name (or numpy dtype) to the numpy dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def precision_of(arr):
    """Inverse of :func:`dtype_of` for an array or dtype."""
    dt = np.dtype(arr.dtype if hasattr(arr, "dtype") else arr)
    if dt == np.float32:
        return "single"
    if dt == np.float64:
        return "double"
    raise ValueError(f"unsupported dtype {dt}")


def as_matrix(x, precision=None):
    """Validate and return ``x`` as a 2-D C-contiguous float matrix."""
    dt = dtype_of(precision) if precision is not None else None
    a = np.ascontiguousarray(x, dtype=dt)
    if a.dtype not in (np.float32, np.float64):
        a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def mat_random(rows, cols, precision="single", seed=0, distribution="uniform"):
    """Deterministic random matrix.

    ``distribution`` is either ``"uniform"`` (entries in [0, 1)) or a
    gaussian mixture given as ``("gm", k, spread)`` / ``"gm:k:spread"``:
    k well-separated centers with isotropic gaussian noise of the given
    spread around each.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    dt = dtype_of(precision)
    if distribution == "uniform":
        rng = np.random.default_rng(seed)
        x = rng.random((rows, cols), dtype=np.float64)
        return np.ascontiguousarray(x, dtype=dt)
    if isinstance(distribution, str) and distribution.startswith("gm:"):
        parts = distribution.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad mixture spec {distribution!r}, want gm:k:spread")
        distribution = ("gm", int(parts[1]), float(parts[2]))
    if isinstance(distribution, tuple) and distribution[0] == "gm":
        _, k, spread = distribution
        x, _, _ = gaussian_mixture(rows, cols, k, spread, precision=dt, seed=seed)
        return x
    raise ValueError(f"unknown distribution {distribution!r}")


def gaussian_mixture(rows, cols, k, spread, precision="single", seed=0):
    """Sample ``rows`` points around ``k`` well-separated centers.

    Returns ``(x, labels, centers)`` where ``labels`` gives the generating
    component of each row. Centers are drawn in the unit cube and rescaled
    so the minimum pairwise distance is at least 20x the spread, which keeps
    component recovery unambiguous for clustering tests.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    if k < 1 or k > rows:
        raise ValueError(f"need 1 <= k <= rows, got k={k}, rows={rows}")
    dt = dtype_of(precision)
    rng = np.random.default_rng(seed)
    centers = rng.random((k, cols))
    if k > 1:
        d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        min_dist = np.sqrt(d2.min())
        target = 20.0 * spread
        if min_dist < target:
            centers *= target / max(min_dist, 1e-12)
    labels = rng.integers(0, k, size=rows)
    x = centers[labels] + spread * rng.standard_normal((rows, cols))
    return np.ascontiguousarray(x, dtype=dt), labels.astype(np.int64), centers


def row_sq_norms(x):
    """Squared Euclidean norm of each row, summed left-to-right in the row's dtype."""
    from . import _kernels as _k

    x = as_matrix(x)
    out = np.empty(x.shape[0], dtype=x.dtype)
    _k._row_sq_norms(x, out)
    return out


def mat_store(x, path, format="ftkm-binary"):
    """Write a matrix. ``ftkm-binary`` is bit-exact; CSV keeps 17 significant digits."""
    x = as_matrix(x)
    if format == "ftkm-binary":
        code = 4 if x.dtype == np.float32 else 8
        header = _MAGIC + struct.pack("<IB3x", _VERSION, code)
        header += struct.pack("<QQ", x.shape[0], x.shape[1])
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<")).tobytes())
    elif format == "csv":
        np.savetxt(path, x, fmt="%.17g", delimiter=",")
    else:
        raise ValueError(f"unknown format {format!r}")


def mat_load(path, format="ftkm-binary", precision="double"):
    """Load a matrix written by :func:`mat_store`.

    CSV has no embedded precision; ``precision`` selects the target dtype.
    Malformed cells raise :class:`FormatError` with their 1-based position.
    """
    if format == "ftkm-binary":
        with open(path, "rb") as fh:
            header = fh.read(HEADER_SIZE)
            if len(header) < HEADER_SIZE or header[:4] != _MAGIC:
                raise FormatError(f"{path}: not an ftkm-binary file")
            version, code = struct.unpack("<IB", header[4:9])
            if version != _VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            if code not in (4, 8):
                raise FormatError(f"{path}: bad precision code {code}")
            rows, cols = struct.unpack("<QQ", header[12:28])
            if rows < 1 or cols < 1 or rows * cols > 2**48:
                raise FormatError(f"{path}: implausible dimensions {rows}x{cols}")
            dt = np.dtype("<f4") if code == 4 else np.dtype("<f8")
            payload = fh.read(rows * cols * dt.itemsize)
        if len(payload) != rows * cols * dt.itemsize:
            raise FormatError(f"{path}: truncated payload")
        x = np.frombuffer(payload, dtype=dt).reshape(rows, cols)
        x = np.ascontiguousarray(x, dtype=np.float32 if code == 4 else np.float64)
        if not np.isfinite(x).all():
            i, j = np.argwhere(~np.isfinite(x))[0]
            raise FormatError(
                f"{path}: non-finite value at ({i + 1},{j + 1})", row=i + 1, col=j + 1
            )
        return x
    if format == "csv":
        return _load_csv(path, dtype_of(precision))
    raise ValueError(f"unknown format {format!r}")


def _load_csv(path, dt):
    rows = []
    ncols = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            toks = line.split(",")
            if ncols is None:
                ncols = len(toks)
            elif len(toks) != ncols:
                raise FormatError(
                    f"{path}: row {lineno} has {len(toks)} columns, expected {ncols}",
                    row=lineno,
                    col=len(toks),
                )
            vals = []
            for colno, tok in enumerate(toks, start=1):
                try:
                    v = float(tok)
                except ValueError:
                    raise FormatError(
                        f"{path}: bad value {tok.strip()!r} at ({lineno},{colno})",
                        row=lineno,
                        col=colno,
                    ) from None
                if not np.isfinite(v):
                    raise FormatError(
                        f"{path}: non-finite value at ({lineno},{colno})",
                        row=lineno,
                        col=colno,
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: empty matrix")
    return np.ascontiguousarray(np.array(rows, dtype=np.float64), dtype=dt)
