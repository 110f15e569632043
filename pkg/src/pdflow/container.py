"""On-disk formats.

State container: a little-endian uint32 header length, a JSON header
(d, n_x, K, N, eps), then the field as little-endian complex64 pairs
(re, im) in flat row-major order.  complex64 is a plotting/export format;
round trips lose precision below ~1e-7 relative, which the tests pin.

CSV export is one row per grid point: x coordinates then re/im per
component.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .quantize import StateVector
from .symbols import GridSpec

__all__ = ["save_state", "load_state", "state_to_csv"]

_MAGIC = b"PDF1"


def save_state(u: StateVector, path) -> None:
    g = u.grid
    header = json.dumps({
        "d": g.d, "n_x": g.n_x, "K": g.K, "N": u.N, "eps": g.eps,
    }, sort_keys=True).encode()
    flat = np.ascontiguousarray(u.values.astype(np.complex64))
    pairs = np.empty((flat.size, 2), dtype="<f4")
    pairs[:, 0] = flat.real.ravel()
    pairs[:, 1] = flat.imag.ravel()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(pairs.tobytes())


def load_state(path) -> StateVector:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError("not a state container")
    (hlen,) = struct.unpack("<I", raw[4:8])
    meta = json.loads(raw[8:8 + hlen].decode())
    g = GridSpec(meta["d"], meta["n_x"], meta["K"], meta["eps"])
    n = meta["N"]
    body = np.frombuffer(raw[8 + hlen:], dtype="<f4").reshape(-1, 2)
    if body.shape[0] != g.n_points * n:
        raise ValueError("container length does not match header")
    vals = (body[:, 0] + 1j * body[:, 1]).astype(complex)
    return StateVector(vals.reshape(g.n_points, n), g)


def state_to_csv(u: StateVector, path) -> None:
    g = u.grid
    x = g.x_grid()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        head = [f"x{i + 1}" for i in range(g.d)]
        for c in range(u.N):
            head += [f"re{c + 1}", f"im{c + 1}"]
        w.writerow(head)
        for j in range(g.n_points):
            row = [f"{x[i, j]:.12g}" for i in range(g.d)]
            for c in range(u.N):
                v = u.values[j, c]
                row += [f"{v.real:.12g}", f"{v.imag:.12g}"]
            w.writerow(row)
