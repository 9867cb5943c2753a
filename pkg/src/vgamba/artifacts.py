"""Output writers: CSV with a header row, binary 8-bit PGM (P5), plain-text summaries."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NONDET_PREFIX = "# non-deterministic columns: "


def write_csv(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    nondeterministic: Sequence[str] = (),
) -> Path:
    """Header row first. Wall-clock columns are listed in one leading ``#`` line."""
    path = Path(path)
    unknown = set(nondeterministic) - set(header)
    if unknown:
        raise ValueError(f"non-deterministic columns not in header: {sorted(unknown)}")
    with path.open("w", newline="") as fh:
        if nondeterministic:
            fh.write(NONDET_PREFIX + ",".join(nondeterministic) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]], list[str]]:
    """Returns (header, rows, non-deterministic column names)."""
    lines = Path(path).read_text().splitlines()
    nondet: list[str] = []
    if lines and lines[0].startswith(NONDET_PREFIX):
        nondet = lines[0][len(NONDET_PREFIX) :].split(",")
        lines = lines[1:]
    table = list(csv.reader(lines))
    return table[0], table[1:], nondet


def to_uint8(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear map of [lo, hi] (default: data range) onto 0..255, clipped."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.clip(np.rint((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray, lo: float | None = 0.0, hi: float | None = 1.0) -> Path:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {img.shape}")
    data = img if img.dtype == np.uint8 else to_uint8(img, lo, hi)
    path = Path(path)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path} is not an 8-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1 :]  # exactly one whitespace byte after maxval
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.write_text(text if text.endswith("\n") else text + "\n")
    return path
