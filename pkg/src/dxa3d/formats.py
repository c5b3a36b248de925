"""On-disk formats: bit-packed volumes, 16-bit PGM images, key=value files."""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np

from .phantom import PhantomParams, VoxelMask


# --- volumes: "Z X Y voxel_size_mm\n" then little-endian packed bits --------------

def volume_to_bytes(mask: VoxelMask) -> bytes:
    z, x, y = mask.occupancy.shape
    header = f"{z} {x} {y} {mask.voxel_size_mm:.6f}\n".encode("ascii")
    return header + np.packbits(mask.occupancy.reshape(-1), bitorder="little").tobytes()


def volume_from_bytes(raw: bytes) -> VoxelMask:
    nl = raw.index(b"\n")
    z, x, y, size = raw[:nl].decode("ascii").split()
    z, x, y = int(z), int(x), int(y)
    bits = np.unpackbits(np.frombuffer(raw[nl + 1 :], dtype=np.uint8), bitorder="little")
    if bits.size < z * x * y:
        raise ValueError("truncated volume payload")
    return VoxelMask(bits[: z * x * y].astype(bool).reshape(z, x, y), float(size))


def save_volume(mask: VoxelMask, path) -> None:
    Path(path).write_bytes(volume_to_bytes(mask))


def load_volume(path) -> VoxelMask:
    return volume_from_bytes(Path(path).read_bytes())


# --- images: binary PGM, maxval 65535, linear scale recorded in a comment ------------

def save_pgm(img: np.ndarray, path, scale: float | None = None) -> float:
    """Write ``round(img * scale)`` as 16-bit PGM; returns the scale used.

    By default the scale maps the image max to 65535. Negative values clip to 0.
    """
    img = np.asarray(img, dtype=np.float64)
    if scale is None:
        peak = float(img.max()) if img.size else 0.0
        scale = 65535.0 / peak if peak > 0 else 1.0
    q = np.clip(np.rint(img * scale), 0, 65535).astype(">u2")
    h, w = img.shape
    header = f"P5\n# scale {scale!r}\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())
    return scale


def load_pgm(path) -> np.ndarray:
    """Read a P5 16-bit PGM back to float, undoing the recorded scale."""
    raw = Path(path).read_bytes()
    tokens, scale, pos = [], 1.0, 0
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "scale":
                scale = float(parts[1])
            continue
        tokens += line.split()
    if tokens[0] != "P5" or int(tokens[3]) != 65535:
        raise ValueError(f"{path}: expected 16-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos : pos + 2 * w * h], dtype=">u2").reshape(h, w)
    return data.astype(np.float64) / scale


# --- key=value ---------------------------------------------------------------------

def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def params_to_text(p: PhantomParams) -> str:
    lines = []
    for f in fields(p):
        v = getattr(p, f.name)
        if isinstance(v, tuple):
            v = " ".join(repr(float(a)) for a in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> PhantomParams:
    kv = parse_key_values(text)
    kw = {}
    for f in fields(PhantomParams):
        if f.name not in kv:
            continue
        v = kv[f.name]
        if f.name in ("rib_count", "seed"):
            kw[f.name] = int(v)
        elif f.name.endswith(("amplitudes", "phases")):
            kw[f.name] = tuple(float(a) for a in v.split())
        else:
            kw[f.name] = float(v)
    return PhantomParams(**kw)
