"""Binary PPM (P6) encoding, the canonical bit-exact image format."""

from __future__ import annotations

import numpy as np
import torch

from .numcore import NumericError


def quantize(pixels: torch.Tensor) -> np.ndarray:
    """Map [0,1] floats to bytes with round-half-up: floor(v * 255 + 0.5)."""
    arr = pixels.detach().to(torch.float64).numpy()
    return np.floor(arr * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def encode_image(pixels: torch.Tensor, path) -> None:
    """Write an (H, W, 3) image in [0,1] as binary PPM."""
    if pixels.dim() != 3 or pixels.shape[-1] != 3:
        raise NumericError("encode_image expects an (H, W, 3) tensor")
    h, w = pixels.shape[:2]
    data = quantize(pixels).tobytes()
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data)


def decode_image(path) -> torch.Tensor:
    """Read a binary PPM back to an (H, W, 3) float tensor in [0,1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise NumericError(f"{path}: not a binary PPM file")
    # header: magic, width, height, maxval, single whitespace, then raw bytes
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise NumericError(f"{path}: unsupported maxval {maxval}")
    raw = blob[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise NumericError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return torch.from_numpy(arr.astype(np.float32) / 255.0)
