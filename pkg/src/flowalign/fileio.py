"""Flat key=value config files, 8-bit PNG image I/O, CSV helpers.

Images are float arrays in [0, 1] internally; quantization to uint8
happens only at the file boundary.
"""

import csv

import numpy as np
from PIL import Image


def _parse_value(raw):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def read_config(path):
    """Parse a key=value file; '#' starts a comment, blank lines ignored."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            out[key.strip()] = _parse_value(raw)
    return out


def write_config(path, mapping):
    with open(path, "w") as fh:
        for key, value in mapping.items():
            fh.write(f"{key}={value}\n")


def save_png(path, image):
    """Write a (3, h, w) or (h, w) float array in [0, 1] as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    quantized = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized).save(path)


def load_png(path):
    """Read a PNG into a (3, h, w) float array in [0, 1]."""
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
