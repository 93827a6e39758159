"""
Imágenes: PNG (8 bits sRGB <-> RGB lineal, Pillow) y PFM (float32 lineal).
"""
import io
import logging
import re
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

from tetta.core.exceptions import ImageFormatError
from tetta.core.storage import atomic_write_bytes

logger = logging.getLogger(__name__)

SUPPORTED = (".png", ".pfm")
_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def srgb_to_linear(values: np.ndarray) -> np.ndarray:
    """EOTF sRGB."""
    c = np.asarray(values, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(values: np.ndarray) -> np.ndarray:
    """OETF sRGB (entrada recortada a [0, 1])."""
    c = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _as_array(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        return image.detach().cpu().numpy()
    return np.asarray(image)


def _suffix(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED:
        raise ImageFormatError(f"Formato de imagen no soportado '{suffix or path.name}' (use .png o .pfm)")
    return suffix


# --- PFM ---


def encode_pfm(image) -> bytes:
    """PF (H, W, 3) o Pf (H, W); little-endian (escala -1), filas de abajo hacia arriba."""
    data = _as_array(image).astype("<f4")
    if data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    elif data.ndim == 2:
        kind = b"Pf"
    else:
        raise ImageFormatError(f"PFM requiere (H, W) o (H, W, 3), se recibió {data.shape}")
    height, width = data.shape[:2]
    header = kind + b"\n" + f"{width} {height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(data[::-1]).tobytes()


def decode_pfm(payload: bytes) -> np.ndarray:
    match = _PFM_HEADER.match(payload)
    if match is None:
        raise ImageFormatError("Cabecera PFM inválida")
    kind, width, height, scale = match.group(1), int(match.group(2)), int(match.group(3)), float(match.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = payload[match.end():]
    expected = width * height * channels * 4
    if len(body) < expected:
        raise ImageFormatError(f"PFM truncado: {len(body)} bytes, se esperaban {expected}")
    data = np.frombuffer(body[:expected], dtype=dtype).astype(np.float32)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape)[::-1].copy()


# --- LECTURA / ESCRITURA ---


def load_image(path: Union[str, Path]) -> np.ndarray:
    """
    Devuelve valores lineales: PNG -> float64 en [0, 1] (EOTF sRGB),
    PFM -> float32 tal cual. RGB (H, W, 3) o escala de grises (H, W).
    """
    path = Path(path)
    suffix = _suffix(path)
    if not path.exists():
        raise FileNotFoundError(f"No existe la imagen: {path}")
    if suffix == ".pfm":
        return decode_pfm(path.read_bytes())
    with Image.open(path) as img:
        if img.mode in ("L", "I;16", "1"):
            pixels = np.asarray(img.convert("L"), dtype=np.float64)
        else:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float64)
    return srgb_to_linear(pixels / 255.0)


def load_mask(path: Union[str, Path], threshold: float = 0.5) -> np.ndarray:
    """Máscara binaria (H, W) en {0, 1}; para RGB se usa la media de canales."""
    image = load_image(path)
    if image.ndim == 3:
        image = image.mean(axis=2)
    return (image > threshold).astype(np.float64)


def save_image(image, path: Union[str, Path]) -> Path:
    """Escribe PNG (OETF sRGB, 8 bits) o PFM (float32) de forma atómica."""
    path = Path(path)
    suffix = _suffix(path)
    data = _as_array(image)
    if suffix == ".pfm":
        payload = encode_pfm(data)
    else:
        if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
            raise ImageFormatError(f"PNG requiere (H, W) o (H, W, 3), se recibió {data.shape}")
        pixels = np.round(linear_to_srgb(data) * 255.0).astype(np.uint8)
        buffer = io.BytesIO()
        Image.fromarray(pixels).save(buffer, format="PNG")
        payload = buffer.getvalue()
    atomic_write_bytes(path, payload)
    logger.debug(f"Imagen {data.shape} guardada en {path}")
    return path
