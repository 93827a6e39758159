"""
Puente hacia un predictor de ruido externo.

Trama: [u32 big-endian: longitud de la cabecera][cabecera JSON][payloads PFM].
La cabecera lista los payloads ({"name", "size"}) en el orden en que siguen.

Solicitud "predict": payloads z_t y reference; cabecera con t y la vista relativa.
Respuesta "epsilon": payload eps. Respuesta "error": cabecera con "message".
Solicitud "describe": respuesta con las condiciones que cubre el predictor (o null).

Endpoints: tcp://host:puerto, http(s)://host[:puerto], replay://ruta/al/log.
"""
import hashlib
import json
import logging
import socket
import socketserver
import struct
import threading
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, List, Optional, Tuple
from urllib.parse import urlparse

import requests
import torch

from tetta.core.config import settings
from tetta.core.exceptions import PredictorError, TettaError
from tetta.models.domain import as_tensor
from tetta.models.schemas import RelativeView
from tetta.services.image_io import decode_pfm, encode_pfm
from tetta.services.priors import Condition, NoisePredictor

logger = logging.getLogger(__name__)

LENGTH = struct.Struct(">I")
MAX_HEADER = 1 << 20


# --- TRAMAS ---


def encode_frame(header: dict, payloads: Optional[Dict[str, bytes]] = None) -> bytes:
    payloads = payloads or {}
    header = dict(header, payloads=[{"name": name, "size": len(data)} for name, data in payloads.items()])
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return LENGTH.pack(len(raw)) + raw + b"".join(payloads.values())


def _parse_header(raw: bytes) -> dict:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PredictorError(f"Cabecera JSON malformada: {exc}")
    if not isinstance(header, dict) or not isinstance(header.get("payloads", []), list):
        raise PredictorError("La cabecera debe ser un objeto con una lista 'payloads'")
    return header


def _split_payloads(header: dict, body: bytes) -> Dict[str, bytes]:
    payloads, offset = {}, 0
    for entry in header.get("payloads", []):
        size = int(entry["size"])
        if offset + size > len(body):
            raise PredictorError(f"Payload '{entry['name']}' truncado")
        payloads[entry["name"]] = body[offset:offset + size]
        offset += size
    return payloads


def decode_frame(data: bytes) -> Tuple[dict, Dict[str, bytes], int]:
    """Decodifica una trama desde el inicio de `data`; devuelve también los bytes consumidos."""
    if len(data) < LENGTH.size:
        raise PredictorError("Trama truncada: falta la longitud de la cabecera")
    (length,) = LENGTH.unpack_from(data)
    if length > MAX_HEADER or len(data) < LENGTH.size + length:
        raise PredictorError(f"Trama truncada o cabecera demasiado grande ({length} bytes)")
    header = _parse_header(data[LENGTH.size:LENGTH.size + length])
    start = LENGTH.size + length
    total = sum(int(entry["size"]) for entry in header.get("payloads", []))
    payloads = _split_payloads(header, data[start:start + total])
    return header, payloads, start + total


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    chunks, remaining = [], size
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise EOFError("Conexión cerrada a mitad de trama")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> Optional[bytes]:
    """Lee una trama completa de un flujo; None en fin de flujo limpio."""
    prefix = stream.read(LENGTH.size)
    if not prefix:
        return None
    if len(prefix) < LENGTH.size:
        prefix += _read_exact(stream, LENGTH.size - len(prefix))
    (length,) = LENGTH.unpack(prefix)
    if length > MAX_HEADER:
        raise PredictorError(f"Cabecera demasiado grande ({length} bytes)")
    raw = _read_exact(stream, length)
    header = _parse_header(raw)
    total = sum(int(entry["size"]) for entry in header.get("payloads", []))
    return prefix + raw + _read_exact(stream, total)


def iter_frames(data: bytes) -> Iterator[Tuple[dict, Dict[str, bytes], bytes]]:
    offset = 0
    while offset < len(data):
        header, payloads, used = decode_frame(data[offset:])
        yield header, payloads, data[offset:offset + used]
        offset += used


def predict_request(z_t: torch.Tensor, condition: Condition, t: int) -> bytes:
    return encode_frame(
        {"kind": "predict", "t": int(t), "view": condition.view.model_dump()},
        {"z_t": encode_pfm(z_t), "reference": encode_pfm(condition.reference)},
    )


def _conditions_from(header: dict) -> Optional[List[RelativeView]]:
    conditions = header.get("conditions")
    if conditions is None:
        return None
    return [RelativeView(d_elevation=c[0], d_azimuth=c[1], d_radius=c[2]) for c in conditions]


# --- CLIENTES ---


class PredictionLog:
    """Registro binario de pares solicitud/respuesta (tramas consecutivas)."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_bytes(b"")

    def append(self, request: bytes, response: bytes) -> None:
        with self.path.open("ab") as handle:
            handle.write(request)
            handle.write(response)


class BridgePredictor:
    """Base de los clientes: arma la solicitud, valida la respuesta y registra el par."""

    def __init__(self, record: Optional[Path] = None):
        self.log = PredictionLog(record) if record else None
        self.conditions: Optional[List[RelativeView]] = None

    def _exchange(self, request: bytes) -> bytes:
        raise NotImplementedError

    def _call(self, request: bytes) -> Tuple[dict, Dict[str, bytes]]:
        response = self._exchange(request)
        if self.log is not None:
            self.log.append(request, response)
        header, payloads, _ = decode_frame(response)
        if header.get("kind") == "error":
            raise PredictorError(f"El predictor remoto respondió con error: {header.get('message')}")
        return header, payloads

    def describe(self) -> Optional[List[RelativeView]]:
        header, _ = self._call(encode_frame({"kind": "describe"}))
        self.conditions = _conditions_from(header)
        return self.conditions

    def predict(self, z_t: torch.Tensor, condition: Condition, t: int) -> torch.Tensor:
        header, payloads = self._call(predict_request(z_t, condition, t))
        if header.get("kind") != "epsilon" or "eps" not in payloads:
            raise PredictorError(f"Respuesta malformada del predictor: {header}")
        try:
            eps = as_tensor(decode_pfm(payloads["eps"]))
        except TettaError as exc:
            raise PredictorError(f"Payload 'eps' inválido: {exc}")
        if eps.shape != z_t.shape:
            raise PredictorError(f"ε̂ de forma {tuple(eps.shape)}, se esperaba {tuple(z_t.shape)}")
        return eps


class TcpPredictor(BridgePredictor):
    def __init__(self, host: str, port: int, timeout: float, record: Optional[Path] = None):
        super().__init__(record)
        self.address = (host, port)
        self.timeout = timeout
        self.describe()
        logger.info(f"Predictor TCP conectado en {host}:{port}")

    def _exchange(self, request: bytes) -> bytes:
        try:
            with socket.create_connection(self.address, timeout=self.timeout) as conn:
                conn.sendall(request)
                with conn.makefile("rb") as stream:
                    response = read_frame(stream)
        except (OSError, EOFError) as exc:
            raise PredictorError(f"Fallo de comunicación con {self.address[0]}:{self.address[1]}: {exc}")
        if response is None:
            raise PredictorError("El predictor cerró la conexión sin responder")
        return response


class HttpPredictor(BridgePredictor):
    def __init__(self, base_url: str, timeout: float, api_key: Optional[str] = None, record: Optional[Path] = None):
        super().__init__(record)
        self.base_url = base_url.rstrip("/") + settings.API_V1_STR
        self.timeout = timeout
        self.headers = {"Content-Type": "application/octet-stream"}
        if api_key:
            self.headers["X-TETTA-KEY"] = api_key
        try:
            health = requests.get(f"{self.base_url}/health", timeout=self.timeout, headers=self.headers)
            health.raise_for_status()
        except requests.RequestException as exc:
            raise PredictorError(f"Predictor HTTP inalcanzable en {self.base_url}: {exc}")
        self.describe()
        logger.info(f"Predictor HTTP conectado en {self.base_url}")

    def _exchange(self, request: bytes) -> bytes:
        try:
            response = requests.post(f"{self.base_url}/predict", data=request, headers=self.headers, timeout=self.timeout)
            response.raise_for_status()
        except requests.RequestException as exc:
            raise PredictorError(f"Fallo en la solicitud al predictor HTTP: {exc}")
        return response.content


class ReplayPredictor(BridgePredictor):
    """Reproduce un registro: cada solicitud debe coincidir byte a byte con la registrada."""

    def __init__(self, log_path: Path):
        super().__init__(record=None)
        log_path = Path(log_path)
        if not log_path.exists():
            raise PredictorError(f"No existe el registro de reproducción: {log_path}")
        frames = [raw for _, _, raw in iter_frames(log_path.read_bytes())]
        if len(frames) % 2:
            raise PredictorError(f"Registro impar ({len(frames)} tramas): falta una respuesta")
        self.pairs = list(zip(frames[0::2], frames[1::2]))
        self.cursor = 0
        self.describe()
        logger.info(f"Predictor en reproducción desde {log_path} ({len(self.pairs)} pares)")

    def _exchange(self, request: bytes) -> bytes:
        if self.cursor >= len(self.pairs):
            raise PredictorError("El registro de reproducción se agotó")
        recorded, response = self.pairs[self.cursor]
        if recorded != request:
            digest = hashlib.sha256(request).hexdigest()[:12]
            raise PredictorError(f"La solicitud {self.cursor} ({digest}) no coincide con la registrada")
        self.cursor += 1
        return response


def external_predictor(
    endpoint: str,
    timeout: Optional[float] = None,
    record: Optional[Path] = None,
    api_key: Optional[str] = None,
) -> NoisePredictor:
    """Construye el cliente según el esquema del endpoint."""
    timeout = settings.PREDICTOR_TIMEOUT if timeout is None else timeout
    parsed = urlparse(endpoint)
    if parsed.scheme == "tcp":
        if not parsed.hostname or parsed.port is None:
            raise PredictorError(f"Endpoint TCP inválido: {endpoint}")
        return TcpPredictor(parsed.hostname, parsed.port, timeout, record)
    if parsed.scheme in ("http", "https"):
        return HttpPredictor(endpoint, timeout, api_key or settings.PREDICTOR_API_KEY, record)
    if parsed.scheme == "replay":
        return ReplayPredictor(Path(endpoint[len("replay://"):]))
    raise PredictorError(f"Esquema de endpoint no soportado: '{parsed.scheme}' ({endpoint})")


# --- SERVIDOR ---


def handle_request(predictor: NoisePredictor, request: bytes) -> bytes:
    """Atiende una trama de solicitud con un predictor local; los errores viajan como trama 'error'."""
    try:
        header, payloads, _ = decode_frame(request)
        kind = header.get("kind")
        if kind == "describe":
            conditions = getattr(predictor, "conditions", None)
            listed = None if conditions is None else [list(c.as_tuple()) for c in conditions]
            return encode_frame({"kind": "describe", "conditions": listed})
        if kind != "predict":
            raise PredictorError(f"Tipo de solicitud desconocido: {kind}")
        z_t = as_tensor(decode_pfm(payloads["z_t"]))
        reference = as_tensor(decode_pfm(payloads["reference"]))
        view = RelativeView(**header["view"])
        eps = predictor.predict(z_t, Condition(reference=reference, view=view), int(header["t"]))
        return encode_frame({"kind": "epsilon", "t": int(header["t"])}, {"eps": encode_pfm(eps)})
    except (TettaError, KeyError, ValueError) as exc:
        logger.warning(f"Solicitud al predictor rechazada: {exc}")
        return encode_frame({"kind": "error", "message": str(exc)})


class _FrameHandler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                request = read_frame(self.rfile)
            except (EOFError, PredictorError) as exc:
                logger.warning(f"Conexión descartada: {exc}")
                return
            if request is None:
                return
            self.wfile.write(handle_request(self.server.predictor, request))
            self.wfile.flush()


class PredictorTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: Tuple[str, int], predictor: NoisePredictor):
        self.predictor = predictor
        super().__init__(address, _FrameHandler)


def start_tcp_server(
    predictor: NoisePredictor, host: str = "127.0.0.1", port: int = 0
) -> Tuple[PredictorTCPServer, threading.Thread]:
    """Lanza el servidor en un hilo; port=0 elige un puerto libre (server.server_address)."""
    server = PredictorTCPServer((host, port), predictor)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    logger.info(f"Servidor TCP del predictor escuchando en {server.server_address[0]}:{server.server_address[1]}")
    return server, thread
