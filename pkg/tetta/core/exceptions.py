from typing import Any, Dict, Optional


class TettaError(Exception):
    """Error base de todo el motor."""


class ConfigurationError(TettaError):
    """Parámetros o precondiciones de configuración inválidos."""


class ContractError(TettaError):
    """Violación de contrato: tamaños incompatibles, datos de bookkeeping ausentes, etc."""


class ViewLookupError(TettaError):
    """La condición consultada no está cubierta por el banco de vistas."""


class PredictorError(TettaError):
    """Falla del predictor de ruido (puente externo, timeout, respuesta malformada)."""


class MeshParseError(TettaError):
    """Archivo OBJ malformado; incluye el número de línea (base 1)."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        if line is None:
            where = path or "OBJ"
        else:
            where = f"{path}:{line}" if path else f"línea {line}"
        super().__init__(f"{where}: {message}")


class ImageFormatError(TettaError):
    """Extensión de imagen no soportada o archivo corrupto."""


class NonFiniteLossError(TettaError):
    """Pérdida no finita durante la optimización; lleva una instantánea de diagnóstico."""

    def __init__(self, message: str, snapshot: Dict[str, Any]):
        self.snapshot = snapshot
        super().__init__(message)
