import logging
from typing import Optional

from fastapi import Header, HTTPException, status

from tetta.core.config import settings
from tetta.services.priors import NoisePredictor, ViewBank, make_schedule, oracle_predictor

logger = logging.getLogger(__name__)

# --- CONFIGURACIÓN DE SEGURIDAD ---
# Si PREDICTOR_API_KEY está definida, el endpoint /predict exige esta cabecera
API_KEY_NAME = "X-TETTA-KEY"

_predictor: Optional[NoisePredictor] = None


def validate_api_key(x_tetta_key: Optional[str] = Header(None)):
    """
    Dependencia para validar que las peticiones vengan de una fuente autorizada.
    Sin PREDICTOR_API_KEY configurada el endpoint queda abierto.
    """
    if settings.PREDICTOR_API_KEY and x_tetta_key != settings.PREDICTOR_API_KEY:
        raise HTTPException(
            status_code=status.HTTP_403_FORBIDDEN,
            detail="Credenciales de API inválidas o faltantes.",
        )
    return x_tetta_key


def set_predictor(predictor: Optional[NoisePredictor]) -> None:
    """Instala el predictor que sirve la API (serve-predictor, pruebas)."""
    global _predictor
    _predictor = predictor


def get_predictor() -> NoisePredictor:
    """Predictor instalado o, en su defecto, el oráculo sobre ORACLE_BANK_PATH."""
    global _predictor
    if _predictor is None:
        if not settings.ORACLE_BANK_PATH:
            raise HTTPException(
                status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
                detail="No hay predictor configurado (defina ORACLE_BANK_PATH).",
            )
        try:
            bank = ViewBank.load(settings.ORACLE_BANK_PATH)
        except FileNotFoundError as e:
            raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail=str(e))
        _predictor = oracle_predictor(bank, make_schedule())
        logger.info(f"Oráculo cargado desde {settings.ORACLE_BANK_PATH} ({len(bank)} vistas)")
    return _predictor
