import logging
import os
from typing import Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # --- INFORMACIÓN DEL PROYECTO ---
    PROJECT_NAME: str = "TETTA - Adaptación en tiempo de prueba de mallas texturizadas"
    VERSION: str = "1.0.0"
    API_V1_STR: str = "/api/v1"

    # --- REGISTRO (LOGGING) ---
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # --- CÓMPUTO ---
    # Límite de hilos de torch (intra-op); 0 = dejar el valor por defecto
    TETTA_THREADS: int = 0
    DEFAULT_GRID_RESOLUTION: int = 64
    DEFAULT_RENDER_SIZE: int = 128

    # --- PREDICTOR EXTERNO ---
    PREDICTOR_TIMEOUT: float = 120.0
    # Clave opcional para proteger el endpoint HTTP del predictor
    PREDICTOR_API_KEY: Optional[str] = None
    # Banco de vistas que sirve el rol 'predictor'
    ORACLE_BANK_PATH: Optional[str] = os.getenv("ORACLE_BANK_PATH")

    class Config:
        # Permite leer directamente de un archivo .env si existe
        case_sensitive = True
        env_file = ".env"


# Instancia global para importar en todo el proyecto
settings = Settings()


def configure_logging(level: Optional[str] = None) -> None:
    """Configura el logger raíz con el nivel definido en la configuración."""
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
    )


def apply_thread_limit() -> None:
    """Aplica TETTA_THREADS a torch (paralelismo de los bucles de píxeles)."""
    if settings.TETTA_THREADS > 0:
        import torch

        torch.set_num_threads(settings.TETTA_THREADS)
