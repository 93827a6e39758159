import logging

import uvicorn
from fastapi import FastAPI

# Importaciones locales
from tetta.core.config import apply_thread_limit, configure_logging, settings
from tetta.api.routes import router as api_router

# 1. REGISTRO Y RECURSOS DE CÓMPUTO
configure_logging()
apply_thread_limit()
logger = logging.getLogger(__name__)

# 2. CREACIÓN DE LA APP FASTAPI
app = FastAPI(
    title=settings.PROJECT_NAME,
    version=settings.VERSION,
    description="Servidor del predictor de ruido multivista para la adaptación en tiempo de prueba",
)

# 3. REGISTRO DE RUTAS API
# Esto habilita los endpoints /health y /predict
app.include_router(api_router, prefix=settings.API_V1_STR, tags=["Predictor"])


# 4. PUNTO DE ENTRADA PARA DESARROLLO (Uvicorn)
# En producción (Docker) se usa el comando definido en start.sh
def serve(host: str = "0.0.0.0", port: int = 8080) -> None:
    logger.info(f"Sirviendo el predictor en http://{host}:{port}{settings.API_V1_STR}")
    uvicorn.run(app, host=host, port=port, log_level=settings.LOG_LEVEL.lower())


if __name__ == "__main__":
    serve()
