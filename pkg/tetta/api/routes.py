from fastapi import APIRouter, Depends, HTTPException, Request, Response, status

from tetta.api.deps import get_predictor, validate_api_key
from tetta.core.config import settings
from tetta.core.exceptions import PredictorError
from tetta.services.predictor_bridge import decode_frame, handle_request
from tetta.services.priors import NoisePredictor

# Crear el Router
router = APIRouter()

OCTET_STREAM = "application/octet-stream"


# ---------------------------------------------------------
# 1. HEALTH CHECK (lo consulta el cliente HTTP antes de predecir)
# ---------------------------------------------------------
@router.get("/health", status_code=status.HTTP_200_OK)
def health_check(predictor: NoisePredictor = Depends(get_predictor)):
    """
    Verifica que la API responda y que haya un predictor cargado.
    Devuelve 503 (vía get_predictor) si no hay predictor disponible.
    """
    conditions = getattr(predictor, "conditions", None)
    return {
        "status": "ok",
        "version": settings.VERSION,
        "predictor": type(predictor).__name__,
        "conditions": None if conditions is None else len(conditions),
    }


# ---------------------------------------------------------
# 2. PREDICCIÓN DE RUIDO (trama binaria del puente)
# ---------------------------------------------------------
@router.post("/predict", dependencies=[Depends(validate_api_key)])
async def predict(request: Request, predictor: NoisePredictor = Depends(get_predictor)):
    """
    Recibe una trama 'predict' o 'describe' y responde con otra trama.
    Los errores del predictor viajan como trama 'error' con estado 422.
    """
    body = await request.body()
    if not body:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Cuerpo vacío: se esperaba una trama")
    try:
        decode_frame(body)
    except PredictorError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    response = handle_request(predictor, body)
    header, _, _ = decode_frame(response)
    code = status.HTTP_422_UNPROCESSABLE_ENTITY if header.get("kind") == "error" else status.HTTP_200_OK
    return Response(content=response, media_type=OCTET_STREAM, status_code=code)
