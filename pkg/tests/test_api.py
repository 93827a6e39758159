import pytest
import torch
from fastapi.testclient import TestClient

from tetta.api.deps import set_predictor
from tetta.core.config import settings
from tetta.models.domain import DTYPE
from tetta.models.schemas import RelativeView
from tetta.services.predictor_bridge import decode_frame, encode_frame, predict_request
from tetta.services.priors import Condition, ViewBank, make_schedule, oracle_predictor
from tetta.main import app

SHAPE = (4, 4, 3)
PREFIX = settings.API_V1_STR


@pytest.fixture
def client():
    bank = ViewBank([(RelativeView(d_azimuth=90.0), torch.full(SHAPE, 0.25, dtype=DTYPE).numpy())])
    set_predictor(oracle_predictor(bank, make_schedule()))
    yield TestClient(app)
    set_predictor(None)


def _request(view: RelativeView = RelativeView(d_azimuth=90.0)) -> bytes:
    condition = Condition(reference=torch.zeros(SHAPE, dtype=DTYPE), view=view)
    return predict_request(torch.zeros(SHAPE, dtype=DTYPE), condition, 100)


def test_health(client):
    response = client.get(f"{PREFIX}/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "ok"
    assert body["predictor"] == "OraclePredictor"
    assert body["conditions"] == 1


def test_health_without_predictor(monkeypatch):
    set_predictor(None)
    monkeypatch.setattr(settings, "ORACLE_BANK_PATH", None)
    assert TestClient(app).get(f"{PREFIX}/health").status_code == 503


def test_predict_returns_epsilon_frame(client):
    response = client.post(f"{PREFIX}/predict", content=_request())
    assert response.status_code == 200
    assert response.headers["content-type"] == "application/octet-stream"
    header, payloads, _ = decode_frame(response.content)
    assert header["kind"] == "epsilon" and header["t"] == 100
    assert "eps" in payloads


def test_describe_lists_bank_conditions(client):
    response = client.post(f"{PREFIX}/predict", content=encode_frame({"kind": "describe"}))
    header, _, _ = decode_frame(response.content)
    assert header["conditions"] == [[0.0, 90.0, 0.0]]


def test_empty_and_malformed_bodies(client):
    assert client.post(f"{PREFIX}/predict", content=b"").status_code == 400
    assert client.post(f"{PREFIX}/predict", content=b"\x00\x00\x00\x09{").status_code == 400


def test_predictor_errors_are_422(client):
    response = client.post(f"{PREFIX}/predict", content=encode_frame({"kind": "train"}))
    assert response.status_code == 422
    assert decode_frame(response.content)[0]["kind"] == "error"
    # Condición fuera del banco
    response = client.post(f"{PREFIX}/predict", content=_request(RelativeView(d_azimuth=10.0)))
    assert response.status_code == 422


def test_api_key_is_enforced(client, monkeypatch):
    monkeypatch.setattr(settings, "PREDICTOR_API_KEY", "secreto")
    assert client.post(f"{PREFIX}/predict", content=_request()).status_code == 403
    ok = client.post(f"{PREFIX}/predict", content=_request(), headers={"X-TETTA-KEY": "secreto"})
    assert ok.status_code == 200
    # /health queda abierto
    assert client.get(f"{PREFIX}/health").status_code == 200
