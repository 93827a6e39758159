import pandas as pd
import pytest
import torch

from tetta.core.exceptions import PredictorError
from tetta.models.domain import DTYPE
from tetta.models.schemas import CameraPose, Intrinsics, RelativeView, SyntheticReference, TTAConfig
from tetta.services.experiment import synthesize_reference, with_material
from tetta.services.fixtures import sphere_mesh
from tetta.services.predictor_bridge import (
    ReplayPredictor,
    TcpPredictor,
    decode_frame,
    encode_frame,
    external_predictor,
    handle_request,
    iter_frames,
    predict_request,
    start_tcp_server,
)
from tetta.services.priors import (
    Condition,
    RenderedViewBank,
    make_schedule,
    oracle_predictor,
    random_noise,
    sds_gradient,
)
from tetta.services.tta import TTAInputs, run_tta

SHAPE = (6, 5, 3)

# Representable en float32: el viaje por PFM no lo altera
FIXED_EPS = random_noise(SHAPE, seed=0).to(torch.float32).to(DTYPE)


class FixedPredictor:
    """Devuelve siempre el mismo ε̂ y anota las solicitudes recibidas."""

    conditions = [RelativeView(d_azimuth=90.0), RelativeView(d_azimuth=180.0)]

    def __init__(self):
        self.calls = []

    def predict(self, z_t, condition, t):
        self.calls.append((condition.view, t))
        return FIXED_EPS.clone()


def _condition() -> Condition:
    return Condition(reference=torch.zeros(SHAPE, dtype=DTYPE), view=RelativeView(d_azimuth=90.0))


@pytest.fixture
def tcp_server():
    predictor = FixedPredictor()
    server, thread = start_tcp_server(predictor)
    yield server, predictor
    server.shutdown()
    server.server_close()
    thread.join(timeout=5)


def _endpoint(server) -> str:
    host, port = server.server_address[:2]
    return f"tcp://{host}:{port}"


# --- TRAMAS ---


def test_frames_concatenate_and_split():
    first = encode_frame({"kind": "describe"})
    second = encode_frame({"kind": "epsilon", "t": 3}, {"eps": b"abc", "extra": b""})
    frames = list(iter_frames(first + second))
    assert [h["kind"] for h, _, _ in frames] == ["describe", "epsilon"]
    assert frames[1][1] == {"eps": b"abc", "extra": b""}
    assert frames[1][2] == second


@pytest.mark.parametrize("data", [b"\x00\x00", b"\x00\x00\x00\x05{}", b"\x00\x00\x00\x02[]"])
def test_decode_frame_rejects_malformed(data):
    with pytest.raises(PredictorError):
        decode_frame(data)


def test_handle_request_errors_travel_as_frames():
    predictor = FixedPredictor()
    header, _, _ = decode_frame(handle_request(predictor, encode_frame({"kind": "train"})))
    assert header["kind"] == "error"
    assert "train" in header["message"]
    header, _, _ = decode_frame(handle_request(predictor, b"\xff\xff"))
    assert header["kind"] == "error"


def test_handle_request_predict_and_describe():
    predictor = FixedPredictor()
    request = predict_request(torch.zeros(SHAPE, dtype=DTYPE), _condition(), 42)
    header, payloads, _ = decode_frame(handle_request(predictor, request))
    assert header == {"kind": "epsilon", "t": 42, "payloads": [{"name": "eps", "size": len(payloads["eps"])}]}
    assert predictor.calls == [(RelativeView(d_azimuth=90.0), 42)]

    header, _, _ = decode_frame(handle_request(predictor, encode_frame({"kind": "describe"})))
    assert header["conditions"] == [[0.0, 90.0, 0.0], [0.0, 180.0, 0.0]]


# --- CLIENTE TCP ---


def test_tcp_predictor_gives_zero_sds_gradient(tcp_server):
    server, predictor = tcp_server
    client = external_predictor(_endpoint(server), timeout=5.0)
    assert isinstance(client, TcpPredictor)
    assert client.conditions == FixedPredictor.conditions

    schedule = make_schedule()
    x = torch.rand(SHAPE, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    grad = sds_gradient(x, _condition(), 500, FIXED_EPS.clone(), client, schedule)
    assert torch.count_nonzero(grad) == 0
    assert predictor.calls[-1][1] == 500


def test_tcp_unreachable_endpoint():
    with pytest.raises(PredictorError):
        external_predictor("tcp://127.0.0.1:1", timeout=0.5)


@pytest.mark.parametrize("endpoint", ["ftp://host/x", "tcp://127.0.0.1", "localhost:9000"])
def test_unsupported_endpoints(endpoint):
    with pytest.raises(PredictorError):
        external_predictor(endpoint, timeout=0.5)


# --- REGISTRO Y REPRODUCCIÓN ---


def test_record_then_replay(tcp_server, tmp_path):
    server, _ = tcp_server
    log = tmp_path / "predictor.log"
    z_t = torch.rand(SHAPE, dtype=DTYPE, generator=torch.Generator().manual_seed(2))

    live = external_predictor(_endpoint(server), timeout=5.0, record=log)
    recorded = live.predict(z_t, _condition(), 7)

    replay = external_predictor(f"replay://{log}")
    assert isinstance(replay, ReplayPredictor)
    assert replay.conditions == FixedPredictor.conditions
    assert torch.equal(replay.predict(z_t, _condition(), 7), recorded)
    with pytest.raises(PredictorError):
        replay.predict(z_t, _condition(), 7)


def test_replay_rejects_different_request(tcp_server, tmp_path):
    server, _ = tcp_server
    log = tmp_path / "predictor.log"
    z_t = torch.zeros(SHAPE, dtype=DTYPE)
    external_predictor(_endpoint(server), timeout=5.0, record=log).predict(z_t, _condition(), 7)

    replay = ReplayPredictor(log)
    with pytest.raises(PredictorError):
        replay.predict(z_t, _condition(), 8)


def test_replay_missing_log(tmp_path):
    with pytest.raises(PredictorError):
        ReplayPredictor(tmp_path / "nada.log")


def test_replayed_run_reproduces_history(tmp_path, uniform_env):
    config = TTAConfig(
        grid_resolution=8,
        fit_points=200,
        fit_iters=2,
        stage_a_iters=0,
        stage_b_iters=3,
        views_per_iter=2,
        intrinsics=Intrinsics(width=16, height=16),
        eval_every=0,
    )
    gt = sphere_mesh(radius=0.6, subdivisions=3)
    synthetic = SyntheticReference(pose=CameraPose(elevation=10.0, azimuth=30.0, radius=2.0))
    image, mask = synthesize_reference(gt, synthetic, config, uniform_env)
    oracle = oracle_predictor(
        RenderedViewBank(with_material(gt, synthetic), synthetic.pose, config.intrinsics, uniform_env), make_schedule()
    )

    def inputs(predictor) -> TTAInputs:
        return TTAInputs(
            reference_image=image,
            reference_mask=mask,
            pose=CameraPose(elevation=12.0, azimuth=34.0, radius=2.2),
            env=uniform_env,
            predictor=predictor,
            coarse_mesh=sphere_mesh(radius=0.45, subdivisions=2),
        )

    log = tmp_path / "run.log"
    server, thread = start_tcp_server(oracle)
    try:
        live = run_tta(config, inputs(external_predictor(_endpoint(server), timeout=10.0, record=log)))
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)

    replayed = run_tta(config, inputs(external_predictor(f"replay://{log}")))
    assert live.history["sds"].notna().all()
    pd.testing.assert_frame_equal(live.history, replayed.history, check_exact=True)
    assert replayed.pose == live.pose
