import numpy as np
import pytest
import torch

from tetta.models.domain import DTYPE, FieldParams, MaterialSample, TetGrid
from tetta.models.schemas import CameraPose, Intrinsics
from tetta.services.envlight import make_environment
from tetta.services.fixtures import sphere_mesh
from tetta.services.tet_grid import LOCAL_EDGES


@pytest.fixture(scope="session")
def uniform_env():
    return make_environment("uniform:1.0")


@pytest.fixture
def small_intrinsics():
    return Intrinsics(fov=45.0, width=32, height=32)


@pytest.fixture
def front_pose():
    return CameraPose(elevation=10.0, azimuth=30.0, radius=2.0)


@pytest.fixture(scope="session")
def sphere():
    return sphere_mesh(radius=0.6, subdivisions=3)


def single_tet_grid() -> TetGrid:
    """Un solo tetraedro unitario con volumen positivo."""
    vertices = torch.tensor(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], dtype=DTYPE
    )
    return TetGrid(
        vertices=vertices,
        tets=torch.tensor([[0, 1, 2, 3]], dtype=torch.long),
        edges=torch.as_tensor(LOCAL_EDGES, dtype=torch.long),
        tet_edges=torch.arange(6, dtype=torch.long).reshape(1, 6),
        bounds=torch.tensor([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], dtype=DTYPE),
        resolution=(1, 1, 1),
    )


def field_with(sdf, pbr: MaterialSample = None) -> FieldParams:
    sdf = torch.as_tensor(np.asarray(sdf, dtype=np.float64))
    n = sdf.shape[0]
    return FieldParams(
        sdf=sdf,
        deform=torch.zeros((n, 3), dtype=DTYPE),
        pbr=pbr if pbr is not None else MaterialSample.constant(n),
    )
