import math

import pytest
import torch

from tetta.core.exceptions import ContractError
from tetta.models.domain import DTYPE
from tetta.services.losses import laplacian_loss, mask_loss, photometric_loss, sdf_regularizer, umbrella_laplacian
from tetta.services.tet_grid import grid_for_bound

EDGE = torch.tensor([[0, 1]], dtype=torch.long)


def _t(values):
    return torch.tensor(values, dtype=DTYPE)


# --- REGULARIZADOR DE SIGNO ---


@pytest.mark.parametrize(
    "sdf,expected,tol",
    [
        ([0.0, 0.0], 2.0 * math.log(2.0), 1e-12),
        ([10.0, -10.0], 20.0, 1e-3),
        ([10.0, 10.0], 9.08e-5, 1e-6),
    ],
)
def test_sdf_regularizer_values(sdf, expected, tol):
    assert float(sdf_regularizer(_t(sdf), EDGE)) == pytest.approx(expected, abs=tol)


def test_sdf_regularizer_mean_reduction():
    edges = torch.tensor([[0, 1], [1, 2]], dtype=torch.long)
    sdf = _t([0.0, 0.0, 0.0])
    total = float(sdf_regularizer(sdf, edges))
    assert float(sdf_regularizer(sdf, edges, reduction="mean")) == pytest.approx(total / 2)


def test_sdf_regularizer_labels_have_no_gradient():
    sdf = _t([0.3, -0.2]).requires_grad_(True)
    (grad,) = torch.autograd.grad(sdf_regularizer(sdf, EDGE), [sdf])
    # d/ds_i [softplus(s_i) - y_j s_i] = σ(s_i) - y_j
    expected = torch.sigmoid(sdf.detach()) - _t([0.0, 1.0])
    assert torch.allclose(grad, expected, atol=1e-12)


def test_sdf_regularizer_unknown_reduction():
    with pytest.raises(ContractError):
        sdf_regularizer(_t([0.0, 1.0]), EDGE, reduction="max")


# --- PÉRDIDAS DE IMAGEN ---


def test_photometric_loss_value():
    rendered = torch.zeros((2, 2, 3), dtype=DTYPE)
    reference = torch.zeros((2, 2, 3), dtype=DTYPE)
    reference[0, 0] = 0.1
    assert float(photometric_loss(rendered, reference)) == pytest.approx(0.025)


def test_photometric_loss_gradient():
    h, w = 3, 4
    rendered = torch.full((h, w, 3), 0.5, dtype=DTYPE, requires_grad=True)
    reference = torch.zeros((h, w, 3), dtype=DTYPE)
    reference[0] = 1.0
    (grad,) = torch.autograd.grad(photometric_loss(rendered, reference), [rendered])
    expected = torch.sign(rendered.detach() - reference) / (3 * h * w)
    assert torch.allclose(grad, expected)


def test_mask_loss_values():
    ones = torch.ones((4, 4), dtype=DTYPE)
    assert float(mask_loss(ones, torch.zeros((4, 4), dtype=DTYPE))) == 1.0
    checker = (torch.arange(16).reshape(4, 4) + torch.arange(4)[:, None]) % 2
    assert float(mask_loss(ones, checker.to(DTYPE))) == 0.5


@pytest.mark.parametrize("loss", [photometric_loss, mask_loss])
def test_image_losses_shape_mismatch(loss):
    with pytest.raises(ContractError):
        loss(torch.zeros((4, 4), dtype=DTYPE), torch.zeros((4, 5), dtype=DTYPE))


# --- LAPLACIANO ---


@pytest.fixture(scope="module")
def grid():
    return grid_for_bound(4, 1.0)


def test_laplacian_constant_field(grid):
    assert float(laplacian_loss(torch.full((grid.num_vertices,), 0.7, dtype=DTYPE), grid)) == pytest.approx(0.0, abs=1e-15)


def test_laplacian_linear_field_interior(grid):
    center = 62
    assert torch.allclose(grid.vertices[center], torch.zeros(3, dtype=DTYPE))
    sdf = grid.vertices @ _t([0.3, -1.2, 0.5])
    lap = umbrella_laplacian(sdf, grid.edges)
    assert float(lap[center]) == pytest.approx(0.0, abs=1e-12)


def test_laplacian_quadratic_field_interior(grid):
    center = 62
    sdf = (grid.vertices ** 2).sum(dim=1)
    neighbors = torch.cat([grid.edges[grid.edges[:, 0] == center, 1], grid.edges[grid.edges[:, 1] == center, 0]])
    offsets = grid.vertices[neighbors] - grid.vertices[center]
    expected = float((offsets ** 2).sum(dim=1).mean())
    assert float(umbrella_laplacian(sdf, grid.edges)[center]) == pytest.approx(expected)


def test_laplacian_size_mismatch(grid):
    with pytest.raises(ContractError):
        laplacian_loss(torch.zeros(5, dtype=DTYPE), grid)
