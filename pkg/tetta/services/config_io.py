"""
Configuración de experimentos (TOML validado con pydantic), resolución de
entradas (rutas relativas o presets) e instantáneas del campo ajustado.
"""
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Union

import numpy as np
from pydantic import ValidationError

from tetta.core.exceptions import ConfigurationError
from tetta.core.storage import atomic_write_bytes, atomic_write_text
from tetta.models.domain import FieldParams, MaterialSample, TetGrid, TriangleMesh, as_tensor
from tetta.models.schemas import ExperimentConfig
from tetta.services.envlight import EnvironmentLight, make_environment
from tetta.services.fixtures import is_preset, preset_mesh
from tetta.services.image_io import load_image
from tetta.services.mesh_io import load_mesh
from tetta.services.tet_grid import build_grid

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# --- LECTURA ---


def resolve_path(spec: str, base_dir: Optional[Path]) -> Path:
    path = Path(spec).expanduser()
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return path


def _is_environment_preset(spec: str) -> bool:
    return spec == "sky" or spec.startswith("uniform:")


def _check_inputs_exist(config: ExperimentConfig) -> None:
    inputs = config.inputs
    missing = []
    for name in ("coarse_mesh", "reference_image", "reference_mask", "gt_mesh", "oracle_bank"):
        spec = getattr(inputs, name)
        if spec is None or is_preset(spec):
            continue
        if not resolve_path(spec, config.base_dir).exists():
            missing.append(f"{name}={spec}")
    if not _is_environment_preset(inputs.environment) and not resolve_path(inputs.environment, config.base_dir).exists():
        missing.append(f"environment={inputs.environment}")
    if missing:
        raise ConfigurationError(f"Rutas de entrada inexistentes: {', '.join(missing)}")


def parse_experiment_config(text: str, base_dir: Optional[Path] = None, check_paths: bool = True) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"TOML inválido: {exc}")
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"Configuración inválida:\n{exc}")
    config = config.model_copy(update={"base_dir": base_dir})
    if check_paths:
        _check_inputs_exist(config)
    return config


def load_experiment_config(path: PathLike, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"No existe el archivo de configuración: {path}")
    config = parse_experiment_config(path.read_text(encoding="utf-8"), path.parent.resolve(), check_paths)
    logger.info(f"Configuración cargada desde {path}")
    return config


# --- ESCRITURA ---


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        text = repr(value)
        return text if any(c in text for c in ".en") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(item) for item in value) + "]"
    raise ConfigurationError(f"Valor no serializable en TOML: {value!r}")


def _toml_table(data: Dict[str, Any], prefix: str, lines: List[str]) -> None:
    tables = {k: v for k, v in data.items() if isinstance(v, dict)}
    for key, value in data.items():
        if key not in tables:
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in tables.items():
        name = f"{prefix}.{key}" if prefix else key
        lines.append("")
        lines.append(f"[{name}]")
        _toml_table(value, name, lines)


def dump_experiment_config(config: ExperimentConfig) -> str:
    """Serializa con el mismo esquema que lee load_experiment_config."""
    data = config.model_dump(mode="json", exclude_none=True)
    lines: List[str] = []
    _toml_table(data, "", lines)
    return "\n".join(lines).lstrip("\n") + "\n"


def save_experiment_config(config: ExperimentConfig, path: PathLike) -> Path:
    return atomic_write_text(path, dump_experiment_config(config))


# --- RESOLUCIÓN DE ENTRADAS ---


def resolve_mesh(spec: str, base_dir: Optional[Path] = None) -> TriangleMesh:
    if is_preset(spec):
        return preset_mesh(spec)
    return load_mesh(resolve_path(spec, base_dir))


def load_environment(spec: str, base_dir: Optional[Path] = None) -> EnvironmentLight:
    """Preset ('uniform:<L>', 'sky') o mapa latlong en PFM/PNG; siempre prefiltrado."""
    if _is_environment_preset(spec):
        return make_environment(spec)
    path = resolve_path(spec, base_dir)
    radiance = load_image(path)
    if radiance.ndim == 2:
        radiance = np.repeat(radiance[..., None], 3, axis=2)
    light = make_environment(np.asarray(radiance, dtype=np.float64))
    light.name = path.name
    logger.info(f"Mapa de entorno {radiance.shape[1]}x{radiance.shape[0]} cargado desde {path}")
    return light


# --- INSTANTÁNEAS DEL CAMPO ---


class FieldSnapshot(NamedTuple):
    grid: TetGrid
    field: FieldParams


def save_field(grid: TetGrid, field: FieldParams, path: PathLike) -> Path:
    buffer = io.BytesIO()
    np.savez_compressed(
        buffer,
        sdf=field.sdf.detach().numpy(),
        deform=field.deform.detach().numpy(),
        pbr=field.pbr.to_array(),
        resolution=np.array(grid.resolution, dtype=np.int64),
        bounds=grid.bounds.numpy(),
        fit_loss=np.array(np.nan if field.fit_loss is None else field.fit_loss),
    )
    path = atomic_write_bytes(path, buffer.getvalue())
    logger.info(f"Campo guardado en {path} ({field.num_vertices} vértices)")
    return path


def load_field(path: PathLike) -> FieldSnapshot:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No existe la instantánea del campo: {path}")
    with np.load(path) as data:
        grid = build_grid(tuple(int(r) for r in data["resolution"]), data["bounds"])
        fit_loss = float(data["fit_loss"])
        field = FieldParams(
            sdf=as_tensor(data["sdf"]),
            deform=as_tensor(data["deform"]),
            pbr=MaterialSample.from_array(data["pbr"]),
            fit_loss=None if math.isnan(fit_loss) else fit_loss,
        )
    if field.num_vertices != grid.num_vertices:
        raise ConfigurationError(f"Instantánea inconsistente: {field.num_vertices} valores para {grid.num_vertices} vértices")
    return FieldSnapshot(grid, field)
