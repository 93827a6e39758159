"""
Arnés de experimentos por línea de comandos.

    python -m tetta init-fit          --config exp.toml [--out field.npz]
    python -m tetta reconstruct       --config exp.toml [--out dir] [--seed N] [--views N] [--resolution N]
    python -m tetta render            --mesh mesh.obj --pose pose.json [--env sky] [--out img.png]
    python -m tetta eval              --pred mesh.obj --gt preset:sphere [--out metrics.json]
    python -m tetta make-oracle-bank  --config exp.toml --views 16 --out bank.npz
    python -m tetta serve-predictor   --bank bank.npz [--transport tcp|http] [--port N]

Códigos de salida: 0 éxito, 1 uso incorrecto, 2 falla en ejecución.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from tetta.core.config import apply_thread_limit, configure_logging, settings
from tetta.core.exceptions import ConfigurationError, TettaError
from tetta.models.schemas import CameraPose, ExperimentConfig, Intrinsics
from tetta.services.config_io import load_environment, load_experiment_config, resolve_mesh, resolve_path, save_field
from tetta.services.experiment import run_reconstruction, with_material
from tetta.services.geometry_init import fit_field_to_mesh
from tetta.services.image_io import load_image, save_image
from tetta.services.mesh_io import save_mesh
from tetta.services.metrics import DEFAULT_TAU, evaluate_meshes
from tetta.services.predictor_bridge import PredictorTCPServer
from tetta.services.priors import ViewBank, build_view_bank, make_schedule, oracle_predictor
from tetta.services.reporting import load_pose, reference_psnr, render_rgb, write_json
from tetta.services.tet_grid import extract_surface, grid_for_bound
from tetta.services.virtual_camera import sample_novel_views, turntable_poses

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Argumentos inválidos (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- CONFIGURACIÓN COMÚN ---


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    tta_update = {}
    update = {}
    if getattr(args, "seed", None) is not None:
        tta_update["seed"] = args.seed
        update["seed"] = args.seed
    if getattr(args, "views", None) is not None:
        tta_update["views_per_iter"] = args.views
    if getattr(args, "resolution", None) is not None:
        tta_update["intrinsics"] = config.tta.intrinsics.model_copy(
            update={"width": args.resolution, "height": args.resolution}
        )
    if tta_update:
        update["tta"] = config.tta.model_copy(update=tta_update)
    return config.model_copy(update=update) if update else config


def _load_config(args: argparse.Namespace, check_paths: bool = True) -> ExperimentConfig:
    return _apply_overrides(load_experiment_config(args.config, check_paths=check_paths), args)


def _output(args: argparse.Namespace, config: Optional[ExperimentConfig], default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    if config is not None:
        return resolve_path(config.output_dir, config.base_dir) / default_name
    return Path(default_name)


# --- SUBCOMANDOS ---


def cmd_init_fit(args: argparse.Namespace) -> int:
    config = _load_config(args)
    tta = config.tta
    if not config.inputs.coarse_mesh:
        raise ConfigurationError("init-fit requiere inputs.coarse_mesh")
    mesh = resolve_mesh(config.inputs.coarse_mesh, config.base_dir)
    grid = grid_for_bound(tta.grid_resolution, tta.grid_bound)
    field = fit_field_to_mesh(grid, mesh, tta.fit_points, tta.fit_iters, tta.fit_lr, tta.seed)
    path = save_field(grid, field, _output(args, config, "field.npz"))
    save_mesh(extract_surface(grid, field), path.with_suffix(".obj"))
    print(json.dumps({"field": str(path), "fit_loss": field.fit_loss}))
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out_dir = Path(args.out) if args.out else None
    bundle = run_reconstruction(config, out_dir, record=Path(args.record) if args.record else None)
    print(json.dumps(bundle.metrics, sort_keys=True))
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    config = _load_config(args, check_paths=False) if args.config else None
    base = config.base_dir if config else None
    intrinsics = config.tta.intrinsics if config else Intrinsics()
    if args.resolution:
        intrinsics = intrinsics.model_copy(update={"width": args.resolution, "height": args.resolution})
    env_spec = args.env or (config.inputs.environment if config else "uniform:1.0")
    env = load_environment(env_spec, base)
    mesh = resolve_mesh(args.mesh, base)
    if mesh.attributes is None and config is not None and config.synthetic is not None:
        mesh = with_material(mesh, config.synthetic)

    if args.pose:
        pose = load_pose(Path(args.pose))
    elif config is not None:
        pose = config.camera
    else:
        pose = CameraPose(elevation=args.elevation, azimuth=args.azimuth, radius=args.radius)
    sigma = config.tta.soft_sigma if config else 1.5
    smooth = config.tta.smooth_normals if config else True
    material = {"roughness": args.roughness, "metalness": args.metalness}

    out = _output(args, None, "render.png")
    summary = {}
    if args.views:
        for k, frame_pose in enumerate(turntable_poses(pose, args.views)):
            rgb = render_rgb(mesh, frame_pose, intrinsics, env, sigma=sigma, smooth_normals=smooth, **material)
            save_image(rgb, out.parent / f"{out.stem}_{k:03d}{out.suffix}")
        summary["frames"] = args.views
    else:
        save_image(render_rgb(mesh, pose, intrinsics, env, sigma=sigma, smooth_normals=smooth, **material), out)
        summary["image"] = str(out)
    if args.reference:
        value = reference_psnr(mesh, pose, load_image(args.reference), intrinsics, env, sigma, smooth)
        summary["psnr_reference"] = value if value != float("inf") else None
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    pred = resolve_mesh(args.pred)
    gt = resolve_mesh(args.gt)
    evaluation = evaluate_meshes(pred, gt, n_points=args.points, tau=args.tau, seed=args.seed or 0)
    metrics = evaluation.as_dict()
    if args.out:
        write_json(metrics, Path(args.out))
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_make_oracle_bank(args: argparse.Namespace) -> int:
    config = _load_config(args, check_paths=False)
    if not config.inputs.gt_mesh:
        raise ConfigurationError("make-oracle-bank requiere inputs.gt_mesh")
    gt_mesh = resolve_mesh(config.inputs.gt_mesh, config.base_dir)
    true_pose = config.camera
    if config.synthetic is not None:
        gt_mesh = with_material(gt_mesh, config.synthetic)
        true_pose = config.synthetic.pose
    env = load_environment(config.inputs.environment, config.base_dir)
    n_views = args.views or config.tta.views_per_iter
    seed = config.tta.seed
    views = [rel for _, rel in sample_novel_views(true_pose, n_views, seed, config.tta.elevation_range)]
    bank = build_view_bank(gt_mesh, true_pose, views, config.tta.intrinsics, env)
    path = bank.save(_output(args, config, "oracle_bank.npz"))
    print(json.dumps({"bank": str(path), "views": len(bank)}))
    return EXIT_OK


def cmd_serve_predictor(args: argparse.Namespace) -> int:
    bank_path = args.bank or settings.ORACLE_BANK_PATH
    if not bank_path:
        raise ConfigurationError("serve-predictor requiere --bank o ORACLE_BANK_PATH")
    predictor = oracle_predictor(ViewBank.load(bank_path), make_schedule())
    if args.transport == "tcp":
        with PredictorTCPServer((args.host, args.port), predictor) as server:
            logger.info(f"Predictor TCP en {args.host}:{args.port}")
            server.serve_forever()
    else:
        from tetta.api.deps import set_predictor
        from tetta.main import serve

        set_predictor(predictor)
        serve(args.host, args.port)
    return EXIT_OK


# --- PARSER ---


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tetta", description="Reconstrucción de mallas texturizadas por adaptación en tiempo de prueba")
    parser.add_argument("--log-level", default=None, help="Nivel de registro (por defecto LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser, config_required: bool) -> None:
        p.add_argument("--config", required=config_required, help="Archivo TOML del experimento")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="Ruta o directorio de salida")
        p.add_argument("--views", type=int, default=None)
        p.add_argument("--resolution", type=int, default=None, help="Ancho = alto del render")

    p = sub.add_parser("init-fit", help="Ajusta el SDF a la malla gruesa y guarda el campo")
    common(p, True)
    p.set_defaults(handler=cmd_init_fit)

    p = sub.add_parser("reconstruct", help="Ejecuta la adaptación completa y escribe el reporte")
    common(p, True)
    p.add_argument("--record", default=None, help="Registra las solicitudes al predictor externo")
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("render", help="Renderiza una malla desde una pose")
    common(p, False)
    p.add_argument("--mesh", required=True, help="OBJ o preset:<nombre>")
    p.add_argument("--pose", default=None, help="pose.json")
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--env", default=None, help="uniform:<L>, sky o mapa PFM/PNG")
    p.add_argument("--roughness", type=float, default=None)
    p.add_argument("--metalness", type=float, default=None)
    p.add_argument("--reference", default=None, help="Imagen para calcular el PSNR")
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("eval", help="Compara una malla predicha con la real")
    common(p, False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--points", type=int, default=10000)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("make-oracle-bank", help="Renderiza vistas reales para el oráculo")
    common(p, True)
    p.set_defaults(handler=cmd_make_oracle_bank)

    p = sub.add_parser("serve-predictor", help="Sirve un predictor (oráculo) por TCP o HTTP")
    p.add_argument("--bank", default=None)
    p.add_argument("--transport", choices=("tcp", "http"), default="http")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(handler=cmd_serve_predictor)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    configure_logging(args.log_level)
    apply_thread_limit()
    try:
        return args.handler(args)
    except (TettaError, OSError) as exc:
        logger.error(f"{args.command} falló: {exc}")
        return EXIT_RUNTIME
