"""Command-line entry points: `kpreloc <subcommand> [flags]`.

Every command prints its resolved configuration to stderr as the first line
and exits with the code attached to the error that stopped it.
"""

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import InsufficientKeypoints, InvalidConfig, InvariantViolation, RelocError
from .evaluation import (
    CAMBRIDGE_BUDGETS,
    Corruption,
    LocalizationReport,
    ablate_confidence_sets,
    bench_pose_runtime,
    evaluate_localization,
    format_table,
    oracle_frames,
    planted_frames,
    regressor_frames,
    robustness_trials,
    selectivity_report,
    sweep_budgets,
)
from .geometry import CameraIntrinsics, pose_errors
from .gradcheck import run_gradient_suite
from .keypoints import (
    DEFAULT_MAX_COUNT,
    DEFAULT_RADIUS,
    DEFAULT_THRESHOLD,
    KeypointParams,
    gather_correspondences,
    select_keypoints,
    write_keypoints_csv,
)
from .losses import LossWeights
from .netpbm import read_ppm, write_ppm
from .regressor import Regressor, RegressorConfig, load_checkpoint, save_checkpoint
from .scene import load_scene_model, reference_heatmap, save_heatmap_pgm, save_scene_model
from .solver import RansacConfig, ransac_pnp
from .synthetic import (
    SynthSceneSpec,
    SyntheticScene,
    generate_scene,
    ground_truth_coords,
    planted_confidence_frames,
    save_label_pgm,
    scene_from_files,
    write_palette,
)
from .training import TrainConfig, samples_from_scene, train_staged, write_loss_csv


logger = logging.getLogger(__name__)

SCENE_FILE = "scene.scene1"
PALETTE_FILE = "palette.csv"
CHECKPOINT_FILE = "model.rfm"
LOSS_FILE = "loss_curve.csv"

Activation = Literal["relu", "elu"]


def frame_name(image_id: int) -> str:
    return f"frame_{image_id:04d}.ppm"


def label_name(image_id: int) -> str:
    return f"label_{image_id:04d}.pgm"


# Architecture config file

class ArchitectureFile(BaseModel):
    """Keys accepted in a --config file. Input size defaults to the scene's frame size."""
    model_config = ConfigDict(extra="forbid")

    input_height: Optional[int] = Field(default=None, ge=1)
    input_width: Optional[int] = Field(default=None, ge=1)
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = Field(default=3, ge=1)
    encoder_activation: Activation = "relu"
    heatmap_hidden_activation: Activation = "relu"
    coord_hidden_activation: Activation = "elu"
    zero_init_heads: bool = True

    @field_validator("encoder_channels", mode="before")
    @classmethod
    def split_channels(cls, value):
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    def to_regressor_config(self, height: int, width: int, seed: int) -> RegressorConfig:
        values = self.model_dump()
        values["input_height"] = self.input_height or height
        values["input_width"] = self.input_width or width
        return RegressorConfig(seed=seed, **values)


def parse_architecture_text(text: str, source: str = "<config>") -> ArchitectureFile:
    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InvalidConfig(f"{source}: expected key=value", source_line_no=line_no, source_text=raw)
        if key in values:
            raise InvalidConfig(f"{source}: duplicate key {key!r}", source_line_no=line_no, source_text=raw)
        values[key] = value.strip()
    try:
        return ArchitectureFile.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise InvalidConfig(f"{source}: {problems}")


def load_architecture(path: Optional[Path]) -> ArchitectureFile:
    if path is None:
        return ArchitectureFile()
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise InvalidConfig(f"Cannot read config {path}: {e}")
    return parse_architecture_text(text, str(path))


# Shared helpers

def _out_dir(args: argparse.Namespace) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _palette_path(args: argparse.Namespace, scene_path: Path) -> Path:
    return args.palette if args.palette is not None else scene_path.parent / PALETTE_FILE


def _load_scene(args: argparse.Namespace, scene_path: Path) -> SyntheticScene:
    model = load_scene_model(scene_path)
    return scene_from_files(model, _palette_path(args, scene_path), args.splat)


def _selected_ids(args: argparse.Namespace, scene: SyntheticScene) -> list[int]:
    if args.image_id is None:
        return scene.model.image_ids
    for image_id in args.image_id:
        scene.model.frame(image_id)
    return list(args.image_id)


def _keypoint_params(args: argparse.Namespace) -> KeypointParams:
    return KeypointParams(
        radius=args.nms_radius,
        threshold=args.threshold,
        max_count=args.max_count,
        fallback_thresholds=tuple(args.fallback_thresholds),
    )


def _ransac_config(args: argparse.Namespace) -> RansacConfig:
    return RansacConfig(
        iterations=args.iterations,
        inlier_threshold_px=args.inlier_threshold,
        refine_iterations=args.refine_iterations,
        seed=args.seed,
    )


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    logger.info("wrote %s", path)


# Subcommands

def cmd_synth_gen(args: argparse.Namespace) -> int:
    spec = SynthSceneSpec(
        n_discriminative=args.points_disc,
        n_repetitive=args.points_rep,
        group_size=args.group_size,
        box_extent=args.box_extent,
        n_cameras=args.cameras,
        ring_radius=args.ring_radius,
        camera_height=args.camera_height,
        width=args.width,
        height=args.height,
        focal=args.focal,
        splat=args.splat,
        pixel_noise=args.pixel_noise,
        seed=args.seed,
    )
    scene = generate_scene(spec)
    out = _out_dir(args)
    save_scene_model(scene.model, out / SCENE_FILE)
    write_palette(out / PALETTE_FILE, scene)
    _render_frames(scene, scene.model.image_ids, out)
    logger.info("scene with %d points and %d frames in %s", len(scene.model.points), len(scene.model.frames), out)
    return 0


def _render_frames(scene: SyntheticScene, image_ids: Sequence[int], out: Path) -> None:
    (out / "frames").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    for image_id in image_ids:
        image, labels = scene.render(image_id)
        write_ppm(out / "frames" / frame_name(image_id), image)
        save_label_pgm(labels, out / "labels" / label_name(image_id))


def cmd_render(args: argparse.Namespace) -> int:
    scene = _load_scene(args, args.scene)
    ids = _selected_ids(args, scene)
    _render_frames(scene, ids, _out_dir(args))
    logger.info("rendered %d frames", len(ids))
    return 0


def cmd_heatmap_ref(args: argparse.Namespace) -> int:
    model = load_scene_model(args.scene)
    if args.reliable_only:
        model = scene_from_files(model, _palette_path(args, args.scene), args.splat).reliable_model()
    ids = list(args.image_id) if args.image_id is not None else model.image_ids
    out = _out_dir(args)
    for image_id in ids:
        heat = reference_heatmap(model, image_id)
        save_heatmap_pgm(heat, out / f"heatmap_{image_id:04d}.pgm")
        logger.debug("frame %d: %d reference cells", image_id, int(np.count_nonzero(heat.values)))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    frames_dir = args.frames if args.frames is not None else args.scene.parent / "frames"
    if not frames_dir.is_dir():
        raise InvalidConfig(f"Frames directory {frames_dir} does not exist")
    scene = _load_scene(args, args.scene)
    images = {image_id: read_ppm(frames_dir / frame_name(image_id)) for image_id in scene.model.image_ids}
    dataset = samples_from_scene(scene, images=images)

    tc = TrainConfig(
        stage1_iters=args.stage1_iters,
        stage2_iters=args.stage2_iters,
        lr=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        epsilon=args.epsilon,
        weight_decay=args.weight_decay,
        weights=LossWeights(args.lambda_sim, args.lambda_rep, args.lambda_3d),
        batch_size=args.batch_size,
        scale_range=(args.scale_min, args.scale_max),
        rotation_deg=args.rotation_deg,
        color_jitter=args.color_jitter,
        augment=not args.no_augment,
        seed=args.seed,
        log_every=args.log_every,
    )
    if args.resume is not None:
        model, progress = load_checkpoint(args.resume)
        if progress is None:
            raise InvalidConfig(f"Checkpoint {args.resume} carries no optimizer state to resume from")
        logger.info("resuming after %d + %d iterations", progress.stage1_done, progress.stage2_done)
    else:
        first = scene.model.frame(scene.model.image_ids[0]).intrinsics
        config = load_architecture(args.config).to_regressor_config(first.height, first.width, args.seed)
        model, progress = Regressor(config), None

    result = train_staged(model, dataset, tc, progress)
    out = _out_dir(args)
    save_checkpoint(out / CHECKPOINT_FILE, model, result.progress)
    write_loss_csv(out / LOSS_FILE, result.log)
    logger.info("wrote %s and %s", out / CHECKPOINT_FILE, out / LOSS_FILE)
    return 0


def _localize_intrinsics(
    args: argparse.Namespace, base: Optional[CameraIntrinsics], width: int, height: int
) -> CameraIntrinsics:
    """Frame intrinsics overridden by --fx/--fy/--cx/--cy; image-size defaults without a scene."""
    if base is None:
        base = CameraIntrinsics(
            fx=float(width), fy=float(width), cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height
        )
    return CameraIntrinsics(
        fx=args.fx if args.fx is not None else base.fx,
        fy=args.fy if args.fy is not None else base.fy,
        cx=args.cx if args.cx is not None else base.cx,
        cy=args.cy if args.cy is not None else base.cy,
        width=width,
        height=height,
    )


def cmd_localize(args: argparse.Namespace) -> int:
    base = truth = None
    if args.oracle_coords is not None:
        scene = _load_scene(args, args.oracle_coords)
        frame = scene.model.frame(args.frame)
        base, truth = frame.intrinsics, frame.pose
        heatmap = reference_heatmap(scene.reliable_model(), args.frame)
        coords, _ = ground_truth_coords(scene, args.frame)
    else:
        if args.scene is not None:
            frame = load_scene_model(args.scene).frame(args.frame)
            base, truth = frame.intrinsics, frame.pose
        if args.image is not None:
            image_path = args.image
        elif args.scene is not None:
            image_path = args.scene.parent / "frames" / frame_name(args.frame)
        else:
            raise InvalidConfig("localize --checkpoint needs --image or --scene")
        model, _ = load_checkpoint(args.checkpoint)
        out = model.forward(read_ppm(image_path))
        heatmap, coords = out.heatmap, out.coords
    intrinsics = _localize_intrinsics(args, base, heatmap.width, heatmap.height)

    if args.export_heatmap is not None:
        save_heatmap_pgm(heatmap, args.export_heatmap)
    params = _keypoint_params(args)
    keypoints = select_keypoints(heatmap, params)
    if args.export_keypoints is not None:
        write_keypoints_csv(args.export_keypoints, keypoints)
    if len(keypoints) < params.min_count:
        raise InsufficientKeypoints("selected", len(keypoints), params.min_count)

    estimate = ransac_pnp(gather_correspondences(keypoints, coords), intrinsics, _ransac_config(args))
    line = estimate.to_line(args.frame)
    print(line)
    if args.out is not None:
        _write_text(_out_dir(args) / f"pose_{args.frame:04d}.txt", line + "\n")
    if truth is not None:
        trans_err, rot_err = pose_errors(estimate.pose, truth)
        logger.info("frame %d: %.6g scene units, %.6g deg from ground truth", args.frame, trans_err, rot_err)
    return 0


def _experiment_frames(args: argparse.Namespace, scene: SyntheticScene):
    ids = _selected_ids(args, scene)
    if args.checkpoint is None:
        return oracle_frames(scene, ids)
    model, _ = load_checkpoint(args.checkpoint)
    return regressor_frames(model, scene, ids)


def _budgets(spec: str) -> dict[str, int]:
    if spec == "cambridge":
        return dict(CAMBRIDGE_BUDGETS)
    try:
        return {f"budget={int(b)}": int(b) for b in spec.split(",") if b.strip()}
    except ValueError:
        raise InvalidConfig(f"Budgets must be 'cambridge' or comma-separated integers, got {spec!r}")


def cmd_eval(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    reports: dict[str, LocalizationReport] = {}
    ransac = _ransac_config(args)

    if args.experiment == "ablate":
        planted = planted_confidence_frames(n_frames=args.planted_frames, seed=args.seed)
        hi, lo = ablate_confidence_sets(planted_frames(planted), args.count, args.hi, args.lo, ransac, args.nms_radius)
        reports = {hi.label: hi, lo.label: lo}
    elif args.scene is None:
        raise InvalidConfig(f"eval --experiment {args.experiment} needs --scene")
    else:
        scene = _load_scene(args, args.scene)
        if args.experiment == "robustness":
            report = robustness_trials(
                scene,
                range(args.seed, args.seed + args.trials),
                args.count,
                args.noise_px,
                args.outlier_fraction,
                ransac,
            )
            _write_text(out / "robustness.json", json.dumps(report.to_dict(), sort_keys=True) + "\n")
            print(json.dumps(report.to_dict(), sort_keys=True))
            return 0
        if args.experiment == "selectivity":
            if args.checkpoint is None:
                raise InvalidConfig("eval --experiment selectivity needs --checkpoint")
            model, _ = load_checkpoint(args.checkpoint)
            report = selectivity_report(model, [scene.render(i) for i in _selected_ids(args, scene)])
            _write_text(out / "selectivity.json", json.dumps(report.to_dict(), sort_keys=True) + "\n")
            print(json.dumps(report.to_dict(), sort_keys=True))
            return 0

        frames = _experiment_frames(args, scene)
        if args.experiment == "budgets":
            budgets = _budgets(args.budgets)
            by_count = sweep_budgets(frames, sorted(set(budgets.values())), _keypoint_params(args), ransac)
            reports = {name: by_count[count] for name, count in budgets.items()}
        else:
            corruption = Corruption(args.noise_px, args.outlier_fraction, args.seed)
            reports = {
                args.scene.stem: evaluate_localization(
                    frames, _keypoint_params(args), ransac, corruption, label=args.scene.stem
                )
            }

    for index, (name, report) in enumerate(reports.items()):
        suffix = "" if len(reports) == 1 else f"_{index}"
        _write_text(out / f"report{suffix}.jsonl", report.to_json_lines(args.include_timing))
    if args.table:
        print(format_table(reports), end="")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    report = bench_pose_runtime(tuple(args.counts), args.trials, _ransac_config(args), args.seed)
    print(report.format(), end="")
    if args.out is not None:
        _write_text(_out_dir(args) / "bench.json", json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    results = run_gradient_suite(range(args.seed, args.seed + args.seeds), include_network=not args.skip_network)
    failed = [r for r in results if not r.passed]
    for result in results:
        print(json.dumps(result.to_dict(), sort_keys=True))
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        raise InvariantViolation(
            f"{len(failed)} of {len(results)} gradient checks failed; worst {worst.name} "
            f"seed {worst.seed}: {worst.max_rel_error:.3g} >= {worst.tolerance:g}"
        )
    logger.info("%d gradient checks passed", len(results))
    return 0


# Parser

def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_scene_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--scene", type=Path, required=required, help="SCENE1 model file")
    p.add_argument("--palette", type=Path, default=None, help="palette.csv (default: next to the scene)")
    p.add_argument("--splat", type=int, default=3, help="splat size in pixels")


def _add_keypoint_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nms-radius", type=int, default=DEFAULT_RADIUS)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--max-count", type=int, default=DEFAULT_MAX_COUNT)
    p.add_argument("--fallback-thresholds", type=_float_list, default=[], help="e.g. 0.5,0.3")


def _add_ransac_flags(p: argparse.ArgumentParser) -> None:
    defaults = RansacConfig()
    p.add_argument("--iterations", type=int, default=defaults.iterations)
    p.add_argument("--inlier-threshold", type=float, default=defaults.inlier_threshold_px, help="pixels")
    p.add_argument("--refine-iterations", type=int, default=defaults.refine_iterations)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, default=None, help="key=value architecture file")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="kpreloc", description="Keypoint-selected scene-coordinate relocalization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic scene with frames")
    spec = SynthSceneSpec()
    p.add_argument("--points-disc", type=int, default=spec.n_discriminative)
    p.add_argument("--points-rep", type=int, default=spec.n_repetitive)
    p.add_argument("--group-size", type=int, default=spec.group_size)
    p.add_argument("--box-extent", type=float, default=spec.box_extent)
    p.add_argument("--cameras", type=int, default=spec.n_cameras)
    p.add_argument("--ring-radius", type=float, default=spec.ring_radius)
    p.add_argument("--camera-height", type=float, default=spec.camera_height)
    p.add_argument("--width", type=int, default=spec.width)
    p.add_argument("--height", type=int, default=spec.height)
    p.add_argument("--focal", type=float, default=spec.focal)
    p.add_argument("--splat", type=int, default=spec.splat)
    p.add_argument("--pixel-noise", type=float, default=spec.pixel_noise)
    p.set_defaults(handler=cmd_synth_gen)

    p = sub.add_parser("render", parents=[common], help="re-render frames and region labels")
    _add_scene_flags(p)
    p.add_argument("--image-id", type=int, action="append", default=None)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("heatmap-ref", parents=[common], help="reference heatmaps from scene visibility")
    _add_scene_flags(p)
    p.add_argument("--image-id", type=int, action="append", default=None)
    p.add_argument("--reliable-only", action="store_true", help="restrict to discriminative points")
    p.set_defaults(handler=cmd_heatmap_ref)

    p = sub.add_parser("train", parents=[common], help="staged regressor training")
    _add_scene_flags(p)
    tc = TrainConfig()
    p.add_argument("--frames", type=Path, default=None, help="frames directory (default: next to the scene)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint with optimizer state")
    p.add_argument("--stage1-iters", type=int, default=tc.stage1_iters)
    p.add_argument("--stage2-iters", type=int, default=tc.stage2_iters)
    p.add_argument("--lr", type=float, default=tc.lr)
    p.add_argument("--beta1", type=float, default=tc.beta1)
    p.add_argument("--beta2", type=float, default=tc.beta2)
    p.add_argument("--epsilon", type=float, default=tc.epsilon)
    p.add_argument("--weight-decay", type=float, default=tc.weight_decay)
    p.add_argument("--lambda-sim", type=float, default=tc.weights.lambda_sim)
    p.add_argument("--lambda-rep", type=float, default=tc.weights.lambda_rep)
    p.add_argument("--lambda-3d", type=float, default=tc.weights.lambda_3d)
    p.add_argument("--batch-size", type=int, default=tc.batch_size)
    p.add_argument("--scale-min", type=float, default=tc.scale_range[0])
    p.add_argument("--scale-max", type=float, default=tc.scale_range[1])
    p.add_argument("--rotation-deg", type=float, default=tc.rotation_deg)
    p.add_argument("--color-jitter", type=float, default=tc.color_jitter)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log-every", type=int, default=tc.log_every)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("localize", parents=[common], help="localize one frame")
    _add_scene_flags(p, required=False)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", type=Path, help="trained regressor")
    source.add_argument("--oracle-coords", type=Path, metavar="SCENE", help="use ground-truth coordinates")
    p.add_argument("--frame", type=int, required=True, help="image id")
    p.add_argument("--image", type=Path, default=None, help="PPM frame (default: frames/ next to --scene)")
    p.add_argument("--fx", type=float, default=None, help="focal length in pixels (default: scene frame, else image width)")
    p.add_argument("--fy", type=float, default=None)
    p.add_argument("--cx", type=float, default=None, help="principal point (default: scene frame, else image centre)")
    p.add_argument("--cy", type=float, default=None)
    p.add_argument("--export-heatmap", type=Path, default=None)
    p.add_argument("--export-keypoints", type=Path, default=None)
    _add_keypoint_flags(p)
    _add_ransac_flags(p)
    p.set_defaults(handler=cmd_localize)

    p = sub.add_parser("eval", parents=[common], help="localization experiments")
    _add_scene_flags(p, required=False)
    p.add_argument("--experiment", default="localize", choices=["localize", "budgets", "ablate", "robustness", "selectivity"])
    p.add_argument("--checkpoint", type=Path, default=None, help="evaluate a regressor instead of oracle coordinates")
    p.add_argument("--image-id", type=int, action="append", default=None)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.add_argument("--budgets", default="cambridge", help="'cambridge' or comma-separated counts")
    p.add_argument("--count", type=int, default=200, help="correspondences per set or trial")
    p.add_argument("--hi", type=float, default=0.7)
    p.add_argument("--lo", type=float, default=0.4)
    p.add_argument("--planted-frames", type=int, default=10)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--table", action="store_true", help="print a summary table")
    p.add_argument("--include-timing", action="store_true")
    _add_keypoint_flags(p)
    _add_ransac_flags(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench-ransac", parents=[common], help="pose step runtime against correspondence count")
    p.add_argument("--counts", type=_int_list, default=[200, 4800])
    p.add_argument("--trials", type=int, default=5)
    _add_ransac_flags(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds, starting at --seed")
    p.add_argument("--skip-network", action="store_true")
    p.set_defaults(handler=cmd_grad_check)

    return parser


def resolved_config(args: argparse.Namespace) -> dict:
    values = {}
    for key, value in sorted(vars(args).items()):
        if key == "handler":
            continue
        if isinstance(value, Path):
            value = str(value)
        elif isinstance(value, list):
            value = [str(v) if isinstance(v, Path) else v for v in value]
        values[key] = value
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.out is None and args.command in ("synth-gen", "render", "heatmap-ref", "train", "eval"):
        args.out = Path(".")
    print("resolved config " + json.dumps(resolved_config(args), sort_keys=True), file=sys.stderr, flush=True)
    logging.basicConfig(
        level=args.log_level,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except RelocError as e:
        where = f" (line {e.source_line_no})" if e.source_line_no is not None else ""
        print(f"error: {e.message}{where}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("unhandled error in %s", args.command)
        print(f"error: internal error: {e}", file=sys.stderr)
        return RelocError.exit_code


if __name__ == "__main__":
    sys.exit(main())
