"""Command-line pipeline: synth, train, sample-cams, build-pseudo, refine,
eval and full-run over a dataset/run-directory contract."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import enhance, evaluate, io_utils, optimize, synthgen
from .camera import load_trajectory, sample_training_cameras, save_trajectory
from .config import ConfigError, RunConfig, load_config, write_manifest
from .enhance import ProtocolError
from .optimize import NumericFailure
from .render import RenderSettings, render
from .scene import deform_at_time, load_scene, save_scene, seed_from_depth

log = logging.getLogger("dynrecon")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_PROTOCOL = 5


def _settings(cfg: RunConfig) -> RenderSettings:
    size = cfg.synth.image_size
    return cfg.render.settings(size, size)


def _run_paths(cfg: RunConfig):
    run = Path(cfg.run_dir)
    io_utils.ensure_dir(run)
    return {
        "run": run,
        "phase1_scene": run / "phase1_scene.json",
        "refined_scene": run / "refined_scene.json",
        "input_cameras": run / "input_cameras.json",
        "refined_input_cameras": run / "refined_input_cameras.json",
        "sampled_cameras": run / "sampled_cameras.json",
        "refined_sampled_cameras": run / "refined_sampled_cameras.json",
        "pseudo": run / "pseudo",
        "eval": run / "eval",
    }


def cmd_synth(cfg: RunConfig, args):
    result = synthgen.generate_scene(cfg.synth)
    synthgen.render_dataset(result, cfg.dataset_dir,
                            settings=_settings(cfg), spec=cfg.synth)
    log.info("dataset written to %s", cfg.dataset_dir)


def _seed_scene(cfg: RunConfig, dataset, seed_mode):
    masks = dataset.dyn_masks
    if seed_mode == "random":
        # uninformed-partition ablation: randomize the static/dynamic split
        rng = np.random.default_rng(cfg.seed)
        masks = [rng.integers(0, 2, size=np.asarray(m).shape).astype(np.uint8)
                 for m in masks]
    return seed_from_depth(
        dataset.frames, dataset.depths, masks, dataset.train,
        cfg.seeding.n_static, cfg.seeding.n_dynamic, cfg.seed,
        n_knots=cfg.seeding.n_knots,
    )


def cmd_train(cfg: RunConfig, args):
    paths = _run_paths(cfg)
    dataset = synthgen.load_dataset(cfg.dataset_dir)
    seed_mode = getattr(args, "seed_masks", None) or cfg.seeding.mode
    scene = _seed_scene(cfg, dataset, seed_mode)
    schedule = cfg.schedule
    schedule.seed = cfg.seed
    scene, input_traj, _state = optimize.train_baseline(
        scene, dataset.frames, dataset.train, schedule, _settings(cfg),
        cfg.loss,
    )
    save_scene(scene, paths["phase1_scene"])
    save_trajectory(input_traj, paths["input_cameras"])
    write_manifest(cfg, paths["run"], {"stage": "train", "seed_masks": seed_mode})
    log.info("phase-1 checkpoint at %s", paths["phase1_scene"])


def cmd_sample_cams(cfg: RunConfig, args):
    paths = _run_paths(cfg)
    src = paths["input_cameras"] if paths["input_cameras"].exists() \
        else Path(cfg.dataset_dir) / "cameras.json"
    traj = load_trajectory(src)
    sampled = sample_training_cameras(traj, cfg.seed, cfg.sampler)
    save_trajectory(sampled, paths["sampled_cameras"])
    log.info("sampled %d cameras to %s", len(sampled), paths["sampled_cameras"])


def cmd_build_pseudo(cfg: RunConfig, args):
    paths = _run_paths(cfg)
    scene = load_scene(paths["phase1_scene"])
    sampled = load_trajectory(paths["sampled_cameras"])
    enh = cfg.enhancer
    if getattr(args, "external_cmd", None):
        enh.mode = "external"
        enh.external_cmd = args.external_cmd

    gt_provider = None
    if enh.mode == "simulate_from_gt":
        gt_scene = load_scene(Path(cfg.dataset_dir) / "gt_scene.json")
        settings = _settings(cfg)

        def gt_provider(m, t, pose):
            posed = deform_at_time(gt_scene, t)
            return render(posed, pose, sampled.intrinsics, settings,
                          with_ctx=False).color

    enhance.build_pseudo_dataset(scene, sampled, _settings(cfg), enh,
                                 paths["pseudo"], gt_provider=gt_provider)
    log.info("pseudo dataset at %s", paths["pseudo"])


def cmd_refine(cfg: RunConfig, args):
    paths = _run_paths(cfg)
    dataset = synthgen.load_dataset(cfg.dataset_dir)
    scene = load_scene(paths["phase1_scene"])
    input_traj = load_trajectory(paths["input_cameras"])
    sampled = load_trajectory(paths["sampled_cameras"])
    records = enhance.load_pseudo_dataset(paths["pseudo"])
    schedule = cfg.schedule
    schedule.seed = cfg.seed
    use_dr = not getattr(args, "no_dr", False)
    use_so = not getattr(args, "no_so", False)
    scene, input_traj, sampled = optimize.refine_diffusion_aware(
        scene, dataset.frames, input_traj, records, sampled, schedule,
        _settings(cfg), cfg.loss, use_dr=use_dr, use_so=use_so,
    )
    save_scene(scene, paths["refined_scene"])
    save_trajectory(input_traj, paths["refined_input_cameras"])
    save_trajectory(sampled, paths["refined_sampled_cameras"])
    write_manifest(cfg, paths["run"],
                   {"stage": "refine", "use_dr": use_dr, "use_so": use_so})
    log.info("refined checkpoint at %s", paths["refined_scene"])


def cmd_eval(cfg: RunConfig, args):
    paths = _run_paths(cfg)
    which = getattr(args, "checkpoint", None) or (
        "refined" if paths["refined_scene"].exists() else "phase1"
    )
    scene_path = paths[f"{which}_scene"] if which in ("refined", "phase1") else Path(which)
    scene = load_scene(scene_path)
    dataset = synthgen.load_dataset(cfg.dataset_dir)
    settings = _settings(cfg)

    pred_dir = io_utils.ensure_dir(paths["eval"] / which / "pred")
    for i, (pose, t) in enumerate(zip(dataset.test.poses, dataset.test_times)):
        posed = deform_at_time(scene, int(t))
        out = render(posed, pose, dataset.test.intrinsics, settings, with_ctx=False)
        name = f"{i:04d}.png"
        io_utils.save_image(Path(pred_dir) / name, out.color)
        io_utils.save_float_image(str(Path(pred_dir) / name) + ".npy", out.color)

    gt_dir = Path(cfg.dataset_dir) / "test_gt"
    report = evaluate.benchmark_report(
        str(pred_dir), str(gt_dir),
        covis_dir=str(Path(cfg.dataset_dir) / "covis_masks"),
        dyn_dir=str(Path(cfg.dataset_dir) / "test_dyn_masks"),
    )
    io_utils.write_json(paths["eval"] / which / "report.json", report.to_dict())
    with open(paths["eval"] / which / "report.txt", "w") as f:
        f.write(report.table() + "\n")
    print(report.table())


def cmd_full_run(cfg: RunConfig, args):
    if not (Path(cfg.dataset_dir) / "spec.json").exists():
        cmd_synth(cfg, args)
    cmd_train(cfg, args)
    cmd_sample_cams(cfg, args)
    cmd_build_pseudo(cfg, args)
    cmd_refine(cfg, args)
    cmd_eval(cfg, args)


def build_parser():
    p = argparse.ArgumentParser(prog="dynrecon",
                                description="monocular 4D reconstruction pipeline")
    p.add_argument("--config", "-c", required=True, help="YAML run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic dataset")
    t = sub.add_parser("train", help="phase-1 baseline training")
    t.add_argument("--seed-masks", choices=["masks", "random"],
                   help="static/dynamic seeding partition source")
    sub.add_parser("sample-cams", help="sample the 18-per-timestep training cameras")
    b = sub.add_parser("build-pseudo", help="batch-build the pseudo-view dataset")
    b.add_argument("--external-cmd", help="external enhancer command")
    r = sub.add_parser("refine", help="two-pass diffusion-aware refinement")
    r.add_argument("--no-dr", action="store_true", help="disable dynamic-region masking")
    r.add_argument("--no-so", action="store_true", help="disable sampled-pose optimization")
    e = sub.add_parser("eval", help="render test views and report masked metrics")
    e.add_argument("--checkpoint", help="phase1 | refined | path to a scene file")
    f = sub.add_parser("full-run", help="run the whole pipeline")
    f.add_argument("--seed-masks", choices=["masks", "random"])
    f.add_argument("--external-cmd")
    f.add_argument("--no-dr", action="store_true")
    f.add_argument("--no-so", action="store_true")
    return p


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "sample-cams": cmd_sample_cams,
    "build-pseudo": cmd_build_pseudo, "refine": cmd_refine, "eval": cmd_eval,
    "full-run": cmd_full_run,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except (ConfigError, FileNotFoundError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg, args)
    except ProtocolError as e:
        print(f"protocol error [{e.code}]: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
