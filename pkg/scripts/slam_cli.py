import argparse
import logging
import os
import sys
from typing import List, Optional

sys.stdout.reconfigure(line_buffering=True) if hasattr(sys.stdout, 'reconfigure') else None
sys.stderr.reconfigure(line_buffering=True) if hasattr(sys.stderr, 'reconfigure') else None

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.config import RunConfig, dump_config, load_config
from core.dataset import LAYOUTS, read_dataset
from core.errors import SlamError
from core.evaluation import TrajectoryEvaluator, align, associate, read_trajectory, write_error_csv
from core.features import FeatureSet
from core.vocabulary import VocabularyTree, binarize
from sim.simworld import CHALLENGES, TRAJECTORIES, SceneSpec, export_dataset, generate_scene, script_challenge
from stages.system import SlamSystem, run_slam


def setup_logging(verbose: bool, log_file: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, mode="w"))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        handlers=handlers, force=True)


def banner(title: str) -> None:
    print(f"\n{'='*60}")
    print(title)
    print(f"{'='*60}")


def build_config(args) -> RunConfig:
    config = load_config(args.config)
    overrides = {
        "run.sensor": args.mode,
        "run.backend": args.backend,
        "run.detector_model": args.detector_model,
        "run.matcher_model": args.matcher_model,
        "run.seed": None if args.seed is None else str(args.seed),
        "run.ablate": args.ablate,
    }
    for key, value in overrides.items():
        if value is not None:
            config.set(key, value)
    if args.deterministic:
        config.run.deterministic = True
    config.validate()
    return config


def cmd_run(args) -> int:
    config = build_config(args)
    reader = read_dataset(args.dataset, args.layout, stereo=config.stereo_mode)
    vocabulary = VocabularyTree.load(args.vocab) if args.vocab else None
    print(f"✓ Loaded dataset: {args.dataset} ({len(reader)} frames, {args.layout})")
    if vocabulary is not None:
        print(f"✓ Loaded vocabulary: {args.vocab} ({vocabulary.word_count} words)")
    else:
        print("No vocabulary given: loop closing is disabled")

    system = SlamSystem(config, reader.camera, vocabulary, baseline=reader.baseline)
    trajectory, _, _ = run_slam(config, reader, vocabulary, args.out, system=system)
    if args.out:
        with open(os.path.join(args.out, "config.conf"), "w") as f:
            f.write(dump_config(config))

    banner("Run Complete")
    print(system.get_summary())
    if args.out:
        print(f"Outputs written to: {args.out}")
    if reader.groundtruth is not None and len(trajectory) >= 3:
        evaluator = TrajectoryEvaluator("sim3" if not config.stereo_mode else "se3")
        results = evaluator.evaluate(trajectory, reader.groundtruth)
        print()
        print(evaluator.get_summary(results))
    return 0


def _parse_challenge(text: str):
    parts = text.split(":")
    if len(parts) not in (3, 4) or parts[0] not in CHALLENGES:
        raise argparse.ArgumentTypeError(f"expected kind:start:stop[:strength] with kind in {CHALLENGES}")
    strength = float(parts[3]) if len(parts) == 4 else None
    return parts[0], int(parts[1]), int(parts[2]), strength


def cmd_simulate(args) -> int:
    spec = SceneSpec(landmark_count=args.landmarks, trajectory=args.trajectory, frame_count=args.frames,
                     rate=args.rate, radius=args.radius, laps=args.laps, pixel_noise=args.pixel_noise,
                     descriptor_noise=args.descriptor_noise, outlier_rate=args.outliers,
                     stereo_baseline=args.stereo_baseline)
    scene = generate_scene(spec, args.seed)
    for kind, start, stop, strength in args.challenge or []:
        scene = script_challenge(scene, kind, start, stop, strength)
    export_dataset(scene, args.out)
    banner("Synthetic Dataset")
    print(f"Trajectory: {spec.trajectory} ({len(scene)} frames at {spec.rate} Hz)")
    print(f"Landmarks:  {len(scene.landmarks)}")
    print(f"Challenges: {', '.join(c.kind for c in scene.challenges) or 'none'}")
    print(f"✓ Exported to: {args.out}")
    return 0


def cmd_train_vocab(args) -> int:
    config = load_config(args.config)
    reader = read_dataset(args.dataset, args.layout)
    system = None
    documents = []
    for index in range(0, len(reader), args.stride):
        frame = reader.frame(index)
        if isinstance(frame.left, FeatureSet):
            descriptors = frame.left.descriptors
        else:
            if system is None:
                system = SlamSystem(config, reader.camera)
            descriptors = system.extract(frame.left).descriptors
        if len(descriptors):
            documents.append(binarize(descriptors))
    tree = VocabularyTree.train(documents, args.k, args.depth, args.seed)
    tree.save(args.out)
    banner("Vocabulary Trained")
    print(f"Documents: {len(documents)}")
    print(f"Descriptors: {sum(len(d) for d in documents)}")
    print(f"Words: {tree.word_count} (k={args.k}, depth={args.depth})")
    print(f"✓ Saved to: {args.out}")
    return 0


def cmd_eval(args) -> int:
    estimate = read_trajectory(args.estimate)
    groundtruth = read_trajectory(args.groundtruth)
    evaluator = TrajectoryEvaluator(args.align, args.max_dt, args.delta, args.seconds)
    results = evaluator.evaluate(estimate, groundtruth)
    print(evaluator.get_summary(results))
    return 0


def cmd_report(args) -> int:
    estimate = read_trajectory(args.estimate)
    groundtruth = read_trajectory(args.groundtruth)
    pairs = align(associate(estimate, groundtruth, args.max_dt), args.align)
    write_error_csv(args.out, pairs, args.delta)
    print(f"✓ Per-frame errors for {len(pairs)} frames written to: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Hybrid visual SLAM: run, simulate, train vocabularies, evaluate")
    parser.add_argument("--verbose", action="store_true", help="Debug-level logging")
    parser.add_argument("--log-file", type=str, default=None, help="Save log output to file (in addition to stderr)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run SLAM on a dataset")
    run.add_argument("--config", type=str, default=None, help="Config file (default: built-in defaults)")
    run.add_argument("--dataset", type=str, required=True, help="Dataset root (contains mav0/)")
    run.add_argument("--layout", type=str, default="euroc", choices=LAYOUTS)
    run.add_argument("--mode", type=str, default=None, choices=["mono", "stereo"])
    run.add_argument("--backend", type=str, default=None, choices=["synthetic", "neural"])
    run.add_argument("--detector-model", type=str, default=None, help="ONNX detector for the neural backend")
    run.add_argument("--matcher-model", type=str, default=None, help="ONNX matcher for the neural backend")
    run.add_argument("--vocab", type=str, default=None, help="Vocabulary file; enables loop closing")
    run.add_argument("--out", type=str, default=None, help="Output directory")
    run.add_argument("--deterministic", action="store_true", help="Single-context round-robin stages")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--ablate", type=str, default=None, help="Comma-separated toggles from mt, lm, lc")
    run.set_defaults(func=cmd_run)

    simulate = sub.add_parser("simulate", help="Generate and export a synthetic dataset")
    simulate.add_argument("--out", type=str, required=True)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--trajectory", type=str, default="circle", choices=TRAJECTORIES)
    simulate.add_argument("--frames", type=int, default=300)
    simulate.add_argument("--landmarks", type=int, default=500)
    simulate.add_argument("--rate", type=float, default=20.0)
    simulate.add_argument("--radius", type=float, default=5.0)
    simulate.add_argument("--laps", type=float, default=1.0)
    simulate.add_argument("--pixel-noise", type=float, default=0.0)
    simulate.add_argument("--descriptor-noise", type=float, default=0.0)
    simulate.add_argument("--outliers", type=float, default=0.0)
    simulate.add_argument("--stereo-baseline", type=float, default=0.0)
    simulate.add_argument("--challenge", type=_parse_challenge, action="append",
                          help="kind:start:stop[:strength], repeatable")
    simulate.set_defaults(func=cmd_simulate)

    train = sub.add_parser("train-vocab", help="Train a vocabulary from a dataset's descriptors")
    train.add_argument("--dataset", type=str, required=True)
    train.add_argument("--layout", type=str, default="synthetic", choices=LAYOUTS)
    train.add_argument("--config", type=str, default=None, help="Config with the detector backend for image datasets")
    train.add_argument("--k", type=int, default=10)
    train.add_argument("--depth", type=int, default=4)
    train.add_argument("--stride", type=int, default=1, help="Use every n-th frame")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", type=str, required=True)
    train.set_defaults(func=cmd_train_vocab)

    for name, func, help_text in (("eval", cmd_eval, "ATE / RPE between two trajectory files"),
                                  ("report", cmd_report, "Per-frame error CSV for plotting")):
        command = sub.add_parser(name, help=help_text)
        command.add_argument("estimate", type=str)
        command.add_argument("groundtruth", type=str)
        command.add_argument("--align", type=str, default="sim3", choices=["none", "se3", "sim3"])
        command.add_argument("--max-dt", type=float, default=0.02)
        command.add_argument("--delta", type=int, default=1)
        if name == "eval":
            command.add_argument("--seconds", type=float, default=None, help="RPE delta in seconds")
        else:
            command.add_argument("--out", type=str, required=True)
        command.set_defaults(func=func)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.log_file)
    try:
        return args.func(args)
    except (SlamError, OSError) as e:
        print(f"ERROR: {e}")
        return 1
    except KeyboardInterrupt:
        print("\n\nRun interrupted by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
