import argparse
import logging
import sys

from collabdet.config import add_config_arguments, config_from_args
from collabdet.errors import CollabDetError, ConfigurationError, InvalidInputError
from collabdet.gradient_checks import GRADIENT_TOLERANCE, run_gradient_checks
from collabdet.plotting import emit_plots
from collabdet.run_log import RunLog
from collabdet.synthetic_data import generate_dataset, save_dataset
from collabdet.training_pipeline import evaluate, run_ablation, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIGURATION = 2
EXIT_INVALID_INPUT = 3
EXIT_GRADIENT_CHECK = 4

logger = logging.getLogger("collabdet")


def cmd_gen_data(args):
    """
    Generate the synthetic shapes dataset into cfg.dataset.
    """
    cfg = config_from_args(args)
    dataset = generate_dataset(cfg.seed, cfg.n_train, cfg.n_test, cfg.n_classes, cfg.image_size)
    save_dataset(dataset, cfg.dataset)
    return EXIT_OK


def cmd_train(args):
    cfg = config_from_args(args)
    result = train(cfg)
    print(f"checkpoint: {result.checkpoint_path}")
    for tag in result.run_log.detectors():
        row = result.run_log.final(tag)
        print(f"{tag}: epoch {row.epoch} mAP {row.map:.4f} CorLoc {row.corloc:.4f}")
    return EXIT_OK


def cmd_eval(args):
    cfg = config_from_args(args)
    results = evaluate(args.checkpoint, args.split, cfg, args.out)
    for tag, result in results.items():
        if result.map is not None:
            per_class = " ".join(f"{c}:{ap:.4f}" for c, ap in sorted(result.per_class_ap.items()))
            print(f"{tag} {args.split} mAP {result.map:.4f} [{per_class}] -> {result.detections_path}")
        else:
            per_class = " ".join(f"{c}:{v:.4f}" for c, v in sorted(result.per_class_corloc.items()))
            print(f"{tag} {args.split} CorLoc {result.corloc:.4f} [{per_class}] -> {result.detections_path}")
    return EXIT_OK


def cmd_plot(args):
    emitted = emit_plots(RunLog.read_csv(args.runlog), args.out)
    if emitted:
        for metric, path in emitted["charts"].items():
            print(f"{metric}: {path}")
    return EXIT_OK


def cmd_gradcheck(args):
    worst = run_gradient_checks(instances=args.instances, seed=args.seed)
    print(f"max relative error {worst:.3e} (tolerance {GRADIENT_TOLERANCE:.0e})")
    return EXIT_OK if worst < GRADIENT_TOLERANCE else EXIT_GRADIENT_CHECK


def cmd_ablation(args):
    cfg = config_from_args(args)
    summary = run_ablation(cfg, args.seeds)
    for tag, values in summary.items():
        print(f"{tag}: median mAP {values['map']:.4f}, median CorLoc {values['corloc']:.4f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="collabdet",
                                     description="Collaborative weak/strong object detection on synthetic shapes")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", help="Generate the synthetic dataset")
    add_config_arguments(gen)
    gen.set_defaults(handler=cmd_gen_data)

    train_parser = subparsers.add_parser("train", help="Train in the configured mode")
    add_config_arguments(train_parser)
    train_parser.set_defaults(handler=cmd_train)

    evaluation = subparsers.add_parser("eval", help="Evaluate a checkpoint on one split")
    add_config_arguments(evaluation)
    evaluation.add_argument("--checkpoint", required=True)
    evaluation.add_argument("--split", default="test")
    evaluation.add_argument("--out", default=None, help="Directory for the detection CSV files")
    evaluation.set_defaults(handler=cmd_eval)

    plot = subparsers.add_parser("plot", help="Chart a run log")
    plot.add_argument("--runlog", required=True)
    plot.add_argument("--out", default="plots")
    plot.set_defaults(handler=cmd_plot)

    gradcheck = subparsers.add_parser("gradcheck", help="Finite-difference check of both losses")
    gradcheck.add_argument("--instances", type=int, default=20)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    ablation = subparsers.add_parser("ablation", help="All three modes over several seeds")
    add_config_arguments(ablation)
    ablation.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ablation.set_defaults(handler=cmd_ablation)
    return parser


def main(argv=None):
    """
    Parse the command line, run one subcommand and map errors to exit codes.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.handler(args)
    except ConfigurationError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CONFIGURATION
    except InvalidInputError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except CollabDetError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
