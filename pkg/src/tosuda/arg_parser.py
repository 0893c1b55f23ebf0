import argparse

SPLITS = ("source_train", "source_test", "target_test")


def shared_args(subparsers, name, description):
    parser = subparsers.add_parser(name, description=description, help=description)

    input_group = parser.add_argument_group("Input")
    input_group.add_argument(
        "-c",
        "--config",
        help="Run config file of key = value lines (default: shipped defaults)",
    )

    output_group = parser.add_argument_group("Output")

    options_group = parser.add_argument_group("General options")
    options_group.add_argument(
        "--seed",
        type=int,
        help="Run seed; overrides the seed key of the config",
    )
    options_group.add_argument(
        "-l",
        "--log-level",
        type=str,
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        default="INFO",
        help="Set the logging level (default: INFO)",
    )

    return parser, input_group, output_group, options_group


def _add_out(output_group, required=True):
    output_group.add_argument(
        "-o",
        "--out",
        required=required,
        help="Output directory (created if missing)",
    )


def _add_checkpoint(input_group):
    input_group.add_argument(
        "--checkpoint",
        required=True,
        help="Checkpoint file written by the train command",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tosuda",
        description="One-shot unsupervised domain adaptation with a learnable augmenter",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    _, _, output_group, _ = shared_args(
        subparsers, "train", "Train the classifier and augmenter on one configured run"
    )
    _add_out(output_group)

    _, input_group, _, options_group = shared_args(
        subparsers, "eval", "Report the accuracy of a checkpoint's classifier"
    )
    _add_checkpoint(input_group)
    options_group.add_argument(
        "--split",
        choices=SPLITS,
        default="target_test",
        help="Labelled set to evaluate (default: target_test)",
    )

    _, input_group, output_group, options_group = shared_args(
        subparsers, "preview", "Write source | augmented | target PPM triptychs"
    )
    _add_checkpoint(input_group)
    _add_out(output_group)
    options_group.add_argument(
        "--count",
        type=int,
        default=8,
        help="Number of triptychs to write (default: 8)",
    )

    _, _, output_group, _ = shared_args(
        subparsers, "ablate", "Run the full, no_style, no_adv and source_only variants"
    )
    _add_out(output_group)

    _, _, output_group, _ = shared_args(
        subparsers, "gen-data", "Write the synthetic source and target sets as PPM files"
    )
    _add_out(output_group)

    return parser


def parse_args(argv=None):
    return build_parser().parse_args(argv)
