# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Entrypoint to the neighbormix program."""

from __future__ import annotations

# Initialize logging before the rest of the package is imported
from ..logging import initialize_app_logging, log  # noqa: E402

initialize_app_logging()

# pylint: disable=wrong-import-position
import argparse  # noqa: E402
import asyncio  # noqa: E402
import os  # noqa: E402
import os.path  # noqa: E402
import sys  # noqa: E402
import typing as t  # noqa: E402
from collections.abc import Callable, Mapping  # noqa: E402

import twiggy  # type: ignore[import]  # noqa: E402

from .. import app_context  # noqa: E402
from ..ablation import swap_table  # noqa: E402
from ..args import (  # noqa: E402
    InvalidArgumentError,
    add_common_options,
    default_seed,
    get_toplevel_parser,
    normalize_toplevel_options,
    parse_lambdas,
)
from ..config import (  # noqa: E402
    ConfigError,
    dump_experiment,
    experiment_from_flat,
    load_config,
)
from ..evaluation import EvaluationError, boundary_entropy, map_ladder  # noqa: E402
from ..infer import proposals_to_csv, run_dataset_inference, run_inference  # noqa: E402
from ..model import CheckpointError, Model, load_checkpoint, save_checkpoint  # noqa: E402
from ..plot import save_tcas_figure  # noqa: E402
from ..schemas.experiment import PRESETS, ExperimentConfig  # noqa: E402
from ..synthdata import Dataset, DatasetLoadError, generate_dataset, load_dataset  # noqa: E402
from ..train import (  # noqa: E402
    TOY_MODEL,
    NonFiniteLossError,
    gradcheck_mode,
    toy_video,
    train,
)
from ..utils.io import copy_file, write_file  # noqa: E402

mlog = log.fields(mod=__name__)

#: Exit code for usage and configuration problems.
EXIT_USAGE = 2
#: Exit code for numerical failures: non-finite losses and failed gradient checks.
EXIT_NUMERIC = 3


#
# Setting up options
#


def _add_data_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--data",
        required=True,
        help="Manifest of the split to use, as written by the gen subcommand",
    )


def _add_out_dir_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--out-dir",
        default=".",
        help="Directory to write the outputs to. It is created if needed. Default: %(default)s",
    )


def _add_eval_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--iou",
        default=None,
        help="tIoU thresholds, as a ladder start:step:stop (for example 0.1:0.1:0.7)"
        " or a comma separated list",
    )
    parser.add_argument(
        "--entropy",
        action="store_true",
        default=None,
        help="Also report the boundary entropy H(d_t)",
    )


def parse_args(program_name: str, args: list[str]) -> argparse.Namespace:
    """
    Parse and coerce the command line arguments.

    :arg program_name: The name of the program
    :arg args: A list of the command line arguments
    :returns: A :python:obj:`argparse.Namespace`
    :raises InvalidArgumentError: Whenever there's something wrong with the arguments.
    """
    common_parser = argparse.ArgumentParser(add_help=False)
    add_common_options(common_parser)

    parser = get_toplevel_parser(
        "neighbormix",
        prog=program_name,
        program_name=program_name,
        description="Weakly-supervised temporal action localization experiments",
    )
    subparsers = parser.add_subparsers(
        title="Subcommands", dest="command", help="for help use SUBCOMMANDS -h"
    )
    subparsers.required = True

    gen_parser = subparsers.add_parser(
        "gen", parents=[common_parser], description="Generate a synthetic dataset"
    )
    _add_out_dir_option(gen_parser)

    train_parser = subparsers.add_parser(
        "train", parents=[common_parser], description="Train a model on a dataset"
    )
    _add_data_option(train_parser)
    _add_out_dir_option(train_parser)
    train_parser.add_argument(
        "--eval-data",
        default=None,
        help="Manifest of a held-out split for evaluation snapshots every eval_every epochs",
    )
    train_parser.add_argument(
        "--baseline", choices=("mil", "attention"), default=None, help="Baseline network"
    )
    train_parser.add_argument(
        "--c3bn",
        choices=("on", "off"),
        default=None,
        help="Switch adjacent-snippet mixing and its consistency losses on or off",
    )
    train_parser.add_argument(
        "--lambdas",
        type=parse_lambdas,
        default=None,
        metavar="L1,L2,L3",
        help="Weights of the macro consistency, prediction consistency and contrastive losses",
    )
    train_parser.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        default=None,
        help="Use the loss weights of a baseline recipe. --lambdas overrides it.",
    )
    train_parser.add_argument("--epochs", type=int, default=None, help="Number of epochs")

    eval_parser = subparsers.add_parser(
        "eval",
        parents=[common_parser],
        description="Localize actions with a trained model and evaluate the proposals",
    )
    eval_parser.add_argument("--checkpoint", required=True, help="Checkpoint to evaluate")
    _add_data_option(eval_parser)
    _add_out_dir_option(eval_parser)
    _add_eval_options(eval_parser)

    ablate_parser = subparsers.add_parser(
        "ablate",
        parents=[common_parser],
        description="Swap boundary localization and proposal evaluation between two models",
    )
    ablate_parser.add_argument(
        "--base-checkpoint", required=True, help="Checkpoint of the baseline model"
    )
    ablate_parser.add_argument(
        "--c3bn-checkpoint", required=True, help="Checkpoint of the model trained with mixing"
    )
    _add_data_option(ablate_parser)
    _add_out_dir_option(ablate_parser)
    _add_eval_options(ablate_parser)

    gradcheck_parser = subparsers.add_parser(
        "gradcheck",
        parents=[common_parser],
        description="Check analytic gradients of the full objective against finite differences",
    )
    gradcheck_parser.add_argument(
        "--baseline", choices=("mil", "attention"), default=None, help="Baseline network"
    )
    gradcheck_parser.add_argument(
        "--eps", type=float, default=1e-5, help="Finite difference step. Default: %(default)s"
    )
    gradcheck_parser.add_argument(
        "--tol", type=float, default=1e-4, help="Relative error tolerance. Default: %(default)s"
    )

    plot_parser = subparsers.add_parser(
        "plot",
        parents=[common_parser],
        description="Draw the class activation sequence of one video as SVG",
    )
    plot_parser.add_argument("--checkpoint", required=True, help="Checkpoint to use")
    _add_data_option(plot_parser)
    plot_parser.add_argument("--video-id", required=True, help="Video to draw")
    plot_parser.add_argument("--out", required=True, help="SVG file to write")

    # This must come after all parser setup
    if "--version" in args:
        parser.parse_args(["--version"])

    try:
        parsed_args: argparse.Namespace = parser.parse_args(args)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise InvalidArgumentError("invalid command line, see the message above") from exc

    normalize_toplevel_options(parsed_args)
    for option in ("data", "eval_data", "checkpoint", "base_checkpoint", "c3bn_checkpoint"):
        path = getattr(parsed_args, option, None)
        if path is not None and not os.path.isfile(path):
            raise InvalidArgumentError(
                f"--{option.replace('_', '-')}: {path} does not exist or is not a file"
            )
    return parsed_args


#
# Experiment settings
#


def _flag_overrides(args: argparse.Namespace) -> dict[str, t.Any]:
    overrides: dict[str, t.Any] = {}
    if getattr(args, "baseline", None) is not None:
        overrides["baseline"] = args.baseline
    if getattr(args, "c3bn", None) is not None:
        overrides["c3bn"] = args.c3bn
    if getattr(args, "preset", None) is not None:
        overrides["preset"] = args.preset
    if getattr(args, "lambdas", None) is not None:
        overrides["lambda1"], overrides["lambda2"], overrides["lambda3"] = args.lambdas
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "iou", None) is not None:
        overrides["iou"] = args.iou
    if getattr(args, "entropy", None):
        overrides["entropy"] = True
    return overrides


def build_experiment(args: argparse.Namespace, cfg: Mapping[str, t.Any]) -> ExperimentConfig:
    """
    Merge experiment keys from the config files with command line flags.  Flags win.  The seed
    comes from ``--seed``, then the config, then :envvar:`C3BN_SEED`, then 0.
    """
    values = {key: value for key, value in cfg.items() if key != "logging_cfg"}
    preset_flag = getattr(args, "preset", None)
    if preset_flag is not None and getattr(args, "lambdas", None) is None:
        # an explicit preset flag replaces weights from the config files
        for key in ("lambda1", "lambda2", "lambda3"):
            values.pop(key, None)
    values.update(_flag_overrides(args))
    if args.seed is not None:
        values["seed"] = args.seed
    elif "seed" not in values:
        values["seed"] = default_seed()
    return experiment_from_flat(values, "configuration and command line")


async def _snapshot_config(
    config_files: list[str], out_dir: str, seed: int, experiment: ExperimentConfig
) -> None:
    """
    Copy the config files next to the outputs.  Without any, write the effective settings.
    """
    if not config_files:
        await write_file(
            os.path.join(out_dir, f"config-seed{seed}.cfg"), dump_experiment(experiment)
        )
        return
    for index, conf_file in enumerate(config_files):
        suffix = "" if index == 0 else f"-{index}"
        await copy_file(conf_file, os.path.join(out_dir, f"config-seed{seed}{suffix}.cfg"))


def _check_model_fits(model: Model, dataset: Dataset, source: str) -> None:
    if (model.spec.feature_dim, model.spec.num_classes) != (
        dataset.feature_dim,
        dataset.num_classes,
    ):
        raise InvalidArgumentError(
            f"{source} expects {model.spec.feature_dim} features and"
            f" {model.spec.num_classes} classes, the dataset has {dataset.feature_dim} and"
            f" {dataset.num_classes}"
        )


#
# Subcommands
#


async def gen_command(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    manifests = await generate_dataset(experiment.generator, experiment.seed, args.out_dir)
    await _snapshot_config(args.config_file, args.out_dir, experiment.seed, experiment)
    for split, manifest in manifests.items():
        print(f"{split}: {manifest}")
    return 0


async def train_command(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    flog = mlog.fields(func="train_command")
    dataset = await load_dataset(args.data)
    eval_dataset = await load_dataset(args.eval_data) if args.eval_data else None
    os.makedirs(args.out_dir, exist_ok=True)
    seed = experiment.train.seed
    checkpoint_path = os.path.join(args.out_dir, f"checkpoint-seed{seed}.bin")

    async def save_epoch(epoch: int, model: Model) -> None:
        await save_checkpoint(checkpoint_path, model, seed)
        flog.fields(epoch=epoch, path=checkpoint_path).debug("checkpoint saved")

    result = await train(
        dataset,
        experiment.train,
        experiment.weights,
        experiment.model,
        eval_dataset=eval_dataset,
        infer_cfg=experiment.infer,
        eval_cfg=experiment.eval,
        on_epoch=save_epoch,
    )
    await write_file(
        os.path.join(args.out_dir, f"trainlog-seed{seed}.csv"), result.log.to_csv()
    )
    await _snapshot_config(args.config_file, args.out_dir, seed, experiment)
    print(f"checkpoint: {checkpoint_path}")
    return 0


async def eval_command(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    dataset = await load_dataset(args.data)
    model, meta = await load_checkpoint(args.checkpoint)
    _check_model_fits(model, dataset, args.checkpoint)
    results = await run_dataset_inference(
        model, dataset, experiment.infer, experiment.weights.topk_divisor
    )
    proposals = [proposal for result in results for proposal in result.proposals]
    report = map_ladder(proposals, dataset.segments, experiment.eval.iou, dataset.num_classes)
    if experiment.eval.entropy:
        report.entropy = boundary_entropy(
            [result.probs for result in results],
            labels=[video.label for video in dataset.videos],
            restrict_to_action_classes=experiment.eval.restrict_to_action_classes,
        )

    os.makedirs(args.out_dir, exist_ok=True)
    seed = meta.seed
    await write_file(
        os.path.join(args.out_dir, f"proposals-seed{seed}.csv"), proposals_to_csv(proposals)
    )
    await write_file(os.path.join(args.out_dir, f"eval-seed{seed}.csv"), report.to_csv())
    table = report.format_table()
    await write_file(os.path.join(args.out_dir, f"eval-seed{seed}.txt"), table)
    mlog.fields(func="eval_command", avg_map=report.avg_map).notice("evaluation written")
    print(table, end="")
    return 0


async def ablate_command(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    dataset = await load_dataset(args.data)
    base_model, base_meta = await load_checkpoint(args.base_checkpoint)
    c3bn_model, c3bn_meta = await load_checkpoint(args.c3bn_checkpoint)
    _check_model_fits(base_model, dataset, args.base_checkpoint)
    _check_model_fits(c3bn_model, dataset, args.c3bn_checkpoint)
    divisor = experiment.weights.topk_divisor
    base_results = await run_dataset_inference(base_model, dataset, experiment.infer, divisor)
    c3bn_results = await run_dataset_inference(c3bn_model, dataset, experiment.infer, divisor)
    table = swap_table(base_results, c3bn_results, dataset, experiment.infer, experiment.eval)

    os.makedirs(args.out_dir, exist_ok=True)
    seeds = (
        f"{base_meta.seed}"
        if base_meta.seed == c3bn_meta.seed
        else f"{base_meta.seed}-{c3bn_meta.seed}"
    )
    await write_file(os.path.join(args.out_dir, f"ablation-seed{seeds}.csv"), table.to_csv())
    text = table.format_table()
    await write_file(os.path.join(args.out_dir, f"ablation-seed{seeds}.txt"), text)
    print(text, end="")
    return 0


async def gradcheck_command(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    model_cfg = TOY_MODEL.model_copy(update={"baseline": experiment.model.baseline})
    report = gradcheck_mode(
        toy_video(experiment.seed),
        model_cfg,
        experiment.weights,
        seed=experiment.seed,
        gamma=experiment.train.gamma,
        terms=experiment.train.terms,
        cons_space=experiment.train.cons_space,
        eps=args.eps,
        tol=args.tol,
    )
    print(report.format())
    return 0 if report.passed else EXIT_NUMERIC


async def plot_command(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    dataset = await load_dataset(args.data)
    video = dataset.get(args.video_id)
    if video is None:
        raise InvalidArgumentError(f"--video-id: {args.video_id} is not in {args.data}")
    model, _ = await load_checkpoint(args.checkpoint)
    _check_model_fits(model, dataset, args.checkpoint)
    result = run_inference(model, video, experiment.infer, experiment.weights.topk_divisor)
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    await save_tcas_figure(args.out, result, video)
    return 0


ARGS_MAP: dict[
    str, Callable[[argparse.Namespace, ExperimentConfig], t.Coroutine[t.Any, t.Any, int]]
] = {
    "gen": gen_command,
    "train": train_command,
    "eval": eval_command,
    "ablate": ablate_command,
    "gradcheck": gradcheck_command,
    "plot": plot_command,
}

_USAGE_ERRORS = (
    ConfigError,
    InvalidArgumentError,
    DatasetLoadError,
    CheckpointError,
    EvaluationError,
)


def run(args: list[str]) -> int:
    """
    Run the program.

    :arg args: A list of command line arguments.  Typically :python:`sys.argv`.
    :returns: 0 on success, 2 for usage and configuration errors, 3 for numerical failures.
    """
    flog = mlog.fields(func="run")
    flog.fields(raw_args=args).info("Enter")

    program_name = os.path.basename(args[0])
    try:
        parsed_args = parse_args(program_name, args[1:])
    except InvalidArgumentError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        cfg = load_config(parsed_args.config_file)
        flog.fields(cfg=cfg).info("Config loaded")
        context_data = app_context.create_contexts(args=parsed_args, cfg=cfg)
    except (ConfigError, ValueError) as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_USAGE

    with app_context.app_and_lib_context(context_data) as (app_ctx, dummy_):
        twiggy.dict_config(app_ctx.logging_cfg.model_dump())
        flog.debug("Set logging config")
        try:
            experiment = build_experiment(context_data.args, context_data.cfg)
            return asyncio.run(ARGS_MAP[parsed_args.command](context_data.args, experiment))
        except _USAGE_ERRORS as exc:
            flog.fields(error=exc).error("aborted")
            print(f"ERROR: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except NonFiniteLossError as exc:
            flog.fields(video_id=exc.video_id, term=exc.term).error("training diverged")
            print(f"ERROR: {exc}", file=sys.stderr)
            return EXIT_NUMERIC


def main() -> int:
    """
    Entrypoint called from the script.

    console_scripts call functions which take no parameters.  However, it's hard to test a
    function which takes no parameters so this function lightly wraps :func:`run`, which actually
    does the heavy lifting.

    :returns: A program return code.
    """
    return run(sys.argv)


if __name__ == "__main__":
    sys.exit(main())
