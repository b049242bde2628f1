import argparse
import os
import sys

from src.config import THREADS_ENV, RunConfig, worker_threads
from src.errors import NumericalError, SpecRecError, UsageError


class CliParser(argparse.ArgumentParser):
    """Reports argument errors as UsageError (exit code 1)."""

    def error(self, message):
        raise UsageError(message)


def add_config_args(parser: argparse.ArgumentParser, seed: bool = False):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key (repeatable)")
    if seed:
        parser.add_argument("--seed", type=int, help="Random seed (required here or in the config)")


def resolve_config(args, base: RunConfig = None) -> RunConfig:
    """Config file, then --set overrides, then dedicated flags."""
    config = base or RunConfig()
    if getattr(args, "config", None):
        config.update_from_file(args.config)
    config.apply_overrides(getattr(args, "set", []))
    if getattr(args, "seed", None) is not None:
        config.set("seed", args.seed)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(description="OCT spectral-bandwidth recovery: phantoms, training, evaluation")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Phantom command
    parser_phantom = subparsers.add_parser("phantom", help="Generate a synthetic phantom dataset with a split manifest")
    add_config_args(parser_phantom, seed=True)
    parser_phantom.add_argument("--out", help="Output directory (default: phantom.out_dir)")

    # Degrade command
    parser_degrade = subparsers.add_parser("degrade", help="Window fringes or mean-filter B-scans in an OCT1 file")
    add_config_args(parser_degrade)
    parser_degrade.add_argument("input", help="Input OCT1 file ([n_k, W] or [B, n_k, W]; [H, W] stacks for spatial)")
    parser_degrade.add_argument("output", help="Output OCT1 file")
    parser_degrade.add_argument("--mode", choices=["spectral", "spatial"], default="spectral")
    parser_degrade.add_argument("--alpha", type=float, help="gausswin alpha (spectral)")
    parser_degrade.add_argument("--center", type=float, help="Window center sample (spectral, default: centered)")
    parser_degrade.add_argument("--n", type=int, help="Mean filter length (spatial)")

    # Train command
    parser_train = subparsers.add_parser("train", help="Train a generator/discriminator pair")
    add_config_args(parser_train, seed=True)
    parser_train.add_argument("--dataset", help="Phantom dataset directory (default: train.dataset)")
    parser_train.add_argument("--domain", choices=["spatial", "spectral"])
    parser_train.add_argument("--save-dir", help="Run directory (default: train.save_dir)")
    parser_train.add_argument("--epochs", type=int)
    parser_train.add_argument("--batch-size", type=int)

    # Eval command
    parser_eval = subparsers.add_parser("eval", help="Score a trained run on the test split")
    add_config_args(parser_eval)
    parser_eval.add_argument("run_dir", help="Run directory written by 'train'")
    parser_eval.add_argument("--dataset", help="Dataset directory (default: the run's train.dataset)")
    parser_eval.add_argument("--domain", choices=["spatial", "spectral"], required=True)
    parser_eval.add_argument("--checkpoint", help="Checkpoint file (default: latest i_mse checkpoint)")
    parser_eval.add_argument("--scale", type=int, choices=[1, 255], help="Reporting scale")
    parser_eval.add_argument("--out", help="Report directory (default: the run directory)")

    # Gradcheck command
    parser_grad = subparsers.add_parser("gradcheck", help="Finite-difference gradient check of every layer")
    parser_grad.add_argument("--seeds", type=int, default=20, help="Number of random seeds (default: 20)")
    parser_grad.add_argument("--tol", type=float, default=1e-4, help="Max relative error (default: 1e-4)")

    # PGM commands
    parser_import = subparsers.add_parser("import-pgm", help="Convert an 8-bit PGM into a [0, 1] OCT1 image")
    parser_import.add_argument("pgm", help="Input PGM (P5)")
    parser_import.add_argument("output", help="Output OCT1 file")

    parser_export = subparsers.add_parser("export-pgm", help="Write a [0, 1] OCT1 image as an 8-bit PGM")
    parser_export.add_argument("oct1", help="Input OCT1 file (2-D, or 3-D with --index)")
    parser_export.add_argument("output", help="Output PGM file")
    parser_export.add_argument("--index", type=int, default=0, help="Image index in a 3-D stack")
    parser_export.add_argument("--standardize", action="store_true",
                               help="Percentile-clip and rescale to [0, 1] before quantizing")

    # Coherence command
    parser_coh = subparsers.add_parser("coherence", help="Coherence length before and after windowing")
    add_config_args(parser_coh)
    parser_coh.add_argument("--n-k", type=int, help="Fringe length (default: phantom.n_k)")

    # Config command
    parser_config = subparsers.add_parser("config", help="Print the resolved configuration")
    add_config_args(parser_config, seed=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if os.environ.get(THREADS_ENV):
            import torch
            torch.set_num_threads(worker_threads())

        if args.command == "phantom":
            from src.processor import write_phantom
            config = resolve_config(args)
            config.require_seed()
            write_phantom(config, args.out)

        elif args.command == "degrade":
            from src.processor import degrade_file
            config = resolve_config(args)
            if args.alpha is not None:
                config.set("signal.alpha", args.alpha)
            if args.n is not None:
                config.set("signal.mean_filter_n", args.n)
            widths = degrade_file(args.input, args.output, args.mode, config, args.center)
            if widths:
                print(f"Mean peak FWHM: ground truth {widths[0]:.3f} px, windowed {widths[1]:.3f} px "
                      f"(alpha={config['signal.alpha']:g})")

        elif args.command == "train":
            from src.train import train_run
            config = resolve_config(args)
            for key, value in (("train.domain", args.domain), ("train.epochs", args.epochs),
                               ("train.batch_size", args.batch_size), ("train.save_dir", args.save_dir)):
                if value is not None:
                    config.set(key, value)
            config.require_seed()
            train_run(args.dataset or config["train.dataset"], config)

        elif args.command == "eval":
            from src.config import CONFIG_NAME
            from src.evaluate import evaluate_testset
            run_config = os.path.join(args.run_dir, CONFIG_NAME)
            if not os.path.exists(run_config):
                raise UsageError(f"No {CONFIG_NAME} in {args.run_dir}; is it a training run directory?")
            config = resolve_config(args, base=RunConfig.load(run_config))
            if args.scale is not None:
                config.set("eval.scale", args.scale)
            evaluate_testset(args.run_dir, args.dataset or config["train.dataset"], args.domain,
                             config=config, checkpoint=args.checkpoint, out_dir=args.out)

        elif args.command == "gradcheck":
            from src.autodiff import run_layer_checks
            results = run_layer_checks(range(args.seeds), args.tol)
            worst = {}
            for name, seed, err, passed in results:
                if name not in worst or err > worst[name][0]:
                    worst[name] = (err, passed)
            print(f"\n{'Check':<32}{'max rel err':>14}  status")
            print("-" * 60)
            for name, (err, _) in worst.items():
                print(f"{name:<32}{err:>14.3e}  {'ok' if err < args.tol else 'FAIL'}")
            failed = [r for r in results if not r[3]]
            print("-" * 60)
            print(f"{len(results) - len(failed)}/{len(results)} checks passed over {args.seeds} seeds")
            if failed:
                raise NumericalError(f"{len(failed)} gradient check(s) at or above tolerance {args.tol:g}")

        elif args.command == "import-pgm":
            from src.fileio import import_pgm, write_oct1
            image = import_pgm(args.pgm)
            write_oct1(args.output, image)
            print(f"Imported {image.shape[0]}x{image.shape[1]} image into {args.output}")

        elif args.command == "export-pgm":
            from src.fileio import export_pgm, read_oct1
            from src.metrics import standardize_for_eval
            array = read_oct1(args.oct1)
            if array.ndim == 3:
                if not 0 <= args.index < array.shape[0]:
                    raise UsageError(f"--index {args.index} outside a stack of {array.shape[0]} images")
                array = array[args.index]
            if args.standardize:
                array = standardize_for_eval(array)[0].pixels
            export_pgm(array, args.output)
            print(f"Exported {array.shape[0]}x{array.shape[1]} image to {args.output}")

        elif args.command == "coherence":
            from src.fringe import CoherenceSpec, coherence_length, effective_coherence_length
            config = resolve_config(args)
            spec = CoherenceSpec(config["signal.lambda0_nm"], config["signal.delta_lambda_nm"])
            n_k = args.n_k or config["phantom.n_k"]
            full = coherence_length(spec)
            windowed = effective_coherence_length(spec, n_k, config["signal.alpha"])
            print(f"lambda0 = {spec.lambda0:g} nm, delta lambda = {spec.delta_lambda:g} nm")
            print(f"Coherence length (full band):        {full / 1000.0:.3f} um")
            print(f"Coherence length (alpha={config['signal.alpha']:g}, n_k={n_k}): "
                  f"{windowed / 1000.0:.3f} um ({windowed / full:.2f}x)")

        elif args.command == "config":
            print(resolve_config(args).dumps(), end="")

        else:
            parser.print_help()
            return 1

    except SpecRecError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
