"""
Command-line interface

    python -m hemoscan --config config.env [--seed N] [--out DIR] <command> [options]

Exit codes: 0 success, 2 bad usage, configuration or input files, 1 anything else.
"""
import logging
from pathlib import Path

import click

from . import pipeline
from .config import load_config
from .errors import FormatError, ValidationError
from .logs import configure_logging
from .synthetic_data import SPLITS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _int_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated slice indices, got {value!r}") from None


def _str_list(ctx, param, value):
    if value is None:
        return None
    return [item.strip() for item in value.split(",") if item.strip()]


# ============================================================================
# COMMAND GROUP
# ============================================================================

@click.group()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False, path_type=Path),
              help="dotenv-style run configuration")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="override every stage seed")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="output directory (overrides OUT_DIR)")
@click.pass_context
def cli(ctx, config_path, seed, out):
    """Intracranial hemorrhage detection on synthetic CT phantoms"""
    ctx.obj = load_config(config_path, seed=seed, out=out)
    configure_logging(ctx.obj.log_level)


@cli.command()
@click.option("--n", "n_scans", type=click.IntRange(min=1), default=None, help="number of scans (default N_SCANS)")
@click.pass_obj
def synth(config, n_scans):
    """Generate a synthetic CT phantom dataset"""
    pipeline.cmd_synth(config, n_scans)


@cli.command("train-cnn")
@click.pass_obj
def train_cnn(config):
    """Stage 1: train the slice encoder"""
    pipeline.cmd_train_cnn(config)


@cli.command()
@click.pass_obj
def extract(config):
    """Encode every slice of every split"""
    pipeline.cmd_extract(config)


@cli.command("fit-selector")
@click.pass_obj
def fit_selector(config):
    """Stage 2: fit the feature selector on training embeddings"""
    pipeline.cmd_fit_selector(config)


@cli.command("train-lstm")
@click.pass_obj
def train_lstm(config):
    """Stage 3: train the bidirectional LSTM scan model"""
    pipeline.cmd_train_lstm(config)


@cli.command()
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.option("--cnn-only", is_flag=True, help="write the slice encoder's own probabilities")
@click.pass_obj
def predict(config, split, cnn_only):
    """Per-slice class probabilities for one split"""
    pipeline.cmd_predict(config, split=split, cnn_only=cnn_only)


@cli.command()
@click.option("--predictions", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="prediction table (default <out>/predictions.csv)")
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.pass_obj
def evaluate(config, predictions, split):
    """Slice- and scan-level metrics report"""
    pipeline.cmd_evaluate(config, predictions=predictions, split=split)


@cli.command()
@click.option("--scan", "scan_id", default=None, help="scan id, e.g. CT00012")
@click.option("--classes", callback=_str_list, default=None, help="comma-separated class names or indices")
@click.option("--slices", callback=_int_list, default=None, help="comma-separated slice indices")
@click.option("--localization", is_flag=True, help="score heatmaps against lesion boxes over a split")
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.pass_obj
def gradcam(config, scan_id, classes, slices, localization, split):
    """Grad-CAM overlays for one scan"""
    pipeline.cmd_gradcam(config, scan_id=scan_id, classes=classes, slices=slices,
                         localization=localization, split=split)


# ============================================================================
# ENTRY POINT
# ============================================================================

def main(argv=None):
    configure_logging()
    try:
        result = cli.main(args=argv, prog_name="hemoscan", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        logger.error("aborted")
        return EXIT_FAILURE
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except (ValidationError, FormatError) as exc:
        logger.error(str(exc))
        return EXIT_USAGE
    except Exception:
        logger.exception("command failed")
        return EXIT_FAILURE
    return result if isinstance(result, int) else EXIT_OK
