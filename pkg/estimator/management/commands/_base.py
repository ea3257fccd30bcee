"""
Shared plumbing for the pipeline commands: config resolution, exit codes,
atomic outputs and model assembly.
"""
import logging
import sys

import numpy as np
from django.core.management.base import BaseCommand, CommandError, CommandParser

from estimator.artifacts import ArtifactWriter
from estimator.config import CONFIG_KEYS, PipelineConfig, dump_config, resolve_config
from estimator.exceptions import AgeEstimatorError, ConfigError, NumericError
from estimator.network import AgeModel, build_model, init_weights
from estimator.weights import load_weights, validate_store

logger = logging.getLogger(__name__)

USAGE_ERROR = 1
DATA_ERROR = 2
NUMERIC_ERROR = 3

CONFIG_FILE = "config.txt"
MANIFEST_FILE = "manifest.tsv"
HEAD_FILE = "head.cage"
PREDICTIONS_FILE = "predictions.tsv"

# independent generator streams derived from the global seed
BACKBONE_STREAM = 0
HEAD_STREAM = 2


class UsageErrorParser(CommandParser):
    """Argument errors exit with status 1 like every other usage error."""

    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}", returncode=USAGE_ERROR)


class PipelineCommand(BaseCommand):
    """
    Base for detect/prepare/train/predict/evaluate.

    Subclasses implement run(config, out, **options) and write every artifact
    through `out`; on failure everything written so far is removed.
    """

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.__class__ = UsageErrorParser
        return parser

    def add_arguments(self, parser):
        parser.add_argument('--config', help='key=value config file; command-line keys override it')
        for key in CONFIG_KEYS:
            parser.add_argument(f'--{key}', dest=key, default=None, metavar='VALUE')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            config = resolve_config(options.get('config'), {key: options.get(key) for key in CONFIG_KEYS})
            with ArtifactWriter(config.output_dir) as out:
                out.write_text(CONFIG_FILE, dump_config(config))
                self.run(config, out, **{k: v for k, v in options.items() if k != 'config'})
        except ConfigError as e:
            logger.error(f"{e}")
            raise CommandError(str(e), returncode=USAGE_ERROR) from e
        except NumericError as e:
            logger.error(f"Numeric failure: {e}")
            raise CommandError(str(e), returncode=NUMERIC_ERROR) from e
        except AgeEstimatorError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise CommandError(str(e), returncode=DATA_ERROR) from e

    def run(self, config: PipelineConfig, out: ArtifactWriter, **options):
        raise NotImplementedError


def assemble_model(config: PipelineConfig) -> AgeModel:
    """
    Build the configured model with backbone tensors in place.

    Without a backbone weight file the backbone is initialized from the seed,
    so every command of a run sees the same random backbone.
    """
    model = build_model(config.width_divisor, dropout_rate=config.dropout_rate, mean=config.mean)
    if config.backbone_weights:
        store = load_weights(config.backbone_weights, model.spec)
        validate_store({k: v for k, v in store.items() if k in model.backbone.parameter_shapes()},
                       model.backbone, require_all=True)
        model.weights.update(store)
    else:
        logger.warning("No backbone weights configured; initializing the backbone randomly from the seed")
        model.weights.update(init_weights(model.backbone, np.random.default_rng([config.seed, BACKBONE_STREAM])))
    return model


def initial_head(model: AgeModel, config: PipelineConfig):
    return init_weights(model.head, np.random.default_rng([config.seed, HEAD_STREAM]))
