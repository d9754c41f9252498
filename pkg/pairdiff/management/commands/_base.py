from django.core.management.base import BaseCommand, CommandError
from pairdiff.choices import Variant
from pairdiff.config import ConfigError, load_config, with_output_root
from pairdiff.datasets import DatasetError
from pairdiff.services import StageError
from pairdiff.training import CheckpointError, TrainingDivergedError
import logging

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
RUNTIME_ERROR = 1

RUNTIME_ERRORS = (DatasetError, CheckpointError, TrainingDivergedError, StageError, ValueError, RuntimeError, OSError)


class ExperimentCommand(BaseCommand):
    """
    Base for commands driven by an experiment config.

    Adds the global ``--config``/``--seed``/``--out`` flags and maps failures
    to exit codes: 2 for usage and config errors, 1 for runtime failures.
    """
    flavor_arguments = False

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Experiment config (TOML or JSON)')
        parser.add_argument('--seed', type=int, default=None, help='Overrides the config seed')
        parser.add_argument('--out', default=None, help='Output root; overrides the config')
        if self.flavor_arguments:
            parser.add_argument('--flavor', choices=Variant.values, default=None,
                                help='Generator variant; overrides generator.variant')
            parser.add_argument('--with-discriminator', dest='with_discriminator', action='store_true',
                                default=None, help='Train with the time-conditioned discriminator')
            parser.add_argument('--without-discriminator', dest='with_discriminator', action='store_false',
                                help='Train without the discriminator')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def load_experiment(self, options):
        try:
            experiment = load_config(options['config'], seed=options.get('seed'))
            if self.flavor_arguments and (options.get('flavor') is not None
                                          or options.get('with_discriminator') is not None):
                experiment = experiment.with_overrides(flavor=options.get('flavor'),
                                                       with_discriminator=options.get('with_discriminator'))
        except ConfigError as e:
            for message in e.errors:
                self.stderr.write(self.style.ERROR(message))
            raise CommandError(f"Invalid config {options['config']}", returncode=USAGE_ERROR)
        if options.get('out'):
            experiment = with_output_root(experiment, options['out'])
        return experiment

    def usage_error(self, message):
        return CommandError(message, returncode=USAGE_ERROR)

    def handle(self, *args, **options):
        experiment = self.load_experiment(options)
        try:
            self.handle_experiment(experiment, **options)
        except CommandError:
            raise
        except ConfigError as e:
            raise CommandError(str(e), returncode=USAGE_ERROR)
        except RUNTIME_ERRORS as e:
            logger.error(f"{type(self).__module__.rsplit('.', 1)[-1]} failed: {str(e)}")
            raise CommandError(str(e), returncode=RUNTIME_ERROR)

    def handle_experiment(self, experiment, **options):
        raise NotImplementedError
