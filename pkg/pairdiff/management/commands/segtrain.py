from dataclasses import replace
from pathlib import Path

from pairdiff.segmentation import SEGMENTER_NAME
from pairdiff.services import SegmentationService
from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Train a segmentation network on a (generated) dataset directory'

    def add_command_arguments(self, parser):
        parser.add_argument('--train-dir', required=True, help='Dataset directory with images/ and masks/')
        parser.add_argument('--model-out', default=None, help=f'Where to write {SEGMENTER_NAME}')
        parser.add_argument('--epochs', type=int, default=None, help='Overrides segmentation.epochs')

    def handle_experiment(self, experiment, **options):
        cfg = experiment.segmentation
        if options['epochs'] is not None:
            if options['epochs'] < 0:
                raise self.usage_error(f"--epochs must be >= 0, got {options['epochs']}")
            cfg = replace(cfg, epochs=options['epochs'])
        train_dir = Path(options['train_dir'])
        model_out = options['model_out'] or experiment.output_root / 'segmentation' / train_dir.name / SEGMENTER_NAME
        SegmentationService.train(train_dir, cfg, experiment.seed, model_out)
        self.stdout.write(self.style.SUCCESS(f'Segmenter trained on {train_dir} saved to {model_out}'))
