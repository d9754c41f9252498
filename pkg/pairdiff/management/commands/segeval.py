from pairdiff.datasets import load_dataset, resize_pair
from pairdiff.reports import format_metrics_table, write_metrics_csv
from pairdiff.services import DatasetService, SegmentationService
from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Evaluate a trained segmenter with Dice and IoU'

    def add_command_arguments(self, parser):
        parser.add_argument('--model', required=True, help='Path to a saved segmenter')
        parser.add_argument('--test-dir', default=None, help='Test pairs; defaults to the configured test set')
        parser.add_argument('--size', type=int, default=None, help='Resize test pairs to this size')
        parser.add_argument('--method', default='segmenter', help='Method label for the CSV row')
        parser.add_argument('--phase', default='synthetic', help='Phase label for the CSV row')
        parser.add_argument('--csv', default=None, help='Append the result to this metrics CSV')

    def handle_experiment(self, experiment, **options):
        size = options['size']
        if options['test_dir']:
            pairs = load_dataset(options['test_dir'])
            if size is not None:
                pairs = [resize_pair(pair, size) for pair in pairs]
        else:
            pairs = DatasetService.test_pairs(experiment, size or experiment.data.toy_size)
        if not pairs:
            raise self.usage_error('No test pairs to evaluate on')

        metrics = SegmentationService.evaluate(options['model'], pairs, experiment.segmentation.threshold)
        row = {'method': options['method'], 'phase': options['phase'], **metrics.to_dict()}
        self.stdout.write(format_metrics_table([row]))
        self.stdout.write(f"mean per-image dice={metrics.mean_dice:.4f} iou={metrics.mean_iou:.4f}")
        if options['csv']:
            write_metrics_csv([row], options['csv'], append=True)
            self.stdout.write(self.style.SUCCESS(f"Appended metrics to {options['csv']}"))
