from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from pairdiff.datasets import DatasetError, load_dataset
from pairdiff.reports import contact_sheet, format_metrics_table, read_metrics_csv


class Command(BaseCommand):
    help = 'Render a contact sheet for a dataset directory and/or print a metrics CSV'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', default=None, help='Dataset directory with images/ and masks/')
        parser.add_argument('--out', default=None, help='Contact sheet path; defaults to <dataset>/contact_sheet.png')
        parser.add_argument('--max-pairs', type=int, default=16)
        parser.add_argument('--metrics', default=None, help='Metrics CSV to print as a table')

    def handle(self, *args, **options):
        if not (options['dataset'] or options['metrics']):
            raise CommandError('Nothing to report: pass --dataset and/or --metrics', returncode=2)

        if options['dataset']:
            dataset = Path(options['dataset'])
            try:
                pairs = load_dataset(dataset)
                if not pairs:
                    raise DatasetError(f'No pairs in {dataset}')
                path = contact_sheet(pairs, options['out'] or dataset / 'contact_sheet.png', options['max_pairs'])
            except (DatasetError, OSError) as e:
                raise CommandError(str(e), returncode=1)
            self.stdout.write(self.style.SUCCESS(f'Contact sheet written to {path}'))

        if options['metrics']:
            try:
                rows = read_metrics_csv(options['metrics'])
            except OSError as e:
                raise CommandError(f"Cannot read {options['metrics']}: {e}", returncode=1)
            self.stdout.write(format_metrics_table(rows))
