from django.core.management.base import BaseCommand, CommandError

from pairdiff.datasets import DatasetError
from pairdiff.services import DatasetService


class Command(BaseCommand):
    help = 'Write the procedural ellipse dataset in the images/ + masks/ layout'

    def add_arguments(self, parser):
        parser.add_argument('--out', required=True, help='Dataset directory to create')
        parser.add_argument('--n', type=int, default=500, help='Number of pairs')
        parser.add_argument('--size', type=int, default=32, help='Image side length')
        parser.add_argument('--seed', type=int, default=0)

    def handle(self, *args, **options):
        if options['n'] < 1 or options['size'] < 16:
            raise CommandError('--n must be >= 1 and --size >= 16', returncode=2)
        try:
            ids = DatasetService.write_toy_dataset(options['out'], options['n'], options['size'], options['seed'])
        except (DatasetError, ValueError) as e:
            raise CommandError(str(e), returncode=1)
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(ids)} toy pairs to {options['out']}"))
