import json

from pairdiff.choices import SelectionStrategy
from pairdiff.selection import format_selection_table
from pairdiff.serializers import ExperimentRunSerializer
from pairdiff.services import RunService, SelectionService
from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Score checkpoints and choose the weights to sample from'
    flavor_arguments = True

    def add_command_arguments(self, parser):
        parser.add_argument('--run', default=None, help='Run name; defaults to the configured run')
        parser.add_argument('--strategy', choices=SelectionStrategy.values, default=None)
        parser.add_argument('--score', action='store_true', help='(Re)score every checkpoint first')
        parser.add_argument('--json', action='store_true', help='Print the run and choice as JSON')

    def handle_experiment(self, experiment, **options):
        run = RunService.get_run(options['run'] or experiment.run_name)
        strategy = options['strategy'] or experiment.sampling.strategy
        if options['score']:
            SelectionService.score_run(run, experiment, force=True)
        chosen, records = SelectionService.select(run, strategy, experiment)

        if options['json']:
            RunService.sync_checkpoints(run)
            document = {'run': ExperimentRunSerializer(run).data, 'strategy': strategy,
                        'selected': chosen.to_manifest()}
            self.stdout.write(json.dumps(document, indent=2, default=str))
            return
        self.stdout.write(format_selection_table(records, chosen))
        self.stdout.write(self.style.SUCCESS(f'Selected epoch {chosen.epoch} ({strategy}): {chosen.weights_uri}'))
