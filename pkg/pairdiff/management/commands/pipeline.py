from pairdiff.reports import format_metrics_table, read_metrics_csv
from pairdiff.services import PipelineService
from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Run train, select, sample, super-resolve, segment and evaluate end to end'
    flavor_arguments = True

    def handle_experiment(self, experiment, **options):
        self.stdout.write(f'Running pipeline {experiment.run_name} (config {experiment.config_hash[:12]})')
        metrics_path = PipelineService.run(experiment)
        self.stdout.write(format_metrics_table(read_metrics_csv(metrics_path)))
        self.stdout.write(self.style.SUCCESS(f'Metrics written to {metrics_path}'))
