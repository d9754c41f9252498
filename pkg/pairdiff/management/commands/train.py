from pairdiff.services import TrainingService
from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Train a paired image/mask generator and write its checkpoints'
    flavor_arguments = True

    def handle_experiment(self, experiment, **options):
        self.stdout.write(
            f'Training {experiment.run_name} for {experiment.train.epochs} epochs '
            f'(seed {experiment.seed}, config {experiment.config_hash[:12]})'
        )
        run = TrainingService.train(experiment)
        self.stdout.write(
            self.style.SUCCESS(f'Run {run.name} completed with {run.checkpoints.count()} checkpoints in {run.run_dir}')
        )
