from pairdiff.choices import SamplerMode, SelectionStrategy
from pairdiff.services import RunService, SamplingService, SelectionService
from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Generate image/mask pairs from a trained run'
    flavor_arguments = True

    def add_command_arguments(self, parser):
        parser.add_argument('--run', default=None, help='Run name; defaults to the configured run')
        parser.add_argument('--n', type=int, default=None, help='Number of pairs')
        parser.add_argument('--mode', choices=SamplerMode.values, default=None)
        parser.add_argument('--steps', type=int, default=None, help='Sampling steps')
        parser.add_argument('--strategy', choices=SelectionStrategy.values, default=None,
                            help='Checkpoint selection strategy')
        parser.add_argument('--out-dir', default=None, help='Export directory')
        parser.add_argument('--grid', action='store_true', help='Also write a contact sheet')

    def handle_experiment(self, experiment, **options):
        sampling = experiment.sampling
        T = experiment.train.T
        n = options['n'] or sampling.n
        mode = options['mode'] or sampling.mode
        steps = options['steps']
        if steps is None:
            steps = T if mode == SamplerMode.DDPM else min(sampling.steps, T)
        if n < 1:
            raise self.usage_error(f'--n must be positive, got {n}')
        if steps < 1 or steps > T:
            raise self.usage_error(f'--steps must be in [1, {T}], got {steps}')
        if mode == SamplerMode.DDPM and steps != T:
            raise self.usage_error(f'ddpm sampling visits every timestep: --steps must equal T ({T})')

        strategy = options['strategy'] or sampling.strategy
        run = RunService.get_run(options['run'] or experiment.run_name)
        record, _ = SelectionService.select(run, strategy, experiment)
        self.stdout.write(f'Using epoch {record.epoch} of {run.name} ({strategy})')

        out_dir = options['out_dir'] or experiment.output_root / 'samples' / run.name / strategy
        manifest = SamplingService.sample(record, n, mode, steps, experiment.seed, out_dir,
                                          sampling.threshold, sampling.batch_size, grid=options['grid'])
        self.stdout.write(self.style.SUCCESS(f"Wrote {manifest['count']} pairs to {out_dir}"))
