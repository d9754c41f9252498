from pairdiff.choices import SamplerMode
from pairdiff.services import SuperResolutionService, TrainingService
from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Train the super-resolution model, upscale a generated dataset 2x, or benchmark samplers'

    def add_command_arguments(self, parser):
        parser.add_argument('--train', action='store_true', help='Train the super-resolution model first')
        parser.add_argument('--input', default=None, help='Directory of low-resolution pairs')
        parser.add_argument('--out-dir', default=None, help='Export directory for the 2x pairs')
        parser.add_argument('--mode', choices=SamplerMode.values, default=None)
        parser.add_argument('--steps', type=int, default=None)
        parser.add_argument('--benchmark', action='store_true', help='Time ddpm/ddim over a step sweep')
        parser.add_argument('--benchmark-n', type=int, default=8, help='Pairs used by --benchmark')
        parser.add_argument('--step-counts', type=int, nargs='+', default=[1000, 500, 250, 100])

    def handle_experiment(self, experiment, **options):
        if not (options['train'] or options['input']):
            raise self.usage_error('Nothing to do: pass --train and/or --input')
        if options['benchmark'] and not options['input']:
            raise self.usage_error('--benchmark needs --input')

        if options['train']:
            run = TrainingService.train_superres(experiment)
            self.stdout.write(self.style.SUCCESS(f'Super-resolution run {run.name} completed in {run.run_dir}'))

        if not options['input']:
            return
        if options['benchmark']:
            results = SuperResolutionService.benchmark(experiment, options['input'], options['benchmark_n'],
                                                       options['step_counts'], experiment.seed)
            self.stdout.write(f"{'mode':<6} {'steps':>6} {'seconds':>10} {'s/step':>10}")
            for result in results:
                self.stdout.write(f'{result.mode:<6} {result.steps:>6} {result.seconds:10.3f} '
                                  f'{result.seconds_per_step:10.5f}')
            return

        out_dir = options['out_dir'] or f"{options['input'].rstrip('/')}_x2"
        manifest = SuperResolutionService.superres(experiment, options['input'], out_dir, experiment.seed,
                                                   mode=options['mode'], steps=options['steps'])
        self.stdout.write(self.style.SUCCESS(f"Super-resolved {manifest['count']} pairs into {out_dir}"))
