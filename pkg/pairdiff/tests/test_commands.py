import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest.mock import patch

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, tag

from pairdiff.choices import RunStatus
from pairdiff.datasets import load_dataset
from pairdiff.models import ExperimentRun
from pairdiff.reports import read_metrics_csv, write_metrics_csv
from pairdiff.storage import read_json

from .helpers import tiny_document


class CommandTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = self.write_config(tiny_document())

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, document, name='experiment.json'):
        path = self.root / name
        path.write_text(json.dumps({**document, 'output_root': 'out'}))
        return str(path)

    def call(self, *args, **kwargs):
        out = StringIO()
        call_command(*args, stdout=out, stderr=StringIO(), **kwargs)
        return out.getvalue()

    def assertReturncode(self, returncode, *args, **kwargs):
        with self.assertRaises(CommandError) as ctx:
            self.call(*args, **kwargs)
        self.assertEqual(ctx.exception.returncode, returncode)
        return ctx.exception


class ExperimentCommandTest(CommandTestCase):
    def test_invalid_config_is_a_usage_error(self):
        config = self.write_config(tiny_document(train={'split_ratio': 2}), 'broken.json')
        self.assertReturncode(2, 'train', '--config', config)
        self.assertReturncode(2, 'train', '--config', str(self.root / 'missing.toml'))

    def test_unknown_flavor_rejected(self):
        with self.assertRaises(CommandError):
            self.call('train', '--config', self.config, '--flavor', 'three_encoder')

    def test_flavor_flags_override_the_config(self):
        with patch('pairdiff.services.train_paired', return_value=[]) as train_paired:
            output = self.call('train', '--config', self.config, '--flavor', 'shared_encoder',
                               '--with-discriminator')
        self.assertIn('unit-shared_encoder-disc', output)
        generator_cfg, train_cfg = train_paired.call_args.args[1:3]
        self.assertEqual(generator_cfg.variant, 'shared_encoder')
        self.assertTrue(train_cfg.use_discriminator)

    def test_runtime_failure_exits_with_one(self):
        with patch('pairdiff.services.train_paired', side_effect=RuntimeError('diverged')):
            self.assertReturncode(1, 'train', '--config', self.config)
        self.assertEqual(ExperimentRun.objects.get(name='unit-concat').status, RunStatus.FAILED)

    def test_out_overrides_output_root(self):
        with patch('pairdiff.services.train_paired', return_value=[]):
            self.call('train', '--config', self.config, '--out', str(self.root / 'elsewhere'))
        run = ExperimentRun.objects.get(name='unit-concat')
        self.assertEqual(run.path, self.root / 'elsewhere' / 'run' / 'unit-concat')

    def test_sample_without_a_run(self):
        self.assertReturncode(1, 'sample', '--config', self.config, '--run', 'missing')

    def test_sample_step_bounds(self):
        self.assertReturncode(2, 'sample', '--config', self.config, '--steps', '21')
        self.assertReturncode(2, 'sample', '--config', self.config, '--mode', 'ddpm', '--steps', '10')
        self.assertReturncode(2, 'sample', '--config', self.config, '--n', '0')

    def test_superres_needs_work(self):
        self.assertReturncode(2, 'superres', '--config', self.config)
        self.assertReturncode(2, 'superres', '--config', self.config, '--train', '--benchmark')

    def test_segtrain_rejects_negative_epochs(self):
        self.assertReturncode(2, 'segtrain', '--config', self.config, '--train-dir', str(self.root),
                              '--epochs', '-1')


class StandaloneCommandTest(CommandTestCase):
    def test_make_toy_dataset(self):
        out = self.root / 'toy'
        output = self.call('make_toy_dataset', '--out', str(out), '--n', '3', '--size', '16', '--seed', '1')
        self.assertIn('Wrote 3 toy pairs', output)
        self.assertEqual(len(load_dataset(out)), 3)

    def test_make_toy_dataset_bounds(self):
        self.assertReturncode(2, 'make_toy_dataset', '--out', str(self.root / 'toy'), '--size', '8')
        self.assertReturncode(2, 'make_toy_dataset', '--out', str(self.root / 'toy'), '--n', '0')

    def test_report_needs_input(self):
        self.assertReturncode(2, 'report')

    def test_report_prints_metrics(self):
        path = write_metrics_csv([{'method': 'concat/best_val_loss', 'phase': 'synthetic', 'dice': 0.5,
                                   'iou': 0.25}], self.root / 'metrics.csv')
        output = self.call('report', '--metrics', str(path))
        self.assertIn('concat/best_val_loss', output)
        self.assertIn('0.5', output)

    def test_report_renders_contact_sheet(self):
        self.call('make_toy_dataset', '--out', str(self.root / 'toy'), '--n', '2', '--size', '16')
        self.call('report', '--dataset', str(self.root / 'toy'))
        self.assertTrue((self.root / 'toy' / 'contact_sheet.png').is_file())
        self.assertReturncode(1, 'report', '--dataset', str(self.root / 'nothing'))


class TrainedRunCommandTest(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.call('train', '--config', self.config)

    def test_select_prints_table(self):
        output = self.call('select', '--config', self.config, '--strategy', 'final_epoch')
        self.assertIn('Selected epoch 2', output)

    def test_select_json(self):
        output = self.call('select', '--config', self.config, '--strategy', 'best_val_loss', '--json')
        document = json.loads(output)
        self.assertEqual(set(document), {'run', 'strategy', 'selected'})
        self.assertEqual(document['strategy'], 'best_val_loss')
        self.assertIn(document['selected']['epoch'], (1, 2))

    def test_sample_exports_pairs(self):
        out_dir = self.root / 'samples'
        output = self.call('sample', '--config', self.config, '--n', '2', '--out-dir', str(out_dir), '--grid')
        self.assertIn('Wrote 2 pairs', output)
        manifest = read_json(out_dir / 'manifest.json')
        self.assertEqual((manifest['mode'], manifest['steps']), ('ddim', 5))
        self.assertEqual(len(load_dataset(out_dir)), 2)
        self.assertTrue((out_dir / 'contact_sheet.png').is_file())

    def test_segtrain_and_segeval(self):
        samples = self.root / 'samples'
        self.call('sample', '--config', self.config, '--n', '4', '--out-dir', str(samples))
        model = self.root / 'segmenter.bin'
        self.call('segtrain', '--config', self.config, '--train-dir', str(samples), '--model-out', str(model))
        csv_path = self.root / 'metrics.csv'
        output = self.call('segeval', '--config', self.config, '--model', str(model), '--size', '8',
                           '--csv', str(csv_path))
        self.assertIn('mean per-image dice', output)
        self.assertEqual(read_metrics_csv(csv_path)[0]['method'], 'segmenter')


@tag('slow')
class PipelineCommandTest(CommandTestCase):
    def test_pipeline_runs_and_resumes(self):
        output = self.call('pipeline', '--config', self.config)
        self.assertIn('Metrics written to', output)
        metrics_path = self.root / 'out' / 'pipeline' / 'unit-concat' / 'metrics.csv'
        rows = read_metrics_csv(metrics_path)
        self.assertTrue({'method', 'phase', 'dice', 'iou'} <= set(rows[0]))

        with patch('pairdiff.services.sample_pairs') as sample_pairs:
            self.call('pipeline', '--config', self.config)
        sample_pairs.assert_not_called()
        self.assertEqual(read_metrics_csv(metrics_path), rows)
