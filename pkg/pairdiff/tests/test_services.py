import tempfile
from pathlib import Path
from unittest.mock import MagicMock, patch

import torch
from django.test import TestCase, tag

from pairdiff.choices import EventType, RunStatus
from pairdiff.datasets import DatasetError
from pairdiff.models import Checkpoint, ExperimentRun, RunEvent
from pairdiff.reports import read_metrics_csv
from pairdiff.services import (
    DatasetService, PipelineService, RunService, SamplingService, SelectionService, StageError, TrainingService,
)
from pairdiff.storage import atomic_write_json, read_json
from pairdiff.training import CheckpointError, load_checkpoint_records, save_checkpoint

from .helpers import tiny_experiment


class ExperimentRunModelTest(TestCase):
    def setUp(self):
        self.run = ExperimentRun.objects.create(name='toy-two_encoder-disc', flavor='two_encoder',
                                                with_discriminator=True, run_dir='/tmp/runs/toy')

    def test_creation_is_logged(self):
        self.assertEqual(self.run.status, RunStatus.PENDING)
        self.assertTrue(self.run.events.filter(event_type=EventType.CREATED).exists())
        self.assertEqual(self.run.method_label, 'two_encoder+disc')
        self.assertEqual(self.run.path, Path('/tmp/runs/toy'))

    def test_status_changes_are_logged_and_stamped(self):
        self.run.status = RunStatus.COMPLETED
        self.run.save()
        self.assertIsNotNone(self.run.finished_at)
        self.assertTrue(self.run.is_finished)
        event = self.run.events.get(event_type=EventType.STATUS_CHANGED)
        self.assertEqual(event.metadata, {'old_status': 'pending', 'new_status': 'completed'})

    def test_checkpoints_are_logged(self):
        checkpoint = Checkpoint.objects.create(run=self.run, epoch=5, weights_uri='/tmp/w.bin', val_loss=0.1)
        self.assertTrue(self.run.events.filter(event_type=EventType.CHECKPOINT_SAVED).exists())
        record = checkpoint.to_record()
        self.assertEqual((record.epoch, record.val_loss), (5, 0.1))


class RunServiceTest(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.experiment = tiny_experiment(self.tmp.name)
        self.run_dir = self.experiment.run_dir()

    def tearDown(self):
        self.tmp.cleanup()

    def test_start_run_is_idempotent(self):
        first = RunService.start_run('a', self.experiment, self.run_dir, flavor='concat')
        second = RunService.start_run('a', self.experiment, self.run_dir, flavor='concat')
        self.assertEqual(first.pk, second.pk)
        self.assertEqual(second.status, RunStatus.RUNNING)
        self.assertEqual(second.config_hash, self.experiment.config_hash)

    def test_failure_is_recorded(self):
        run = RunService.start_run('a', self.experiment, self.run_dir)
        RunService.set_status(run, RunStatus.FAILED, 'out of memory')
        self.assertTrue(run.events.filter(event_type=EventType.FAILED, description='out of memory').exists())

    def test_sync_checkpoints_reads_manifests(self):
        run = RunService.start_run('a', self.experiment, self.run_dir)
        save_checkpoint(self.run_dir, 1, {'x': torch.zeros(1)}, val_loss=0.3)
        save_checkpoint(self.run_dir, 2, {'x': torch.zeros(1)}, val_loss=0.2)
        atomic_write_json(self.run_dir / 'ckpt_3' / 'manifest.json', {'epoch': 'three'})
        with self.assertLogs('pairdiff.services', level='WARNING'):
            synced = RunService.sync_checkpoints(run)
        self.assertEqual([c.epoch for c in synced], [1, 2])
        self.assertEqual(run.checkpoints.count(), 2)

    def test_unknown_run(self):
        with self.assertRaises(CheckpointError):
            RunService.get_run('missing')


class DatasetServiceTest(TestCase):
    def test_toy_fallback_uses_distinct_seeds(self):
        with tempfile.TemporaryDirectory() as tmp:
            experiment = tiny_experiment(tmp)
            train = DatasetService.training_pairs(experiment)
            test = DatasetService.test_pairs(experiment, 8)
            self.assertEqual(len(train), 12)
            self.assertEqual(len(test), 4)
            self.assertEqual(test[0].size, (8, 8))
            self.assertFalse(torch.equal(train[0].mask, DatasetService.test_pairs(experiment, 16)[0].mask))
            self.assertEqual(DatasetService.finetune_pairs(experiment, 8), [])

    def test_test_root_is_tiled(self):
        with tempfile.TemporaryDirectory() as tmp:
            DatasetService.write_toy_dataset(Path(tmp) / 'test', 2, 32, seed=0)
            experiment = tiny_experiment(tmp, data={'test_root': 'test', 'eval_crop': 16})
            tiles = DatasetService.test_pairs(experiment, 8)
            self.assertEqual(len(tiles), 8)
            self.assertEqual(tiles[0].size, (8, 8))

    def test_empty_train_root_is_an_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            (Path(tmp) / 'empty').mkdir()
            experiment = tiny_experiment(tmp, data={'train_root': 'empty'})
            with self.assertRaises(DatasetError):
                DatasetService.training_pairs(experiment)


class TrainingServiceTest(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.experiment = tiny_experiment(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_training_fills_the_ledger(self):
        run = TrainingService.train(self.experiment, device='cpu')
        self.assertEqual(run.status, RunStatus.COMPLETED)
        self.assertEqual(list(run.checkpoints.values_list('epoch', flat=True)), [1, 2])
        self.assertEqual(run.name, 'unit-concat')

    def test_completed_run_is_not_retrained(self):
        TrainingService.train(self.experiment, device='cpu')
        with patch('pairdiff.services.train_paired') as train_paired:
            run = TrainingService.train(self.experiment, device='cpu')
        train_paired.assert_not_called()
        self.assertEqual(run.status, RunStatus.COMPLETED)

    def test_changed_config_trains_from_scratch(self):
        TrainingService.train(self.experiment, device='cpu')
        changed = self.experiment.with_overrides(seed=3)
        with patch('pairdiff.services.train_paired', return_value=[]) as train_paired:
            TrainingService.train(changed, device='cpu')
        self.assertIsNone(train_paired.call_args.kwargs['resume_from'])

    def test_failure_marks_run_failed(self):
        with patch('pairdiff.services.train_paired', side_effect=RuntimeError('boom')):
            with self.assertRaises(RuntimeError):
                TrainingService.train(self.experiment, device='cpu')
        run = ExperimentRun.objects.get(name=self.experiment.run_name)
        self.assertEqual(run.status, RunStatus.FAILED)
        self.assertTrue(run.events.filter(event_type=EventType.FAILED, description='boom').exists())

    def test_superres_training_uses_its_own_run(self):
        run = TrainingService.train_superres(self.experiment, device='cpu')
        self.assertEqual(run.name, 'unit-superres')
        records = load_checkpoint_records(run.run_dir)
        self.assertEqual([r.epoch for r in records], [1])


class SelectionServiceTest(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.experiment = tiny_experiment(self.tmp.name)
        self.run = TrainingService.train(self.experiment, device='cpu')

    def tearDown(self):
        self.tmp.cleanup()

    def test_select_logs_the_choice(self):
        chosen, records = SelectionService.select(self.run, 'final_epoch')
        self.assertEqual(chosen.epoch, 2)
        self.assertEqual(len(records), 2)
        event = self.run.events.get(event_type=EventType.WEIGHTS_SELECTED)
        self.assertEqual(event.metadata['epoch'], 2)

    def test_min_mean_jsd_scores_first(self):
        chosen, records = SelectionService.select(self.run, 'min_mean_jsd', self.experiment, device='cpu')
        self.assertTrue(all(r.mean_jsd is not None for r in records))
        self.assertEqual(self.run.events.filter(event_type=EventType.CHECKPOINT_SCORED).count(), 2)
        self.assertEqual(self.run.checkpoints.get(epoch=chosen.epoch).mean_jsd, chosen.mean_jsd)

        SelectionService.score_run(self.run, self.experiment, device='cpu')
        self.assertEqual(self.run.events.filter(event_type=EventType.CHECKPOINT_SCORED).count(), 2)

    def test_sampling_exports_and_reuses(self):
        chosen, _ = SelectionService.select(self.run, 'best_val_loss')
        out_dir = Path(self.tmp.name) / 'samples'
        manifest = SamplingService.sample(chosen, 3, 'ddim', 5, 0, out_dir, grid=True, device='cpu')
        self.assertEqual(manifest['count'], 3)
        self.assertEqual(manifest['epoch'], chosen.epoch)
        self.assertTrue((out_dir / 'contact_sheet.png').is_file())

        with patch('pairdiff.services.sample_pairs') as sample_pairs:
            again = SamplingService.sample(chosen, 3, 'ddim', 5, 0, out_dir, device='cpu')
        sample_pairs.assert_not_called()
        self.assertEqual(again['ids'], manifest['ids'])

    def test_sampling_rejects_bad_step_counts(self):
        chosen, _ = SelectionService.select(self.run, 'best_val_loss')
        out_dir = Path(self.tmp.name) / 'samples'
        with self.assertRaises(ValueError):
            SamplingService.sample(chosen, 1, 'ddpm', 5, 0, out_dir, device='cpu')
        with self.assertRaises(ValueError):
            SamplingService.sample(chosen, 1, 'ddim', 21, 0, out_dir, device='cpu')


class PipelineStageTest(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.experiment = tiny_experiment(self.tmp.name)
        self.run = RunService.start_run(self.experiment.run_name, self.experiment, self.experiment.run_dir())

    def tearDown(self):
        self.tmp.cleanup()

    def test_completed_stage_is_skipped(self):
        action = MagicMock(return_value={'count': 4})
        first = PipelineService.run_stage(self.run, self.experiment, 'sample_best_val_loss', action)
        second = PipelineService.run_stage(self.run, self.experiment, 'sample_best_val_loss', action)
        self.assertEqual(first, second)
        action.assert_called_once()
        self.assertTrue(self.run.events.filter(event_type=EventType.STAGE_SKIPPED).exists())

        manifest = read_json(PipelineService.stage_dir(self.experiment, 'sample_best_val_loss') / 'manifest.json')
        self.assertEqual(manifest['config_hash'], self.experiment.config_hash)
        self.assertTrue(manifest['complete'])

    def test_stage_reruns_for_another_config(self):
        action = MagicMock(return_value=1)
        PipelineService.run_stage(self.run, self.experiment, 'segment_final_epoch', action)
        changed = tiny_experiment(self.tmp.name, segmentation={'epochs': 2})
        PipelineService.run_stage(self.run, changed, 'segment_final_epoch', action)
        self.assertEqual(action.call_count, 2)

    def test_failed_stage_names_itself(self):
        action = MagicMock(side_effect=OSError('disk full'))
        with self.assertRaises(StageError) as ctx:
            PipelineService.run_stage(self.run, self.experiment, 'superres_best_val_loss', action,
                                      artifacts=['/tmp/pairs'])
        self.assertEqual(ctx.exception.stage, 'superres_best_val_loss')
        self.assertIn('/tmp/pairs', ctx.exception.artifacts)
        self.assertFalse((PipelineService.stage_dir(self.experiment, 'superres_best_val_loss')
                          / 'manifest.json').exists())
        self.assertTrue(RunEvent.objects.filter(run=self.run, event_type=EventType.FAILED).exists())

    def test_generator_training_failure_names_its_stage(self):
        with patch('pairdiff.services.train_paired', side_effect=RuntimeError('loss is nan')):
            with self.assertRaises(StageError) as ctx:
                PipelineService.run(self.experiment, device='cpu')
        self.assertEqual(ctx.exception.stage, 'generator_train')
        self.assertIn(str(self.experiment.run_dir()), ctx.exception.artifacts)
        self.assertIn('loss is nan', str(ctx.exception))
        self.run.refresh_from_db()
        self.assertEqual(self.run.status, RunStatus.FAILED)
        self.assertTrue(self.run.events.filter(event_type=EventType.STAGE_STARTED,
                                               description='Stage generator_train started').exists())

    def test_method_label(self):
        disc = self.experiment.with_overrides(with_discriminator=True)
        self.assertEqual(PipelineService.method_label(disc, 'min_mean_jsd'), 'concat+disc/min_mean_jsd')


@tag('slow')
class PipelineRunTest(TestCase):
    def test_toy_pipeline_writes_metrics_and_resumes(self):
        with tempfile.TemporaryDirectory() as tmp:
            experiment = tiny_experiment(tmp, pipeline={'strategies': ['best_val_loss', 'final_epoch']})
            metrics_path = PipelineService.run(experiment, device='cpu')
            rows = read_metrics_csv(metrics_path)
            self.assertEqual([row['method'] for row in rows], ['concat/best_val_loss', 'concat/final_epoch'])
            self.assertEqual({row['phase'] for row in rows}, {'synthetic'})
            for row in rows:
                self.assertTrue(0.0 <= float(row['dice']) <= 1.0)

            run = ExperimentRun.objects.get(name=experiment.run_name)
            started = run.events.filter(event_type=EventType.STAGE_STARTED).count()
            with patch('pairdiff.services.train_segmenter') as train_segmenter:
                PipelineService.run(experiment, device='cpu')
            train_segmenter.assert_not_called()
            self.assertEqual(run.events.filter(event_type=EventType.STAGE_STARTED).count(), started)
            self.assertEqual(read_metrics_csv(metrics_path), rows)
