from dataclasses import replace
from pathlib import Path
from typing import Optional
import logging

from django.conf import settings

from .choices import EventType, RunStatus, SamplerMode, SelectionStrategy
from .config import ExperimentConfig
from .datasets import (
    DatasetError,
    export_generated,
    load_dataset,
    make_toy_dataset,
    prepare_eval_crops,
    resize_pair,
    write_dataset,
)
from .generator import sample_pairs
from .models import Checkpoint, ExperimentRun, RunEvent
from .reports import contact_sheet, write_metrics_csv
from .segmentation import (
    SEGMENTER_NAME,
    evaluate,
    finetune,
    load_segmenter,
    save_segmenter,
    train_segmenter,
)
from .selection import rgb_histogram, score_checkpoint, select_weights
from .serializers import CheckpointManifestSerializer
from .storage import MANIFEST_NAME, atomic_write_json, config_hash, manifest_is_valid, read_json, utc_timestamp
from .superres import benchmark_super_resolution, super_resolve
from .training import (
    CheckpointError,
    CheckpointRecord,
    center_crop,
    load_checkpoint_records,
    load_sampler,
    load_sr_model,
    split_dataset,
    train_paired,
    train_sr,
)

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed"""

    def __init__(self, stage: str, message: str, artifacts=()):
        self.stage = stage
        self.artifacts = [str(path) for path in artifacts]
        details = f" (artifacts: {', '.join(self.artifacts)})" if self.artifacts else ''
        super().__init__(f"Stage {stage} failed: {message}{details}")


def _device():
    return getattr(settings, 'PAIRDIFF_DEVICE', 'cpu')


class RunService:
    """Service class for the run/checkpoint ledger"""

    @staticmethod
    def start_run(name, experiment: ExperimentConfig, run_dir, flavor='', with_discriminator=False):
        """Create or reopen a run and mark it running"""
        run, created = ExperimentRun.objects.get_or_create(
            name=name,
            defaults={'run_dir': str(run_dir), 'seed': experiment.seed},
        )
        run.flavor = flavor
        run.with_discriminator = with_discriminator
        run.seed = experiment.seed
        run.config = experiment.document
        run.config_hash = experiment.config_hash
        run.run_dir = str(run_dir)
        run.status = RunStatus.RUNNING
        run.finished_at = None
        run.save()
        return run

    @staticmethod
    def set_status(run, status, description=''):
        run.status = status
        run.save()
        if status == RunStatus.FAILED:
            RunService.log_event(run, EventType.FAILED, description)

    @staticmethod
    def log_event(run, event_type, description='', metadata=None):
        return RunEvent.objects.create(run=run, event_type=event_type, description=description,
                                       metadata=metadata or {})

    @staticmethod
    def record_checkpoint(run, record: CheckpointRecord):
        """Mirror a checkpoint record into the ledger"""
        checkpoint, _ = Checkpoint.objects.update_or_create(
            run=run,
            epoch=record.epoch,
            defaults={
                'weights_uri': record.weights_uri,
                'val_loss': record.val_loss,
                'mean_jsd': record.mean_jsd,
                'scoring': record.scoring,
            },
        )
        return checkpoint

    @staticmethod
    def sync_checkpoints(run):
        """Re-read every manifest in the run directory into the ledger"""
        synced = []
        for manifest_path in sorted(Path(run.run_dir).glob(f'ckpt_*/{MANIFEST_NAME}')):
            serializer = CheckpointManifestSerializer(data=read_json(manifest_path) or {})
            if not serializer.is_valid():
                logger.warning(f"Ignoring invalid manifest {manifest_path}: {serializer.errors}")
                continue
            record = CheckpointRecord(**serializer.validated_data)
            synced.append(RunService.record_checkpoint(run, record))
        return synced

    @staticmethod
    def get_run(name):
        try:
            return ExperimentRun.objects.get(name=name)
        except ExperimentRun.DoesNotExist:
            raise CheckpointError(f"No run named {name!r}; train it first")


class DatasetService:
    """Where training, fine-tuning and test pairs come from"""

    @staticmethod
    def training_pairs(experiment: ExperimentConfig):
        data = experiment.data
        if data.train_root is not None:
            pairs = load_dataset(data.train_root)
        else:
            logger.info(f"No train_root configured; using {data.toy_n} procedural toy pairs")
            pairs = make_toy_dataset(data.toy_n, data.toy_size, experiment.seed)
        if not pairs:
            raise DatasetError(f"No training pairs found in {data.train_root}")
        return pairs

    @staticmethod
    def test_pairs(experiment: ExperimentConfig, size: int):
        data = experiment.data
        if data.test_root is not None:
            pairs = load_dataset(data.test_root)
            if data.eval_crop:
                return prepare_eval_crops(pairs, data.eval_crop, size)
        else:
            pairs = make_toy_dataset(data.toy_test_n, data.toy_size, experiment.seed + 1)
        return [resize_pair(pair, size) for pair in pairs]

    @staticmethod
    def finetune_pairs(experiment: ExperimentConfig, size: int):
        if experiment.data.finetune_root is None:
            return []
        return [resize_pair(pair, size) for pair in load_dataset(experiment.data.finetune_root)]

    @staticmethod
    def write_toy_dataset(root, n, size, seed):
        return write_dataset(make_toy_dataset(n, size, seed), root)


class TrainingService:
    """Service class for generator and super-resolution training"""

    @staticmethod
    def _resume_point(run_dir, experiment: ExperimentConfig, epochs):
        records = [r for r in load_checkpoint_records(run_dir) if r.config_hash == experiment.config_hash]
        if not records:
            return None, False
        latest = records[-1]
        return latest, latest.epoch >= epochs

    @staticmethod
    def train(experiment: ExperimentConfig, device=None):
        """Train the configured paired generator; completed runs are left untouched"""
        run_dir = experiment.run_dir()
        run = RunService.start_run(experiment.run_name, experiment, run_dir, flavor=experiment.flavor,
                                   with_discriminator=experiment.train.use_discriminator)
        resume_from, finished = TrainingService._resume_point(run_dir, experiment, experiment.train.epochs)
        if finished:
            logger.info(f"Run {run.name} already completed; skipping training")
            RunService.sync_checkpoints(run)
            RunService.set_status(run, RunStatus.COMPLETED)
            return run

        try:
            train_paired(
                DatasetService.training_pairs(experiment),
                experiment.generator,
                experiment.train,
                experiment.discriminator,
                run_dir=run_dir,
                resume_from=resume_from,
                config_hash=experiment.config_hash,
                on_checkpoint=lambda record: RunService.record_checkpoint(run, record),
                device=device or _device(),
            )
        except Exception as e:
            logger.error(f"Error training run {run.name}: {str(e)}")
            RunService.set_status(run, RunStatus.FAILED, str(e))
            raise
        RunService.set_status(run, RunStatus.COMPLETED)
        return run

    @staticmethod
    def superres_run_name(experiment: ExperimentConfig):
        return f"{experiment.name}-superres"

    @staticmethod
    def train_superres(experiment: ExperimentConfig, device=None):
        """Train the super-resolution model on the training pairs at high resolution"""
        sr = experiment.superres
        run_dir = experiment.run_dir(TrainingService.superres_run_name(experiment))
        run = RunService.start_run(TrainingService.superres_run_name(experiment), experiment, run_dir)
        train_cfg = replace(
            experiment.train,
            train_size=sr.high_size,
            crop_size=max(experiment.train.crop_size, sr.high_size),
            epochs=experiment.sr_epochs,
            use_discriminator=False,
        )
        resume_from, finished = TrainingService._resume_point(run_dir, experiment, train_cfg.epochs)
        if finished:
            logger.info(f"Run {run.name} already completed; skipping training")
            RunService.sync_checkpoints(run)
            RunService.set_status(run, RunStatus.COMPLETED)
            return run

        try:
            train_sr(
                DatasetService.training_pairs(experiment),
                sr,
                train_cfg,
                run_dir=run_dir,
                resume_from=resume_from,
                config_hash=experiment.config_hash,
                on_checkpoint=lambda record: RunService.record_checkpoint(run, record),
                device=device or _device(),
            )
        except Exception as e:
            logger.error(f"Error training run {run.name}: {str(e)}")
            RunService.set_status(run, RunStatus.FAILED, str(e))
            raise
        RunService.set_status(run, RunStatus.COMPLETED)
        return run


class SelectionService:
    """Service class for checkpoint scoring and selection"""

    @staticmethod
    def training_histogram(experiment: ExperimentConfig):
        """RGB histogram of the full training split at the generator resolution"""
        train, _ = split_dataset(DatasetService.training_pairs(experiment), experiment.train.split_ratio,
                                 experiment.seed)
        size = experiment.generator.input_size
        images = [resize_pair(center_crop(pair, experiment.train.crop_size), size).image for pair in train]
        return rgb_histogram(images, bins=experiment.sampling.histogram_bins)

    @staticmethod
    def score_run(run, experiment: ExperimentConfig, device=None, force=False):
        """Score every checkpoint of ``run`` that has no mean JSD yet, or all of them with ``force``"""
        sampling = experiment.sampling
        records = load_checkpoint_records(run.run_dir)
        if not records:
            raise CheckpointError(f"Run {run.name} has no checkpoints in {run.run_dir}")
        pending = [r for r in records if force or r.mean_jsd is None]
        if not pending:
            return records
        train_hist = SelectionService.training_histogram(experiment)
        for record in pending:
            try:
                score_checkpoint(record, train_hist, sampling.score_samples, mode=sampling.score_mode,
                                 steps=sampling.score_steps, seed=experiment.seed,
                                 batch_size=sampling.batch_size, device=device or _device())
            except Exception as e:
                logger.error(f"Error scoring checkpoint {record.weights_uri}: {str(e)}")
                raise
            RunService.record_checkpoint(run, record)
            RunService.log_event(run, EventType.CHECKPOINT_SCORED,
                                 f"Epoch {record.epoch} scored mean_jsd={record.mean_jsd:.6f}",
                                 {'epoch': record.epoch, 'mean_jsd': record.mean_jsd, 'scoring': record.scoring})
        return records

    @staticmethod
    def select(run, strategy, experiment: Optional[ExperimentConfig] = None, device=None):
        """Pick a checkpoint of ``run``; min_mean_jsd scores missing checkpoints first when possible"""
        if strategy == SelectionStrategy.MIN_MEAN_JSD and experiment is not None:
            records = SelectionService.score_run(run, experiment, device)
        else:
            records = load_checkpoint_records(run.run_dir)
        if not records:
            raise CheckpointError(f"Run {run.name} has no checkpoints in {run.run_dir}")
        chosen = select_weights(records, strategy)
        RunService.log_event(run, EventType.WEIGHTS_SELECTED,
                             f"Selected epoch {chosen.epoch} by {strategy}",
                             {'epoch': chosen.epoch, 'strategy': str(strategy), 'weights_uri': chosen.weights_uri})
        return chosen, records


class SamplingService:
    """Service class for generating and exporting pairs"""

    @staticmethod
    def sample(record: CheckpointRecord, n, mode, steps, seed, out_dir, threshold=0.5, batch_size=16,
               grid=False, device=None):
        """Generate ``n`` pairs from ``record`` into ``out_dir``; a matching export is reused"""
        out_dir = Path(out_dir)
        request_hash = config_hash({'checkpoint': record.weights_uri, 'epoch': record.epoch, 'n': n,
                                    'mode': str(mode), 'steps': steps, 'seed': seed, 'threshold': threshold})
        if manifest_is_valid(out_dir, request_hash):
            logger.info(f"Samples in {out_dir} are up to date; skipping generation")
            return read_json(out_dir / MANIFEST_NAME)

        generator, sched = load_sampler(record)
        if steps > sched.T:
            raise ValueError(f"steps ({steps}) cannot exceed T ({sched.T})")
        if mode == SamplerMode.DDPM and steps != sched.T:
            raise ValueError(f"ddpm sampling visits every timestep: steps must equal T ({sched.T})")
        device = device or _device()
        batch = sample_pairs(generator.to(device), n, sched, mode, steps, seed, batch_size, device)
        pairs = batch.to_pairs(threshold)
        manifest = export_generated(pairs, out_dir, threshold, metadata={
            'checkpoint': record.weights_uri,
            'epoch': record.epoch,
            'mode': str(mode),
            'steps': steps,
            'seed': seed,
            'config_hash': request_hash,
            'complete': True,
        })
        if grid:
            contact_sheet(pairs, out_dir / 'contact_sheet.png')
        return manifest


class SuperResolutionService:
    """Service class for super-resolving generated datasets"""

    @staticmethod
    def latest_model(experiment: ExperimentConfig):
        run_dir = experiment.run_dir(TrainingService.superres_run_name(experiment))
        records = load_checkpoint_records(run_dir)
        if not records:
            raise CheckpointError(f"No super-resolution checkpoints in {run_dir}; run superres --train first")
        record = select_weights(records, SelectionStrategy.FINAL_EPOCH)
        return load_sr_model(record), record

    @staticmethod
    def superres(experiment: ExperimentConfig, in_dir, out_dir, seed, mode=None, steps=None, device=None):
        """Super-resolve every pair in ``in_dir`` into ``out_dir`` at twice the size"""
        out_dir = Path(out_dir)
        model, record = SuperResolutionService.latest_model(experiment)
        mode = mode or experiment.superres.infer_mode
        if steps is None:
            steps = model.config.steps_train if mode == SamplerMode.DDPM else model.config.steps_infer
        request_hash = config_hash({'checkpoint': record.weights_uri, 'input': str(Path(in_dir).resolve()),
                                    'mode': str(mode), 'steps': steps, 'seed': seed})
        if manifest_is_valid(out_dir, request_hash):
            logger.info(f"Super-resolved pairs in {out_dir} are up to date; skipping")
            return read_json(out_dir / MANIFEST_NAME)

        lowres = load_dataset(in_dir)
        if not lowres:
            raise DatasetError(f"No pairs to super-resolve in {in_dir}")
        highres = super_resolve(model, lowres, model.config, seed, mode=mode, steps=steps,
                                batch_size=experiment.sampling.batch_size, device=device or _device())
        return export_generated(highres, out_dir, metadata={
            'checkpoint': record.weights_uri,
            'source': str(in_dir),
            'mode': str(mode),
            'steps': steps,
            'seed': seed,
            'config_hash': request_hash,
            'complete': True,
        })

    @staticmethod
    def benchmark(experiment: ExperimentConfig, in_dir, n, step_counts, seed, device=None):
        model, _ = SuperResolutionService.latest_model(experiment)
        lowres = load_dataset(in_dir)[:n]
        if not lowres:
            raise DatasetError(f"No pairs to benchmark in {in_dir}")
        return benchmark_super_resolution(model, lowres, model.config, step_counts, seed=seed,
                                          device=device or _device())


class SegmentationService:
    """Service class for downstream segmentation"""

    @staticmethod
    def train(train_dir, cfg, seed, out_path, device=None):
        pairs = load_dataset(train_dir)
        if not pairs:
            raise DatasetError(f"No training pairs in {train_dir}")
        model = train_segmenter(pairs, cfg, seed, device=device or _device())
        save_segmenter(model, out_path)
        logger.info(f"Saved segmenter to {out_path}")
        return model

    @staticmethod
    def evaluate(model_path, test_pairs, threshold=0.5, device=None):
        model = load_segmenter(model_path)
        size = test_pairs[0].size if test_pairs else None
        if size is not None and size[0] % 2 ** (len(model.config.encoder_widths) - 1):
            raise ValueError(f"Test pairs of size {size} do not fit the segmenter")
        return evaluate(model, test_pairs, threshold, device=device or _device())


class PipelineService:
    """
    train -> select -> sample -> super-resolve -> segment -> evaluate, with a
    stage manifest per completed stage so interrupted runs resume.
    """

    @staticmethod
    def stage_dir(experiment: ExperimentConfig, stage):
        return experiment.output_root / 'pipeline' / experiment.run_name / stage

    @staticmethod
    def run_stage(run, experiment: ExperimentConfig, stage, action, artifacts=()):
        """Run ``action`` unless a stage manifest for this config exists; returns the stage result"""
        directory = PipelineService.stage_dir(experiment, stage)
        if manifest_is_valid(directory, experiment.config_hash):
            manifest = read_json(directory / MANIFEST_NAME)
            RunService.log_event(run, EventType.STAGE_SKIPPED, f"Stage {stage} already complete")
            logger.info(f"Stage {stage} already complete; skipping")
            return manifest.get('result')

        RunService.log_event(run, EventType.STAGE_STARTED, f"Stage {stage} started")
        try:
            result = action(directory)
        except Exception as e:
            logger.error(f"Error in pipeline stage {stage}: {str(e)}")
            RunService.log_event(run, EventType.FAILED, f"Stage {stage} failed: {e}",
                                 {'stage': stage, 'artifacts': [str(a) for a in artifacts]})
            raise StageError(stage, str(e), [directory, *artifacts]) from e
        atomic_write_json(directory / MANIFEST_NAME, {
            'stage': stage,
            'config_hash': experiment.config_hash,
            'complete': True,
            'result': result,
            'finished_at': utc_timestamp(),
        })
        RunService.log_event(run, EventType.STAGE_COMPLETED, f"Stage {stage} completed", {'result': result})
        return result

    @staticmethod
    def method_label(experiment: ExperimentConfig, strategy):
        suffix = '+disc' if experiment.train.use_discriminator else ''
        return f"{experiment.flavor}{suffix}/{strategy}"

    @staticmethod
    def run(experiment: ExperimentConfig, device=None):
        """Execute every stage and write ``metrics.csv``; returns its path"""
        device = device or _device()
        sampling, pipeline, seg_cfg = experiment.sampling, experiment.pipeline, experiment.segmentation

        run, _ = ExperimentRun.objects.get_or_create(
            name=experiment.run_name,
            defaults={'run_dir': str(experiment.run_dir()), 'seed': experiment.seed, 'flavor': experiment.flavor,
                      'with_discriminator': experiment.train.use_discriminator},
        )
        PipelineService.run_stage(run, experiment, 'generator_train',
                                  lambda d: TrainingService.train(experiment, device).name,
                                  artifacts=[experiment.run_dir()])
        run.refresh_from_db()
        if pipeline.superres:
            PipelineService.run_stage(run, experiment, 'superres_train',
                                      lambda d: TrainingService.train_superres(experiment, device).name)
        final_size = experiment.superres.high_size if pipeline.superres else experiment.generator.input_size
        test_pairs = DatasetService.test_pairs(experiment, final_size)
        finetune_pairs = DatasetService.finetune_pairs(experiment, final_size) if pipeline.finetune else []
        if pipeline.finetune and not finetune_pairs:
            logger.warning("Fine-tuning requested but no finetune_root pairs found; skipping that phase")

        rows = []
        for strategy in pipeline.strategies:
            chosen = PipelineService.run_stage(
                run, experiment, f'select_{strategy}',
                lambda d: SelectionService.select(run, strategy, experiment, device)[0].to_manifest(),
            )
            record = CheckpointRecord.from_manifest(chosen)

            samples_dir = PipelineService.stage_dir(experiment, f'sample_{strategy}') / 'pairs'
            PipelineService.run_stage(
                run, experiment, f'sample_{strategy}',
                lambda d: SamplingService.sample(record, pipeline.n_generated, sampling.mode, sampling.steps,
                                                 experiment.seed, samples_dir, sampling.threshold,
                                                 sampling.batch_size, grid=True, device=device)['count'],
                artifacts=[record.weights_uri],
            )
            final_dir = samples_dir
            if pipeline.superres:
                final_dir = PipelineService.stage_dir(experiment, f'superres_{strategy}') / 'pairs'
                PipelineService.run_stage(
                    run, experiment, f'superres_{strategy}',
                    lambda d: SuperResolutionService.superres(experiment, samples_dir, final_dir,
                                                              experiment.seed, device=device)['count'],
                    artifacts=[samples_dir],
                )

            def segment(directory, strategy=strategy, final_dir=final_dir):
                label = PipelineService.method_label(experiment, strategy)
                model = SegmentationService.train(final_dir, seg_cfg, experiment.seed,
                                                  directory / SEGMENTER_NAME, device)
                metrics = evaluate(model, test_pairs, seg_cfg.threshold, device=device)
                results = [{'method': label, 'phase': 'synthetic', **metrics.to_dict()}]
                if finetune_pairs:
                    tuned = finetune(model, finetune_pairs, seg_cfg, experiment.seed, device=device)
                    tuned_metrics = evaluate(tuned, test_pairs, seg_cfg.threshold, device=device)
                    results.append({'method': label, 'phase': 'synthetic+finetune', **tuned_metrics.to_dict()})
                return results

            rows.extend(PipelineService.run_stage(run, experiment, f'segment_{strategy}', segment,
                                                  artifacts=[final_dir]))

        metrics_path = experiment.output_root / 'pipeline' / experiment.run_name / 'metrics.csv'
        write_metrics_csv(rows, metrics_path)
        logger.info(f"Pipeline {experiment.run_name} finished; metrics in {metrics_path}")
        return metrics_path
