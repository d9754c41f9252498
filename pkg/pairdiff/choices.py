from django.db import models


class Variant(models.TextChoices):
    """Paired generator architectures"""
    TWO_ENCODER = 'two_encoder', 'TwoEncoder'
    SHARED_ENCODER = 'shared_encoder', 'SharedEncoder'
    CONCAT = 'concat', 'Concat'


class SkipFusion(models.TextChoices):
    """How skip features are merged into the decoder backbone"""
    DIRECT = 'direct', 'Direct'
    ZERO_CONV = 'zero_conv', 'ZeroConv'
    SCALE_U = 'scale_u', 'ScaleU'


class SamplerMode(models.TextChoices):
    DDPM = 'ddpm', 'DDPM'
    DDIM = 'ddim', 'DDIM'


class PosteriorVariance(models.TextChoices):
    BETA = 'beta', 'beta_t'
    POSTERIOR = 'posterior', 'posterior beta tilde'


class SelectionStrategy(models.TextChoices):
    """Checkpoint selection strategies"""
    BEST_VAL_LOSS = 'best_val_loss', 'Best validation loss'
    FINAL_EPOCH = 'final_epoch', 'Final epoch'
    MIN_MEAN_JSD = 'min_mean_jsd', 'Lowest mean JS divergence'


class RunStatus(models.TextChoices):
    PENDING = 'pending', 'Pending'
    RUNNING = 'running', 'Running'
    COMPLETED = 'completed', 'Completed'
    FAILED = 'failed', 'Failed'


class EventType(models.TextChoices):
    CREATED = 'created', 'Created'
    STATUS_CHANGED = 'status_changed', 'Status Changed'
    CHECKPOINT_SAVED = 'checkpoint_saved', 'Checkpoint Saved'
    CHECKPOINT_SCORED = 'checkpoint_scored', 'Checkpoint Scored'
    WEIGHTS_SELECTED = 'weights_selected', 'Weights Selected'
    STAGE_STARTED = 'stage_started', 'Stage Started'
    STAGE_COMPLETED = 'stage_completed', 'Stage Completed'
    STAGE_SKIPPED = 'stage_skipped', 'Stage Skipped'
    FAILED = 'failed', 'Failed'
