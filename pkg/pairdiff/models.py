from pathlib import Path

from django.db import models

from .choices import EventType, RunStatus, Variant


class ExperimentRun(models.Model):
    """One training run of a generator (or the super-resolution model) and its artifacts"""

    name = models.CharField(max_length=150, unique=True)
    flavor = models.CharField(max_length=20, choices=Variant.choices, blank=True)
    with_discriminator = models.BooleanField(default=False)
    seed = models.IntegerField(default=0)
    config = models.JSONField(default=dict, blank=True)
    config_hash = models.CharField(max_length=64, blank=True)
    run_dir = models.CharField(max_length=500)
    status = models.CharField(max_length=20, choices=RunStatus.choices, default=RunStatus.PENDING)

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)
    finished_at = models.DateTimeField(blank=True, null=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.name} ({self.status})"

    @property
    def method_label(self):
        """Label used in metric tables, e.g. ``two_encoder+disc``"""
        return f"{self.flavor or 'superres'}{'+disc' if self.with_discriminator else ''}"

    @property
    def path(self):
        return Path(self.run_dir)

    @property
    def is_finished(self):
        return self.status in [RunStatus.COMPLETED, RunStatus.FAILED]


class Checkpoint(models.Model):
    """Mirror of a checkpoint manifest.json"""

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='checkpoints')
    epoch = models.PositiveIntegerField()
    weights_uri = models.CharField(max_length=500)
    val_loss = models.FloatField()
    mean_jsd = models.FloatField(blank=True, null=True)
    scoring = models.JSONField(blank=True, null=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        unique_together = ['run', 'epoch']
        ordering = ['run', 'epoch']

    def __str__(self):
        return f"{self.run.name} - epoch {self.epoch}"

    def to_record(self):
        from .training import CheckpointRecord

        return CheckpointRecord(
            epoch=self.epoch,
            weights_uri=self.weights_uri,
            val_loss=self.val_loss,
            mean_jsd=self.mean_jsd,
            config_hash=self.run.config_hash,
            scoring=self.scoring,
        )


class RunEvent(models.Model):
    """Model to track run lifecycle events"""

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='events')
    event_type = models.CharField(max_length=30, choices=EventType.choices)
    description = models.TextField(blank=True)
    metadata = models.JSONField(default=dict, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.run.name} - {self.event_type}"
