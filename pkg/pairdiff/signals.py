from django.db.models.signals import post_save, pre_save
from django.dispatch import receiver
from django.utils import timezone
from .choices import EventType, RunStatus
from .models import Checkpoint, ExperimentRun, RunEvent
import logging

logger = logging.getLogger(__name__)


@receiver(post_save, sender=ExperimentRun)
def log_run_changes(sender, instance, created, **kwargs):
    """Log run creation and status changes"""
    if created:
        RunEvent.objects.create(
            run=instance,
            event_type=EventType.CREATED,
            description=f"Run created in {instance.run_dir}",
            metadata={'config_hash': instance.config_hash, 'seed': instance.seed},
        )
    elif getattr(instance, '_old_status', None) not in (None, instance.status):
        RunEvent.objects.create(
            run=instance,
            event_type=EventType.STATUS_CHANGED,
            description=f"Status changed from {instance._old_status} to {instance.status}",
            metadata={
                'old_status': instance._old_status,
                'new_status': instance.status,
            }
        )
        logger.info(f"Run {instance.name}: {instance._old_status} -> {instance.status}")


@receiver(pre_save, sender=ExperimentRun)
def track_status_changes(sender, instance, **kwargs):
    """Remember the stored status and stamp finished runs"""
    if instance.pk:
        try:
            instance._old_status = ExperimentRun.objects.get(pk=instance.pk).status
        except ExperimentRun.DoesNotExist:
            instance._old_status = None
    else:
        instance._old_status = None
    if instance.status in [RunStatus.COMPLETED, RunStatus.FAILED] and instance.finished_at is None:
        instance.finished_at = timezone.now()


@receiver(post_save, sender=Checkpoint)
def log_checkpoint_saved(sender, instance, created, **kwargs):
    if created:
        RunEvent.objects.create(
            run=instance.run,
            event_type=EventType.CHECKPOINT_SAVED,
            description=f"Checkpoint for epoch {instance.epoch} saved",
            metadata={'epoch': instance.epoch, 'val_loss': instance.val_loss,
                      'weights_uri': instance.weights_uri},
        )
