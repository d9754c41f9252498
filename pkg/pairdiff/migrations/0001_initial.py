# Generated by Django 4.2.7

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=150, unique=True)),
                ('flavor', models.CharField(blank=True, choices=[('two_encoder', 'TwoEncoder'), ('shared_encoder', 'SharedEncoder'), ('concat', 'Concat')], max_length=20)),
                ('with_discriminator', models.BooleanField(default=False)),
                ('seed', models.IntegerField(default=0)),
                ('config', models.JSONField(blank=True, default=dict)),
                ('config_hash', models.CharField(blank=True, max_length=64)),
                ('run_dir', models.CharField(max_length=500)),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='pending', max_length=20)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='RunEvent',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('event_type', models.CharField(choices=[('created', 'Created'), ('status_changed', 'Status Changed'), ('checkpoint_saved', 'Checkpoint Saved'), ('checkpoint_scored', 'Checkpoint Scored'), ('weights_selected', 'Weights Selected'), ('stage_started', 'Stage Started'), ('stage_completed', 'Stage Completed'), ('stage_skipped', 'Stage Skipped'), ('failed', 'Failed')], max_length=30)),
                ('description', models.TextField(blank=True)),
                ('metadata', models.JSONField(blank=True, default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='events', to='pairdiff.experimentrun')),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='Checkpoint',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('epoch', models.PositiveIntegerField()),
                ('weights_uri', models.CharField(max_length=500)),
                ('val_loss', models.FloatField()),
                ('mean_jsd', models.FloatField(blank=True, null=True)),
                ('scoring', models.JSONField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='checkpoints', to='pairdiff.experimentrun')),
            ],
            options={
                'ordering': ['run', 'epoch'],
                'unique_together': {('run', 'epoch')},
            },
        ),
    ]
