# Generated by Django 5.2.5 on 2026-10-19 09:12

import django.db.models.deletion
import uuid
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='Experiment',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('name', models.CharField(max_length=100)),
                ('config_hash', models.CharField(max_length=64, unique=True)),
                ('config', models.JSONField(default=dict)),
                ('output_dir', models.CharField(max_length=500)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='Artifact',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('kind', models.CharField(choices=[('dataset', 'Dataset'), ('expert', 'Expert'), ('checkpoint', 'Checkpoint'), ('policy', 'Policy'), ('curve', 'Learning curve'), ('evaluation', 'Evaluation'), ('report', 'Report')], max_length=20)),
                ('path', models.CharField(max_length=500)),
                ('sha256', models.CharField(max_length=64)),
                ('metadata', models.JSONField(blank=True, default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('experiment', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='artifacts', to='deer.experiment')),
            ],
            options={
                'ordering': ['kind', 'path'],
                'indexes': [models.Index(fields=['experiment', 'kind'], name='deer_artifa_experim_3c1d6e_idx')],
                'constraints': [models.UniqueConstraint(fields=('experiment', 'path'), name='unique_artifact_path')],
            },
        ),
        migrations.CreateModel(
            name='RunRecord',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('env', models.CharField(max_length=50)),
                ('mode', models.CharField(choices=[('deer', 'DEER'), ('sacas', 'SAC on augmented states'), ('dolps', 'Decision on last predicted state'), ('online-deer', 'Online DEER'), ('delay-free', 'Delay-free SAC')], max_length=20)),
                ('cell', models.CharField(max_length=50)),
                ('intrinsic_delay', models.PositiveIntegerField(default=0)),
                ('max_extra_delay', models.PositiveIntegerField(default=0)),
                ('drop_prob', models.FloatField(default=0.0)),
                ('k1', models.PositiveIntegerField(blank=True, null=True)),
                ('preset', models.CharField(blank=True, max_length=20)),
                ('seed', models.IntegerField()),
                ('dataset_hash', models.CharField(blank=True, max_length=64)),
                ('checkpoint_hash', models.CharField(blank=True, max_length=64)),
                ('final_true_return', models.FloatField()),
                ('final_delivered_return', models.FloatField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('curve', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.SET_NULL, related_name='runs', to='deer.artifact')),
                ('experiment', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='runs', to='deer.experiment')),
            ],
            options={
                'ordering': ['env', 'cell', 'mode', 'seed'],
                'indexes': [models.Index(fields=['env', 'cell', 'mode'], name='deer_runrec_env_5b0f2a_idx')],
                'constraints': [models.UniqueConstraint(fields=('experiment', 'mode', 'cell', 'k1', 'preset', 'seed'), name='unique_run')],
            },
        ),
    ]
