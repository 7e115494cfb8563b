"""Bookkeeping of experiments and the files they produce."""
import hashlib
import logging

from django.db import transaction

from deer.models import Artifact, Experiment, RunRecord

logger = logging.getLogger(__name__)


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def register_experiment(config):
    experiment, created = Experiment.objects.update_or_create(
        config_hash=config.config_hash,
        defaults={"name": config.name, "config": config.data, "output_dir": str(config.root)},
    )
    if created:
        logger.info("registered experiment %s (%s)", config.name, config.config_hash[:12])
    return experiment


def register_artifact(experiment, kind, path, metadata=None):
    artifact, _ = Artifact.objects.update_or_create(
        experiment=experiment,
        path=str(path),
        defaults={"kind": kind, "sha256": file_sha256(path), "metadata": metadata or {}},
    )
    artifact.full_clean()
    return artifact


@transaction.atomic
def register_run(experiment, curve, **fields):
    keys = {name: fields.pop(name) for name in ("mode", "cell", "k1", "preset", "seed")}
    record, _ = RunRecord.objects.update_or_create(experiment=experiment, **keys, defaults={"curve": curve, **fields})
    record.full_clean()
    return record
