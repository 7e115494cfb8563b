import re
import uuid

from django.core.exceptions import ValidationError
from django.db import models

SHA256_PATTERN = re.compile(r"^[0-9a-f]{64}$")


class Experiment(models.Model):
    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    name = models.CharField(max_length=100)
    config_hash = models.CharField(max_length=64, unique=True)
    config = models.JSONField(default=dict)
    output_dir = models.CharField(max_length=500)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ["-created_at"]

    def clean(self):
        if not SHA256_PATTERN.match(self.config_hash or ""):
            raise ValidationError("config_hash must be a sha256 hex digest.")

    def __str__(self):
        return f"{self.name} ({self.config_hash[:12]})"


class Artifact(models.Model):
    class Kind(models.TextChoices):
        DATASET = "dataset", "Dataset"
        EXPERT = "expert", "Expert"
        CHECKPOINT = "checkpoint", "Checkpoint"
        POLICY = "policy", "Policy"
        CURVE = "curve", "Learning curve"
        EVALUATION = "evaluation", "Evaluation"
        REPORT = "report", "Report"

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    experiment = models.ForeignKey(Experiment, on_delete=models.CASCADE, related_name="artifacts")
    kind = models.CharField(max_length=20, choices=Kind.choices)
    path = models.CharField(max_length=500)
    sha256 = models.CharField(max_length=64)
    metadata = models.JSONField(default=dict, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        constraints = [
            models.UniqueConstraint(fields=["experiment", "path"], name="unique_artifact_path"),
        ]
        indexes = [models.Index(fields=["experiment", "kind"], name="deer_artifa_experim_3c1d6e_idx")]
        ordering = ["kind", "path"]

    def clean(self):
        if not SHA256_PATTERN.match(self.sha256 or ""):
            raise ValidationError("sha256 must be 64 lowercase hex characters.")

    def __str__(self):
        return f"{self.kind}: {self.path}"


class RunRecord(models.Model):
    class Mode(models.TextChoices):
        DEER = "deer", "DEER"
        SACAS = "sacas", "SAC on augmented states"
        DOLPS = "dolps", "Decision on last predicted state"
        ONLINE_DEER = "online-deer", "Online DEER"
        DELAY_FREE = "delay-free", "Delay-free SAC"

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    experiment = models.ForeignKey(Experiment, on_delete=models.CASCADE, related_name="runs")
    env = models.CharField(max_length=50)
    mode = models.CharField(max_length=20, choices=Mode.choices)
    cell = models.CharField(max_length=50)
    intrinsic_delay = models.PositiveIntegerField(default=0)
    max_extra_delay = models.PositiveIntegerField(default=0)
    drop_prob = models.FloatField(default=0.0)
    k1 = models.PositiveIntegerField(null=True, blank=True)
    preset = models.CharField(max_length=20, blank=True)
    seed = models.IntegerField()
    curve = models.ForeignKey(Artifact, on_delete=models.SET_NULL, null=True, blank=True, related_name="runs")
    dataset_hash = models.CharField(max_length=64, blank=True)
    checkpoint_hash = models.CharField(max_length=64, blank=True)
    final_true_return = models.FloatField()
    final_delivered_return = models.FloatField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        constraints = [
            models.UniqueConstraint(
                fields=["experiment", "mode", "cell", "k1", "preset", "seed"], name="unique_run"
            ),
        ]
        indexes = [models.Index(fields=["env", "cell", "mode"], name="deer_runrec_env_5b0f2a_idx")]
        ordering = ["env", "cell", "mode", "seed"]

    def clean(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValidationError("drop_prob must lie in [0, 1).")
        if self.mode in (self.Mode.DEER, self.Mode.DOLPS) and not self.checkpoint_hash and self.cell != "delay-free":
            raise ValidationError(f"{self.mode} runs need the hash of the encoder checkpoint they used.")

    def __str__(self):
        return f"{self.mode} on {self.env}/{self.cell} (seed {self.seed})"
