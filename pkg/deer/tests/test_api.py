from django.core.exceptions import ValidationError
from django.urls import reverse
from rest_framework import status
from rest_framework.test import APITestCase

from deer.models import Artifact, Experiment, RunRecord

HASH = "a" * 64


class RegistryApiTests(APITestCase):
    def setUp(self):
        self.experiment = Experiment.objects.create(name="linear-constant", config_hash=HASH,
                                                    config={"name": "linear-constant"}, output_dir="/tmp/x")
        self.curve = Artifact.objects.create(experiment=self.experiment, kind=Artifact.Kind.CURVE,
                                             path="/tmp/x/curves/deer/const-d2/mimic-k64/seed-0.jsonl",
                                             sha256="b" * 64)
        for seed, value in enumerate([-10.0, -20.0, -60.0]):
            RunRecord.objects.create(experiment=self.experiment, env="linear", mode="deer", cell="const-d2",
                                     intrinsic_delay=2, k1=64, preset="mimic", seed=seed, curve=self.curve,
                                     checkpoint_hash=HASH, final_true_return=value, final_delivered_return=value)
        RunRecord.objects.create(experiment=self.experiment, env="linear", mode="sacas", cell="const-d2",
                                 intrinsic_delay=2, seed=0, final_true_return=-80.0, final_delivered_return=-81.0)

    def test_experiment_list(self):
        response = self.client.get(reverse("experiment-list"))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        body = response.json()
        self.assertEqual(len(body), 1)
        self.assertEqual(body[0]["artifact_count"], 1)
        self.assertEqual(body[0]["run_count"], 4)

    def test_runs_filter_by_mode(self):
        response = self.client.get(reverse("run-list"), {"mode": "deer", "cell": "const-d2"})
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        runs = response.json()
        self.assertEqual(len(runs), 3)
        self.assertEqual(runs[0]["curve_path"], self.curve.path)

    def test_artifacts_filter_by_kind(self):
        response = self.client.get(reverse("artifact-list"), {"kind": "report"})
        self.assertEqual(response.json(), [])

    def test_summary(self):
        response = self.client.get(reverse("experiment-summary", args=[self.experiment.pk]))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        deer = next(row for row in response.json() if row["mode"] == "deer")
        self.assertEqual(deer["seeds"], 3)
        self.assertEqual(deer["median"], -20.0)
        self.assertEqual(deer["variance"], 700.0)
        sacas = next(row for row in response.json() if row["mode"] == "sacas")
        self.assertEqual(sacas["variance"], 0.0)

    def test_read_only(self):
        response = self.client.post(reverse("experiment-list"), {"name": "x"}, format="json")
        self.assertEqual(response.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)


class ModelValidationTests(APITestCase):
    def test_checkpoint_hash_is_required_for_encoder_modes(self):
        experiment = Experiment.objects.create(name="e", config_hash=HASH, output_dir="/tmp/e")
        run = RunRecord(experiment=experiment, env="linear", mode="dolps", cell="const-d1", intrinsic_delay=1,
                        seed=0, final_true_return=0.0, final_delivered_return=0.0)
        with self.assertRaises(ValidationError):
            run.full_clean()

    def test_config_hash_format(self):
        with self.assertRaises(ValidationError):
            Experiment(name="e", config_hash="not-a-hash", output_dir="/tmp/e").full_clean()
