from collections.abc import Mapping

from rest_framework import serializers

from deer.agent import SacConfig
from deer.dataset import PRESETS, preset_counts
from deer.envs import ENVIRONMENTS, make_env
from deer.exceptions import DelayConfigError, EnvConfigError
from deer.models import Artifact, Experiment, RunRecord
from deer.rddmdp import DelayConfig


# -- experiment configuration ----------------------------------------------------------


class EnvSectionSerializer(serializers.Serializer):
    name = serializers.ChoiceField(choices=sorted(ENVIRONMENTS))
    params = serializers.DictField(default=dict)

    def validate(self, attrs):
        try:
            make_env(attrs["name"], attrs["params"])
        except (TypeError, EnvConfigError) as exc:
            raise serializers.ValidationError({"params": str(exc)})
        return attrs


class RandomDelaySerializer(serializers.Serializer):
    d_I = serializers.IntegerField(min_value=1)
    d_M = serializers.IntegerField(min_value=0, default=0)
    mu = serializers.FloatField(min_value=0.0, default=0.0)

    def validate(self, attrs):
        try:
            DelayConfig(attrs["d_I"], attrs["d_M"], attrs["mu"])
        except DelayConfigError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs


class DelaysSectionSerializer(serializers.Serializer):
    constant = serializers.ListField(child=serializers.IntegerField(min_value=0), default=list)
    random = RandomDelaySerializer(many=True, default=list)

    def validate(self, attrs):
        if not attrs["constant"] and not attrs["random"]:
            raise serializers.ValidationError("configure at least one constant or random delay cell.")
        return attrs


class DatasetPresetSerializer(serializers.Serializer):
    """
    One named dataset variant. A bare preset kind such as ``mimic`` is shorthand
    for a variant of that name using the section-wide counts.
    """

    name = serializers.SlugField(max_length=20)
    kind = serializers.ChoiceField(choices=sorted(PRESETS))
    random = serializers.IntegerField(min_value=0, allow_null=True, default=None)
    expert = serializers.IntegerField(min_value=0, allow_null=True, default=None)

    def to_internal_value(self, data):
        if isinstance(data, str):
            data = {"name": data, "kind": data}
        elif isinstance(data, Mapping) and "kind" not in data and data.get("name") in PRESETS:
            data = {**data, "kind": data["name"]}
        return super().to_internal_value(data)


def _default_presets():
    return [{"name": "mimic", "kind": "mimic", "random": None, "expert": None}]


class DatasetSectionSerializer(serializers.Serializer):
    random = serializers.IntegerField(min_value=0, default=500)
    expert = serializers.IntegerField(min_value=0, default=10)
    presets = DatasetPresetSerializer(many=True, default=_default_presets, allow_empty=False)
    delay_set = serializers.ListField(child=serializers.IntegerField(min_value=1), default=list)
    stride = serializers.IntegerField(min_value=1, default=1)
    test_ratio = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.1)
    expert_steps = serializers.IntegerField(min_value=1, default=20_000)
    expert_return_threshold = serializers.FloatField(allow_null=True, default=None)
    collect_episodes = serializers.IntegerField(min_value=1, default=5)

    def validate(self, attrs):
        if not 0.0 < attrs["test_ratio"] < 1.0:
            raise serializers.ValidationError({"test_ratio": "must lie strictly between 0 and 1."})
        names = [preset["name"] for preset in attrs["presets"]]
        if len(set(names)) != len(names):
            raise serializers.ValidationError({"presets": "preset names must be distinct."})
        for preset in attrs["presets"]:
            counts = preset_counts(preset, attrs["random"], attrs["expert"])
            if sum(counts) == 0:
                raise serializers.ValidationError({"presets": f"{preset['name']} needs at least one trajectory."})
        return attrs


class Seq2SeqSectionSerializer(serializers.Serializer):
    k1 = serializers.IntegerField(min_value=1, default=256)
    k1_sweep = serializers.ListField(child=serializers.IntegerField(min_value=1), default=list)
    k2 = serializers.IntegerField(min_value=1, default=64)
    D = serializers.IntegerField(min_value=1, default=4)
    teacher_forcing = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)
    epochs = serializers.IntegerField(min_value=0, default=20)
    batch_size = serializers.IntegerField(min_value=1, default=256)
    lr = serializers.FloatField(min_value=0.0, default=1e-3)
    lr_min = serializers.FloatField(min_value=0.0, allow_null=True, default=None)
    clip_norm = serializers.FloatField(min_value=0.0, allow_null=True, default=None)


class AgentSectionSerializer(serializers.Serializer):
    hidden = serializers.ListField(child=serializers.IntegerField(min_value=1), default=[256, 256], min_length=1)
    lr = serializers.FloatField(min_value=0.0, default=3e-4)
    batch_size = serializers.IntegerField(min_value=1, default=256)
    tau = serializers.FloatField(default=0.005)
    gamma = serializers.FloatField(default=0.99)
    buffer_size = serializers.IntegerField(min_value=1, default=100_000)
    training_threshold = serializers.IntegerField(min_value=1, default=1000)
    steps = serializers.IntegerField(min_value=1, default=200_000)
    retrain_period = serializers.IntegerField(min_value=1, allow_null=True, default=20_000)
    online_epochs = serializers.IntegerField(min_value=1, default=1)
    log_every_episodes = serializers.IntegerField(min_value=1, default=10)

    def validate(self, attrs):
        try:
            SacConfig(hidden=tuple(attrs["hidden"]), lr=attrs["lr"], batch_size=attrs["batch_size"],
                      tau=attrs["tau"], gamma=attrs["gamma"], buffer_size=attrs["buffer_size"])
        except ValueError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs


class EvalSectionSerializer(serializers.Serializer):
    episodes = serializers.IntegerField(min_value=1, default=10)


class ReportSectionSerializer(serializers.Serializer):
    final_window = serializers.IntegerField(min_value=1, default=10)


class ExperimentConfigSerializer(serializers.Serializer):
    SECTIONS = ("delays", "dataset", "seq2seq", "agent", "eval", "report")

    name = serializers.SlugField(max_length=100)
    output_dir = serializers.CharField(default="", allow_blank=True)
    env = EnvSectionSerializer()
    delays = DelaysSectionSerializer()
    dataset = DatasetSectionSerializer()
    seq2seq = Seq2SeqSectionSerializer()
    agent = AgentSectionSerializer()
    eval = EvalSectionSerializer()
    report = ReportSectionSerializer()
    seeds = serializers.ListField(child=serializers.IntegerField(min_value=0), default=[0, 1, 2, 3, 4],
                                  min_length=1)

    def to_internal_value(self, data):
        # Omitted sections still go through validation so every default is materialized.
        if isinstance(data, Mapping):
            data = {**{section: {} for section in self.SECTIONS}, **data}
        return super().to_internal_value(data)

    def validate(self, attrs):
        delays, seq2seq = attrs["delays"], attrs["seq2seq"]
        worst = max([*delays["constant"], *(c["d_I"] + c["d_M"] for c in delays["random"])])
        if seq2seq["D"] < worst:
            raise serializers.ValidationError(
                {"seq2seq": f"D={seq2seq['D']} is smaller than the largest configured delay {worst}."}
            )
        if any(d > seq2seq["D"] for d in attrs["dataset"]["delay_set"]):
            raise serializers.ValidationError({"dataset": f"delay_set must be a subset of [1, {seq2seq['D']}]."})
        horizon = make_env(attrs["env"]["name"], attrs["env"]["params"]).spec.horizon
        if attrs["agent"]["steps"] < horizon:
            raise serializers.ValidationError(
                {"agent": f"steps={attrs['agent']['steps']} cannot finish one episode of {horizon} steps."}
            )
        if len(set(attrs["seeds"])) != len(attrs["seeds"]):
            raise serializers.ValidationError({"seeds": "seeds must be distinct."})
        return attrs


# -- registry ----------------------------------------------------------------------------


class ExperimentSerializer(serializers.ModelSerializer):
    artifact_count = serializers.IntegerField(source="artifacts.count", read_only=True)
    run_count = serializers.IntegerField(source="runs.count", read_only=True)

    class Meta:
        model = Experiment
        fields = ["id", "name", "config_hash", "config", "output_dir", "created_at", "artifact_count", "run_count"]


class ArtifactSerializer(serializers.ModelSerializer):
    class Meta:
        model = Artifact
        fields = "__all__"


class RunRecordSerializer(serializers.ModelSerializer):
    curve_path = serializers.CharField(source="curve.path", read_only=True, default=None)

    class Meta:
        model = RunRecord
        fields = "__all__"
