"""
Experiment stages behind the management commands.

Every stage reads the validated YAML configuration, works below its output
directory and registers what it writes. Files embed the config hash, and
downstream stages refuse artifacts produced under another configuration.

    datasets/<preset>.npz
    experts/expert.json (+ expert.npz for a SAC expert)
    checkpoints/<preset>-k<K1>.npz
    curves/<mode>/<cell>/<tag>/seed-<s>.jsonl
    policies/<mode>/<cell>/<tag>/seed-<s>.npz
    evals/<mode>/<cell>/<tag>/seed-<s>.jsonl
    reports/*.csv
"""
import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from django.conf import settings
from rest_framework.exceptions import ValidationError

from deer import registry
from deer.agent import (
    AugmentedStateFeatures,
    ContextFeatures,
    OnlineSettings,
    PredictedStateFeatures,
    RawStateFeatures,
    SacConfig,
    SacExpert,
    evaluate_policy,
    load_policy,
    run_deer,
    run_dolps,
    run_online_deer,
    run_sacas,
    save_policy,
    train_expert,
)
from deer.dataset import collect, collect_mix, load_dataset, make_samples, preset_counts, save_dataset, split
from deer.envs import LinearSystemEnv, LqrExpert, make_env
from deer.exceptions import ArtifactMismatchError, ArtifactMissingError, NormalizationError
from deer.models import Artifact, RunRecord
from deer.rddmdp import DelayConfig
from deer.seq2seq import Seq2SeqModel, load_model, pretrain, save_model
from deer.serializers import ExperimentConfigSerializer

logger = logging.getLogger(__name__)

MODES = ("deer", "sacas", "dolps", "online-deer", "delay-free")
CHECKPOINT_MODES = ("deer", "dolps")


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict
    config_hash: str

    @property
    def name(self):
        return self.data["name"]

    @property
    def root(self):
        if self.data["output_dir"]:
            return Path(self.data["output_dir"])
        return Path(settings.DEER["ARTIFACT_ROOT"]) / self.name

    @property
    def seeds(self):
        return list(self.data["seeds"])

    def env(self):
        return make_env(self.data["env"]["name"], self.data["env"]["params"])

    def cells(self):
        """Delay configurations of the grid, in config order, without duplicates."""
        delays = self.data["delays"]
        configs = [DelayConfig.constant(d) for d in delays["constant"]]
        configs += [DelayConfig(c["d_I"], c["d_M"], c["mu"]) for c in delays["random"]]
        unique = {}
        for cfg in configs:
            unique.setdefault(cfg.label, cfg)
        return list(unique.values())

    def k1_values(self):
        seq2seq = self.data["seq2seq"]
        return list(seq2seq["k1_sweep"]) or [seq2seq["k1"]]

    def preset_names(self):
        return [preset["name"] for preset in self.data["dataset"]["presets"]]

    def checkpoints(self):
        """(preset, K1) pairs to pretrain: the K1 sweep runs on the first preset, the others use the base K1."""
        presets = self.preset_names()
        pairs = [(presets[0], k1) for k1 in self.k1_values()]
        pairs += [(preset, self.data["seq2seq"]["k1"]) for preset in presets[1:]]
        return pairs

    def delay_set(self):
        D = self.data["seq2seq"]["D"]
        return list(self.data["dataset"]["delay_set"]) or list(range(1, D + 1))

    def dataset_counts(self, name):
        dataset = self.data["dataset"]
        preset = next(p for p in dataset["presets"] if p["name"] == name)
        return preset_counts(preset, dataset["random"], dataset["expert"])

    def sac_config(self):
        agent = self.data["agent"]
        return SacConfig(hidden=tuple(agent["hidden"]), lr=agent["lr"], batch_size=agent["batch_size"],
                         tau=agent["tau"], gamma=agent["gamma"], buffer_size=agent["buffer_size"],
                         training_threshold=agent["training_threshold"], log_every=agent["log_every_episodes"])

    def online_settings(self):
        seq2seq, agent = self.data["seq2seq"], self.data["agent"]
        return OnlineSettings(k1=seq2seq["k1"], k2=seq2seq["k2"], D=seq2seq["D"],
                              teacher_forcing=seq2seq["teacher_forcing"],
                              retrain_period=agent["retrain_period"] or 0, epochs=agent["online_epochs"],
                              batch_size=seq2seq["batch_size"], lr=seq2seq["lr"], clip_norm=seq2seq["clip_norm"],
                              test_ratio=self.data["dataset"]["test_ratio"])


def config_hash(data):
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ValidationError({"config": f"{path} does not exist"}) from None
    except yaml.YAMLError as exc:
        raise ValidationError({"config": f"{path} is not valid YAML: {exc}"}) from None
    serializer = ExperimentConfigSerializer(data=raw)
    serializer.is_valid(raise_exception=True)
    data = json.loads(json.dumps(serializer.validated_data))
    return ExperimentConfig(data, config_hash(data))


def normalized_return(ret, min_return, expert_return):
    if not expert_return > min_return:
        raise NormalizationError(
            f"expert return {expert_return!r} must exceed the minimum return {min_return!r}"
        )
    return (ret - min_return) / (expert_return - min_return)


# -- paths -------------------------------------------------------------------------


def dataset_path(config, preset):
    return config.root / "datasets" / f"{preset}.npz"


def checkpoint_path(config, preset, k1):
    return config.root / "checkpoints" / f"{preset}-k{k1}.npz"


def expert_path(config):
    return config.root / "experts" / "expert.json"


def run_path(config, kind, mode, cell, tag, seed, suffix):
    return config.root / kind / mode / cell / tag / f"seed-{seed}.{suffix}"


def _checked_header(header, config, path, command):
    if header.get("config_hash") != config.config_hash:
        raise ArtifactMismatchError(
            f"{path} was produced under config {str(header.get('config_hash'))[:12]}, "
            f"current config is {config.config_hash[:12]}; rerun `manage.py {command}`"
        )
    return header


def _require(path, command):
    if not Path(path).exists():
        raise ArtifactMissingError(path, command)
    return path


def _write_jsonl(path, config, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({"config_hash": config.config_hash, **row}, sort_keys=True) + "\n")


def _read_jsonl(path, config, command):
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    for row in rows:
        _checked_header(row, config, path, command)
    return rows


def _jobs(config, modes):
    """(mode, cell, tag, preset, k1) for every run the grid asks for."""
    for mode in modes:
        if mode == "delay-free":
            yield mode, DelayConfig.delay_free(), "default", "", None
            continue
        for cell in config.cells():
            if cell.is_delay_free:
                continue
            if mode in CHECKPOINT_MODES:
                for preset, k1 in config.checkpoints():
                    yield mode, cell, f"{preset}-k{k1}", preset, k1
            elif mode == "online-deer":
                yield mode, cell, "default", "", config.data["seq2seq"]["k1"]
            else:
                yield mode, cell, "default", "", None


# -- collect -----------------------------------------------------------------------


def _build_expert(config, env, experiment):
    """LQR for linear systems, otherwise a SAC policy trained without delays."""
    path = expert_path(config)
    dataset = config.data["dataset"]
    seed = config.seeds[0]
    if isinstance(env, LinearSystemEnv):
        expert, kind = LqrExpert(env), "lqr"
    else:
        policy_file = path.with_suffix(".npz")
        if path.exists() and policy_file.exists() and _expert_header(path).get("config_hash") == config.config_hash:
            policy, _ = load_policy(policy_file)
            expert = SacExpert(policy)
        else:
            expert = train_expert(env, config.sac_config(), dataset["expert_steps"], seed,
                                  dataset["expert_return_threshold"])
            policy_file.parent.mkdir(parents=True, exist_ok=True)
            save_policy(policy_file, expert.policy, {"config_hash": config.config_hash})
            registry.register_artifact(experiment, Artifact.Kind.EXPERT, policy_file)
        kind = "sac"
    expert_return = collect(env, "expert", dataset["collect_episodes"], seed + 1, expert).mean_return("expert")
    threshold = dataset["expert_return_threshold"]
    if threshold is not None and expert_return < threshold:
        logger.warning("expert return %.3f is below the threshold %.3f", expert_return, threshold)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": config.config_hash, "kind": kind,
                                "expert_return": expert_return}, sort_keys=True))
    registry.register_artifact(experiment, Artifact.Kind.EXPERT, path, {"kind": kind, "expert_return": expert_return})
    return expert, expert_return


def _expert_header(path):
    return json.loads(Path(path).read_text())


def stage_collect(config):
    experiment = registry.register_experiment(config)
    env = config.env()
    expert, expert_return = _build_expert(config, env, experiment)
    written = []
    for index, preset in enumerate(config.preset_names()):
        n_random, n_expert = config.dataset_counts(preset)
        seed = int(np.random.SeedSequence([config.seeds[0], index]).generate_state(1)[0])
        store = collect_mix(env, n_random, n_expert, seed, expert)
        meta = {
            "config_hash": config.config_hash,
            "preset": preset,
            "counts": store.counts(),
            "expert_return": expert_return,
            "random_return": store.mean_return("random"),
        }
        path = dataset_path(config, preset)
        path.parent.mkdir(parents=True, exist_ok=True)
        digest = save_dataset(path, store, meta)
        registry.register_artifact(experiment, Artifact.Kind.DATASET, path, {**meta, "content_hash": digest})
        logger.info("wrote %s: %d random + %d expert trajectories", path, n_random, n_expert)
        written.append(path)
    return written


# -- pretrain ----------------------------------------------------------------------


def stage_pretrain(config):
    experiment = registry.register_experiment(config)
    seq2seq, dataset = config.data["seq2seq"], config.data["dataset"]
    seed = config.seeds[0]
    written = []
    for preset in config.preset_names():
        k1_values = [k1 for name, k1 in config.checkpoints() if name == preset]
        path = _require(dataset_path(config, preset), "collect")
        store, header, dataset_hash = load_dataset(path)
        _checked_header(header, config, path, "collect")
        samples = make_samples(store, seq2seq["D"], config.delay_set(), dataset["stride"])
        train, test = split(samples, 1.0 - dataset["test_ratio"], seed)
        for k1 in k1_values:
            model = Seq2SeqModel(store.spec.state_dim, store.spec.action_dim, k1=k1, k2=seq2seq["k2"],
                                 D=seq2seq["D"], teacher_forcing=seq2seq["teacher_forcing"], seed=seed)
            model.set_normalization(*store.state_statistics())
            logger.info("pretraining %s encoder K1=%d on %d samples", preset, k1, len(train))
            model, curve = pretrain(model, train, test, seq2seq["epochs"], seq2seq["batch_size"], seq2seq["lr"], seed,
                                    lr_min=seq2seq["lr_min"], clip_norm=seq2seq["clip_norm"])
            target = checkpoint_path(config, preset, k1)
            target.parent.mkdir(parents=True, exist_ok=True)
            meta = {"config_hash": config.config_hash, "preset": preset, "dataset_hash": dataset_hash,
                    "test_mse": curve}
            digest = save_model(target, model, meta)
            registry.register_artifact(experiment, Artifact.Kind.CHECKPOINT, target, {**meta, "content_hash": digest})
            written.append(target)
    return written


def _load_checkpoint(config, preset, k1):
    path = _require(checkpoint_path(config, preset, k1), "pretrain")
    model, header, digest = load_model(path)
    _checked_header(header, config, path, "pretrain")
    return model, header, digest


# -- train -------------------------------------------------------------------------


def _final(curve, key, window):
    values = [point[key] for point in curve[-window:]]
    return float(np.mean(values)) if values else float("nan")


def stage_train(config, modes=("deer",), seeds=None):
    experiment = registry.register_experiment(config)
    seeds = seeds or config.seeds
    agent, window = config.data["agent"], config.data["report"]["final_window"]
    sac = config.sac_config()
    written = []
    for mode, cell, tag, preset, k1 in _jobs(config, modes):
        model, dataset_hash, checkpoint_hash = None, "", ""
        if mode in CHECKPOINT_MODES:
            model, header, checkpoint_hash = _load_checkpoint(config, preset, k1)
            dataset_hash = header["dataset_hash"]
        for seed in seeds:
            env = config.env()
            logger.info("training %s on %s/%s (%s) seed %d", mode, env.spec.name, cell.label, tag, seed)
            if mode == "deer" or mode == "delay-free":
                result = run_deer(env, cell, model, sac, agent["steps"], seed)
            elif mode == "dolps":
                result = run_dolps(env, cell, model, sac, agent["steps"], seed)
            elif mode == "sacas":
                result = run_sacas(env, cell, sac, agent["steps"], seed)
            else:
                result = run_online_deer(env, cell, sac, config.online_settings(), agent["steps"], seed)

            curve_file = run_path(config, "curves", mode, cell.label, tag, seed, "jsonl")
            _write_jsonl(curve_file, config, result.curve)
            policy_file = run_path(config, "policies", mode, cell.label, tag, seed, "npz")
            policy_file.parent.mkdir(parents=True, exist_ok=True)
            save_policy(policy_file, result.policy, {"config_hash": config.config_hash,
                                                     "features": result.features.name})
            if mode == "online-deer":
                save_model(policy_file.with_suffix(".encoder.npz"), result.features.model,
                           {"config_hash": config.config_hash})
            curve = registry.register_artifact(experiment, Artifact.Kind.CURVE, curve_file)
            registry.register_artifact(experiment, Artifact.Kind.POLICY, policy_file)
            registry.register_run(
                experiment, curve,
                mode=mode, cell=cell.label, k1=k1, preset=preset, seed=seed,
                env=env.spec.name,
                intrinsic_delay=cell.intrinsic_delay, max_extra_delay=cell.max_extra_delay,
                drop_prob=cell.drop_prob,
                dataset_hash=dataset_hash, checkpoint_hash=checkpoint_hash,
                final_true_return=_final(result.curve, "episode_return_true", window),
                final_delivered_return=_final(result.curve, "episode_return_delivered", window),
            )
            written.append(curve_file)
    return written


# -- eval --------------------------------------------------------------------------


def _features_for(config, mode, cell, preset, k1, policy_file, spec):
    if mode == "delay-free" or cell.is_delay_free:
        return RawStateFeatures(spec)
    if mode == "sacas":
        return AugmentedStateFeatures(spec, cell.max_delay)
    if mode == "online-deer":
        encoder_file = _require(policy_file.with_suffix(".encoder.npz"), "train")
        model, header, _ = load_model(encoder_file)
        _checked_header(header, config, encoder_file, "train")
        return ContextFeatures(model)
    model, _, _ = _load_checkpoint(config, preset, k1)
    return ContextFeatures(model) if mode == "deer" else PredictedStateFeatures(model)


def stage_eval(config, modes=("deer",), seeds=None):
    experiment = registry.register_experiment(config)
    seeds = seeds or config.seeds
    episodes = config.data["eval"]["episodes"]
    written = []
    for mode, cell, tag, preset, k1 in _jobs(config, modes):
        for seed in seeds:
            policy_file = _require(run_path(config, "policies", mode, cell.label, tag, seed, "npz"), "train")
            policy, header = load_policy(policy_file)
            _checked_header(header, config, policy_file, "train")
            env = config.env()
            features = _features_for(config, mode, cell, preset, k1, policy_file, env.spec)
            # evaluation episodes use a seed stream disjoint from training
            rows = evaluate_policy(env, cell, features, policy, episodes, seed + 10_000)
            target = run_path(config, "evals", mode, cell.label, tag, seed, "jsonl")
            _write_jsonl(target, config, rows)
            registry.register_artifact(experiment, Artifact.Kind.EVALUATION, target, {
                "mean_true_return": float(np.mean([r["true_return"] for r in rows])),
            })
            written.append(target)
    return written


# -- report ------------------------------------------------------------------------


@dataclass(frozen=True)
class CellSummary:
    env: str
    cell: str
    mode: str
    tag: str
    seeds: int
    median: float
    variance: float
    median_raw: float

    def as_row(self):
        return [self.env, self.cell, self.mode, self.tag, self.seeds,
                f"{self.median:.6f}", f"{self.variance:.6f}", f"{self.median_raw:.6f}"]


SUMMARY_HEADER = ["env", "cell", "mode", "tag", "seeds", "median", "variance", "median_raw"]


def _variance(values):
    # "+/-" columns are sample variances across seeds
    return float(np.var(values, ddof=1)) if len(values) > 1 else 0.0


def read_curves(config):
    """{(mode, cell, tag): {seed: curve}} for every stored learning curve."""
    curves = {}
    for path in sorted((config.root / "curves").glob("*/*/*/seed-*.jsonl")):
        mode, cell, tag = path.parts[-4:-1]
        seed = int(path.stem.split("-", 1)[1])
        curves.setdefault((mode, cell, tag), {})[seed] = _read_jsonl(path, config, "train")
    return curves


def summarize(config, curves, expert_return):
    """Median and variance of the normalized final true return, per (cell, mode, tag)."""
    window = config.data["report"]["final_window"]
    all_returns = [point["episode_return_true"] for runs in curves.values()
                   for curve in runs.values() for point in curve]
    min_return = min(all_returns)
    env_name = config.data["env"]["name"]
    summaries = []
    for (mode, cell, tag), runs in sorted(curves.items()):
        raw = [_final(runs[seed], "episode_return_true", window) for seed in sorted(runs)]
        normalized = [normalized_return(r, min_return, expert_return) for r in raw]
        summaries.append(CellSummary(env_name, cell, mode, tag, len(raw), float(np.median(normalized)),
                                     _variance(normalized), float(np.median(raw))))
    return summaries, min_return


def _lookup(summaries, cell, mode, tag=None):
    for summary in summaries:
        if summary.cell == cell and summary.mode == mode and (tag is None or summary.tag == tag):
            return summary
    return None


def findings(config, summaries):
    """Direction checks on the stored results; each row is (check, cell, lhs, rhs, holds)."""
    base_tag = f"{config.preset_names()[0]}-k{config.data['seq2seq']['k1']}"
    rows = []

    def compare(check, cell, left, right, factor=1.0):
        if left is None or right is None:
            return
        holds = left.median >= factor * right.median
        rows.append([check, cell, f"{left.median:.6f}", f"{factor * right.median:.6f}", holds])
        if not holds:
            logger.warning("finding: %s does not hold on %s (%.4f < %.4f)", check, cell, left.median,
                           factor * right.median)

    for cell in sorted({s.cell for s in summaries}):
        deer = _lookup(summaries, cell, "deer", base_tag)
        compare("deer>=online-deer", cell, deer, _lookup(summaries, cell, "online-deer"))
        compare("deer>=dolps", cell, deer, _lookup(summaries, cell, "dolps", base_tag))
    delay_free = _lookup(summaries, "delay-free", "delay-free")
    compare("deer>=0.8*delay-free", "const-d2", _lookup(summaries, "const-d2", "deer", base_tag), delay_free, 0.8)
    compare("deer>=sacas", "const-d4", _lookup(summaries, "const-d4", "deer", base_tag),
            _lookup(summaries, "const-d4", "sacas"))
    return rows


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def stage_report(config):
    experiment = registry.register_experiment(config)
    expert_file = _require(expert_path(config), "collect")
    expert = _checked_header(_expert_header(expert_file), config, expert_file, "collect")
    curves = read_curves(config)
    if not curves:
        raise ArtifactMissingError(config.root / "curves", "train")
    summaries, min_return = summarize(config, curves, expert["expert_return"])
    reports = config.root / "reports"

    written = [_write_csv(reports / "summary.csv", SUMMARY_HEADER, [s.as_row() for s in summaries])]

    sweep_tags = {f"{name}-k{k1}" for name, k1 in config.checkpoints()[:len(config.k1_values())]}
    dims = [[s.cell, s.tag.rsplit("-k", 1)[1], s.seeds, f"{s.median:.6f}", f"{s.variance:.6f}"]
            for s in summaries if s.mode == "deer" and s.tag in sweep_tags]
    written.append(_write_csv(reports / "dimensions.csv", ["cell", "k1", "seeds", "median", "variance"], dims))

    base_tags = {f"{name}-k{config.data['seq2seq']['k1']}": name for name in config.preset_names()}
    presets = [[s.cell, base_tags[s.tag], s.seeds, f"{s.median:.6f}", f"{s.variance:.6f}"]
               for s in summaries if s.mode == "deer" and s.tag in base_tags]
    written.append(_write_csv(reports / "datasets.csv", ["cell", "preset", "seeds", "median", "variance"], presets))

    written.append(_write_csv(reports / "findings.csv", ["check", "cell", "lhs", "rhs", "holds"],
                              findings(config, summaries)))
    written.append(_write_csv(reports / "normalization.csv", ["env", "min_return", "expert_return"],
                              [[config.data["env"]["name"], f"{min_return:.6f}",
                                f"{expert['expert_return']:.6f}"]]))
    for path in written:
        registry.register_artifact(experiment, Artifact.Kind.REPORT, path)
    logger.info("report over %d cells written to %s", len(summaries), reports)
    return written


def run_summary(experiment):
    """Median and variance of the final true returns stored in the registry."""
    groups = {}
    for run in RunRecord.objects.filter(experiment=experiment):
        key = (run.env, run.cell, run.mode, run.k1, run.preset)
        groups.setdefault(key, []).append(run.final_true_return)
    return [
        {"env": env, "cell": cell, "mode": mode, "k1": k1, "preset": preset, "seeds": len(values),
         "median": float(np.median(values)), "variance": _variance(values)}
        for (env, cell, mode, k1, preset), values in sorted(groups.items(), key=lambda item: str(item[0]))
    ]
