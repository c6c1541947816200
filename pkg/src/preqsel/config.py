"""Experiment configuration: one JSON document, validated before any compute."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from . import data
from .calib import CalibPolicy
from .nn import ModelSpec, SpecError
from .optim import OptimizerSpec
from .prequential import BlockSchedule, TrainingRecipe

OUT_ENV = "PREQSEL_OUT"
DATASET_SOURCES = ("synth", "idx", "csv")


class ConfigError(ValueError):
    pass


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d or d[key] is None:
        raise ConfigError(f"missing field '{where}{key}'")
    return d[key]


def _int_list(values, where: str) -> tuple:
    if not isinstance(values, list) or not values:
        raise ConfigError(f"'{where}' must be a non-empty list")
    try:
        out = tuple(int(v) for v in values)
    except (TypeError, ValueError):
        raise ConfigError(f"'{where}' must contain integers") from None
    return out


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    name: str
    dataset: dict
    eval_size: int | None
    eval_seed: int
    models: dict  # name -> layer list (dicts), resolved against the dataset at load time
    input_shape: tuple | None
    optimizer: OptimizerSpec
    policy: CalibPolicy
    calib_fraction: float
    full_dataset_size: int | None
    prefix_sizes: tuple
    schedule: dict
    seeds: tuple
    widths: tuple
    width_model: str | None
    n_boot: int
    output_dir: str | None

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()

    def comment(self, seeds=None) -> str:
        seeds = self.seeds if seeds is None else seeds
        return f"config={self.digest} seeds={','.join(str(s) for s in seeds)}"

    def resolve_out(self, cli_out: str | None, env: dict) -> Path:
        return Path(cli_out or self.output_dir or env.get(OUT_ENV) or "runs")

    def load_dataset(self) -> data.Dataset:
        d = self.dataset
        src = d["source"]
        if src == "synth":
            return data.synth_mixture(int(d["num_classes"]), int(d["dim"]), int(d["examples_per_class"]),
                                      float(d["separation"]), int(d.get("seed", 0)),
                                      int(d.get("clusters_per_class", 1)), float(d.get("scale", 1.0)))
        if src == "idx":
            return data.load_idx(d["images"], d["labels"], d.get("num_classes"))
        return data.load_csv(d["path"], d.get("num_classes"))

    def split_eval(self, ds: data.Dataset) -> tuple[data.Dataset, data.Dataset]:
        if not self.eval_size:
            raise ConfigError("missing field 'eval.size'")
        if self.eval_size >= len(ds):
            raise ConfigError(f"'eval.size' must be below the dataset size {len(ds)}")
        return data.holdout(ds, self.eval_size, self.eval_seed)

    def model_spec(self, name: str, ds: data.Dataset) -> ModelSpec:
        shape = self.input_shape or (ds.dim,)
        return ModelSpec.from_dict({"input_shape": list(shape), "num_classes": ds.num_classes,
                                    "layers": self.models[name]})

    def recipe(self, spec: ModelSpec) -> TrainingRecipe:
        return TrainingRecipe(spec, self.optimizer, self.policy, self.calib_fraction, self.full_dataset_size)

    def block_schedule(self, n: int, num_classes: int) -> BlockSchedule:
        if "boundaries" in self.schedule:
            return BlockSchedule(tuple(self.schedule["boundaries"]))
        n0 = int(self.schedule.get("n0") or 2 * num_classes)
        return BlockSchedule.geometric(n, n0, float(self.schedule.get("factor", 2.0)))


def parse_config(doc: dict, check_paths: bool = True) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    ds = _require(doc, "dataset", "")
    src = _require(ds, "source", "dataset.")
    if src not in DATASET_SOURCES:
        raise ConfigError(f"'dataset.source' must be one of {DATASET_SOURCES}, got {src!r}")
    need = {"synth": ("num_classes", "dim", "examples_per_class", "separation"),
            "idx": ("images", "labels"), "csv": ("path",)}[src]
    for key in need:
        _require(ds, key, "dataset.")
    if check_paths and src != "synth":
        for key in need:
            if not Path(ds[key]).is_file():
                raise ConfigError(f"'dataset.{key}': no such file {ds[key]}")

    models = _require(doc, "models", "")
    if not isinstance(models, dict) or not models:
        raise ConfigError("'models' must map names to layer lists")
    for name, layers in models.items():
        if isinstance(layers, dict):
            layers = layers.get("layers", [])
        try:
            ModelSpec.from_dict({"input_shape": [1], "num_classes": 2, "layers": layers})
        except (SpecError, TypeError, KeyError) as exc:
            raise ConfigError(f"'models.{name}': {exc}") from None
    models = {k: (v.get("layers", []) if isinstance(v, dict) else v) for k, v in models.items()}

    try:
        opt = dict(doc.get("optimizer", {}))
        if "learning_rates" in opt:
            opt["learning_rates"] = tuple(opt["learning_rates"])
        optimizer = OptimizerSpec(**opt)
        cal = dict(doc.get("calib", {}))
        calib_fraction = float(cal.pop("calib_fraction", 0.10))
        policy = CalibPolicy(**cal)
        data.SplitSpec(calib_fraction)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad optimizer/calib section: {exc}") from None

    seeds = _int_list(_require(doc, "seeds", ""), "seeds")
    prefix_sizes = _int_list(doc["prefix_sizes"], "prefix_sizes") if "prefix_sizes" in doc else ()
    if any(b <= a for a, b in zip(prefix_sizes, prefix_sizes[1:])):
        raise ConfigError("'prefix_sizes' must be strictly increasing")
    schedule = doc.get("schedule", {})
    if "boundaries" in schedule:
        _int_list(schedule["boundaries"], "schedule.boundaries")
    widths = _int_list(doc["widths"], "widths") if "widths" in doc else ()
    width_model = doc.get("width_model")
    if width_model is not None and width_model not in models:
        raise ConfigError(f"'width_model' names unknown model {width_model!r}")
    ev = doc.get("eval", {})
    shape = doc.get("input_shape")
    return ExperimentConfig(
        raw=doc, name=str(doc.get("name", "experiment")), dataset=dict(ds),
        eval_size=int(ev["size"]) if ev.get("size") else None, eval_seed=int(ev.get("seed", 0)),
        models=models, input_shape=tuple(shape) if shape else None, optimizer=optimizer, policy=policy,
        calib_fraction=calib_fraction, full_dataset_size=doc.get("full_dataset_size"),
        prefix_sizes=prefix_sizes, schedule=dict(schedule), seeds=seeds, widths=widths, width_model=width_model,
        n_boot=int(doc.get("n_boot", 1000)), output_dir=doc.get("output_dir"),
    )


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)
