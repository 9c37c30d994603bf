"""Run configuration: an INI file with one section per module.

Sections are ``[data]``, ``[model]``, ``[train]`` and ``[eval]``. Every key
must name a known field; unknown keys raise :class:`ConfigError` so typos
cannot silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataset import SyntheticConfig
from .encoders import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str = ""                     # records file; empty = generate synthetic data
    split_fractions: tuple[float, float, float] = (0.5, 0.25, 0.25)
    split_seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(pairs_per_class=20))


@dataclass
class ModelSection:
    """Model fields not implied by the dataset (vocabulary, classes, input dims)."""
    word_dim: int = 16
    hidden_dim: int = 16
    joint_dim: int = 32
    cell: str = "lstm"
    attention: bool = True
    pooling: str = "mean"
    layer_norm_eps: float = 1e-5
    layer_norm_affine: bool = False
    classifier_sharing: str = "per-modality"
    init_seed: int = 0

    def build(self, vocab_size: int, num_classes: int, sentence_dim: int, image_dim: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, num_classes=num_classes,
                           sentence_dim=sentence_dim, image_dim=image_dim, **dataclasses.asdict(self))


@dataclass
class EvalSection:
    subset_size: int = 1000
    n_subsets: int = 10
    seed: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def with_seed(self, seed: int) -> RunConfig:
        """Copy with every seed (data, split, init, shuffling) set from one value."""
        return dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, split_seed=seed,
                                     synthetic=dataclasses.replace(self.data.synthetic, seed=seed)),
            model=dataclasses.replace(self.model, init_seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


def desk_config(seed: int = 0) -> RunConfig:
    """Scaled-down reference run: 20 classes, 10 training pairs each, d_J = 32, batch 16, 50 epochs.

    Synthetic data has 20 pairs per class split 10/5/5, giving 100-pair
    validation and test splits. The learning rate is 1e-3 (the full-scale
    1e-4 assumes ~190k updates; this run makes 600).
    """
    cfg = RunConfig(
        train=TrainConfig(batch_size=16, lr=1e-3, decay_epoch=30, lam=0.05, margin=0.3, max_epochs=50),
        eval=EvalSection(subset_size=100, n_subsets=1, seed=0),
    )
    return cfg.with_seed(seed)


def full_scale_config() -> RunConfig:
    """Full-size hyperparameters: batch 64, Adam lr 1e-4 decayed x0.1 at epoch 30, 40 epochs, d_J 1024."""
    return RunConfig(
        data=DataSection(split_fractions=(0.7, 0.15, 0.15),
                         synthetic=SyntheticConfig(pairs_per_class=200, sentence_dim=1024, image_dim=2048)),
        model=ModelSection(word_dim=300, hidden_dim=300, joint_dim=1024),
        train=TrainConfig(),
        eval=EvalSection(subset_size=1000, n_subsets=10),
    )


# -- INI round trip -----------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if len(items) != len(default):
                raise ValueError(raw)
            return tuple(type(d)(x) for d, x in zip(default, items))
        return raw.strip()
    except (ValueError, TypeError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _section_items(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    data = _section_items(cfg.data)
    syn = data.pop("synthetic")
    cp["data"] = {k: _fmt(v) for k, v in data.items()}
    cp["data"].update({f"synthetic.{k}": _fmt(v) for k, v in _section_items(syn).items()})
    cp["model"] = {k: _fmt(v) for k, v in _section_items(cfg.model).items()}
    cp["train"] = {k: _fmt(v) for k, v in _section_items(cfg.train).items()}
    cp["eval"] = {k: _fmt(v) for k, v in _section_items(cfg.eval).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _apply(obj, values: dict[str, str], section: str):
    defaults = _section_items(obj)
    changes = {}
    for k, raw in values.items():
        if k not in defaults:
            raise ConfigError(f"[{section}] unknown key {k!r}; known keys: {', '.join(sorted(defaults))}")
        changes[k] = _parse(raw, defaults[k], f"[{section}] {k}")
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    cfg = base or RunConfig()
    known = {"data", "model", "train", "eval"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]; expected one of {sorted(known)}")
    if cp.has_section("data"):
        items = dict(cp["data"])
        syn_items = {k[len("synthetic."):]: v for k, v in items.items() if k.startswith("synthetic.")}
        plain = {k: v for k, v in items.items() if not k.startswith("synthetic.")}
        synthetic = _apply(cfg.data.synthetic, syn_items, "data synthetic")
        cfg = dataclasses.replace(cfg, data=_apply(dataclasses.replace(cfg.data, synthetic=synthetic), plain, "data"))
    if cp.has_section("model"):
        cfg = dataclasses.replace(cfg, model=_apply(cfg.model, dict(cp["model"]), "model"))
    if cp.has_section("train"):
        cfg = dataclasses.replace(cfg, train=_apply(cfg.train, dict(cp["train"]), "train"))
    if cp.has_section("eval"):
        cfg = dataclasses.replace(cfg, eval=_apply(cfg.eval, dict(cp["eval"]), "eval"))
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(), base)
