"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError
from .inputs import InputConfig
from .model import ModelConfig
from .training import PretrainConfig, TrainConfig


@dataclass
class RunConfig:
    seed: int = 0

    # data
    dataset: str = ""
    n_pairs: int = 256
    n_classes: int = 32
    feat_dim: int = 16
    vocab_size: int = 512
    noise: float = 0.1
    n_words: int = 64
    words_per_class: int = 3
    text_len_min: int = 6
    text_len_max: int = 10
    n_regions: int = 4
    world_seed: int = 0

    # inputs
    max_text_len: int = 35
    max_regions: int = 50
    max_seq_len: int = 128
    image_position_mode: str = "separate"

    # model
    n_layers: int = 3
    n_heads: int = 4
    hidden_dim: int = 32
    ffn_dim: int = 64
    max_positions: int = 128
    pooling: str = "AVG"
    init_std: float = 0.02
    ln_eps: float = 1e-5

    # joint pre-training
    pretrain_epochs: int = 100
    pretrain_batch_size: int = 16
    pretrain_learning_rate: float = 1e-3
    pretrain_weight_decay: float = 1e-4

    # decomposition
    init_checkpoint: str = ""
    batch_size: int = 64
    temperature: float = 0.005
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    loss: str = "INFONCE"
    triplet_margin: float = 0.2
    pooler_init: str = "fresh"
    freeze_layers: int = 0

    # encode / retrieve / eval
    checkpoint: str = ""
    tower: str = "image"
    index: str = ""
    k: int = 10
    query_tokens: str = ""
    query_index: int = 0
    eval_mode: str = "both"
    eval_batch_size: int = 256

    # bench
    bench_sizes: str = "1000,5000,10000"
    bench_batch_size: int = 400
    bench_repetitions: int = 3
    bench_warmup: int = 1
    bench_queries: int = 200
    bench_joint_max_batches: int = 200

    # analyze
    analyze_mode: str = "individual"
    routing_k: int = 4
    layer_groups: str = "auto"
    analyze_samples: int = 256
    compare_checkpoint: str = ""

    def set(self, key: str, raw: str, where: str = "") -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"{where}unknown config key {key!r}")
        current = getattr(self, key)
        try:
            value: Any = type(current)(raw) if not isinstance(current, bool) else raw.lower() in ("1", "true", "yes")
        except ValueError:
            raise ConfigError(f"{where}{key}: cannot parse {raw!r} as {type(current).__name__}") from None
        setattr(self, key, value)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def input_config(self) -> InputConfig:
        return _build(InputConfig, max_text_len=self.max_text_len, max_regions=self.max_regions,
                      max_seq_len=self.max_seq_len, image_position_mode=self.image_position_mode)

    def model_config(self) -> ModelConfig:
        return _build(ModelConfig, n_layers=self.n_layers, n_heads=self.n_heads, hidden_dim=self.hidden_dim,
                      ffn_dim=self.ffn_dim, vocab_size=self.vocab_size, feat_dim=self.feat_dim,
                      max_positions=self.max_positions, pooling=self.pooling, ln_eps=self.ln_eps,
                      init_std=self.init_std)

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, batch_size=self.batch_size, temperature=self.temperature,
                      learning_rate=self.learning_rate, weight_decay=self.weight_decay, epochs=self.epochs,
                      loss=self.loss, triplet_margin=self.triplet_margin, seed=self.seed,
                      pooler_init=self.pooler_init, freeze_layers=self.freeze_layers)

    def pretrain_config(self) -> PretrainConfig:
        return _build(PretrainConfig, batch_size=self.pretrain_batch_size, learning_rate=self.pretrain_learning_rate,
                      weight_decay=self.pretrain_weight_decay, epochs=self.pretrain_epochs, seed=self.seed)


def _build(cls, **kw):
    try:
        return cls(**kw)
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def parse_lines(lines: Iterable[str], cfg: RunConfig, source: str) -> RunConfig:
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value, f"{source}:{lineno}: ")
    return cfg


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
        parse_lines(text.splitlines(), cfg, str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        cfg.set(key, value, "--set: ")
    return cfg


def default_config_text() -> str:
    return resources.files("vldecomp").joinpath("default.conf").read_text(encoding="utf-8")
