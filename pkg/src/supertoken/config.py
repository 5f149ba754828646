"""Pipeline configuration: nested dataclasses plus a ``key = value`` file format
with dotted section names (``cluster.grid = 16``)."""

from dataclasses import dataclass, field
from pathlib import Path

from .classifier import ModelConfig, TrainConfig
from .cluster import ClusterConfig
from .features import PROVIDERS
from .soft_label import MODES


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _orders(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(o) for o in text)
    t = str(text).strip().lower()
    if t in ("", "none"):
        return ()
    orders = tuple(sorted({int(o) for o in t.split(",")}))
    if any(o not in (1, 2) for o in orders):
        raise ValueError(f"derivative orders must be drawn from 1,2: {text!r}")
    return orders


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none", "auto") else int(text)


def _opt_path(text):
    return None if str(text).strip().lower() in ("", "none") else Path(text)


@dataclass
class PipelineConfig:
    cube: Path = None
    labels: Path = None
    output_dir: Path = Path("out")
    palette: Path = None
    checkpoint: Path = None  # load instead of training when set
    seed: int = 0
    num_classes: int = None  # inferred from labels when None
    step: int = 1
    derivative_orders: tuple = (1,)
    provider: str = "linear"
    semantic_dim: int = 32  # C1
    token_dim: int = 32  # C2
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    label_mode: str = "hard-count"
    supervision: str = "soft"  # or "hard" for the one-hot ablation
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.provider not in PROVIDERS:
            raise ValueError(f"unknown feature provider {self.provider!r}")
        if self.label_mode not in MODES:
            raise ValueError(f"unknown soft-label mode {self.label_mode!r}")
        if self.supervision not in ("soft", "hard"):
            raise ValueError(f"supervision must be soft or hard, got {self.supervision!r}")
        if self.step < 1:
            raise ValueError("derive.step must be >= 1")
        if self.token_dim % self.model.heads:
            raise ValueError("model.heads must divide features.token_dim")
        return self


# key -> (object path, converter)
_KEYS = {
    "input.cube": ("cube", Path),
    "input.labels": ("labels", Path),
    "input.palette": ("palette", _opt_path),
    "input.checkpoint": ("checkpoint", _opt_path),
    "output.dir": ("output_dir", Path),
    "seed": ("seed", int),
    "num_classes": ("num_classes", _opt_int),
    "derive.step": ("step", int),
    "derive.orders": ("derivative_orders", _orders),
    "features.provider": ("provider", str),
    "features.dim": ("semantic_dim", int),
    "features.token_dim": ("token_dim", int),
    "cluster.grid": ("cluster.grid", int),
    "cluster.per_cell": ("cluster.per_cell", int),
    "cluster.iters": ("cluster.iterations", int),
    "cluster.knn": ("cluster.knn", int),
    "cluster.window": ("cluster.window", int),
    "cluster.jitter": ("cluster.jitter", _bool),
    "labels.mode": ("label_mode", str),
    "labels.supervision": ("supervision", str),
    "model.heads": ("model.heads", int),
    "model.blocks": ("model.blocks", int),
    "model.mlp_ratio": ("model.mlp_ratio", int),
    "train.epochs": ("train.epochs", int),
    "train.batch": ("train.batch_size", int),
    "train.lr": ("train.lr", float),
    "train.lr_floor": ("train.lr_floor", float),
    "train.beta1": ("train.beta1", float),
    "train.beta2": ("train.beta2", float),
    "train.eps": ("train.eps", float),
}


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def apply_settings(cfg, settings):
    """Apply ``{dotted key: text}`` settings onto ``cfg`` in place."""
    for key, raw in settings.items():
        if key not in _KEYS:
            raise ValueError(f"unknown config key {key!r}")
        target, convert = _KEYS[key]
        obj = cfg
        *parents, attr = target.split(".")
        for p in parents:
            obj = getattr(obj, p)
        setattr(obj, attr, convert(raw))
    # re-run sub-config validation after mutation
    cfg.cluster.__post_init__()
    cfg.train.__post_init__()
    # classifier init and scene shuffling draw from the master seed
    cfg.train.seed = cfg.seed
    return cfg.validate()


def load_config(path=None, overrides=None):
    cfg = PipelineConfig()
    settings = {}
    if path is not None:
        settings.update(parse_config_text(Path(path).read_text()))
    settings.update(overrides or {})
    return apply_settings(cfg, settings)


def dump_config(cfg):
    """Render every known key, in table order, as ``key = value`` lines."""
    lines = []
    for key, (target, _) in _KEYS.items():
        obj = cfg
        for part in target.split("."):
            obj = getattr(obj, part)
        if isinstance(obj, tuple):
            obj = ",".join(str(o) for o in obj) or "none"
        lines.append(f"{key} = {'none' if obj is None else obj}")
    return "\n".join(lines) + "\n"
