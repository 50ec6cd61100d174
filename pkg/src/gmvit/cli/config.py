"""Run configuration: an INI file with one section per concern.

Every field has a default; unknown sections or keys are rejected so typos
fail fast. The resolved configuration is written back as ``config.echo`` in
each output directory and can be fed straight back to ``--config``.

Schema (defaults in brackets)::

    [run]        seed [0], out [runs/default]
    [dataset]    path [data/default], rig [dodeca20], C [8], per_class_train [25],
                 per_class_test [10], H [32], W [32], seed [0], points [8192]
    [model]      variant [teacher], D [64], M [auto: 8 circle12, 12 dodeca20],
                 L [6], K [6], heads [8], expansion [4], cnn_widths [16,32,64,128],
                 token_weighting [true], dropout [0.5], dtype [float32]
    [optimizer]  lr_start [0.1], lr_end [0.01], horizon [auto = epochs],
                 momentum [1e-4], weight_decay [1e-4], epochs [30], batch_size [8],
                 literal_label_softmax [false]
    [train]      resume [none], eval_every [1], max_samples [0 = all]
    [distill]    teacher [none], targets [cnn,view,token,group,global,logit],
                 temperature [5], c_soft [0.7], c_hard [0.3], hard [true],
                 t2_scale [false], weight_<target> [1], cache_taps [true], sweep [false]
    [eval]       checkpoint [best], classification [true], retrieval [true],
                 similarity [true], cap [1000], at_n [class], distance [euclidean],
                 backend [exhaustive], split [test]
    [bench]      teacher, simple, mini [none], repeats [3], batch_size [8], max_samples [0]
    [gradcheck]  variants [teacher,simple,mini], max_coords [6], tol [1e-3], mutate [none]
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..distillation import TARGETS


class ConfigError(ValueError):
    """A user-facing configuration problem; the CLI maps it to exit code 1."""


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"


@dataclass
class DatasetSection:
    path: str = "data/default"
    rig: str = "dodeca20"
    C: int = 8
    per_class_train: int = 25
    per_class_test: int = 10
    H: int = 32
    W: int = 32
    seed: int = 0
    points: int = 8192


@dataclass
class ModelSection:
    variant: str = "teacher"
    D: int = 64
    M: str = "auto"
    L: int = 6
    K: int = 6
    heads: int = 8
    expansion: int = 4
    cnn_widths: str = "16,32,64,128"
    token_weighting: bool = True
    dropout: float = 0.5
    dtype: str = "float32"


@dataclass
class OptimizerSection:
    lr_start: float = 0.1
    lr_end: float = 0.01
    horizon: str = "auto"
    momentum: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    literal_label_softmax: bool = False

    def horizon_epochs(self) -> float:
        return float(self.epochs) if self.horizon == "auto" else float(self.horizon)


@dataclass
class TrainSection:
    resume: str = "none"
    eval_every: int = 1
    max_samples: int = 0


@dataclass
class DistillSection:
    teacher: str = "none"
    targets: str = ",".join(TARGETS)
    temperature: float = 5.0
    c_soft: float = 0.7
    c_hard: float = 0.3
    hard: bool = True
    t2_scale: bool = False
    weight_cnn: float = 1.0
    weight_view: float = 1.0
    weight_token: float = 1.0
    weight_group: float = 1.0
    weight_global: float = 1.0
    weight_logit: float = 1.0
    cache_taps: bool = True
    sweep: bool = False

    def target_list(self) -> list[str]:
        if self.targets.strip().lower() in ("", "none"):
            return []
        return [t.strip() for t in self.targets.split(",") if t.strip()]


@dataclass
class EvalSection:
    checkpoint: str = "best"
    classification: bool = True
    retrieval: bool = True
    similarity: bool = True
    cap: int = 1000
    at_n: str = "class"
    distance: str = "euclidean"
    backend: str = "exhaustive"
    split: str = "test"


@dataclass
class BenchSection:
    teacher: str = "none"
    simple: str = "none"
    mini: str = "none"
    repeats: int = 3
    batch_size: int = 8
    max_samples: int = 0


@dataclass
class GradcheckSection:
    variants: str = "teacher,simple,mini"
    max_coords: int = 6
    tol: float = 1e-3
    mutate: str = "none"


SECTIONS = {
    "run": RunSection, "dataset": DatasetSection, "model": ModelSection,
    "optimizer": OptimizerSection, "train": TrainSection, "distill": DistillSection,
    "eval": EvalSection, "bench": BenchSection, "gradcheck": GradcheckSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def out(self) -> Path:
        return Path(self.run.out)

    def set(self, section: str, key: str, value) -> RunConfig:
        """Copy with one field replaced; ``value`` may be a string to parse."""
        sec = getattr(self, section)
        ftype = {f.name: f.type for f in fields(sec)}[key]
        if isinstance(value, str):
            value = _parse(section, key, value, ftype)
        return dataclasses.replace(self, **{section: dataclasses.replace(sec, **{key: value})})

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            cp[name] = {f.name: _format(getattr(getattr(self, name), f.name)) for f in fields(SECTIONS[name])}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    def write_echo(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "config.echo"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v) if not isinstance(v, float) else repr(v)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(section: str, key: str, raw: str, ftype):
    raw = raw.strip()
    where = f"[{section}] {key} = {raw!r}"
    if ftype in (bool, "bool"):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{where}: expected a boolean")
    if ftype in (int, "int"):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer") from None
    if ftype in (float, "float"):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number") from None
    return raw


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    cfg = RunConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; expected one of {sorted(SECTIONS)}")
        known = {f.name: f.type for f in fields(SECTIONS[name])}
        values = {}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]; expected one of {sorted(known)}")
            values[key] = _parse(name, key, raw, known[key])
        cfg = dataclasses.replace(cfg, **{name: dataclasses.replace(getattr(cfg, name), **values)})
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        validate(cfg)
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(encoding="utf-8"))


def validate(cfg: RunConfig) -> None:
    """Field-level checks that need no dataset."""
    from ..data.rigs import RIG_SIZES
    from ..model import VARIANTS

    d, m, o = cfg.dataset, cfg.model, cfg.optimizer
    if d.rig not in RIG_SIZES:
        raise ConfigError(f"[dataset] rig = {d.rig!r}: expected one of {sorted(RIG_SIZES)}")
    if m.variant not in VARIANTS:
        raise ConfigError(f"[model] variant = {m.variant!r}: expected one of {VARIANTS}")
    if m.dtype not in ("float32", "float64"):
        raise ConfigError(f"[model] dtype = {m.dtype!r}: expected float32 or float64")
    if m.M != "auto":
        try:
            int(m.M)
        except ValueError:
            raise ConfigError(f"[model] M = {m.M!r}: expected an integer or auto") from None
    try:
        widths = cnn_widths(m)
    except ValueError:
        raise ConfigError(f"[model] cnn_widths = {m.cnn_widths!r}: expected comma-separated integers") from None
    if not widths or min(widths) < 1:
        raise ConfigError(f"[model] cnn_widths = {m.cnn_widths!r}: widths must be positive")
    if not 0 <= m.dropout < 1:
        raise ConfigError(f"[model] dropout = {m.dropout}: expected a rate in [0, 1)")
    if o.epochs < 1 or o.batch_size < 1:
        raise ConfigError("[optimizer] epochs and batch_size must be at least 1")
    if o.batch_size < 2:
        raise ConfigError("[optimizer] batch_size = 1: batch-norm needs at least 2 samples per batch")
    if o.horizon != "auto":
        try:
            float(o.horizon)
        except ValueError:
            raise ConfigError(f"[optimizer] horizon = {o.horizon!r}: expected a number or auto") from None
    unknown = set(cfg.distill.target_list()) - set(TARGETS)
    if unknown:
        raise ConfigError(f"[distill] targets: unknown {sorted(unknown)}; expected a subset of {TARGETS}")
    if cfg.distill.temperature <= 0:
        raise ConfigError(f"[distill] temperature = {cfg.distill.temperature}: must be positive")
    if abs(cfg.distill.c_soft + cfg.distill.c_hard - 1) > 1e-9 or min(cfg.distill.c_soft, cfg.distill.c_hard) < 0:
        raise ConfigError("[distill] c_soft and c_hard must be non-negative and sum to 1")
    e = cfg.eval
    if e.distance not in ("euclidean", "cosine"):
        raise ConfigError(f"[eval] distance = {e.distance!r}: expected euclidean or cosine")
    if e.backend not in ("exhaustive", "kd-tree"):
        raise ConfigError(f"[eval] backend = {e.backend!r}: expected exhaustive or kd-tree")
    if e.at_n != "class":
        try:
            if int(e.at_n) < 1:
                raise ValueError
        except ValueError:
            raise ConfigError(f"[eval] at_n = {e.at_n!r}: expected class or a positive integer") from None
    if e.cap < 1:
        raise ConfigError("[eval] cap must be at least 1")
    if e.split not in ("train", "test"):
        raise ConfigError(f"[eval] split = {e.split!r}: expected train or test")
    if cfg.gradcheck.mutate not in ("none", "sigmoid"):
        raise ConfigError(f"[gradcheck] mutate = {cfg.gradcheck.mutate!r}: expected none or sigmoid")


def cnn_widths(m: ModelSection) -> tuple[int, ...]:
    return tuple(int(w) for w in m.cnn_widths.split(",") if w.strip())
