"""Six-target teacher/student distillation.

Feature terms are plain MSEs between matching taps (CNN features, view-level
outputs, group tokens, masked group-level outputs, global descriptor). The
logit term mixes the temperature-softened KL against the teacher with hard
label cross-entropy: c_soft * KL(p_t^T || p_s^T) + c_hard * CE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import SGD, Tensor, no_grad
from .autodiff import functional as F
from .model import GMViT, ModelOutputs

TARGETS = ("cnn", "view", "token", "group", "global", "logit")
# cumulative rows of the target ablation: hard only, then add soft, global,
# token, group, view, cnn in that order
SWEEP_ORDER = ("logit", "global", "token", "group", "view", "cnn")


class IncompatibleTapsError(ValueError):
    pass


@dataclass
class DistillConfig:
    temperature: float = 5.0
    c_soft: float = 0.7
    c_hard: float = 0.3
    switches: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(TARGETS, True))
    weights: dict[str, float] = field(default_factory=lambda: dict.fromkeys(TARGETS, 1.0))
    # with the logit term off, labels still supervise the student at weight 1
    hard: bool = True
    t2_scale: bool = False
    literal_label_softmax: bool = False

    def __post_init__(self):
        self.switches = {k: bool(self.switches.get(k, False)) for k in TARGETS}
        self.weights = {k: float(self.weights.get(k, 1.0)) for k in TARGETS}
        self.validate()

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.c_soft < 0 or self.c_hard < 0 or abs(self.c_soft + self.c_hard - 1.0) > 1e-9:
            raise ValueError(f"c_soft and c_hard must be non-negative and sum to 1, got {self.c_soft}, {self.c_hard}")

    @classmethod
    def hard_only(cls, **kw) -> DistillConfig:
        return cls(switches=dict.fromkeys(TARGETS, False), **kw)

    @classmethod
    def sweep_row(cls, k: int, **kw) -> DistillConfig:
        """Row k in 0..6 of the cumulative target ablation (0 = hard label only)."""
        if not 0 <= k <= len(SWEEP_ORDER):
            raise ValueError(f"sweep row must be in [0, {len(SWEEP_ORDER)}]")
        on = set(SWEEP_ORDER[:k])
        return cls(switches={t: t in on for t in TARGETS}, **kw)

    def enabled(self) -> list[str]:
        return [t for t in TARGETS if self.switches[t]]


@dataclass
class Taps:
    """Gradient-free copy of the tapped teacher outputs for a batch."""

    f_cnn: np.ndarray
    f_view: np.ndarray
    tokens: np.ndarray
    f_group: np.ndarray
    f_global: np.ndarray
    logits: np.ndarray

    @classmethod
    def from_outputs(cls, out: ModelOutputs) -> Taps:
        return cls(out.f_cnn.data.copy(), out.f_view.data.copy(), out.tokens.data.copy(),
                   out.f_group.data.copy(), out.f_global.data.copy(), out.logits.data.copy())

    @classmethod
    def concat(cls, parts: list[Taps]) -> Taps:
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in cls.__dataclass_fields__))

    def take(self, idx) -> Taps:
        return Taps(*(getattr(self, k)[idx] for k in self.__dataclass_fields__))


def teacher_taps(teacher: GMViT, images, positions, batch_size: int = 40) -> Taps:
    """Eval-mode teacher taps under no_grad; deterministic, so they can be cached."""
    was_training = teacher.training
    teacher.eval()
    parts = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            parts.append(Taps.from_outputs(teacher(images[i:i + batch_size], positions)))
    teacher.train(was_training)
    return Taps.concat(parts)


def check_compatible(teacher: GMViT, student: GMViT) -> None:
    t, s = teacher.config, student.config
    for name in ("N", "M", "D", "C"):
        if getattr(t, name) != getattr(s, name):
            raise IncompatibleTapsError(
                f"teacher {name}={getattr(t, name)} but student {name}={getattr(s, name)}; taps must match")


def _t(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _mse(teacher_tap, student_tap: Tensor, what: str) -> Tensor:
    target = _t(teacher_tap)
    if target.shape != student_tap.shape:
        raise IncompatibleTapsError(f"{what}: teacher {target.shape} vs student {student_tap.shape}")
    return F.mse_loss(student_tap, Tensor(target.astype(student_tap.dtype, copy=False)))


def loss_cnn(teacher: Taps, student: ModelOutputs) -> Tensor:
    return _mse(teacher.f_cnn, student.f_cnn, "f_cnn")


def loss_view(teacher: Taps, student: ModelOutputs) -> Tensor:
    return _mse(teacher.f_view, student.f_view, "f_view")


def loss_token(teacher: Taps, student: ModelOutputs) -> Tensor:
    return _mse(teacher.tokens, student.tokens, "tokens")


def loss_group(teacher: Taps, student: ModelOutputs) -> Tensor:
    """Over all M slots; an empty slot is a zero row on either side."""
    return _mse(teacher.f_group, student.f_group, "f_group")


def loss_global(teacher: Taps, student: ModelOutputs) -> Tensor:
    return _mse(teacher.f_global, student.f_global, "f_global")


def loss_soft(teacher: Taps, student: ModelOutputs, config: DistillConfig) -> Tensor:
    t_logits = _t(teacher.logits)
    if t_logits.shape != student.logits.shape:
        raise IncompatibleTapsError(f"logits: teacher {t_logits.shape} vs student {student.logits.shape}")
    soft = F.kl_div_logits(Tensor(t_logits.astype(student.logits.dtype, copy=False)), student.logits,
                           config.temperature)
    if config.t2_scale:
        soft = soft * (config.temperature ** 2)
    return soft


def loss_hard(student: ModelOutputs, labels, config: DistillConfig) -> Tensor:
    return F.cross_entropy(student.logits, labels, config.literal_label_softmax)


def loss_logit(teacher: Taps, student: ModelOutputs, config: DistillConfig, labels) -> Tensor:
    return config.c_soft * loss_soft(teacher, student, config) + config.c_hard * loss_hard(student, labels, config)


_FEATURE_TERMS = {"cnn": loss_cnn, "view": loss_view, "token": loss_token, "group": loss_group,
                  "global": loss_global}


def loss_total(teacher: Taps | None, student: ModelOutputs, config: DistillConfig,
               labels) -> tuple[Tensor, dict[str, float]]:
    """Sum of enabled terms and a per-term breakdown (soft and hard logged separately)."""
    if teacher is None and any(config.switches.values()):
        raise ValueError(f"targets {config.enabled()} enabled but no teacher taps given")
    parts: list[Tensor] = []
    report: dict[str, float] = {}
    for name, fn in _FEATURE_TERMS.items():
        if config.switches[name]:
            term = fn(teacher, student)
            report[name] = float(term.data)
            parts.append(term if config.weights[name] == 1.0 else term * config.weights[name])
    if config.switches["logit"]:
        soft = loss_soft(teacher, student, config)
        report["soft"] = float(soft.data)
        logit = config.c_soft * soft
        if config.hard:
            hard = loss_hard(student, labels, config)
            report["hard"] = float(hard.data)
            logit = logit + config.c_hard * hard
        parts.append(logit if config.weights["logit"] == 1.0 else logit * config.weights["logit"])
    elif config.hard:
        hard = loss_hard(student, labels, config)
        report["hard"] = float(hard.data)
        parts.append(hard)
    if not parts:
        raise ValueError("no loss term enabled")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    report["total"] = float(total.data)
    return total, report


def distill_step(teacher: GMViT | None, student: GMViT, images, positions, labels,
                 config: DistillConfig, optimizer: SGD, epoch: float,
                 cached: Taps | None = None) -> dict[str, float]:
    """One student update against a frozen teacher.

    ``cached`` supplies precomputed eval-mode teacher taps for this batch;
    otherwise the teacher runs here under no_grad.
    """
    if teacher is not None:
        check_compatible(teacher, student)
    needs_teacher = any(config.switches.values())
    taps = cached
    if taps is None and needs_teacher:
        if teacher is None:
            raise ValueError("distillation targets enabled without a teacher")
        taps = teacher_taps(teacher, images, positions, batch_size=len(images))
    student.train()
    out = student(images, positions)
    total, report = loss_total(taps, out, config, labels)
    total.backward()
    report["lr"] = optimizer.step(epoch)
    report["acc"] = float((out.logits.data.argmax(axis=1) == np.asarray(labels)).mean())
    return report
