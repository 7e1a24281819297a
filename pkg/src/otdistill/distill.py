"""Teacher training, composite-loss distillation, and comparison harness.

The student trains against a three-term objective: cross-entropy to the
labels, a feature-matching term summed over the masked stages (one of
the transport losses, or a FitNets-style mean-squared baseline) weighted
by alpha, and the temperature-scaled soft-label term weighted by gamma.
The teacher is frozen throughout; gradients reach only the student and
the alignment adapters.

Every run is a pure function of (config, seed): batch order, weight
init, and data generation all derive from Philox streams, so RunReports
are byte-identical across repeats once timing fields are stripped.
"""

import json
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    Tensor,
    add,
    cross_entropy_loss,
    kd_loss,
    mul,
    ot_loss_node,
    reduce_mean,
    scalar_mul,
    sub,
)
from .data import Dataset, gen_gaussian_mixture, load_csv, split
from .model import (
    ArchSpec,
    EmbeddingAdapter,
    StageModel,
    align_features,
    build_adapters,
    build_model,
    forward_with_stages,
    forward_with_stages_np,
    _seed_rng,
)
from .solvers import IpotConfig, SinkhornConfig


class DivergenceDetected(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


FEATURE_METHODS = ("exact", "sinkhorn", "ipot", "remd", "l2")

COMPONENT_KEYS = ("ce", "ot_s1", "ot_s2", "ot_s3", "ot_s4", "kd", "total")


@dataclass
class LossConfig:
    """Weights and solver choice for the composite objective.

    ``alpha`` scales the per-stage feature term, ``gamma`` the soft-label
    term. ``solver_iters`` is the iteration budget N for ipot/sinkhorn.
    ``ot_method`` may also be "l2" for the FitNets-style baseline.
    """

    alpha: float = 0.9
    gamma: float = 1.0
    ot_method: str = "ipot"
    epsilon: float = 0.05
    beta: float = 20.0
    solver_iters: int = 50
    stage_mask: tuple = (1, 2, 3, 4)
    kd_temperature: float = 4.0
    embed_dim: int = 128

    def __post_init__(self):
        self.stage_mask = tuple(sorted(int(s) for s in self.stage_mask))
        if self.alpha < 0 or self.gamma < 0:
            raise ConfigError("alpha and gamma must be nonnegative")
        if self.ot_method not in FEATURE_METHODS:
            raise ConfigError(f"ot_method must be one of {FEATURE_METHODS}, got {self.ot_method!r}")
        if self.alpha > 0 and not self.stage_mask:
            raise ConfigError("stage_mask must be nonempty when alpha > 0")
        if any(s not in (1, 2, 3, 4) for s in self.stage_mask):
            raise ConfigError(f"stage_mask entries must be in 1..4, got {self.stage_mask}")
        if self.kd_temperature <= 0:
            raise ConfigError("kd_temperature must be > 0")

    def solver_config(self):
        if self.ot_method == "ipot":
            return IpotConfig(beta=self.beta, num_iters=self.solver_iters)
        if self.ot_method == "sinkhorn":
            return SinkhornConfig(epsilon=self.epsilon, max_iters=self.solver_iters)
        return None

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "ot_method": self.ot_method,
            "epsilon": self.epsilon,
            "beta": self.beta,
            "solver_iters": self.solver_iters,
            "stage_mask": list(self.stage_mask),
            "kd_temperature": self.kd_temperature,
            "embed_dim": self.embed_dim,
        }


@dataclass
class TrainConfig:
    """Desk-scale schedule: a scaled replica of the full-size recipe."""

    batch_size: int = 16
    epochs: int = 60
    lr: float = 0.05
    decay_epochs: tuple = (35, 45, 55)
    decay_factor: float = 0.1
    seed: int = 0
    optimizer: str = "sgd-momentum"  # "sgd" for plain gradient steps
    momentum: float = 0.9

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ConfigError(f"optimizer must be 'sgd' or 'sgd-momentum', got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr": self.lr,
            "decay_epochs": list(self.decay_epochs),
            "decay_factor": self.decay_factor,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "momentum": self.momentum,
        }


@dataclass
class RunReport:
    """Everything one run produced, minus the model weights."""

    config: dict
    epochs: list
    final_accuracy: float
    seconds_per_epoch: list
    steps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "config": self.config,
            "final_accuracy": self.final_accuracy,
            "epochs": self.epochs,
            "timing": {
                "seconds_per_epoch": self.seconds_per_epoch,
                "total_seconds": float(sum(self.seconds_per_epoch)),
            },
        }
        if self.steps:
            out["steps"] = self.steps
        return out

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def write_epoch_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,ce,ot_s1,ot_s2,ot_s3,ot_s4,kd,total,test_acc,seconds\n")
            for row, sec in zip(self.epochs, self.seconds_per_epoch):
                fh.write(
                    ",".join(
                        [str(row["epoch"])]
                        + [repr(row[k]) for k in COMPONENT_KEYS]
                        + [repr(row["test_acc"]), repr(sec)]
                    )
                    + "\n"
                )


def strip_timing(report_dict: dict) -> dict:
    """Drop the dedicated timing keys so byte-level comparisons ignore them."""
    out = dict(report_dict)
    out.pop("timing", None)
    return out


# ---------------------------------------------------------------------------
# Optimizer and training core
# ---------------------------------------------------------------------------

class _SGD:
    def __init__(self, params, momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.values) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if self.momentum > 0:
                v *= self.momentum
                v += p.grad
                p.values -= lr * v
            else:
                p.values -= lr * p.grad


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    decays = sum(1 for d in cfg.decay_epochs if epoch > d)
    return cfg.lr * (cfg.decay_factor ** decays)


def evaluate(model: StageModel, ds: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions; independent of batching."""
    correct = 0
    for start in range(0, len(ds), batch_size):
        X = ds.inputs[start : start + batch_size]
        y = ds.labels[start : start + batch_size]
        logits, _ = forward_with_stages_np(model, X)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / len(ds)


def _train(model, extra_params, train_ds, test_ds, cfg: TrainConfig, step_fn,
           config_snapshot, record_steps=False):
    momentum = cfg.momentum if cfg.optimizer == "sgd-momentum" else 0.0
    opt = _SGD(model.parameters() + list(extra_params), momentum)
    shuffle_rng = _seed_rng(cfg.seed, stream=2)
    onehot = train_ds.one_hot_labels()
    n = len(train_ds)
    epochs_log = []
    seconds = []
    steps_log = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = _epoch_lr(cfg, epoch)
        sums = dict.fromkeys(COMPONENT_KEYS, 0.0)
        perm = shuffle_rng.permutation(n)
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, comps = step_fn(train_ds.inputs[idx], onehot[idx])
            if not all(np.isfinite(v) for v in comps.values()):
                raise DivergenceDetected(
                    f"non-finite loss component at epoch {epoch}: {comps}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            for k in COMPONENT_KEYS:
                sums[k] += comps[k]
            n_batches += 1
            if record_steps:
                steps_log.append({"epoch": epoch, "step": n_batches, **comps})
        test_acc = evaluate(model, test_ds)
        row = {"epoch": epoch}
        row.update({k: sums[k] / n_batches for k in COMPONENT_KEYS})
        row["test_acc"] = test_acc
        epochs_log.append(row)
        seconds.append(time.perf_counter() - t0)
    return RunReport(
        config=config_snapshot,
        epochs=epochs_log,
        final_accuracy=epochs_log[-1]["test_acc"],
        seconds_per_epoch=seconds,
        steps=steps_log,
    )


# ---------------------------------------------------------------------------
# Losses and pipeline entry points
# ---------------------------------------------------------------------------

def composite_loss(student_out, teacher_out, labels, cfg: LossConfig,
                   adapters: EmbeddingAdapter = None):
    """Total objective plus its per-component breakdown.

    ``student_out`` and ``teacher_out`` are (logits, [4 stage feature])
    pairs; the teacher side carries plain arrays (no gradient path).
    Logged components are the weighted contributions, so they sum to the
    total. With alpha = gamma = 0 the returned tensor IS the
    cross-entropy node, bit for bit.
    """
    s_logits, s_feats = student_out
    t_logits, t_feats = teacher_out
    ce = cross_entropy_loss(s_logits, labels)
    total = ce
    comps = dict.fromkeys(COMPONENT_KEYS, 0.0)
    comps["ce"] = float(ce.values)
    if cfg.alpha > 0:
        terms = []
        for stage in cfg.stage_mask:
            t_al, s_al = align_features(t_feats[stage - 1], s_feats[stage - 1], adapters, stage)
            if cfg.ot_method == "l2":
                d = sub(s_al, t_al)
                term = reduce_mean(mul(d, d))
            else:
                term = ot_loss_node(t_al, s_al, cfg.ot_method, cfg.solver_config())
            comps[f"ot_s{stage}"] = cfg.alpha * float(term.values)
            terms.append(term)
        feature_sum = terms[0]
        for term in terms[1:]:
            feature_sum = add(feature_sum, term)
        total = add(total, scalar_mul(feature_sum, cfg.alpha))
    if cfg.gamma > 0:
        kd = kd_loss(s_logits, t_logits, cfg.kd_temperature)
        comps["kd"] = cfg.gamma * float(kd.values)
        total = add(total, scalar_mul(kd, cfg.gamma))
    comps["total"] = float(total.values)
    return total, comps


def train_teacher(train_ds: Dataset, test_ds: Dataset, spec: ArchSpec,
                  cfg: TrainConfig, record_steps=False):
    """Cross-entropy-only training of a fresh model; returns (model, report)."""
    model = build_model(spec, cfg.seed)

    def step(X, Y):
        logits, _ = forward_with_stages(model, Tensor(X))
        loss = cross_entropy_loss(logits, Y)
        comps = dict.fromkeys(COMPONENT_KEYS, 0.0)
        comps["ce"] = comps["total"] = float(loss.values)
        return loss, comps

    snapshot = {
        "role": "teacher",
        "label": "teacher",
        "arch": spec.to_dict(),
        "train": cfg.to_dict(),
        "data": train_ds.provenance,
    }
    report = _train(model, [], train_ds, test_ds, cfg, step, snapshot, record_steps)
    model.metadata = {"role": "teacher", "final_accuracy": report.final_accuracy}
    return model, report


def distill_student(teacher: StageModel, student_spec: ArchSpec, train_ds: Dataset,
                    test_ds: Dataset, loss_cfg: LossConfig, train_cfg: TrainConfig,
                    label: str = None, record_steps=False):
    """Train a student against a frozen teacher; returns (student, adapters, report)."""
    if loss_cfg.alpha > 0 and train_cfg.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 when the feature loss is active")
    teacher.set_trainable(False)
    student = build_model(student_spec, train_cfg.seed)
    adapters = build_adapters(
        teacher.stage_dims, student.stage_dims, loss_cfg.embed_dim, seed=train_cfg.seed
    )

    def step(X, Y):
        t_logits, t_feats = forward_with_stages_np(teacher, X)
        s_logits, s_feats = forward_with_stages(student, Tensor(X))
        return composite_loss(
            (s_logits, s_feats), (t_logits, t_feats), Y, loss_cfg, adapters
        )

    snapshot = {
        "role": "student",
        "label": label or loss_cfg.ot_method,
        "arch": student_spec.to_dict(),
        "teacher_arch": teacher.spec.to_dict(),
        "loss": loss_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": train_ds.provenance,
    }
    report = _train(
        student, adapters.parameters(), train_ds, test_ds, train_cfg, step,
        snapshot, record_steps,
    )
    student.metadata = {
        "role": "student",
        "label": snapshot["label"],
        "final_accuracy": report.final_accuracy,
    }
    return student, adapters, report


# ---------------------------------------------------------------------------
# Multi-seed comparison
# ---------------------------------------------------------------------------

PRESET_NAMES = (
    "ce", "kd", "exact", "exact+kd", "sinkhorn", "sinkhorn+kd",
    "ipot", "ipot+kd", "remd", "remd+kd", "fitnets", "fitnets+kd",
)


def preset_loss_config(name: str, base: LossConfig) -> LossConfig:
    """Named loss settings built on top of a base config's solver params."""
    parts = name.lower().split("+")
    feature = None
    with_kd = False
    for part in parts:
        if part == "kd":
            with_kd = True
        elif part == "ce":
            pass
        elif part in ("exact", "sinkhorn", "ipot", "remd"):
            feature = part
        elif part == "fitnets":
            feature = "l2"
        else:
            raise ConfigError(f"unknown comparison preset {name!r}")
    return replace(
        base,
        alpha=base.alpha if feature is not None else 0.0,
        gamma=base.gamma if with_kd else 0.0,
        ot_method=feature if feature is not None else base.ot_method,
    )


@dataclass
class ComparisonTable:
    rows: list  # {config, mean, std, seeds, accs}

    def to_csv(self, path):
        seeds = self.rows[0]["seeds"] if self.rows else []
        with open(path, "w") as fh:
            fh.write("config,mean,std," + ",".join(f"acc_seed{s}" for s in seeds) + "\n")
            for r in self.rows:
                fh.write(
                    f"{r['config']},{r['mean']!r},{r['std']!r},"
                    + ",".join(repr(a) for a in r["accs"]) + "\n"
                )

    def to_text(self) -> str:
        width = max([len("config")] + [len(r["config"]) for r in self.rows])
        lines = [f"{'config':<{width}}  {'mean':>8}  {'std':>8}"]
        lines.append("-" * (width + 20))
        for r in self.rows:
            lines.append(f"{r['config']:<{width}}  {r['mean']:8.4f}  {r['std']:8.4f}")
        return "\n".join(lines)


def summarize_accuracies(entries) -> ComparisonTable:
    """Aggregate (label, seed, accuracy) triples into per-label mean/std rows."""
    by_label = {}
    order = []
    for label, seed, acc in entries:
        if label not in by_label:
            by_label[label] = []
            order.append(label)
        by_label[label].append((seed, acc))
    rows = []
    for label in order:
        pairs = sorted(by_label[label])
        accs = [a for _, a in pairs]
        seeds = [s for s, _ in pairs]
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        rows.append(
            {"config": label, "mean": float(np.mean(accs)), "std": std,
             "seeds": seeds, "accs": accs}
        )
    return ComparisonTable(rows)


def compare_losses(named_cfgs, seeds, make_data, teacher_spec: ArchSpec,
                   student_spec: ArchSpec, train_cfg: TrainConfig,
                   teacher_cfg: TrainConfig = None, progress=False):
    """Run every (config, seed) cell and tabulate mean +/- std accuracy.

    ``named_cfgs`` is a list of (label, LossConfig); ``make_data`` maps a
    seed to a (train, test) dataset pair. One teacher is trained per seed
    and shared by all configs of that seed. Returns (table, reports)
    where reports maps (label, seed) to the student RunReport.
    """
    if len(seeds) < 2:
        raise ConfigError("compare_losses needs at least 2 seeds")
    reports = {}
    entries = []
    for seed in seeds:
        train_ds, test_ds = make_data(seed)
        t_cfg = replace(teacher_cfg or train_cfg, seed=seed)
        teacher, teacher_report = train_teacher(train_ds, test_ds, teacher_spec, t_cfg)
        reports[("teacher", seed)] = teacher_report
        if progress:
            print(f"[seed {seed}] teacher acc {teacher_report.final_accuracy:.4f}",
                  file=sys.stderr)
        for label, lcfg in named_cfgs:
            s_cfg = replace(train_cfg, seed=seed)
            _, _, rep = distill_student(
                teacher, student_spec, train_ds, test_ds, lcfg, s_cfg, label=label
            )
            reports[(label, seed)] = rep
            entries.append((label, seed, rep.final_accuracy))
            if progress:
                print(f"[seed {seed}] {label} acc {rep.final_accuracy:.4f}",
                      file=sys.stderr)
    return summarize_accuracies(entries), reports


# ---------------------------------------------------------------------------
# Run configuration files (TOML)
# ---------------------------------------------------------------------------

def _toml_load(path):
    try:
        import tomllib  # Python >= 3.11
    except ImportError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except Exception as exc:
            raise ConfigError(f"{path}: {exc}")


def load_run_config(path) -> dict:
    """Parse a run config file into data/model/train/loss sections.

    Returns {"data": dict, "teacher_arch_widths": ..., "student_arch_widths": ...,
    "train": TrainConfig, "loss": LossConfig}.
    """
    raw = _toml_load(path)
    for section in ("train", "loss", "model", "data"):
        if section in raw and not isinstance(raw[section], dict):
            raise ConfigError(f"{path}: [{section}] must be a table")

    data_cfg = dict(raw.get("data", {}))
    model_cfg = dict(raw.get("model", {}))
    train_raw = dict(raw.get("train", {}))
    loss_raw = dict(raw.get("loss", {}))
    validate_section_keys("data", data_cfg, _DATA_KEYS)
    validate_section_keys("model", model_cfg, _MODEL_KEYS)

    known_train = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(train_raw) - known_train
    if unknown:
        raise ConfigError(f"{path}: unknown [train] keys {sorted(unknown)}")
    if "iters" in loss_raw:
        loss_raw["solver_iters"] = loss_raw.pop("iters")
    known_loss = {f for f in LossConfig.__dataclass_fields__}
    unknown = set(loss_raw) - known_loss
    if unknown:
        raise ConfigError(f"{path}: unknown [loss] keys {sorted(unknown)}")
    try:
        train_cfg = TrainConfig(**train_raw)
        loss_cfg = LossConfig(**loss_raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return {
        "data": data_cfg,
        "model": model_cfg,
        "train": train_cfg,
        "loss": loss_cfg,
    }


_DATA_KEYS = {"path", "classes", "per_class", "dim", "spread", "seed",
              "test_fraction", "split_seed"}
_MODEL_KEYS = {"teacher_widths", "student_widths"}


def validate_section_keys(section: str, cfg: dict, allowed: set):
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown [{section}] keys {sorted(unknown)}")


def make_data_from_config(data_cfg: dict, seed_override: int = None):
    """Build (train, test) datasets from the [data] section of a run config."""
    cfg = dict(data_cfg)
    validate_section_keys("data", cfg, _DATA_KEYS)
    test_fraction = float(cfg.pop("test_fraction", 0.4))
    split_seed = int(cfg.pop("split_seed", 0))
    if seed_override is not None:
        split_seed = seed_override
    if "path" in cfg:
        ds = load_csv(cfg["path"])
    else:
        gen_seed = int(cfg.pop("seed", 0))
        if seed_override is not None:
            gen_seed = seed_override
        ds = gen_gaussian_mixture(
            classes=int(cfg.get("classes", 5)),
            per_class=int(cfg.get("per_class", 200)),
            dim=int(cfg.get("dim", 16)),
            spread=float(cfg.get("spread", 1.0)),
            seed=gen_seed,
        )
    return split(ds, test_fraction, split_seed)
