"""Stage-structured MLP classifiers and feature-alignment adapters.

Models are split into exactly 4 stages so the feature sets after each
stage can feed the transport losses; the stage-4 output is the
penultimate representation consumed by the linear head. When teacher and
student widths differ, linear adapters align them: intermediate stages
map the teacher down to the student's width, while the penultimate stage
maps both sides into a common embedding space (128-dim by default).
Adapters train jointly with the student and are dropped at deployment.

Checkpoints are a versioned binary format ("OTDM" magic) whose
save/load round-trip is bit-exact, plus a human-readable JSON sidecar.
"""

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, add, leaky_relu, matmul

NUM_STAGES = 4
CHECKPOINT_MAGIC = b"OTDM"
CHECKPOINT_VERSION = 1
STAGE_ACTIVATION_SLOPE = 0.01


class InvalidSpec(ValueError):
    pass


class MissingAdapter(LookupError):
    pass


class FormatVersionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    """4 stage widths plus input dimension and class count."""

    input_dim: int
    stage_widths: tuple
    num_classes: int

    def __post_init__(self):
        widths = tuple(int(w) for w in self.stage_widths)
        object.__setattr__(self, "stage_widths", widths)
        if len(widths) != NUM_STAGES:
            raise InvalidSpec(f"expected exactly {NUM_STAGES} stage widths, got {len(widths)}")
        if any(w <= 0 for w in widths):
            raise InvalidSpec(f"stage widths must be positive, got {widths}")
        if self.input_dim <= 0:
            raise InvalidSpec("input_dim must be positive")
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "stage_widths": list(self.stage_widths),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(int(d["input_dim"]), tuple(d["stage_widths"]), int(d["num_classes"]))


class DenseLayer:
    """One linear map y = x W + b with trainable tensors."""

    def __init__(self, W: np.ndarray, b: np.ndarray, trainable: bool = True):
        self.W = Tensor(W, requires_grad=trainable)
        self.b = Tensor(b, requires_grad=trainable)

    def apply(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.W), self.b)

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W.values + self.b.values


class StageModel:
    """Feedforward classifier partitioned into 4 stages plus a head."""

    def __init__(self, spec: ArchSpec, stages, head: DenseLayer, seed: int, metadata=None):
        self.spec = spec
        self.stages = stages  # list of 4 lists of DenseLayer
        self.head = head
        self.seed = seed
        self.metadata = dict(metadata or {})

    @property
    def stage_dims(self) -> tuple:
        return self.spec.stage_widths

    def layers(self):
        for stage in self.stages:
            yield from stage
        yield self.head

    def parameters(self):
        params = []
        for layer in self.layers():
            params.extend([layer.W, layer.b])
        return params

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag


def _he_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _seed_rng(seed: int, stream: int = 0):
    # two Philox key words: seed selects the run, stream separates uses
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(stream)]))


def build_model(spec: ArchSpec, seed: int) -> StageModel:
    """Deterministically initialized 4-stage MLP; same spec+seed, same weights."""
    rng = _seed_rng(seed)
    stages = []
    in_dim = spec.input_dim
    for width in spec.stage_widths:
        W = _he_uniform(rng, in_dim, width)
        stages.append([DenseLayer(W, np.zeros(width))])
        in_dim = width
    head = DenseLayer(_he_uniform(rng, in_dim, spec.num_classes), np.zeros(spec.num_classes))
    return StageModel(spec, stages, head, seed)


def count_parameters(model: StageModel) -> int:
    return sum(p.values.size for p in model.parameters())


def forward_with_stages(model: StageModel, inputs) -> tuple:
    """Graph-building forward pass; returns (logits, [4 stage feature tensors])."""
    h = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if h.values.ndim != 2 or h.shape[1] != model.spec.input_dim:
        from .autodiff import ShapeMismatch

        raise ShapeMismatch(
            f"expected inputs of shape (b, {model.spec.input_dim}), got {h.shape}"
        )
    feats = []
    for stage in model.stages:
        for layer in stage:
            h = leaky_relu(layer.apply(h), STAGE_ACTIVATION_SLOPE)
        feats.append(h)
    logits = model.head.apply(h)
    return logits, feats


def forward_with_stages_np(model: StageModel, inputs: np.ndarray) -> tuple:
    """Plain-numpy forward identical op-for-op to the graph version."""
    h = np.asarray(inputs, dtype=np.float64)
    feats = []
    for stage in model.stages:
        for layer in stage:
            z = layer.apply_np(h)
            h = np.where(z > 0.0, z, STAGE_ACTIVATION_SLOPE * z)
        feats.append(h)
    logits = model.head.apply_np(h)
    return logits, feats


# ---------------------------------------------------------------------------
# Embedding adapters
# ---------------------------------------------------------------------------

class EmbeddingAdapter:
    """Per-stage linear maps reconciling teacher and student feature dims.

    Stages 1..3 carry an optional teacher->student map; stage 4 carries a
    pair of maps into a common ``embed_dim`` space. A map is present only
    when the corresponding dims differ.
    """

    def __init__(self, teacher_maps, stage4_teacher, stage4_student, embed_dim: int):
        self.teacher_maps = teacher_maps  # {stage: DenseLayer or None} for stages 1..3
        self.stage4_teacher = stage4_teacher
        self.stage4_student = stage4_student
        self.embed_dim = embed_dim

    def parameters(self):
        params = []
        for layer in self.teacher_maps.values():
            if layer is not None:
                params.extend([layer.W, layer.b])
        for layer in (self.stage4_teacher, self.stage4_student):
            if layer is not None:
                params.extend([layer.W, layer.b])
        return params


def build_adapters(
    teacher_dims, student_dims, embed_dim: int = 128, seed: int = 0
) -> EmbeddingAdapter:
    if len(teacher_dims) != NUM_STAGES or len(student_dims) != NUM_STAGES:
        raise InvalidSpec("adapter construction needs 4 stage dims per side")
    rng = _seed_rng(seed, stream=1)
    teacher_maps = {}
    for stage in range(1, NUM_STAGES):
        t_d, s_d = teacher_dims[stage - 1], student_dims[stage - 1]
        if t_d != s_d:
            teacher_maps[stage] = DenseLayer(_he_uniform(rng, t_d, s_d), np.zeros(s_d))
        else:
            teacher_maps[stage] = None
    t4, s4 = teacher_dims[-1], student_dims[-1]
    if t4 != s4:
        stage4_teacher = DenseLayer(_he_uniform(rng, t4, embed_dim), np.zeros(embed_dim))
        stage4_student = DenseLayer(_he_uniform(rng, s4, embed_dim), np.zeros(embed_dim))
    else:
        stage4_teacher = None
        stage4_student = None
    return EmbeddingAdapter(teacher_maps, stage4_teacher, stage4_student, embed_dim)


def align_features(teacher_feats, student_feats, adapter: Optional[EmbeddingAdapter], stage: int):
    """Bring stage-``stage`` teacher/student features to one dimensionality.

    Identity pass-through when the dims already match; teacher->student
    map for stages 1..3; both sides into the embedding space for stage 4.
    """
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"stage must be in 1..4, got {stage}")
    t = teacher_feats if isinstance(teacher_feats, Tensor) else Tensor(teacher_feats)
    s = student_feats if isinstance(student_feats, Tensor) else Tensor(student_feats)
    t_d, s_d = t.shape[1], s.shape[1]
    if t_d == s_d:
        return t, s
    if adapter is None:
        raise MissingAdapter(f"stage {stage}: dims {t_d} vs {s_d} but no adapter configured")
    if stage < NUM_STAGES:
        layer = adapter.teacher_maps.get(stage)
        if layer is None or layer.W.shape != (t_d, s_d):
            raise MissingAdapter(
                f"stage {stage}: no adapter mapping teacher dim {t_d} to student dim {s_d}"
            )
        return layer.apply(t), s
    if adapter.stage4_teacher is None or adapter.stage4_student is None:
        raise MissingAdapter(f"stage 4: dims {t_d} vs {s_d} but no embedding maps configured")
    return adapter.stage4_teacher.apply(t), adapter.stage4_student.apply(s)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def weights_checksum(model: StageModel) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in model.parameters():
        h.update(np.ascontiguousarray(p.values).tobytes())
    return h.hexdigest()


def save_checkpoint(model: StageModel, path, metadata: Optional[dict] = None):
    """Write magic + version + JSON descriptor + raw little-endian weights."""
    meta = dict(model.metadata)
    if metadata:
        meta.update(metadata)
    descriptor = {
        "arch": model.spec.to_dict(),
        "seed": model.seed,
        "metadata": meta,
    }
    desc_bytes = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(desc_bytes)))
        fh.write(desc_bytes)
        for layer in model.layers():
            fh.write(np.ascontiguousarray(layer.W.values, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.b.values, dtype="<f8").tobytes())
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump(descriptor, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> StageModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatVersionMismatch(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<H", raw[4:6])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(f"{path}: unsupported format version {version}")
    (desc_len,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + desc_len:
        raise FormatVersionMismatch(f"{path}: truncated descriptor")
    try:
        descriptor = json.loads(raw[10 : 10 + desc_len].decode("utf-8"))
        spec = ArchSpec.from_dict(descriptor["arch"])
    except (ValueError, KeyError) as exc:
        raise FormatVersionMismatch(f"{path}: bad descriptor ({exc})")
    model = build_model(spec, int(descriptor["seed"]))
    model.metadata = dict(descriptor.get("metadata", {}))
    offset = 10 + desc_len
    for layer in model.layers():
        for t in (layer.W, layer.b):
            n = t.values.size * 8
            if offset + n > len(raw):
                raise FormatVersionMismatch(f"{path}: truncated weight data")
            t.values = (
                np.frombuffer(raw[offset : offset + n], dtype="<f8")
                .reshape(t.values.shape)
                .copy()
            )
            offset += n
    if offset != len(raw):
        raise FormatVersionMismatch(f"{path}: {len(raw) - offset} trailing bytes")
    return model
