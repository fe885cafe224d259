"""Synthetic multimodal multi-task benchmark.

Every sample draws a latent vector ``z ~ N(0, I)``. Each modality renders a
fixed subset of the latent factors through a seeded random linear map and
adds Gaussian noise; each task's label thresholds a fixed linear read-out of
``z``. Because modalities expose different factors, a task whose read-out
spans factors of two modalities needs both of them.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

SPECIAL_TOKENS = ("PAD", "BOS", "EOS")
TEXT = "text"


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class ModalitySpec:
    name: str
    archetype: str  # image-patch | signal-conv | sequence | tabular
    shape: tuple[int, ...]
    factors: tuple[int, ...]
    description: str

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.factors = tuple(int(f) for f in self.factors)


@dataclass
class TaskSpec:
    id: str
    name: str
    kind: str  # classification | generation
    modalities: list[str]
    prompt: str
    task_description: str
    role: str = "training"  # training | validation
    n_classes: int = 2
    # token strings emitted as the answer for each class (before EOS)
    answers: list[list[str]] = field(default_factory=lambda: [["NO"], ["YES"]])
    readout: dict[str, float] = field(default_factory=dict)  # latent factor -> weight
    class_prior: float = 0.5
    n_samples: int = 400
    max_answer_len: int = 4

    def __post_init__(self):
        if not self.modalities:
            raise ConfigError(f"task {self.id}: modalities must be non-empty")
        if not self.prompt.split() or not self.task_description.split():
            raise ConfigError(f"task {self.id}: prompt and description must be non-empty")
        if self.kind not in ("classification", "generation"):
            raise ConfigError(f"task {self.id}: unknown kind {self.kind!r}")
        if self.role not in ("training", "validation"):
            raise ConfigError(f"task {self.id}: unknown role {self.role!r}")
        if len(self.answers) != self.n_classes:
            raise ConfigError(f"task {self.id}: need one answer per class")
        if not self.readout:
            raise ConfigError(f"task {self.id}: readout must name at least one factor")

    @property
    def encoded_modalities(self) -> list[str]:
        """Modalities that need an encoder (text is native to the backbone)."""
        return [m for m in self.modalities if m != TEXT]

    def answer_tokens(self, label: int) -> list[str]:
        return list(self.answers[label]) + ["EOS"]

    @property
    def label_tokens(self) -> list[str]:
        """First answer token of each class; used for the closed-form readout."""
        return [a[0] for a in self.answers]

    def modality_description(self, modalities: dict[str, ModalitySpec]) -> str:
        parts = []
        for m in self.modalities:
            parts.append(modalities[m].description if m in modalities else TEXT_DESCRIPTION)
        return " ".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


TEXT_DESCRIPTION = "free text clinical question"


@dataclass
class BenchmarkSpec:
    modalities: dict[str, ModalitySpec]
    tasks: list[TaskSpec]
    latent_dim: int = 6
    noise: float = 0.3

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    @property
    def training_tasks(self) -> list[TaskSpec]:
        return [t for t in self.tasks if t.role == "training"]

    @property
    def validation_tasks(self) -> list[TaskSpec]:
        return [t for t in self.tasks if t.role == "validation"]

    def modality_names(self, role: str | None = None) -> list[str]:
        names = []
        for t in self.tasks:
            if role is None or t.role == role:
                for m in t.encoded_modalities:
                    if m not in names:
                        names.append(m)
        return names

    def validate(self) -> None:
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError("task ids must be unique")
        for t in self.tasks:
            for m in t.encoded_modalities:
                if m not in self.modalities:
                    raise ConfigError(f"task {t.id}: unknown modality {m!r}")
            for f in t.readout:
                if not 0 <= int(f) < self.latent_dim:
                    raise ConfigError(f"task {t.id}: readout factor {f} out of range")
            if t.n_samples < 40:
                raise ConfigError(f"task {t.id}: n_samples={t.n_samples} < 40")
        for m in self.modalities.values():
            for f in m.factors:
                if not 0 <= f < self.latent_dim:
                    raise ConfigError(f"modality {m.name}: factor {f} out of range")

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "noise": self.noise,
            "modalities": {k: asdict(v) for k, v in sorted(self.modalities.items())},
            "tasks": [t.to_dict() for t in self.tasks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        mods = {k: ModalitySpec(**v) for k, v in d["modalities"].items()}
        tasks = [TaskSpec.from_dict(t) for t in d["tasks"]]
        return cls(mods, tasks, int(d.get("latent_dim", 6)), float(d.get("noise", 0.3)))

    def texts(self) -> list[str]:
        out = [TEXT_DESCRIPTION]
        out += [m.description for m in self.modalities.values()]
        for t in self.tasks:
            out += [t.prompt, t.task_description]
            out += [" ".join(a) for a in t.answers]
        return out


def default_benchmark(n_train: int = 600, n_val: int = 300) -> BenchmarkSpec:
    """Four training tasks over three modalities and three validation tasks.

    Shaped after a medical suite: two image detection tasks, one signal task,
    one multimodal tabular+signal prediction task; validation covers an image
    and a signal classification task plus an image+text question answering
    task that is scored as generation.
    """
    mods = {
        "image": ModalitySpec("image", "image-patch", (8, 8), (0, 1), "chest x ray image"),
        "signal": ModalitySpec("signal", "signal-conv", (1, 32), (2, 4), "ecg waveform signal"),
        "tabular": ModalitySpec("tabular", "tabular", (8,), (3, 5), "lab events table"),
    }
    tasks = [
        TaskSpec("covid", "covid detection", "classification", ["image"],
                 "does the image show covid ?", "detect covid infection from lung image",
                 readout={"0": 1.0}, n_samples=n_train),
        TaskSpec("opacity", "lung opacity detection", "classification", ["image"],
                 "does the image show opacity ?", "detect lung opacity from image",
                 readout={"1": 1.0}, n_samples=n_train),
        TaskSpec("ecg", "ecg abnormal detection", "classification", ["signal"],
                 "is the ecg abnormal ?", "detect abnormal heart rhythm from signal",
                 readout={"2": 1.0}, n_samples=n_train),
        TaskSpec("mortality", "mortality prediction", "classification", ["tabular", "signal"],
                 "will the patient die ?", "predict patient mortality from lab events and vitals",
                 readout={"4": 1.0, "5": 1.0}, n_samples=n_train),
        TaskSpec("effusion", "pleural effusion detection", "classification", ["image"],
                 "does the image show effusion ?", "detect fluid effusion in lung image",
                 role="validation", readout={"1": 1.0}, n_samples=n_val),
        TaskSpec("ectopic", "ectopic beat detection", "classification", ["signal"],
                 "is there an ectopic beat ?", "detect ectopic heart beat from signal",
                 role="validation", readout={"2": 1.0}, n_samples=n_val),
        TaskSpec("vqa", "image question answering", "generation", ["image", "text"],
                 "question : is the lung in this image infected ?", "answer a question about lung infection",
                 role="validation", readout={"0": 1.0}, n_samples=n_val, max_answer_len=3),
    ]
    return BenchmarkSpec(mods, tasks)


# ---------------------------------------------------------------- generation


@dataclass
class SyntheticSample:
    index: int
    modalities: dict[str, np.ndarray]
    label: int
    latent: np.ndarray


def _render_maps(spec: BenchmarkSpec, seed: int) -> dict[str, np.ndarray]:
    maps = {}
    for i, name in enumerate(sorted(spec.modalities)):
        m = spec.modalities[name]
        rng = np.random.default_rng([seed, 1000 + i])
        out = int(np.prod(m.shape))
        a = np.zeros((out, spec.latent_dim))
        if m.archetype == "signal-conv":
            steps = m.shape[-1]
            t = np.arange(steps) / steps
            for f in m.factors:
                freq = rng.uniform(1.0, 4.0)
                phase = rng.uniform(0, 2 * np.pi)
                wave = np.sin(2 * np.pi * freq * t + phase)
                a[:, f] = np.tile(wave, out // steps)
        else:
            for f in m.factors:
                a[:, f] = rng.normal(0.0, 1.0, size=out)
        maps[name] = a
    return maps


def _thresholds(task: TaskSpec) -> tuple[np.ndarray, list[float]]:
    w = np.zeros(max(int(k) for k in task.readout) + 1)
    for k, v in task.readout.items():
        w[int(k)] = float(v)
    scale = float(np.linalg.norm(w))
    nd = NormalDist()
    if task.n_classes == 2:
        cuts = [scale * nd.inv_cdf(1.0 - task.class_prior)]
    else:
        cuts = [scale * nd.inv_cdf(q / task.n_classes) for q in range(1, task.n_classes)]
    return w, cuts


def task_key(task_id: str) -> int:
    """Stable per-task stream id, independent of the task's list position."""
    return zlib.crc32(task_id.encode("utf-8"))


def generate_task(spec: BenchmarkSpec, task: TaskSpec, seed: int) -> list[SyntheticSample]:
    maps = _render_maps(spec, seed)
    w, cuts = _thresholds(task)
    rng = np.random.default_rng([seed, task_key(task.id)])
    z = rng.normal(size=(task.n_samples, spec.latent_dim))
    score = z[:, : len(w)] @ w
    labels = np.searchsorted(np.asarray(cuts), score, side="right")
    samples = []
    for name in task.encoded_modalities:
        m = spec.modalities[name]
        clean = z @ maps[name].T
        noise = rng.normal(0.0, 1.0, size=clean.shape) * spec.noise
        rendered = (clean + noise).reshape((task.n_samples,) + m.shape)
        samples.append((name, rendered))
    out = []
    for i in range(task.n_samples):
        out.append(SyntheticSample(i, {n: r[i].copy() for n, r in samples},
                                   int(labels[i]), z[i].copy()))
    return out


def generate_benchmark(spec: BenchmarkSpec, seed: int) -> dict[str, list[SyntheticSample]]:
    spec.validate()
    return {t.id: generate_task(spec, t, seed) for t in spec.tasks}


# ---------------------------------------------------------------- partition


def partition_sizes(s: int) -> tuple[int, int, int, int]:
    """7:1:1:1 cell sizes; the rounding remainder goes to the test cell."""
    if s < 40:
        raise ConfigError(f"dataset size {s} < 40")
    private = (7 * s) // 10
    public = s // 10
    dev = s // 10
    return private, public, dev, s - private - public - dev


@dataclass
class TaskPartition:
    clients: list[list[int]]
    public: list[int]
    dev: list[int]
    test: list[int]

    @property
    def private(self) -> list[int]:
        return sorted(i for c in self.clients for i in c)

    def sizes(self) -> dict[str, int]:
        return {"private": sum(len(c) for c in self.clients), "public": len(self.public),
                "development": len(self.dev), "test": len(self.test)}


def partition(s: int, n_clients: int, seed: int, key: int = 0) -> TaskPartition:
    """Seeded shuffle of ``range(s)`` cut into private/public/dev/test cells.

    The private cell is dealt round-robin to ``n_clients`` clients.
    """
    if n_clients < 1:
        raise ConfigError("need at least one client")
    n_priv, n_pub, n_dev, _ = partition_sizes(s)
    order = np.random.default_rng([seed, 7, key]).permutation(s)
    priv = order[:n_priv]
    pub = order[n_priv:n_priv + n_pub]
    dev = order[n_priv + n_pub:n_priv + n_pub + n_dev]
    test = order[n_priv + n_pub + n_dev:]
    clients = [sorted(int(i) for i in priv[c::n_clients]) for c in range(n_clients)]
    return TaskPartition(clients, sorted(map(int, pub)), sorted(map(int, dev)),
                         sorted(map(int, test)))


@dataclass
class PartitionedDataset:
    """Per-task sample lists plus their partition cells."""

    spec: BenchmarkSpec
    samples: dict[str, list[SyntheticSample]]
    cells: dict[str, TaskPartition]
    n_clients: int

    def client_shard(self, client: int) -> dict[str, list[SyntheticSample]]:
        return {t.id: [self.samples[t.id][i] for i in self.cells[t.id].clients[client]]
                for t in self.spec.training_tasks}

    def public(self) -> dict[str, list[SyntheticSample]]:
        return {t.id: [self.samples[t.id][i] for i in self.cells[t.id].public]
                for t in self.spec.training_tasks}

    def test(self, task_id: str) -> list[SyntheticSample]:
        return [self.samples[task_id][i] for i in self.cells[task_id].test]

    def dev(self, task_id: str) -> list[SyntheticSample]:
        return [self.samples[task_id][i] for i in self.cells[task_id].dev]


def partition_benchmark(spec: BenchmarkSpec, samples: dict[str, list[SyntheticSample]],
                        n_clients: int, seed: int) -> PartitionedDataset:
    cells = {}
    for t in spec.tasks:
        n = len(samples[t.id])
        if t.role == "training":
            cells[t.id] = partition(n, n_clients, seed, key=task_key(t.id))
        else:
            # unseen tasks are only ever tested
            cells[t.id] = TaskPartition([[] for _ in range(n_clients)], [], [], list(range(n)))
    return PartitionedDataset(spec, samples, cells, n_clients)


# ---------------------------------------------------------------- .fkds files

DS_MAGIC = b"FKDS"
DS_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": "))


def encode_dataset(spec: BenchmarkSpec, task: TaskSpec, samples: list[SyntheticSample]) -> bytes:
    header = {
        "task": task.to_dict(),
        "modalities": {m: asdict(spec.modalities[m]) for m in task.encoded_modalities},
        "latent_dim": spec.latent_dim,
        "noise": spec.noise,
        "count": len(samples),
    }
    head = canonical_json(header).encode("utf-8")
    parts = [DS_MAGIC, struct.pack("<BI", DS_VERSION, len(head)), head,
             struct.pack("<I", len(samples))]
    for s in samples:
        rec = [struct.pack("<IiH", s.index, s.label, s.latent.size),
               np.ascontiguousarray(s.latent, dtype="<f8").tobytes(),
               struct.pack("<B", len(s.modalities))]
        for name in task.encoded_modalities:
            arr = s.modalities[name]
            raw = name.encode("utf-8")
            rec.append(struct.pack("<B", len(raw)) + raw)
            rec.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            rec.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        body = b"".join(rec)
        parts.append(struct.pack("<I", len(body)))
        parts.append(body)
    return b"".join(parts)


def decode_dataset(buf: bytes) -> tuple[dict, list[SyntheticSample]]:
    if buf[:4] != DS_MAGIC:
        raise DatasetFormatError("bad dataset magic")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != DS_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    pos = 9
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    samples = []
    for _ in range(count):
        (blen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        end = pos + blen
        if end > len(buf):
            raise DatasetFormatError(f"truncated record at byte {pos}")
        idx, label, nlat = struct.unpack_from("<IiH", buf, pos)
        pos += 10
        latent = np.frombuffer(buf, "<f8", nlat, pos).copy()
        pos += 8 * nlat
        (nmod,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        mods = {}
        for _ in range(nmod):
            (nl,) = struct.unpack_from("<B", buf, pos)
            name = buf[pos + 1:pos + 1 + nl].decode("utf-8")
            pos += 1 + nl
            (rank,) = struct.unpack_from("<B", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            n = int(np.prod(dims))
            mods[name] = np.frombuffer(buf, "<f8", n, pos).reshape(dims).copy()
            pos += 8 * n
        if pos != end:
            raise DatasetFormatError(f"record length mismatch at byte {pos}")
        samples.append(SyntheticSample(idx, mods, label, latent))
    return header, samples


def write_dataset(path, spec: BenchmarkSpec, task: TaskSpec, samples) -> None:
    Path(path).write_bytes(encode_dataset(spec, task, samples))


def read_dataset(path) -> tuple[dict, list[SyntheticSample]]:
    return decode_dataset(Path(path).read_bytes())
