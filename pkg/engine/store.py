"""
Run-directory persistence

Run directory layout:
    config          resolved RunConfig, key=value
    tasks.train     one Task JSON object per line
    tasks.eval      one Task JSON object per line
    tasks.config    the config fields the task sets were generated from
    metrics.log     one MetricRecord JSON object per meta-step
    ckpt-<step>     safetensors checkpoint
    results.table   aligned text results (results.json is its machine twin)

Checkpoints are safetensors files: little-endian tensors behind a JSON header
whose metadata carries the format version, the config text, counters, the
non-tensor optimizer state and a sha256 digest of all tensor bytes.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Type, TypeVar, Union

import structlog
import torch
from pydantic import BaseModel, ValidationError
from safetensors import safe_open
from safetensors.torch import save as save_tensors

from config import RunConfig, parse_config_text
from engine.diffcore import ParamVector
from engine.taskgen import Task
from utils.errors import CheckpointError, ContractError, TaskFormatError

logger = structlog.get_logger()

FORMAT_VERSION = 1
METADATA_KEY = "mass"

CONFIG_FILE = "config"
TRAIN_TASKS_FILE = "tasks.train"
EVAL_TASKS_FILE = "tasks.eval"
TASKS_CONFIG_FILE = "tasks.config"
METRICS_FILE = "metrics.log"
RESULTS_TABLE_FILE = "results.table"
RESULTS_JSON_FILE = "results.json"
BASE_CHECKPOINT_FILE = "ckpt-base"

PathLike = Union[str, Path]
Record = TypeVar("Record", bound=BaseModel)


def checkpoint_name(step: int) -> str:
    return f"ckpt-{step}"


# ============================================================================
# ATOMIC WRITES
# ============================================================================

def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a sibling temp file, fsync, then rename over the target"""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as e:
        logger.error("atomic_write_failed", path=str(path), error=str(e))
        if tmp.exists():
            tmp.unlink()
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ============================================================================
# CHECKPOINTS
# ============================================================================

@dataclass
class Checkpoint:
    config: RunConfig
    generator: ParamVector
    scorer: ParamVector
    meta_step: int
    optimizers: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def master_seed(self) -> int:
        return self.config.master_seed


def _split_optimizer(name: str, state_dict: Mapping[str, Any], tensors: Dict[str, torch.Tensor]) -> Dict[str, Any]:
    """Move optimizer state tensors into the tensor table; return the JSON remainder"""
    state_meta: Dict[str, Dict[str, Any]] = {}
    for index, entry in state_dict["state"].items():
        slot: Dict[str, Any] = {}
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensor_name = f"optim.{name}.{index}.{key}"
                tensors[tensor_name] = value.detach().reshape(-1).clone().contiguous()
                slot[key] = {"tensor": tensor_name, "shape": list(value.shape)}
            else:
                slot[key] = {"value": value}
        state_meta[str(index)] = slot
    return {"state": state_meta, "param_groups": state_dict["param_groups"]}


def _join_optimizer(meta: Mapping[str, Any], tensors: Mapping[str, torch.Tensor]) -> Dict[str, Any]:
    state: Dict[int, Dict[str, Any]] = {}
    for index, slot in meta["state"].items():
        entry: Dict[str, Any] = {}
        for key, spec in slot.items():
            if "tensor" in spec:
                entry[key] = tensors[spec["tensor"]].reshape(spec["shape"]).clone()
            else:
                entry[key] = spec["value"]
        state[int(index)] = entry
    return {"state": state, "param_groups": [dict(g) for g in meta["param_groups"]]}


def _digest(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        h.update(name.encode("utf-8"))
        h.update(str(t.dtype).encode("utf-8"))
        h.update(t.contiguous().numpy().tobytes())
    return h.hexdigest()


def _segment_table(prefix: str, vector: ParamVector, tensors: Dict[str, torch.Tensor]) -> List[List[Any]]:
    shapes = []
    for name in vector.names():
        value = vector[name].detach()
        tensors[f"{prefix}.{name}"] = value.reshape(-1).clone().contiguous()
        shapes.append([name, list(value.shape)])
    return shapes


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Canonical bytes: identical checkpoints give identical files"""
    tensors: Dict[str, torch.Tensor] = {}
    meta: Dict[str, Any] = {
        "version": checkpoint.version,
        "config": checkpoint.config.to_config_text(),
        "meta_step": checkpoint.meta_step,
        "master_seed": checkpoint.master_seed,
        "generator": _segment_table("generator", checkpoint.generator, tensors),
        "scorer": _segment_table("scorer", checkpoint.scorer, tensors),
        "optimizers": {
            name: _split_optimizer(name, state, tensors)
            for name, state in sorted(checkpoint.optimizers.items())
        },
    }
    meta["digest"] = _digest(tensors)
    return save_tensors(tensors, metadata={METADATA_KEY: json.dumps(meta, sort_keys=True)})


def _read_file(path: Path) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    with safe_open(str(path), framework="pt") as f:
        raw = (f.metadata() or {}).get(METADATA_KEY)
        tensors = {name: f.get_tensor(name).clone() for name in f.keys()}
    if raw is None:
        raise ValueError("missing checkpoint metadata")
    return json.loads(raw), tensors


def _vector(prefix: str, table: Sequence[Sequence[Any]], tensors: Mapping[str, torch.Tensor]) -> ParamVector:
    return ParamVector({
        name: tensors[f"{prefix}.{name}"].reshape(shape).clone()
        for name, shape in table
    })


def _decode_file(path: Path, source: str) -> Checkpoint:
    try:
        meta, tensors = _read_file(path)
    except Exception as e:
        raise CheckpointError(source, f"unreadable checkpoint: {e}") from e

    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(source, f"format version {meta.get('version')} != {FORMAT_VERSION}")
    if meta.get("digest") != _digest(tensors):
        raise CheckpointError(source, "tensor digest mismatch")

    try:
        config = RunConfig(**{k: v for k, v in parse_config_text(meta["config"]).items() if v is not None})
        return Checkpoint(
            config=config,
            generator=_vector("generator", meta["generator"], tensors),
            scorer=_vector("scorer", meta["scorer"], tensors),
            meta_step=int(meta["meta_step"]),
            optimizers={name: _join_optimizer(m, tensors) for name, m in meta["optimizers"].items()},
            version=meta["version"],
        )
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise CheckpointError(source, f"inconsistent checkpoint contents: {e}") from e


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """Decode checkpoint bytes held in memory (staged through a temporary file)"""
    with tempfile.TemporaryDirectory() as tmp:
        staged = Path(tmp) / "checkpoint"
        staged.write_bytes(data)
        return _decode_file(staged, source)


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> None:
    """
    Atomically write a checkpoint

    Raises:
        OSError: the path is not writable (the error carries the path)
    """
    atomic_write_bytes(path, encode_checkpoint(checkpoint))
    logger.info("checkpoint_saved", path=str(path), meta_step=checkpoint.meta_step)


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    Raises:
        CheckpointError: corrupted, truncated or other-version file
        OSError: unreadable path
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    checkpoint = _decode_file(path, str(path))
    logger.info("checkpoint_loaded", path=str(path), meta_step=checkpoint.meta_step)
    return checkpoint


def latest_checkpoint(directory: PathLike) -> Optional[Path]:
    steps = []
    for candidate in Path(directory).glob("ckpt-*"):
        suffix = candidate.name[len("ckpt-"):]
        if suffix.isdigit():
            steps.append((int(suffix), candidate))
    return max(steps)[1] if steps else None


# ============================================================================
# METRICS
# ============================================================================

class MetricsLog:
    """Append-only JSON-lines log with strictly increasing meta_step"""

    def __init__(self, path: PathLike, record_type: Type[Record]):
        self.path = Path(path)
        self.record_type = record_type
        existing = self.read_all() if self.path.exists() else []
        self._last_step = existing[-1].meta_step if existing else -1

    def append(self, record: BaseModel) -> None:
        step = getattr(record, "meta_step")
        if step <= self._last_step:
            raise ContractError(f"metric step {step} not after {self._last_step}")
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")
            f.flush()
        self._last_step = step

    def read_all(self) -> List[Any]:
        records = []
        with open(self.path, encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(self.record_type.model_validate_json(line))
                except ValidationError as e:
                    raise ContractError(f"{self.path}:{number}: bad metric record ({e.error_count()} errors)") from e
        return records

    def truncate_after(self, step: int) -> None:
        """Drop records beyond step (used when resuming from an older checkpoint)"""
        if not self.path.exists():
            return
        kept = [r for r in self.read_all() if r.meta_step < step]
        atomic_write_text(self.path, "".join(r.model_dump_json() + "\n" for r in kept))
        self._last_step = kept[-1].meta_step if kept else -1


def append_metrics(log: MetricsLog, record: BaseModel) -> None:
    log.append(record)


# ============================================================================
# TASK SETS
# ============================================================================

def save_tasks(path: PathLike, tasks: Sequence[Task]) -> None:
    atomic_write_text(path, "".join(task.model_dump_json() + "\n" for task in tasks))
    logger.info("tasks_saved", path=str(path), count=len(tasks))


def load_tasks(path: PathLike) -> List[Task]:
    """
    Raises:
        TaskFormatError: a line is not a valid Task (names the line number)
    """
    tasks = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                tasks.append(Task.model_validate_json(line))
            except ValidationError as e:
                first = e.errors()[0]
                raise TaskFormatError(str(path), number, first.get("msg", "invalid task")) from e
    return tasks


# ============================================================================
# RESULTS
# ============================================================================

def format_table(columns: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> str:
    def cell(value: Any) -> str:
        if isinstance(value, float):
            return f"{value:.4f}"
        return "-" if value is None else str(value)

    body = [[cell(row.get(c)) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


def write_results_table(
    directory: PathLike,
    columns: Sequence[str],
    rows: Sequence[Mapping[str, Any]],
    extra: Optional[Mapping[str, Any]] = None,
) -> str:
    """Write results.table and results.json; returns the table text"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    text = format_table(columns, rows)
    atomic_write_text(directory / RESULTS_TABLE_FILE, text)
    payload = {"columns": list(columns), "rows": [dict(r) for r in rows], **(extra or {})}
    atomic_write_text(directory / RESULTS_JSON_FILE, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("results_written", directory=str(directory), rows=len(rows))
    return text
