"""Checkpoint and report serialization.

Checkpoints are a single binary file: 8-byte magic, a little-endian u64
manifest length, a JSON manifest (config, scale values as decimal text,
pinned mask, provenance, tensor table), then the raw float32 payload with
each tensor 8-byte aligned. Run reports are human-readable JSON carrying the
full removal trace plus eval/analysis results and a content hash. All writes
go to a temporary name first and are renamed into place.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import BlockMask, ModelConfig, ScaleSet, Weights, named_tensors, weights_from_arrays
from .selection import RemovalTrace, StepRecord

MAGIC = b"HOPSCOT1"
FORMAT_VERSION = 1

_MANIFEST_KEYS = {"format_version", "config", "scales", "pinned", "provenance", "tensors"}
_TENSOR_KEYS = {"name", "shape", "dtype", "byte_offset", "byte_length"}


class PersistError(Exception):
    """Base class for checkpoint/report serialization failures."""


class BadMagicError(PersistError):
    pass


class TruncatedPayloadError(PersistError):
    pass


class PayloadMismatchError(PersistError):
    pass


class ManifestError(PersistError):
    pass


class VersionError(PersistError):
    pass


class TraceSchemaError(PersistError):
    pass


@dataclass
class Checkpoint:
    weights: Weights
    scales: ScaleSet
    mask: BlockMask
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def of(cls, weights: Weights, scales: ScaleSet, provenance: dict | None = None):
        return cls(weights, scales, scales.block_mask(), provenance or {})


def _atomic_write(path, blob: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _scale_text(v: float) -> str:
    return f"{float(v):.17g}"


def save_checkpoint(path, c: Checkpoint) -> None:
    """Write magic + manifest + aligned float32 payload atomically."""
    config = c.weights.config
    if c.scales.n_layers != config.n_layers:
        raise ValueError("scales and weights disagree on layer count")
    if c.mask.removed != frozenset(c.scales.pinned):
        raise ValueError("mask does not match the pinned set of the scales")

    entries = []
    chunks = []
    offset = 0
    for name, t in named_tensors(c.weights):
        pad = (-offset) % 8
        if pad:
            chunks.append(b"\0" * pad)
            offset += pad
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "f32",
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": c.format_version,
        "config": config.to_dict(),
        "scales": {
            group: [_scale_text(v) for v in vals] for group, vals in c.scales.values().items()
        },
        "pinned": sorted(c.scales.pinned),
        "provenance": c.provenance,
        "tensors": entries,
    }
    mblob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    _atomic_write(path, MAGIC + struct.pack("<Q", len(mblob)) + mblob + b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise TruncatedPayloadError(f"{path}: file ends inside the manifest length field")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + mlen:
        raise TruncatedPayloadError(f"{path}: file ends inside the manifest")
    try:
        manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: manifest is not valid JSON: {e}") from e
    _validate_manifest(path, manifest)
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format_version {manifest['format_version']} unsupported "
            f"(expected {FORMAT_VERSION})"
        )

    payload = blob[16 + mlen :]
    end = 0
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        lo, n = e["byte_offset"], e["byte_length"]
        if lo + n > len(payload):
            raise TruncatedPayloadError(
                f"{path}: tensor {e['name']} needs bytes [{lo}, {lo + n}) "
                f"but payload has {len(payload)}"
            )
        want = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if n != want:
            raise PayloadMismatchError(
                f"{path}: tensor {e['name']} shape {e['shape']} implies {want} bytes, "
                f"manifest says {n}"
            )
        arrays[e["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=n // 4, offset=lo)
            .reshape(e["shape"])
            .copy()
        )
        end = max(end, lo + n)
    if len(payload) != end:
        raise PayloadMismatchError(
            f"{path}: payload is {len(payload)} bytes, manifest accounts for {end}"
        )

    config = ModelConfig.from_dict(manifest["config"])
    try:
        weights = weights_from_arrays(config, arrays)
    except ValueError as e:
        raise ManifestError(f"{path}: {e}") from e
    pinned = manifest["pinned"]
    for i in range(config.n_layers):
        if not weights.layers[i].attention_present and i not in pinned:
            raise ManifestError(f"{path}: layer {i} has no attention weights but is not pinned")
    values = {g: [float(t) for t in v] for g, v in manifest["scales"].items()}
    scales = ScaleSet.from_values(values, pinned)
    return Checkpoint(
        weights=weights,
        scales=scales,
        mask=BlockMask(frozenset(pinned)),
        provenance=manifest["provenance"],
        format_version=manifest["format_version"],
    )


def _validate_manifest(path, manifest) -> None:
    if not isinstance(manifest, dict):
        raise ManifestError(f"{path}: manifest must be an object")
    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"{path}: unknown manifest fields {sorted(unknown)}")
    missing = _MANIFEST_KEYS - set(manifest)
    if missing:
        raise ManifestError(f"{path}: manifest missing fields {sorted(missing)}")
    for i, e in enumerate(manifest["tensors"]):
        bad = set(e) ^ _TENSOR_KEYS
        if bad:
            raise ManifestError(f"{path}: tensors[{i}] has wrong fields {sorted(bad)}")
        if e["dtype"] != "f32":
            raise ManifestError(f"{path}: tensors[{i}] dtype {e['dtype']!r} unsupported")
    groups = set(manifest["scales"])
    if groups != set(ScaleSet.GROUPS):
        raise ManifestError(f"{path}: scales groups {sorted(groups)} != {list(ScaleSet.GROUPS)}")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunReport:
    """Everything a plotting/reporting pass needs, with no model access."""

    trace: RemovalTrace
    eval_results: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)


def _trace_to_json(trace: RemovalTrace) -> dict:
    return {
        "strategy": trace.strategy,
        "seed": trace.seed,
        "baseline_loss": trace.baseline_loss,
        "baseline_accuracy": trace.baseline_accuracy,
        "steps": [
            {
                "scores": {str(l): v for l, v in st.scores.items()},
                "chosen": st.chosen,
                "rescale_trace": list(st.rescale_trace),
                "eval_accuracy": st.eval_accuracy,
            }
            for st in trace.steps
        ],
    }


def _require(cond: bool, path: str, why: str) -> None:
    if not cond:
        raise TraceSchemaError(f"trace schema: {path} {why}")


def _trace_from_json(d: dict) -> RemovalTrace:
    _require(isinstance(d, dict), "trace", "must be an object")
    for key in ("strategy", "seed", "steps"):
        _require(key in d, f"trace.{key}", "is required")
    _require(isinstance(d["strategy"], str), "trace.strategy", "must be a string")
    _require(isinstance(d["seed"], int), "trace.seed", "must be an integer")
    _require(isinstance(d["steps"], list), "trace.steps", "must be a list")
    steps = []
    for i, st in enumerate(d["steps"]):
        at = f"trace.steps[{i}]"
        _require(isinstance(st, dict), at, "must be an object")
        _require("chosen" in st and isinstance(st["chosen"], int), f"{at}.chosen", "must be an integer")
        scores_raw = st.get("scores", {})
        _require(isinstance(scores_raw, dict), f"{at}.scores", "must be an object")
        scores = {}
        for k, v in scores_raw.items():
            _require(k.lstrip("-").isdigit(), f"{at}.scores key {k!r}", "is not a layer index")
            _require(isinstance(v, (int, float)), f"{at}.scores[{k}]", "must be a number")
            scores[int(k)] = float(v)
        rt = st.get("rescale_trace", [])
        _require(
            isinstance(rt, list) and all(isinstance(v, (int, float)) for v in rt),
            f"{at}.rescale_trace",
            "must be a list of numbers",
        )
        ev = st.get("eval_accuracy")
        _require(ev is None or isinstance(ev, dict), f"{at}.eval_accuracy", "must be an object or null")
        steps.append(
            StepRecord(
                scores=scores,
                chosen=st["chosen"],
                rescale_trace=[float(v) for v in rt],
                eval_accuracy=ev,
            )
        )
    return RemovalTrace(
        strategy=d["strategy"],
        seed=d["seed"],
        baseline_loss=d.get("baseline_loss"),
        baseline_accuracy=d.get("baseline_accuracy"),
        steps=steps,
    )


def _body_hash(body: dict) -> str:
    canon = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()


def save_trace(path, r: RunReport) -> None:
    """Human-readable JSON report; deterministic bytes for identical inputs."""
    body = {
        "kind": "hopscotch-run-report",
        "version": FORMAT_VERSION,
        "trace": _trace_to_json(r.trace),
        "eval_results": r.eval_results,
        "analysis": r.analysis,
        "provenance": r.provenance,
    }
    body["content_hash"] = _body_hash(body)
    _atomic_write(path, (json.dumps(body, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def load_trace(path) -> RunReport:
    with open(path, "r", encoding="utf-8") as f:
        try:
            body = json.load(f)
        except json.JSONDecodeError as e:
            raise TraceSchemaError(f"trace schema: not valid JSON: {e}") from e
    _require(isinstance(body, dict), "report", "must be an object")
    _require(body.get("kind") == "hopscotch-run-report", "report.kind", "must be 'hopscotch-run-report'")
    _require(body.get("version") == FORMAT_VERSION, "report.version", f"must be {FORMAT_VERSION}")
    _require("trace" in body, "report.trace", "is required")
    stored = body.get("content_hash")
    if stored is not None:
        check = {k: v for k, v in body.items() if k != "content_hash"}
        if _body_hash(check) != stored:
            raise TraceSchemaError("trace schema: content_hash does not match body")
    return RunReport(
        trace=_trace_from_json(body["trace"]),
        eval_results=body.get("eval_results", {}),
        analysis=body.get("analysis", {}),
        provenance=body.get("provenance", {}),
    )


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """CSV with a header row and RFC-4180 quoting."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def trace_scores_csv(path, trace: RemovalTrace) -> None:
    """One row per (step, candidate) probe score — the loss-per-layer export."""
    rows = [
        [step_i, layer, score]
        for step_i, st in enumerate(trace.steps)
        for layer, score in sorted(st.scores.items())
    ]
    write_csv(path, ["step", "layer", "score"], rows)


def trace_eval_csv(path, trace: RemovalTrace) -> None:
    """Per-stage eval accuracies: baseline first, then one stage per step."""
    rows = []
    if trace.baseline_accuracy:
        for metric, acc in sorted(trace.baseline_accuracy.items()):
            rows.append(["baseline", metric, acc])
    for i, st in enumerate(trace.steps):
        if st.eval_accuracy:
            for metric, acc in sorted(st.eval_accuracy.items()):
                rows.append([f"step{i + 1}", metric, acc])
    write_csv(path, ["stage", "metric", "accuracy"], rows)
