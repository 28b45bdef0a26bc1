"""Pluggable step executors and the deterministic mock generators.

Mock media is desk-scale, hash-stable, and inspectable:

  images  - binary PGM (P5) grayscale rasters with a seed-derived pixel pattern
  videos  - canonical-JSON clip descriptors {duration_ms, fps, first_frame_asset,
            last_frame_asset, checksum}
  audio   - small PCM WAV files carrying a seed-derived tone

Every byte stream is a pure function of (node id, workflow id, normalized
parameters, prompt text, batch ordinal, candidate ordinal). Salting with the
node id keeps two nodes from ever minting identical bytes, which would trip
the store's single-producer provenance rule.

An optional client for an external node-graph generation server ships at the
bottom; it is disabled by default and never used by the test suite.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Any, Optional, Protocol

from . import errors
from .model import Modality, canonical_json
from .registry import WorkflowModule


@dataclass
class InputAsset:
    asset_id: str
    modality: Modality
    metadata: dict[str, Any]
    data: Optional[bytes] = None


@dataclass
class ExecRequest:
    node_id: str
    workflow: WorkflowModule
    prompt_text: str
    parameters: dict[str, Any]  # normalized
    inputs: list[InputAsset]
    batch_ordinal: int  # how many batches this node already has


@dataclass
class GeneratedAsset:
    data: bytes
    modality: Modality
    metadata: dict[str, Any]


@dataclass
class ExecResult:
    assets: list[GeneratedAsset]
    generation_calls: int


class Executor(Protocol):
    def execute(self, request: ExecRequest) -> ExecResult: ...


def _seed(request: ExecRequest, candidate: int, stage: str = "") -> bytes:
    material = "|".join([
        request.node_id,
        request.workflow.workflow_id,
        canonical_json(request.parameters),
        request.prompt_text,
        str(request.batch_ordinal),
        str(candidate),
        stage,
    ])
    return hashlib.sha256(material.encode("utf-8")).digest()


def _byte_stream(seed: bytes, n: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < n:
        out.extend(hashlib.sha256(seed + counter.to_bytes(4, "big")).digest())
        counter += 1
    return bytes(out[:n])


def make_pgm(seed: bytes, width: int, height: int) -> bytes:
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + _byte_stream(seed, width * height)


def make_wav(seed: bytes, duration_ms: int, sample_rate: int = 8000) -> bytes:
    """8-bit mono PCM holding a single seed-pitched tone."""
    n_samples = max(1, sample_rate * duration_ms // 1000)
    freq = 200 + int.from_bytes(seed[:4], "big") % 600
    samples = bytearray()
    for i in range(n_samples):
        value = 128 + int(100 * math.sin(2 * math.pi * freq * i / sample_rate))
        samples.append(max(0, min(255, value)))
    data = bytes(samples)
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate, 1, 8)
    header += b"data" + struct.pack("<I", len(data))
    return header + data


def make_clip_descriptor(seed: bytes, duration_ms: int, fps: int,
                         first_frame_asset: Optional[str],
                         last_frame_asset: Optional[str]) -> tuple[bytes, dict]:
    descriptor = {
        "kind": "clip",
        "duration_ms": duration_ms,
        "fps": fps,
        "first_frame_asset": first_frame_asset,
        "last_frame_asset": last_frame_asset,
        "checksum": seed.hex()[:32],
    }
    data = (canonical_json(descriptor) + "\n").encode("utf-8")
    metadata = {"duration_ms": duration_ms, "fps": fps, "format": "clip-descriptor",
                "first_frame_asset": first_frame_asset, "last_frame_asset": last_frame_asset}
    return data, metadata


def _image_inputs(request: ExecRequest) -> list[InputAsset]:
    return [a for a in request.inputs if a.modality is Modality.IMAGE]


def _num_candidates(request: ExecRequest) -> int:
    return int(request.parameters.get("num_candidates", 1))


class MockImageExecutor:
    """Generic image generator for anchor, variant, edit, and upscale steps."""

    def execute(self, request: ExecRequest) -> ExecResult:
        count = _num_candidates(request)
        factor = int(request.parameters.get("factor", 1))
        side = 16 * max(1, factor)
        assets = []
        for i in range(count):
            seed = _seed(request, i)
            assets.append(GeneratedAsset(
                data=make_pgm(seed, side, side),
                modality=Modality.IMAGE,
                metadata={"width": side, "height": side, "format": "pgm"},
            ))
        return ExecResult(assets=assets, generation_calls=count)


class MockCannyExecutor:
    """Derives a structural control raster, then generates guided candidates.

    Output index 0 is the derived control map; creative candidates follow.
    The extra derivation stage is visible in the generation-call count."""

    def execute(self, request: ExecRequest) -> ExecResult:
        count = _num_candidates(request)
        control_seed = _seed(request, 0, stage="derive-control")
        assets = [GeneratedAsset(
            data=make_pgm(control_seed, 16, 16),
            modality=Modality.IMAGE,
            metadata={"width": 16, "height": 16, "format": "pgm", "role": "structural-control"},
        )]
        for i in range(count):
            seed = _seed(request, i, stage="guided")
            assets.append(GeneratedAsset(
                data=make_pgm(seed, 16, 16),
                modality=Modality.IMAGE,
                metadata={"width": 16, "height": 16, "format": "pgm"},
            ))
        return ExecResult(assets=assets, generation_calls=count + 1)


class MockClipExecutor:
    """Image-to-video, start/end-frame, and camera-move clip synthesis."""

    def execute(self, request: ExecRequest) -> ExecResult:
        images = _image_inputs(request)
        first = images[0].asset_id if images else None
        last = images[1].asset_id if len(images) >= 2 else None
        duration = int(request.parameters.get("duration_ms", 4000))
        fps = int(request.parameters.get("fps", 12))
        count = _num_candidates(request)
        assets = []
        for i in range(count):
            data, metadata = make_clip_descriptor(_seed(request, i), duration, fps, first, last)
            assets.append(GeneratedAsset(data=data, modality=Modality.VIDEO, metadata=metadata))
        return ExecResult(assets=assets, generation_calls=count)


class MockInterpExecutor:
    """Frame-interpolation post-process over an input clip descriptor."""

    def execute(self, request: ExecRequest) -> ExecResult:
        videos = [a for a in request.inputs if a.modality is Modality.VIDEO]
        if not videos or videos[0].data is None:
            raise errors.ExecutorUnavailable("interpolation needs the source clip bytes")
        try:
            source = json.loads(videos[0].data.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            raise errors.ExecutorUnavailable("source asset is not a clip descriptor")
        factor = int(request.parameters.get("factor", 2))
        count = _num_candidates(request)
        assets = []
        for i in range(count):
            data, metadata = make_clip_descriptor(
                _seed(request, i),
                int(source.get("duration_ms", 4000)),
                int(source.get("fps", 12)) * factor,
                source.get("first_frame_asset"),
                source.get("last_frame_asset"),
            )
            metadata["interpolated_from"] = videos[0].asset_id
            assets.append(GeneratedAsset(data=data, modality=Modality.VIDEO, metadata=metadata))
        return ExecResult(assets=assets, generation_calls=count)


class MockToneExecutor:
    """Narration and music as deterministic tones; length tracks the prompt."""

    def execute(self, request: ExecRequest) -> ExecResult:
        if "duration_ms" in request.parameters:
            duration = int(request.parameters["duration_ms"])
        else:
            words = max(1, len(request.prompt_text.split()))
            pace = float(request.parameters.get("pace", 1.0))
            duration = min(15000, int(2000 + 120 * words / pace))
        count = _num_candidates(request)
        assets = []
        for i in range(count):
            assets.append(GeneratedAsset(
                data=make_wav(_seed(request, i), duration),
                modality=Modality.AUDIO,
                metadata={"duration_ms": duration, "format": "wav"},
            ))
        return ExecResult(assets=assets, generation_calls=count)


class MockConcatExecutor:
    """Assembly as a workflow step: concatenates input clip descriptors."""

    def execute(self, request: ExecRequest) -> ExecResult:
        total = 0
        fps = 12
        for asset in request.inputs:
            if asset.modality is Modality.VIDEO and asset.data:
                try:
                    descriptor = json.loads(asset.data.decode("utf-8"))
                    total += int(descriptor.get("duration_ms", 0))
                    fps = int(descriptor.get("fps", fps))
                except (ValueError, UnicodeDecodeError):
                    pass
        data, metadata = make_clip_descriptor(_seed(request, 0), total or 1000, fps, None, None)
        return ExecResult(assets=[GeneratedAsset(data=data, modality=Modality.VIDEO, metadata=metadata)],
                          generation_calls=1)


MOCK_EXECUTORS: dict[str, Executor] = {
    "mock-image": MockImageExecutor(),
    "mock-canny": MockCannyExecutor(),
    "mock-clip": MockClipExecutor(),
    "mock-interp": MockInterpExecutor(),
    "mock-tone": MockToneExecutor(),
    "mock-concat": MockConcatExecutor(),
}


class ExecutorPool:
    def __init__(self, executors: dict[str, Executor] | None = None):
        self._executors = dict(executors if executors is not None else MOCK_EXECUTORS)

    def register(self, executor_id: str, executor: Executor) -> None:
        self._executors[executor_id] = executor

    def get(self, executor_id: str) -> Executor:
        try:
            return self._executors[executor_id]
        except KeyError:
            raise errors.ExecutorUnavailable(f"no executor {executor_id!r} configured")


class GraphBackendExecutor:
    """Client for an external prompt-graph generation server.

    Submits a minimal graph to the server's HTTP job API and polls its history
    endpoint for outputs. Requires ``backend.url`` in the configuration and is
    excluded from the bundled test suite.
    """

    def __init__(self, base_url: str, api_key_env: str = "", *, poll_interval: float = 1.0,
                 timeout: float = 600.0):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.poll_interval = poll_interval
        self.timeout = timeout

    def _headers(self) -> dict:
        import os
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        return {"authorization": f"Bearer {key}"} if key else {}

    def execute(self, request: ExecRequest) -> ExecResult:
        import time

        import httpx

        graph = {
            "workflow_id": request.workflow.workflow_id,
            "prompt": request.prompt_text,
            "parameters": request.parameters,
            "inputs": [a.asset_id for a in request.inputs],
        }
        try:
            submitted = httpx.post(f"{self.base_url}/prompt", json={"prompt": graph},
                                   headers=self._headers(), timeout=30.0)
            submitted.raise_for_status()
            prompt_id = submitted.json()["prompt_id"]
        except Exception as exc:
            raise errors.ExecutorUnavailable(f"backend submit failed: {exc}")

        deadline = time.monotonic() + self.timeout
        while time.monotonic() < deadline:
            try:
                history = httpx.get(f"{self.base_url}/history/{prompt_id}",
                                    headers=self._headers(), timeout=30.0)
                history.raise_for_status()
                entry = history.json().get(prompt_id)
            except Exception as exc:
                raise errors.ExecutorUnavailable(f"backend poll failed: {exc}")
            if entry and entry.get("status", {}).get("completed"):
                assets = []
                for output in entry.get("outputs", []):
                    blob = httpx.get(f"{self.base_url}/view", params={"filename": output["filename"]},
                                     headers=self._headers(), timeout=60.0)
                    blob.raise_for_status()
                    assets.append(GeneratedAsset(
                        data=blob.content,
                        modality=request.workflow.output_modality,
                        metadata={"format": output.get("format", "bin"), "source": "backend"},
                    ))
                if not assets:
                    raise errors.ExecutorUnavailable("backend finished without outputs")
                return ExecResult(assets=assets, generation_calls=len(assets))
            time.sleep(self.poll_interval)
        raise errors.ExecutorUnavailable("backend timed out")
