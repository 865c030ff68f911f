"""Stage 1: frame sampling, key-frame selection, scene observation, traces.

Perception is fully delegated to the chat provider: the engine never opens
frame files, it only references them. Message text never embeds file system
paths (frames are named by index and timestamp), so scripted-request
digests stay stable across machines; the actual frame references travel as
attachments.
"""

from __future__ import annotations

import json
import logging
import math
import re
import shlex
import subprocess
from pathlib import Path
from typing import Any

from . import prompts
from .backend import ChatProvider, ChatRequest, Message, Stage
from .domain import (
    DvarError,
    FrameRef,
    SceneObservation,
    Trace,
    TraceCategory,
    TraceValidationError,
    VideoClip,
    expected_frame_count,
    validate_trace,
)
from .knowledge import KBError, KBIndex, RetrievalResult
from .parsing import (
    ParseError,
    call_with_schema,
    extract_json_object,
    require_str,
    require_str_list,
)

logger = logging.getLogger(__name__)

SCENE_PROMPT_ID = "evidence_scene.v1"
TRACES_PROMPT_ID = "evidence_traces.v1"

DEFAULT_MAX_TRACES = 8
DEFAULT_MAX_ATTACHMENTS = 64

_FRAME_FILE_RE = re.compile(r"^frame_(\d{6})\.(png|jpg|jpeg)$", re.IGNORECASE)


class SourceError(DvarError):
    """A video source is missing, unreadable, or structurally invalid."""


def sample_frames(duration_seconds: float, fps: float) -> list[float]:
    """Uniform mid-interval sampling plan: max(1, floor(fps * duration)) stamps.

    Timestamps are (k + 0.5) / fps; when the product floors to zero the plan
    clamps to a single mid-clip timestamp so the stamp stays below the
    duration.
    """
    if duration_seconds <= 0:
        raise ValueError(f"duration must be positive, got {duration_seconds}")
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    count = math.floor(fps * duration_seconds)
    if count < 1:
        return [duration_seconds / 2.0]
    return [(k + 0.5) / fps for k in range(count)]


def select_key_frame(clip: VideoClip) -> int:
    """Middle frame: floor(T / 2)."""
    return clip.frame_count // 2


def build_clip(
    video_id: str,
    duration_seconds: float,
    fps: float,
    frame_paths: list[str],
) -> VideoClip:
    """Pair a sampling plan with frame files, one path per timestamp."""
    timestamps = sample_frames(duration_seconds, fps)
    if len(frame_paths) < len(timestamps):
        raise SourceError(
            f"source for {video_id!r} has {len(frame_paths)} frames, "
            f"sampling plan needs {len(timestamps)}"
        )
    if len(frame_paths) > len(timestamps):
        logger.warning(
            "source for %r has %d frames, plan needs %d; extra frames ignored",
            video_id,
            len(frame_paths),
            len(timestamps),
        )
    frames = tuple(
        FrameRef(path=path, timestamp=ts)
        for path, ts in zip(frame_paths[: len(timestamps)], timestamps)
    )
    return VideoClip(
        video_id=video_id,
        duration_seconds=duration_seconds,
        fps=fps,
        frames=frames,
        key_frame_index=len(frames) // 2,
    )


def _frame_files(directory: Path) -> list[str]:
    found = []
    for child in directory.iterdir():
        match = _FRAME_FILE_RE.match(child.name)
        if match:
            found.append((int(match.group(1)), str(child)))
    found.sort()
    return [path for _, path in found]


def load_clip_from_dir(directory: str | Path, video_id: str | None = None) -> VideoClip:
    """Load a pre-extracted source: frame_%06d.* files plus meta.json."""
    directory = Path(directory)
    if not directory.is_dir():
        raise SourceError(f"source directory {directory} does not exist")
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise SourceError(f"source directory {directory} lacks meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        duration = float(meta["duration_seconds"])
        fps = float(meta["fps"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SourceError(f"unreadable meta.json in {directory}: {exc}") from exc
    frame_paths = _frame_files(directory)
    if not frame_paths:
        raise SourceError(f"source directory {directory} has no frame files")
    return build_clip(video_id or directory.name, duration, fps, frame_paths)


def extract_clip(
    video_path: str | Path,
    fps: float,
    extractor_command: str,
    workdir: str | Path,
    video_id: str | None = None,
) -> VideoClip:
    """Run the configured extractor and load the produced frame directory.

    The command template takes {input}, {fps} and {outdir} placeholders. If
    the extractor writes a meta.json it wins; otherwise the duration is
    derived from the frame count (duration = count / fps).
    """
    video_path = Path(video_path)
    if not video_path.is_file():
        raise SourceError(f"video file {video_path} does not exist")
    outdir = Path(workdir)
    outdir.mkdir(parents=True, exist_ok=True)
    command = extractor_command.format(
        input=shlex.quote(str(video_path)),
        fps=fps,
        outdir=shlex.quote(str(outdir)),
    )
    try:
        subprocess.run(command, shell=True, check=True, capture_output=True)
    except subprocess.CalledProcessError as exc:
        stderr = exc.stderr.decode("utf-8", "replace") if exc.stderr else ""
        raise SourceError(f"frame extractor failed: {stderr.strip()}") from exc
    if (outdir / "meta.json").is_file():
        return load_clip_from_dir(outdir, video_id or video_path.stem)
    frame_paths = _frame_files(outdir)
    if not frame_paths:
        raise SourceError(f"extractor produced no frames in {outdir}")
    duration = len(frame_paths) / fps
    return build_clip(video_id or video_path.stem, duration, fps, frame_paths)


def _clip_header(clip: VideoClip) -> str:
    key = clip.key_frame_index
    return (
        f"Video {clip.video_id}: duration {clip.duration_seconds:g}s at "
        f"{clip.fps:g} fps, {clip.frame_count} sampled frames, key frame "
        f"index {key} at t={clip.frames[key].timestamp:.3f}s."
    )


def scene_messages(clip: VideoClip) -> list[Message]:
    return [
        ("system", prompts.load(SCENE_PROMPT_ID)),
        (
            "user",
            _clip_header(clip)
            + " Observe the attached key frame and describe the scene.",
        ),
    ]


def observe_scene(
    clip: VideoClip,
    provider: ChatProvider,
    *,
    session_id: str | None = None,
    temperature: float = 0.0,
    max_output_tokens: int = 1024,
    parse_retries: int = 1,
) -> SceneObservation:
    """One evidence-stage call with the key frame attached; retried once."""
    session = session_id or clip.video_id

    def send(messages: list[Message]) -> str:
        request = ChatRequest(
            session_id=session,
            stage=Stage.EVIDENCE,
            messages=tuple(messages),
            temperature=temperature,
            max_output_tokens=max_output_tokens,
            attachments=(clip.key_frame,),
        )
        return provider.complete(request).text

    return call_with_schema(
        send=send,
        messages=scene_messages(clip),
        parse=parse_scene,
        retries=parse_retries,
    )


def parse_scene(text: str) -> SceneObservation:
    obj = extract_json_object(text)
    summary = require_str(obj, "summary", allow_empty=False)
    environment = obj.get("environment", "")
    if not isinstance(environment, str):
        raise ParseError("field 'environment' must be a string")
    return SceneObservation(
        summary=summary,
        environment=environment,
        objects=tuple(require_str_list(obj, "objects", default=True)),
        interactions=tuple(require_str_list(obj, "interactions", default=True)),
    )


def trace_messages(
    clip: VideoClip,
    scene: SceneObservation,
    guidance_text: str,
    max_traces: int = DEFAULT_MAX_TRACES,
) -> list[Message]:
    frame_lines = "\n".join(
        f"- frame {k} at t={ref.timestamp:.3f}s" for k, ref in enumerate(clip.frames)
    )
    user = (
        f"{_clip_header(clip)}\n\n"
        f"Scene observation:\n{json.dumps(scene.to_record(), sort_keys=True)}\n\n"
        f"Reference guidance:\n{guidance_text}\n\n"
        f"Sampled frames (attached in order):\n{frame_lines}\n\n"
        "Report the anomalies."
    )
    return [
        ("system", prompts.render(TRACES_PROMPT_ID, max_traces=str(max_traces))),
        ("user", user),
    ]


def _attachment_subset(clip: VideoClip, max_attachments: int) -> tuple[FrameRef, ...]:
    if clip.frame_count <= max_attachments:
        return clip.frames
    logger.warning(
        "clip %s has %d frames, attaching %d evenly spaced",
        clip.video_id,
        clip.frame_count,
        max_attachments,
    )
    if max_attachments == 1:
        return (clip.key_frame,)
    step = (clip.frame_count - 1) / (max_attachments - 1)
    indices = sorted({round(i * step) for i in range(max_attachments)})
    return tuple(clip.frames[i] for i in indices)


def parse_traces(text: str, frame_count: int, max_traces: int) -> list[Trace]:
    """Parse discovered traces; excess truncated, invalid traces dropped."""
    obj = extract_json_object(text)
    raw = obj.get("traces")
    if not isinstance(raw, list):
        raise ParseError("field 'traces' missing or not a list")
    if len(raw) > max_traces:
        logger.warning(
            "provider reported %d traces; keeping the first %d", len(raw), max_traces
        )
        raw = raw[:max_traces]
    traces: list[Trace] = []
    for item in raw:
        if not isinstance(item, dict):
            raise ParseError("trace entries must be objects")
        description = require_str(item, "description")
        category = item.get("category", TraceCategory.OTHER.value)
        if category not in [c.value for c in TraceCategory]:
            logger.debug("unknown trace category %r mapped to 'other'", category)
            category = TraceCategory.OTHER.value
        indices = item.get("frame_indices", [])
        if not isinstance(indices, list) or not all(
            isinstance(i, int) and not isinstance(i, bool) for i in indices
        ):
            raise ParseError("field 'frame_indices' must be a list of integers")
        trace = Trace(
            trace_id=f"t{len(traces) + 1}",
            description=description,
            category=TraceCategory(category),
            frame_indices=tuple(indices),
        )
        try:
            validate_trace(trace, frame_count)
        except TraceValidationError as exc:
            logger.warning("dropping invalid trace: %s", exc)
            continue
        traces.append(trace)
    return traces


def discover_traces(
    clip: VideoClip,
    scene: SceneObservation,
    kb: KBIndex | None,
    provider: ChatProvider,
    *,
    session_id: str | None = None,
    k_pos: int = 3,
    k_neg: int = 3,
    include_unverified: bool = False,
    max_traces: int = DEFAULT_MAX_TRACES,
    max_attachments: int = DEFAULT_MAX_ATTACHMENTS,
    temperature: float = 0.0,
    max_output_tokens: int = 2048,
    parse_retries: int = 1,
) -> list[Trace]:
    """Discover forgery traces over the sampled frames, grounded by KB priors.

    The returned list may be empty (a legal "no anomalies" outcome).
    ``kb=None`` runs without guidance (ablation path).
    """
    if kb is not None and not kb.frozen:
        raise KBError("knowledge base must be frozen before a detection run")
    if kb is None:
        kb_result = RetrievalResult.empty()
    else:
        kb_result = kb.retrieve(
            scene.summary, "", k_pos, k_neg, include_unverified=include_unverified
        )
    session = session_id or clip.video_id
    attachments = _attachment_subset(clip, max_attachments)

    def send(messages: list[Message]) -> str:
        request = ChatRequest(
            session_id=session,
            stage=Stage.EVIDENCE,
            messages=tuple(messages),
            temperature=temperature,
            max_output_tokens=max_output_tokens,
            attachments=attachments,
        )
        return provider.complete(request).text

    return call_with_schema(
        send=send,
        messages=trace_messages(clip, scene, kb_result.guidance_text(), max_traces),
        parse=lambda text: parse_traces(text, clip.frame_count, max_traces),
        retries=parse_retries,
    )
