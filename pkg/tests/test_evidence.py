"""Stage 1: sampling plans, clip loading, scene observation, trace discovery."""

from __future__ import annotations

import json
import math
import random

import pytest

from conftest import PNG_BYTES, write_frame_dir
from dvar.backend import CallbackProvider
from dvar.evidence import (
    SourceError,
    build_clip,
    discover_traces,
    extract_clip,
    load_clip_from_dir,
    observe_scene,
    sample_frames,
    select_key_frame,
)
from dvar.knowledge import KBError, KBIndex
from dvar.parsing import ParseError


class TestSampleFrames:
    def test_default_rate_ten_seconds_at_five_fps(self):
        stamps = sample_frames(10.0, 5)
        assert len(stamps) == 50
        assert stamps[0] == pytest.approx(0.1)
        assert stamps[1] == pytest.approx(0.3)
        assert stamps[-1] == pytest.approx(9.9)

    def test_minimum_clamp(self):
        stamps = sample_frames(0.1, 5)
        assert len(stamps) == 1
        assert stamps[0] < 0.1

    def test_fractional_product(self):
        stamps = sample_frames(4.5, 5)
        assert len(stamps) == math.floor(22.5) == 22
        assert stamps[-1] == pytest.approx(4.3)

    def test_non_positive_duration(self):
        with pytest.raises(ValueError, match="duration"):
            sample_frames(0.0, 5)
        with pytest.raises(ValueError, match="duration"):
            sample_frames(-1.0, 5)

    def test_sampling_law_random_pairs(self):
        rng = random.Random(4)
        for _ in range(10_000):
            duration = rng.uniform(1e-3, 120.0)
            fps = rng.uniform(1e-2, 30.0)
            stamps = sample_frames(duration, fps)
            assert len(stamps) == max(1, math.floor(fps * duration))
            assert all(0 < t < duration for t in stamps)
            assert all(a < b for a, b in zip(stamps, stamps[1:]))


class TestKeyFrame:
    @pytest.mark.parametrize("count,expected", [(50, 25), (1, 0), (7, 3)])
    def test_middle_frame(self, count, expected, tmp_path):
        fps = 1.0
        directory = write_frame_dir(tmp_path / "c", duration_seconds=float(count), fps=fps)
        clip = load_clip_from_dir(directory)
        assert clip.frame_count == count
        assert select_key_frame(clip) == expected
        assert clip.key_frame_index == expected


class TestClipLoading:
    def test_load_from_dir(self, frame_dir):
        clip = load_clip_from_dir(frame_dir, video_id="vid-1")
        assert clip.video_id == "vid-1"
        assert clip.frame_count == 3
        assert [f.timestamp for f in clip.frames] == pytest.approx(
            [0.5 / 3, 1.5 / 3, 2.5 / 3]
        )

    def test_missing_meta(self, tmp_path):
        directory = tmp_path / "broken"
        directory.mkdir()
        (directory / "frame_000000.png").write_bytes(PNG_BYTES)
        with pytest.raises(SourceError, match="meta.json"):
            load_clip_from_dir(directory)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(SourceError, match="does not exist"):
            load_clip_from_dir(tmp_path / "nope")

    def test_too_few_frames(self, tmp_path):
        directory = write_frame_dir(tmp_path / "short", duration_seconds=2.0, fps=3.0)
        (directory / "frame_000005.png").unlink()
        with pytest.raises(SourceError, match="frames"):
            load_clip_from_dir(directory)

    def test_extra_frames_ignored(self, tmp_path):
        directory = write_frame_dir(
            tmp_path / "long", duration_seconds=1.0, fps=3.0, extra_frames=2
        )
        clip = load_clip_from_dir(directory)
        assert clip.frame_count == 3

    def test_build_clip_pairs_plan_with_paths(self):
        clip = build_clip("v", 1.0, 3.0, [f"{k}.png" for k in range(3)])
        assert clip.key_frame_index == 1


class TestExtractor:
    def test_extractor_command(self, tmp_path):
        video = tmp_path / "input.mp4"
        video.write_bytes(b"not really a video")
        script = tmp_path / "fake_extractor.py"
        script.write_text(
            "import pathlib, sys\n"
            "src, fps, outdir = sys.argv[1], float(sys.argv[2]), pathlib.Path(sys.argv[3])\n"
            "outdir.mkdir(parents=True, exist_ok=True)\n"
            "for k in range(6):\n"
            "    (outdir / f'frame_{k:06d}.png').write_bytes(b'png')\n",
            encoding="utf-8",
        )
        clip = extract_clip(
            video,
            fps=3.0,
            extractor_command=f"python3 {script} {{input}} {{fps}} {{outdir}}",
            workdir=tmp_path / "out",
            video_id="x",
        )
        # no meta.json: duration derived from frame count
        assert clip.frame_count == 6
        assert clip.duration_seconds == pytest.approx(2.0)

    def test_extractor_failure_surfaces(self, tmp_path):
        video = tmp_path / "input.mp4"
        video.write_bytes(b"x")
        with pytest.raises(SourceError, match="extractor failed"):
            extract_clip(
                video,
                fps=3.0,
                extractor_command="python3 -c 'import sys; sys.exit(3)' {input} {fps} {outdir}",
                workdir=tmp_path / "out",
            )

    def test_missing_video_file(self, tmp_path):
        with pytest.raises(SourceError, match="does not exist"):
            extract_clip(tmp_path / "gone.mp4", 3.0, "true {input} {fps} {outdir}", tmp_path)


SCENE_JSON = json.dumps(
    {
        "summary": "child standing on grass under golden sunset",
        "environment": "open lawn at dusk",
        "objects": ["child", "grass"],
        "interactions": ["child stands on grass"],
    }
)


def clip_from(tmp_path):
    return load_clip_from_dir(
        write_frame_dir(tmp_path / "clip", duration_seconds=1.0, fps=3.0), "vid-1"
    )


class TestObserveScene:
    def test_parses_observation(self, tmp_path):
        clip = clip_from(tmp_path)
        provider = CallbackProvider(lambda req: SCENE_JSON)
        scene = observe_scene(clip, provider)
        assert scene.summary == "child standing on grass under golden sunset"
        assert scene.objects == ("child", "grass")

    def test_key_frame_attached(self, tmp_path):
        clip = clip_from(tmp_path)
        seen = {}

        def respond(req):
            seen["attachments"] = req.attachments
            seen["stage"] = req.stage.value
            return SCENE_JSON

        observe_scene(clip, CallbackProvider(respond))
        assert seen["stage"] == "evidence"
        assert seen["attachments"] == (clip.key_frame,)

    def test_malformed_twice_raises(self, tmp_path):
        clip = clip_from(tmp_path)
        provider = CallbackProvider(lambda req: "never json")
        with pytest.raises(ParseError):
            observe_scene(clip, provider)

    def test_retry_can_succeed(self, tmp_path):
        clip = clip_from(tmp_path)
        calls = {"n": 0}

        def respond(req):
            calls["n"] += 1
            return "oops" if calls["n"] == 1 else SCENE_JSON

        scene = observe_scene(clip, CallbackProvider(respond))
        assert calls["n"] == 2
        assert scene.summary.startswith("child")

    def test_deterministic_across_runs(self, tmp_path):
        clip = clip_from(tmp_path)
        provider = CallbackProvider(lambda req: SCENE_JSON)
        first = observe_scene(clip, provider).to_record()
        second = observe_scene(clip, provider).to_record()
        assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)


def traces_payload(count, frame_index=0):
    return json.dumps(
        {
            "traces": [
                {
                    "description": f"anomaly number {i}",
                    "category": "temporal",
                    "frame_indices": [frame_index],
                }
                for i in range(count)
            ]
        }
    )


def frozen_kb():
    kb = KBIndex()
    kb.add_entry(
        phenomenon="temporal flicker",
        description="Luminance oscillates frame to frame in regions that should stay static.",
        guidance_type="positive",
        verified=True,
        created_at="2026-01-05T00:00:00Z",
    )
    kb.freeze()
    return kb


class TestDiscoverTraces:
    def test_two_traces(self, tmp_path):
        clip = clip_from(tmp_path)
        provider = CallbackProvider(lambda req: traces_payload(2))
        scene = observe_scene(clip, CallbackProvider(lambda req: SCENE_JSON))
        traces = discover_traces(clip, scene, frozen_kb(), provider)
        assert [t.trace_id for t in traces] == ["t1", "t2"]

    def test_no_anomalies_sentinel(self, tmp_path):
        clip = clip_from(tmp_path)
        scene = observe_scene(clip, CallbackProvider(lambda req: SCENE_JSON))
        provider = CallbackProvider(lambda req: json.dumps({"traces": []}))
        assert discover_traces(clip, scene, frozen_kb(), provider) == []

    def test_cap_truncates_with_warning(self, tmp_path, caplog):
        clip = clip_from(tmp_path)
        scene = observe_scene(clip, CallbackProvider(lambda req: SCENE_JSON))
        provider = CallbackProvider(lambda req: traces_payload(10))
        with caplog.at_level("WARNING"):
            traces = discover_traces(clip, scene, frozen_kb(), provider)
        assert len(traces) == 8
        assert any("keeping the first 8" in r.message for r in caplog.records)

    def test_invalid_traces_dropped_individually(self, tmp_path, caplog):
        clip = clip_from(tmp_path)
        scene = observe_scene(clip, CallbackProvider(lambda req: SCENE_JSON))
        payload = json.dumps(
            {
                "traces": [
                    {"description": "fine", "category": "physical", "frame_indices": [0]},
                    {"description": "", "category": "physical", "frame_indices": [0]},
                    {"description": "oob", "category": "other", "frame_indices": [99]},
                ]
            }
        )
        provider = CallbackProvider(lambda req: payload)
        with caplog.at_level("WARNING"):
            traces = discover_traces(clip, scene, frozen_kb(), provider)
        assert len(traces) == 1
        assert traces[0].description == "fine"

    def test_unfrozen_kb_rejected(self, tmp_path):
        clip = clip_from(tmp_path)
        scene = observe_scene(clip, CallbackProvider(lambda req: SCENE_JSON))
        with pytest.raises(KBError, match="frozen"):
            discover_traces(clip, scene, KBIndex(), CallbackProvider(lambda req: "{}"))

    def test_guidance_reaches_prompt(self, tmp_path):
        clip = clip_from(tmp_path)
        scene = observe_scene(clip, CallbackProvider(lambda req: SCENE_JSON))
        seen = {}

        def respond(req):
            seen["user"] = req.messages[-1][1]
            return json.dumps({"traces": []})

        discover_traces(clip, scene, frozen_kb(), provider=CallbackProvider(respond),
                        include_unverified=False)
        assert "temporal flicker" in seen["user"]

    def test_attachment_cap(self, tmp_path):
        directory = write_frame_dir(tmp_path / "many", duration_seconds=10.0, fps=2.0)
        clip = load_clip_from_dir(directory)
        scene = observe_scene(clip, CallbackProvider(lambda req: SCENE_JSON))
        seen = {}

        def respond(req):
            seen["attachments"] = req.attachments
            return json.dumps({"traces": []})

        discover_traces(
            clip, scene, frozen_kb(), CallbackProvider(respond), max_attachments=5
        )
        assert len(seen["attachments"]) <= 5
        paths = [a.path for a in seen["attachments"]]
        assert paths == sorted(paths)

    def test_unknown_category_maps_to_other(self, tmp_path):
        clip = clip_from(tmp_path)
        scene = observe_scene(clip, CallbackProvider(lambda req: SCENE_JSON))
        payload = json.dumps(
            {"traces": [{"description": "weird", "category": "quantum", "frame_indices": []}]}
        )
        traces = discover_traces(clip, scene, frozen_kb(), CallbackProvider(lambda r: payload))
        assert traces[0].category.value == "other"
